#include "ddq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>

#include "ddq/errors.hpp"

namespace ddq {

Tensor Dataset::batch_images(const std::vector<std::size_t>& idx) const {
  const std::size_t px = image_size();
  Tensor out({idx.size(), channels, height, width});
  double* dst = out.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= count)
      throw input_error("batch_images: index " + std::to_string(idx[i]) +
                        " out of range for " + std::to_string(count) + " samples");
    std::copy_n(images.data() + idx[i] * px, px, dst + i * px);
  }
  return out;
}

std::vector<int> Dataset::batch_labels(const std::vector<std::size_t>& idx) const {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= count)
      throw input_error("batch_labels: index " + std::to_string(idx[i]) +
                        " out of range for " + std::to_string(count) + " samples");
    out[i] = labels[idx[i]];
  }
  return out;
}

Dataset make_synthetic(std::size_t count, std::uint64_t seed) {
  Dataset d;
  d.count = count;
  d.images.assign(count * d.image_size(), 0.0);
  d.labels.resize(count);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-2.0, 2.0);
  std::uniform_real_distribution<double> amp(0.6, 1.0);
  std::uniform_real_distribution<double> width(2.0, 3.2);
  std::uniform_real_distribution<double> noise(0.0, 0.35);

  constexpr double two_pi = 6.283185307179586476925286766559;
  for (std::size_t i = 0; i < count; ++i) {
    const int k = static_cast<int>(i % 10);
    d.labels[i] = k;
    // Class centers sit on a radius-5.5 ring around the image center; the
    // jitter, amplitude and width spreads keep neighboring classes
    // overlapping so quantization quality shows up in accuracy.
    const double angle = two_pi * k / 10.0;
    const double cx = 14.0 + 5.5 * std::cos(angle) + jitter(rng);
    const double cy = 14.0 + 5.5 * std::sin(angle) + jitter(rng);
    const double a = amp(rng);
    const double sigma = width(rng);
    double* img = d.images.data() + i * d.image_size();
    for (std::size_t r = 0; r < d.height; ++r) {
      for (std::size_t c = 0; c < d.width; ++c) {
        const double dy = static_cast<double>(r) - cy;
        const double dx = static_cast<double>(c) - cx;
        double v = a * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        v += noise(rng);
        img[r * d.width + c] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return d;
}

namespace {

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw input_error("load_idx: truncated header in " + path);
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw input_error("load_idx: cannot open " + images_path);
  if (read_u32_be(imgs, images_path) != 2051u)
    throw input_error("load_idx: bad image magic in " + images_path);
  const std::uint32_t n = read_u32_be(imgs, images_path);
  const std::uint32_t rows = read_u32_be(imgs, images_path);
  const std::uint32_t cols = read_u32_be(imgs, images_path);
  if (rows == 0 || cols == 0)
    throw input_error("load_idx: zero image dimensions in " + images_path);

  Dataset d;
  d.count = n;
  d.channels = 1;
  d.height = rows;
  d.width = cols;
  const std::size_t px = d.image_size();
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * px);
  if (!imgs.read(reinterpret_cast<char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size())))
    throw input_error("load_idx: truncated image data in " + images_path);
  d.images.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) d.images[i] = raw[i] / 255.0;

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw input_error("load_idx: cannot open " + labels_path);
  if (read_u32_be(labs, labels_path) != 2049u)
    throw input_error("load_idx: bad label magic in " + labels_path);
  const std::uint32_t m = read_u32_be(labs, labels_path);
  if (m != n)
    throw input_error("load_idx: image/label count mismatch (" + std::to_string(n) +
                      " vs " + std::to_string(m) + ")");
  std::vector<unsigned char> lraw(m);
  if (!labs.read(reinterpret_cast<char*>(lraw.data()),
                 static_cast<std::streamsize>(lraw.size())))
    throw input_error("load_idx: truncated label data in " + labels_path);
  d.labels.assign(lraw.begin(), lraw.end());
  return d;
}

void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path) {
  if (data.channels != 1)
    throw input_error("save_idx: only single-channel data supported");
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw input_error("save_idx: cannot open " + images_path);
  write_u32_be(imgs, 2051u);
  write_u32_be(imgs, static_cast<std::uint32_t>(data.count));
  write_u32_be(imgs, static_cast<std::uint32_t>(data.height));
  write_u32_be(imgs, static_cast<std::uint32_t>(data.width));
  std::vector<unsigned char> raw(data.images.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = std::clamp(data.images[i], 0.0, 1.0);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  imgs.write(reinterpret_cast<const char*>(raw.data()),
             static_cast<std::streamsize>(raw.size()));
  if (!imgs) throw input_error("save_idx: write failed for " + images_path);

  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw input_error("save_idx: cannot open " + labels_path);
  write_u32_be(labs, 2049u);
  write_u32_be(labs, static_cast<std::uint32_t>(data.count));
  std::vector<unsigned char> lraw(data.labels.size());
  for (std::size_t i = 0; i < lraw.size(); ++i)
    lraw[i] = static_cast<unsigned char>(data.labels[i]);
  labs.write(reinterpret_cast<const char*>(lraw.data()),
             static_cast<std::streamsize>(lraw.size()));
  if (!labs) throw input_error("save_idx: write failed for " + labels_path);
}

std::string data_dir() {
  if (const char* env = std::getenv("DDQ_DATA_DIR"); env != nullptr && *env != '\0')
    return env;
  return ".";
}

Dataset load_mnist(const std::string& dir, bool train) {
  const std::string stem = train ? "train" : "t10k";
  return load_idx(dir + "/" + stem + "-images-idx3-ubyte",
                  dir + "/" + stem + "-labels-idx1-ubyte");
}

}  // namespace ddq
