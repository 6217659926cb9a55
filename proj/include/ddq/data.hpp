#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddq/tensor.hpp"

namespace ddq {

/// Flat image classification set: [count x channels x height x width],
/// pixel values in [0, 1].
struct Dataset {
  std::vector<double> images;
  std::vector<int> labels;
  std::size_t count = 0;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;

  std::size_t image_size() const { return channels * height * width; }
  Tensor batch_images(const std::vector<std::size_t>& idx) const;
  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const;
};

/// Deterministic 10-class set: one Gaussian blob per class on a ring, with
/// per-sample center/amplitude jitter and additive noise. Labels cycle
/// round-robin so every prefix is nearly balanced.
Dataset make_synthetic(std::size_t count, std::uint64_t seed);

/// IDX file pair (the MNIST container format, big-endian headers).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path);

/// Dataset root: DDQ_DATA_DIR when set, "." otherwise.
std::string data_dir();

/// Loads train-images-idx3-ubyte/train-labels-idx1-ubyte (or the t10k pair)
/// from the given directory.
Dataset load_mnist(const std::string& dir, bool train);

}  // namespace ddq
