#include "ddq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ddq/errors.hpp"

namespace ddq {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw dimension_error(msg);
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: expected rank-2 operands, got " + a.shape_str() + " and " + b.shape_str());
  require(a.dim(1) == b.dim(0),
          "matmul: inner dimensions disagree, " + a.shape_str() + " vs " + b.shape_str());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor y = tape.track(Tensor({m, n}));
  const double* pa = a.data();
  const double* pb = b.data();
  double* py = y.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += pa[i * k + t] * pb[t * n + j];
      py[i * n + j] = acc;
    }
  tape.record([a = a, b = b, y, m, k, n]() mutable {
    const auto& g = y.grad();
    auto& grad_a = a.grad();
    auto& grad_b = b.grad();
    const double* pb2 = b.data();
    const double* pa2 = a.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < k; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb2[t * n + j];
        grad_a[i * k + t] += acc;
      }
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += pa2[i * k + t] * g[i * n + j];
        grad_b[t * n + j] += acc;
      }
  });
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w) {
  require(x.rank() == 2 && w.rank() == 2,
          "linear: expected rank-2 operands, got " + x.shape_str() + " and " + w.shape_str());
  require(x.dim(1) == w.dim(1),
          "linear: input features disagree with weight, " + x.shape_str() + " vs " + w.shape_str());
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y = tape.track(Tensor({n, out}));
  const double* px = x.data();
  const double* pw = w.data();
  double* py = y.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t t = 0; t < in; ++t) acc += px[i * in + t] * pw[o * in + t];
      py[i * out + o] = acc;
    }
  tape.record([x = x, w = w, y, n, in, out]() mutable {
    const auto& g = y.grad();
    auto& grad_x = x.grad();
    auto& grad_w = w.grad();
    const double* px2 = x.data();
    const double* pw2 = w.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < in; ++t) {
        double acc = 0.0;
        for (std::size_t o = 0; o < out; ++o) acc += g[i * out + o] * pw2[o * in + t];
        grad_x[i * in + t] += acc;
      }
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t t = 0; t < in; ++t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i * out + o] * px2[i * in + t];
        grad_w[o * in + t] += acc;
      }
  });
  return y;
}

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, int stride, int padding,
              int groups) {
  require(x.rank() == 4 && w.rank() == 4,
          "conv2d: expected rank-4 operands, got " + x.shape_str() + " and " + w.shape_str());
  if (stride < 1) throw dimension_error("conv2d: stride must be >= 1");
  if (padding < 0) throw dimension_error("conv2d: padding must be >= 0");
  if (groups < 1) throw dimension_error("conv2d: groups must be >= 1");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), cin_g = w.dim(1), k = w.dim(2);
  require(w.dim(2) == w.dim(3), "conv2d: kernel must be square, got " + w.shape_str());
  if (cin_g * static_cast<std::size_t>(groups) != cin || cout % groups != 0) {
    std::ostringstream os;
    os << "conv2d: channel mismatch between input " << x.shape_str() << " and weight "
       << w.shape_str() << " with groups=" << groups;
    throw dimension_error(os.str());
  }
  if (k > h + 2 * static_cast<std::size_t>(padding) || k > wd + 2 * static_cast<std::size_t>(padding))
    throw dimension_error("conv2d: kernel " + w.shape_str() + " larger than padded input " +
                          x.shape_str());
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - k) / stride + 1;
  const std::size_t cout_g = cout / groups;

  Tensor y = tape.track(Tensor({n, cout, oh, ow}));
  const double* px = x.data();
  const double* pw = w.data();
  double* py = y.data();
  for (std::size_t img = 0; img < n; ++img)
    for (std::size_t co = 0; co < cout; ++co) {
      const std::size_t grp = co / cout_g;
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < cin_g; ++ci)
            for (std::size_t kr = 0; kr < k; ++kr) {
              const long ir = static_cast<long>(r * stride + kr) - padding;
              if (ir < 0 || ir >= static_cast<long>(h)) continue;
              for (std::size_t kc = 0; kc < k; ++kc) {
                const long ic = static_cast<long>(c * stride + kc) - padding;
                if (ic < 0 || ic >= static_cast<long>(wd)) continue;
                const std::size_t xi =
                    ((img * cin + grp * cin_g + ci) * h + ir) * wd + ic;
                const std::size_t wi = ((co * cin_g + ci) * k + kr) * k + kc;
                acc += px[xi] * pw[wi];
              }
            }
          py[((img * cout + co) * oh + r) * ow + c] = acc;
        }
    }

  tape.record([x = x, w = w, y, n, cin, h, wd, cout, cin_g, k, oh, ow, cout_g, stride, padding]() mutable {
    const auto& g = y.grad();
    auto& grad_x = x.grad();
    auto& grad_w = w.grad();
    const double* px2 = x.data();
    const double* pw2 = w.data();
    for (std::size_t img = 0; img < n; ++img)
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t grp = co / cout_g;
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t c = 0; c < ow; ++c) {
            const double gy = g[((img * cout + co) * oh + r) * ow + c];
            if (gy == 0.0) continue;
            for (std::size_t ci = 0; ci < cin_g; ++ci)
              for (std::size_t kr = 0; kr < k; ++kr) {
                const long ir = static_cast<long>(r * stride + kr) - padding;
                if (ir < 0 || ir >= static_cast<long>(h)) continue;
                for (std::size_t kc = 0; kc < k; ++kc) {
                  const long ic = static_cast<long>(c * stride + kc) - padding;
                  if (ic < 0 || ic >= static_cast<long>(wd)) continue;
                  const std::size_t xi =
                      ((img * cin + grp * cin_g + ci) * h + ir) * wd + ic;
                  const std::size_t wi = ((co * cin_g + ci) * k + kr) * k + kc;
                  grad_x[xi] += gy * pw2[wi];
                  grad_w[wi] += gy * px2[xi];
                }
              }
          }
      }
  });
  return y;
}

Tensor bias_add(Tape& tape, const Tensor& x, const Tensor& bias) {
  require(bias.rank() == 1, "bias_add: bias must be rank-1, got " + bias.shape_str());
  Tensor y = tape.track(Tensor(x.shape(), x.values()));
  double* py = y.data();
  const double* pb = bias.data();
  if (x.rank() == 2) {
    require(x.dim(1) == bias.dim(0),
            "bias_add: feature count disagrees, " + x.shape_str() + " vs " + bias.shape_str());
    const std::size_t n = x.dim(0), f = x.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) py[i * f + j] += pb[j];
    tape.record([x = x, bias = bias, y, n, f]() mutable {
      const auto& g = y.grad();
      auto& gx = x.grad();
      auto& gb = bias.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) {
          gx[i * f + j] += g[i * f + j];
          gb[j] += g[i * f + j];
        }
    });
  } else if (x.rank() == 4) {
    require(x.dim(1) == bias.dim(0),
            "bias_add: channel count disagrees, " + x.shape_str() + " vs " + bias.shape_str());
    const std::size_t n = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t p = 0; p < hw; ++p) py[(i * ch + c) * hw + p] += pb[c];
    tape.record([x = x, bias = bias, y, n, ch, hw]() mutable {
      const auto& g = y.grad();
      auto& gx = x.grad();
      auto& gb = bias.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t p = 0; p < hw; ++p) {
            gx[(i * ch + c) * hw + p] += g[(i * ch + c) * hw + p];
            gb[c] += g[(i * ch + c) * hw + p];
          }
    });
  } else {
    throw dimension_error("bias_add: unsupported input rank for " + x.shape_str());
  }
  return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "add: shapes disagree, " + a.shape_str() + " vs " + b.shape_str());
  Tensor y = tape.track(Tensor(a.shape(), a.values()));
  double* py = y.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] += pb[i];
  tape.record([a = a, b = b, y]() mutable {
    const auto& g = y.grad();
    auto& ga = a.grad();
    auto& gb = b.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y = tape.track(Tensor(x.shape(), x.values()));
  double* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] = py[i] > 0.0 ? py[i] : 0.0;
  tape.record([x = x, y]() mutable {
    const auto& g = y.grad();
    auto& gx = x.grad();
    const double* px = x.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (px[i] > 0.0) gx[i] += g[i];
  });
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  require(n == x.size(), "reshape: element count of " + x.shape_str() + " does not fit new shape");
  Tensor y = tape.track(Tensor(std::move(shape), x.values()));
  tape.record([x = x, y]() mutable {
    const auto& g = y.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return y;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2, "softmax_cross_entropy: logits must be rank-2, got " + logits.shape_str());
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  require(labels.size() == n, "softmax_cross_entropy: label count does not match batch");
  for (int lb : labels)
    if (lb < 0 || static_cast<std::size_t>(lb) >= c)
      throw dimension_error("softmax_cross_entropy: label out of range");

  const double* pz = logits.data();
  double total = 0.0;
  std::vector<double> softmax(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = pz[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, pz[i * c + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      softmax[i * c + j] = std::exp(pz[i * c + j] - mx);
      sum += softmax[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) softmax[i * c + j] /= sum;
    total += std::log(sum) - (pz[i * c + labels[i]] - mx);
  }
  Tensor loss = tape.track(Tensor::scalar(total / static_cast<double>(n)));
  tape.record([logits = logits, loss, softmax = std::move(softmax), labels, n, c]() mutable {
    const double g = loss.grad()[0];
    auto& gz = logits.grad();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double p = softmax[i * c + j];
        if (j == static_cast<std::size_t>(labels[i])) p -= 1.0;
        gz[i * c + j] += g * p * inv_n;
      }
  });
  return loss;
}

void sgd_step(std::vector<Tensor>& params, std::vector<SgdSlot>& slots, double lr,
              double momentum, double weight_decay) {
  if (slots.size() != params.size()) slots.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = params[p];
    auto& v = slots[p].velocity;
    if (v.size() != w.size()) v.assign(w.size(), 0.0);
    auto& g = w.grad();
    double* pw = w.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + (g[i] + weight_decay * pw[i]);
      pw[i] -= lr * v[i];
    }
    w.zero_grad();
  }
}

}  // namespace ddq
