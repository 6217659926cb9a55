#pragma once

#include <vector>

#include "ddq/tensor.hpp"

namespace ddq {

/// y[m,n] = sum_k a[m,k] * b[k,n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// Dense layer product y = x * w^T with w stored [out x in].
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w);

/// 2-D cross-correlation. x is [N x Cin x H x W], w is [Cout x Cin/groups x K x K].
/// Output spatial size is (H + 2*padding - K) / stride + 1 (floor).
/// Accumulation order over (ci, kh, kw) is fixed; the packed-inference path
/// reproduces it exactly.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, int stride, int padding,
              int groups = 1);

/// The one sanctioned broadcast: bias over the feature axis.
/// Rank-2 x: [N x F] + [F]. Rank-4 x: [N x C x H x W] + [C].
Tensor bias_add(Tape& tape, const Tensor& x, const Tensor& bias);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor relu(Tape& tape, const Tensor& x);
Tensor reshape(Tape& tape, const Tensor& x, std::vector<std::size_t> shape);

/// Mean softmax cross-entropy over the batch; logits [N x C], labels in [0, C).
/// Computed via log-sum-exp with max subtraction.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

struct SgdSlot {
  std::vector<double> velocity;
};

/// v = momentum*v + (grad + weight_decay*w); w -= lr*v. Clears grads.
void sgd_step(std::vector<Tensor>& params, std::vector<SgdSlot>& slots, double lr,
              double momentum, double weight_decay);

}  // namespace ddq
