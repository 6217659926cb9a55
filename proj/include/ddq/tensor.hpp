#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace ddq {

/// Dense n-dimensional float64 tensor, row-major. Copies share storage
/// (use clone() for a deep copy), so a closure that captures a Tensor sees
/// in-place updates. Gradient storage is allocated on first access.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v);
  Tensor clone() const;

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t size() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;
  double* data() { return values().data(); }
  const double* data() const { return values().data(); }
  double item() const;

  bool grad_defined() const;
  /// Gradient buffer, zero-initialized to the tensor's shape on first use.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Identity of this tensor within the tape that tracked it; -1 if untracked.
  std::int64_t node_id() const;
  void set_node_id(std::int64_t id);

  std::string shape_str() const;

 private:
  struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;
    std::int64_t node_id = -1;
  };
  std::shared_ptr<Storage> s_;
};

/// Gradient tape for one forward pass. Ops append backward closures in
/// execution order; backward() replays them in strict reverse order, so the
/// traversal is the reversed topological order of the recorded graph.
/// Closures must only add into the .grad buffers of their inputs
/// (accumulation across fan-out is additive).
class Tape {
 public:
  /// Assigns the tensor a node id. Ops call this on their outputs; callers
  /// may also track leaves so error messages can name them.
  Tensor track(Tensor t);

  /// Custom-gradient hook: records an arbitrary backward closure. This is
  /// the carrier for straight-through estimators and other non-standard
  /// gradients.
  void record(std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = seed and runs all closures in reverse.
  void backward(Tensor& loss, double seed = 1.0);

  /// Seeds an arbitrary cotangent on one output and runs all closures.
  void backward_seeded(Tensor& output, const std::vector<double>& seed);

  void clear();
  std::size_t num_ops() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
  std::int64_t next_id_ = 0;
};

}  // namespace ddq
