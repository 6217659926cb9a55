#include "ddq/tensor.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ddq/errors.hpp"

namespace ddq {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : s_(std::make_shared<Storage>()) {
  s_->shape = std::move(shape);
  s_->values.assign(shape_numel(s_->shape), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : s_(std::make_shared<Storage>()) {
  if (shape_numel(shape) != values.size()) {
    std::ostringstream os;
    os << "Tensor: value count " << values.size() << " does not match shape [";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    throw dimension_error(os.str());
  }
  s_->shape = std::move(shape);
  s_->values = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::clone() const {
  Tensor t;
  if (s_) {
    t.s_ = std::make_shared<Storage>(*s_);
    t.s_->node_id = -1;
  }
  return t;
}

const std::vector<std::size_t>& Tensor::shape() const {
  static const std::vector<std::size_t> empty;
  return s_ ? s_->shape : empty;
}

std::size_t Tensor::size() const { return s_ ? s_->values.size() : 0; }

std::vector<double>& Tensor::values() {
  if (!s_) throw std::logic_error("Tensor: access to undefined tensor");
  return s_->values;
}

const std::vector<double>& Tensor::values() const {
  if (!s_) throw std::logic_error("Tensor: access to undefined tensor");
  return s_->values;
}

double Tensor::item() const {
  if (size() != 1) throw dimension_error("Tensor::item: tensor is not scalar, shape " + shape_str());
  return values()[0];
}

bool Tensor::grad_defined() const { return s_ && !s_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  if (!s_) throw std::logic_error("Tensor: grad of undefined tensor");
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
  return s_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!grad_defined()) throw std::logic_error("Tensor: grad not materialized");
  return s_->grad;
}

void Tensor::zero_grad() {
  if (s_ && !s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
}

std::int64_t Tensor::node_id() const { return s_ ? s_->node_id : -1; }

void Tensor::set_node_id(std::int64_t id) {
  if (s_) s_->node_id = id;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  const auto& sh = shape();
  for (std::size_t i = 0; i < sh.size(); ++i) os << (i ? "x" : "") << sh[i];
  os << "]";
  return os.str();
}

Tensor Tape::track(Tensor t) {
  t.set_node_id(next_id_++);
  return t;
}

void Tape::record(std::function<void()> backward) { ops_.push_back(std::move(backward)); }

void Tape::backward(Tensor& loss, double seed) {
  auto& g = loss.grad();
  for (double& v : g) v = seed;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::backward_seeded(Tensor& output, const std::vector<double>& seed) {
  auto& g = output.grad();
  if (seed.size() != g.size())
    throw dimension_error("Tape::backward_seeded: seed size does not match output");
  g = seed;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::clear() {
  ops_.clear();
  next_id_ = 0;
}

}  // namespace ddq
