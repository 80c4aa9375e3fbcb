// SPDX-License-Identifier: Apache-2.0
#include "alitok/autodiff/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_map>

namespace alitok::ad {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const char* dtype_name(DType dt) { return dt == DType::F64 ? "F64" : "F32"; }

Buffer::Buffer(DType dt, std::size_t n) {
  if (dt == DType::F64)
    data_ = std::vector<double>(n, 0.0);
  else
    data_ = std::vector<float>(n, 0.0f);
}

std::size_t Buffer::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Buffer::at(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, data_);
}

void Buffer::set(std::size_t i, double value) {
  std::visit([&](auto& v) { v.at(i) = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
             data_);
}

bool Buffer::all_finite() const {
  return std::visit(
      [](const auto& v) {
        for (auto x : v)
          if (!std::isfinite(x)) return false;
        return true;
      },
      data_);
}

std::vector<double> Buffer::to_f64() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
}

Buffer& Node::ensure_grad() {
  if (!grad) grad = std::make_unique<Buffer>(dtype(), data.size());
  return *grad;
}

namespace {

void check_shape(const Shape& shape, std::size_t n) {
  for (auto d : shape)
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + shape_str(shape));
  if (static_cast<std::size_t>(numel(shape)) != n)
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " + std::to_string(n) +
                     " values");
}

}  // namespace

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(const Shape& shape, DType dt, bool requires_grad) {
  return full(shape, 0.0, dt, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, DType dt, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->data = Buffer(dt, static_cast<std::size_t>(ad::numel(shape)));
  check_shape(shape, n->data.size());
  if (value != 0.0)
    dispatch(dt, [&]<class T>() {
      for (auto& x : n->data.as<T>()) x = static_cast<T>(value);
    });
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, DType dt, bool requires_grad) {
  check_shape(shape, values.size());
  auto n = std::make_shared<Node>();
  n->shape = shape;
  if (dt == DType::F64)
    n->data = Buffer(std::move(values));
  else
    n->data = Buffer(std::vector<float>(values.begin(), values.end()));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(const Shape& shape, std::vector<float> values, bool requires_grad) {
  check_shape(shape, values.size());
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->data = Buffer(std::move(values));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, DType dt) { return from({1}, std::vector<double>{v}, dt); }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("dim: axis out of range for " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw GraphError("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = on;
  if (!on) node_->grad.reset();
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data.at(0);
}

const Buffer& Tensor::grad() const {
  if (!node_->grad) throw GraphError("grad: tensor has no gradient");
  return *node_->grad;
}

std::vector<double> Tensor::grad_vector() const {
  if (!node_->grad) return std::vector<double>(static_cast<std::size_t>(numel()), 0.0);
  return node_->grad->to_f64();
}

std::vector<Node*> topo_order(const Tensor& root) {
  enum class Mark : std::uint8_t { Open, Done };
  std::unordered_map<Node*, Mark> marks;
  std::vector<Node*> order;
  // Iterative DFS; a node met again while still Open closes a cycle.
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  marks[&root.node()] = Mark::Open;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      auto it = marks.find(p);
      if (it == marks.end()) {
        marks[p] = Mark::Open;
        stack.emplace_back(p, 0);
      } else if (it->second == Mark::Open) {
        throw GraphError("backward: graph contains a cycle");
      }
    } else {
      marks[node] = Mark::Done;
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

Tensor forward_eval(const Tensor& root) {
  for (Node* n : topo_order(root))
    if (n->is_leaf() && !n->data.all_finite())
      throw NonFiniteError("forward_eval: leaf tensor " + shape_str(n->shape) + " contains NaN/Inf");
  return root;
}

void backward_grad(const Tensor& root) {
  if (root.numel() != 1)
    throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  auto order = topo_order(root);
  if (!root.requires_grad()) return;
  root.node().ensure_grad().set(0, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf() || !n->requires_grad || !n->grad || !n->backward) continue;
    n->backward(*n);
    // Interior grads are no longer needed once pushed to the parents.
    if (n != &root.node()) n->grad.reset();
  }
}

void Tensor::backward() const { backward_grad(*this); }

}  // namespace alitok::ad
