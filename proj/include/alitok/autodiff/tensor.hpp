// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace alitok::ad {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dt);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
inline constexpr DType dtype_of = std::is_same_v<T, double> ? DType::F64 : DType::F32;

/// Calls `fn.template operator()<T>()` with T = float or double.
template <class Fn>
decltype(auto) dispatch(DType dt, Fn&& fn) {
  if (dt == DType::F64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

/// Flat row-major storage of one dtype.
class Buffer {
 public:
  Buffer() = default;
  Buffer(DType dt, std::size_t n);
  explicit Buffer(std::vector<float> v) : data_(std::move(v)) {}
  explicit Buffer(std::vector<double> v) : data_(std::move(v)) {}

  DType dtype() const { return data_.index() == 1 ? DType::F64 : DType::F32; }
  std::size_t size() const;

  template <class T>
  std::span<T> as() {
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <class T>
  std::span<const T> as() const {
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  double at(std::size_t i) const;
  void set(std::size_t i, double v);
  bool all_finite() const;
  std::vector<double> to_f64() const;

 private:
  std::variant<std::vector<float>, std::vector<double>> data_;
};

struct Node {
  Shape shape;
  Buffer data;
  bool requires_grad = false;
  std::unique_ptr<Buffer> grad;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  DType dtype() const { return data.dtype(); }
  bool is_leaf() const { return parents.empty(); }
  Buffer& ensure_grad();
};

/// Handle to a node of the autodiff graph. Copies share the node.
/// While a guard is alive on this thread, ops record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, DType dt = DType::F32, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, DType dt = DType::F32, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, DType dt = DType::F32,
                     bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(double v, DType dt = DType::F32);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
  DType dtype() const { return node_->dtype(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);

  Buffer& data() { return node_->data; }
  const Buffer& data() const { return node_->data; }
  template <class T>
  std::span<const T> values() const {
    return node_->data.as<T>();
  }
  template <class T>
  std::span<T> mutable_values() {
    return node_->data.as<T>();
  }
  double item() const;
  double at(std::size_t i) const { return node_->data.at(i); }
  std::vector<double> to_vector() const { return node_->data.to_f64(); }

  bool has_grad() const { return static_cast<bool>(node_->grad); }
  const Buffer& grad() const;
  std::vector<double> grad_vector() const;
  void zero_grad() { node_->grad.reset(); }

  /// Reverse-mode pass from a scalar root.
  void backward() const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Returns the root after verifying every leaf reachable from it is finite.
Tensor forward_eval(const Tensor& root);

/// All nodes reachable from root, parents before children. Throws GraphError on a cycle.
std::vector<Node*> topo_order(const Tensor& root);

void backward_grad(const Tensor& root);

}  // namespace alitok::ad
