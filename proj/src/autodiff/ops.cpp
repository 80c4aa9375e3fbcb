// SPDX-License-Identifier: Apache-2.0
#include "alitok/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace alitok::ad {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

std::string mismatch(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

void same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()));
}

Tensor make_result(const char* op, Shape shape, Buffer data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  if (grad_enabled())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

template <class T>
std::span<T> grad_of(Node& n) {
  return n.ensure_grad().as<T>();
}

int norm_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range");
  return axis;
}

// ---------------------------------------------------------------- broadcasting

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const auto da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const auto db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(mismatch(op, a, b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Maps each flat output index onto the flat index of an operand of shape `in`.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& out, const Shape& in) {
    const auto n_out = numel(out);
    const auto n_in = numel(in);
    if (n_in == n_out) {
      kind_ = Kind::Same;
      return;
    }
    if (n_in == 1) {
      kind_ = Kind::Scalar;
      return;
    }
    // in equals a trailing block of out (repeat).
    const std::size_t off = out.size() - in.size();
    bool suffix = true;
    for (std::size_t i = 0; i < in.size(); ++i) suffix = suffix && in[i] == out[off + i];
    if (suffix) {
      kind_ = Kind::Repeat;
      period_ = n_in;
      return;
    }
    // in matches a leading block of out followed by ones (row broadcast).
    Shape padded(off, 1);
    padded.insert(padded.end(), in.begin(), in.end());
    std::size_t k = padded.size();
    while (k > 0 && padded[k - 1] == 1) --k;
    bool lead = true;
    for (std::size_t i = 0; i < k; ++i) lead = lead && padded[i] == out[i];
    if (lead) {
      kind_ = Kind::Stretch;
      period_ = n_out / n_in;
      return;
    }
    kind_ = Kind::General;
    index_.resize(static_cast<std::size_t>(n_out));
    std::vector<std::int64_t> stride(out.size(), 0);
    std::int64_t s = 1;
    for (std::size_t i = padded.size(); i-- > 0;) {
      stride[i] = padded[i] == 1 ? 0 : s;
      s *= padded[i];
    }
    std::vector<std::int64_t> idx(out.size(), 0);
    for (std::int64_t flat = 0; flat < n_out; ++flat) {
      std::int64_t src = 0;
      for (std::size_t i = 0; i < out.size(); ++i) src += idx[i] * stride[i];
      index_[static_cast<std::size_t>(flat)] = src;
      for (std::size_t i = out.size(); i-- > 0;) {
        if (++idx[i] < out[i]) break;
        idx[i] = 0;
      }
    }
  }

  std::int64_t operator()(std::int64_t i) const {
    switch (kind_) {
      case Kind::Same: return i;
      case Kind::Scalar: return 0;
      case Kind::Repeat: return i % period_;
      case Kind::Stretch: return i / period_;
      default: return index_[static_cast<std::size_t>(i)];
    }
  }

 private:
  enum class Kind { Same, Scalar, Repeat, Stretch, General };
  Kind kind_ = Kind::Same;
  std::int64_t period_ = 1;
  std::vector<std::int64_t> index_;
};

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const char* op, BinOp kind, const Tensor& a, const Tensor& b) {
  same_dtype(op, a, b);
  Shape out = broadcast_shape(op, a.shape(), b.shape());
  auto ma = std::make_shared<BroadcastMap>(out, a.shape());
  auto mb = std::make_shared<BroadcastMap>(out, b.shape());
  const auto n = numel(out);
  Buffer data(a.dtype(), static_cast<std::size_t>(n));
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto y = b.values<T>();
    auto o = data.as<T>();
    for (std::int64_t i = 0; i < n; ++i) {
      const T u = x[(*ma)(i)], v = y[(*mb)(i)];
      switch (kind) {
        case BinOp::Add: o[i] = u + v; break;
        case BinOp::Sub: o[i] = u - v; break;
        case BinOp::Mul: o[i] = u * v; break;
        case BinOp::Div: o[i] = u / v; break;
      }
    }
  });
  return make_result(op, out, std::move(data), {a, b}, [kind, ma, mb, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto x = pa.data.as<T>();
      auto y = pb.data.as<T>();
      if (pa.requires_grad) {
        auto ga = grad_of<T>(pa);
        for (std::int64_t i = 0; i < n; ++i) {
          const auto ia = (*ma)(i);
          switch (kind) {
            case BinOp::Add:
            case BinOp::Sub: ga[ia] += g[i]; break;
            case BinOp::Mul: ga[ia] += g[i] * y[(*mb)(i)]; break;
            case BinOp::Div: ga[ia] += g[i] / y[(*mb)(i)]; break;
          }
        }
      }
      if (pb.requires_grad) {
        auto gb = grad_of<T>(pb);
        for (std::int64_t i = 0; i < n; ++i) {
          const auto ib = (*mb)(i);
          switch (kind) {
            case BinOp::Add: gb[ib] += g[i]; break;
            case BinOp::Sub: gb[ib] -= g[i]; break;
            case BinOp::Mul: gb[ib] += g[i] * x[(*ma)(i)]; break;
            case BinOp::Div: {
              const T v = y[ib];
              gb[ib] -= g[i] * x[(*ma)(i)] / (v * v);
              break;
            }
          }
        }
      }
    });
  });
}

// ---------------------------------------------------------------- unary helper

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  Buffer data(a.dtype(), static_cast<std::size_t>(a.numel()));
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto o = data.as<T>();
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = fwd(x[i]);
  });
  return make_result(op, a.shape(), std::move(data), {a}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto x = p.data.as<T>();
      auto y = self.data.as<T>();
      auto gp = grad_of<T>(p);
      for (std::size_t i = 0; i < x.size(); ++i) gp[i] += g[i] * deriv(x[i], y[i]);
    });
  });
}

// Strides of a row-major shape.
std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

// ==================================================================== elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::Div, a, b); }

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](auto x) { return static_cast<decltype(x)>(x * s); },
      [s](auto, auto) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](auto x) { return static_cast<decltype(x)>(x + s); },
      [](auto, auto) { return 1.0; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](auto x) { return std::log(x); }, [](auto x, auto) { return 1 / x; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](auto x) { return std::exp(x); }, [](auto, auto y) { return y; });
}

Tensor cos(const Tensor& a) {
  return unary(
      "cos", a, [](auto x) { return std::cos(x); }, [](auto x, auto) { return -std::sin(x); });
}

Tensor sin(const Tensor& a) {
  return unary(
      "sin", a, [](auto x) { return std::sin(x); }, [](auto x, auto) { return std::cos(x); });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](auto x) { return std::sqrt(x); }, [](auto, auto y) { return 1 / (2 * y); });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a,
      [](auto x) {
        using T = decltype(x);
        return x / (T(1) + std::exp(-x));
      },
      [](auto x, auto) {
        using T = decltype(x);
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

Tensor detach(const Tensor& a) {
  auto n = std::make_shared<Node>();
  n->op = "detach";
  n->shape = a.shape();
  n->data = a.data();
  return Tensor(std::move(n));
}

// ==================================================================== matmul

namespace {

struct MatmulDims {
  std::int64_t batch, m, k, n;
  bool shared_rhs;  // rhs is a single [k, n] matrix
};

Tensor matmul_impl(const char* op, const Tensor& a, const Tensor& b, bool rhs_transposed) {
  same_dtype(op, a, b);
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError(mismatch(op, a.shape(), b.shape()));
  MatmulDims d{};
  d.k = a.dim(-1);
  const auto bk = rhs_transposed ? b.dim(-1) : b.dim(-2);
  d.n = rhs_transposed ? b.dim(-2) : b.dim(-1);
  if (bk != d.k) throw ShapeError(mismatch(op, a.shape(), b.shape()));
  Shape out = a.shape();
  out.back() = d.n;
  if (b.rank() == 2) {
    d.shared_rhs = true;
    d.batch = 1;
    d.m = a.numel() / d.k;
  } else {
    Shape ab(a.shape().begin(), a.shape().end() - 2), bb(b.shape().begin(), b.shape().end() - 2);
    if (ab != bb) throw ShapeError(mismatch(op, a.shape(), b.shape()));
    d.shared_rhs = false;
    d.batch = numel(ab);
    d.m = a.dim(-2);
  }
  Buffer data(a.dtype(), static_cast<std::size_t>(numel(out)));
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.values<T>().data();
    const T* pb = b.values<T>().data();
    T* po = data.as<T>().data();
    for (std::int64_t i = 0; i < d.batch; ++i) {
      MapC<T> A(pa + i * d.m * d.k, d.m, d.k);
      MapM<T> C(po + i * d.m * d.n, d.m, d.n);
      const T* bp = pb + (d.shared_rhs ? 0 : i * d.k * d.n);
      if (rhs_transposed)
        C.noalias() = A * MapC<T>(bp, d.n, d.k).transpose();
      else
        C.noalias() = A * MapC<T>(bp, d.k, d.n);
    }
  });
  return make_result(op, out, std::move(data), {a, b}, [d, rhs_transposed](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    dispatch(self.dtype(), [&]<class T>() {
      const T* g = self.grad->as<T>().data();
      const T* pa = na.data.as<T>().data();
      const T* pb = nb.data.as<T>().data();
      T* ga = na.requires_grad ? grad_of<T>(na).data() : nullptr;
      T* gb = nb.requires_grad ? grad_of<T>(nb).data() : nullptr;
      for (std::int64_t i = 0; i < d.batch; ++i) {
        MapC<T> G(g + i * d.m * d.n, d.m, d.n);
        MapC<T> A(pa + i * d.m * d.k, d.m, d.k);
        const std::int64_t boff = d.shared_rhs ? 0 : i * d.k * d.n;
        if (ga) {
          MapM<T> GA(ga + i * d.m * d.k, d.m, d.k);
          if (rhs_transposed)
            GA.noalias() += G * MapC<T>(pb + boff, d.n, d.k);
          else
            GA.noalias() += G * MapC<T>(pb + boff, d.k, d.n).transpose();
        }
        if (gb) {
          if (rhs_transposed) {
            MapM<T> GB(gb + boff, d.n, d.k);
            GB.noalias() += G.transpose() * A;
          } else {
            MapM<T> GB(gb + boff, d.k, d.n);
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    });
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl("matmul", a, b, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl("matmul_nt", a, b, true); }

// ==================================================================== layout

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const auto r = static_cast<std::size_t>(a.rank());
  if (perm.size() != r) throw ShapeError("permute: rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const auto p = static_cast<std::size_t>(perm[i]);
    if (perm[i] < 0 || p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
    out[i] = a.shape()[p];
  }
  // src_stride[i]: stride in the input of output axis i.
  const auto in_st = strides_of(a.shape());
  std::vector<std::int64_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_st[static_cast<std::size_t>(perm[i])];
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(a.numel()));
  {
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::size_t flat = 0; flat < index->size(); ++flat) {
      (*index)[flat] = src;
      for (std::size_t i = r; i-- > 0;) {
        src += src_stride[i];
        if (++idx[i] < out[i]) break;
        src -= src_stride[i] * idx[i];
        idx[i] = 0;
      }
    }
  }
  Buffer data(a.dtype(), index->size());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto o = data.as<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[static_cast<std::size_t>((*index)[i])];
  });
  return make_result("permute", out, std::move(data), {a}, [index](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto gp = grad_of<T>(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[static_cast<std::size_t>((*index)[i])] += g[i];
    });
  });
}

Tensor transpose(const Tensor& a) {
  const int r = a.rank();
  if (r < 2) throw ShapeError("transpose: rank < 2 for " + shape_str(a.shape()));
  std::vector<int> perm(static_cast<std::size_t>(r));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<std::size_t>(r - 1)], perm[static_cast<std::size_t>(r - 2)]);
  return permute(a, perm);
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  Shape out = shape;
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred axis");
      infer = static_cast<int>(i);
    } else {
      known *= out[i];
    }
  }
  if (infer >= 0 && known > 0 && a.numel() % known == 0) out[static_cast<std::size_t>(infer)] = a.numel() / known;
  if (numel(out) != a.numel()) throw ShapeError(mismatch("reshape", a.shape(), shape));
  return make_result("reshape", out, a.data(), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto gp = grad_of<T>(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    });
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  axis = norm_axis(axis, r, "concat");
  Shape out = parts[0].shape();
  out[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    same_dtype("concat", parts[0], p);
    if (p.rank() != r) throw ShapeError(mismatch("concat", parts[0].shape(), p.shape()));
    for (int i = 0; i < r; ++i)
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != parts[0].shape()[static_cast<std::size_t>(i)])
        throw ShapeError(mismatch("concat", parts[0].shape(), p.shape()));
    out[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }
  std::int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= out[static_cast<std::size_t>(i)];
  const std::int64_t out_row = numel(out) / outer;
  auto chunk = std::make_shared<std::vector<std::int64_t>>();
  for (const auto& p : parts) chunk->push_back(p.numel() / outer);

  Buffer data(parts[0].dtype(), static_cast<std::size_t>(numel(out)));
  dispatch(parts[0].dtype(), [&]<class T>() {
    auto o = data.as<T>();
    std::int64_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto x = parts[k].values<T>();
      const auto c = (*chunk)[k];
      for (std::int64_t r0 = 0; r0 < outer; ++r0)
        std::copy_n(x.begin() + r0 * c, c, o.begin() + r0 * out_row + col);
      col += c;
    }
  });
  return make_result("concat", out, std::move(data), parts, [chunk, outer, out_row](Node& self) {
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      std::int64_t col = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node& p = *self.parents[k];
        const auto c = (*chunk)[k];
        if (p.requires_grad) {
          auto gp = grad_of<T>(p);
          for (std::int64_t r0 = 0; r0 < outer; ++r0)
            for (std::int64_t j = 0; j < c; ++j) gp[r0 * c + j] += g[r0 * out_row + col + j];
        }
        col += c;
      }
    });
  });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  axis = norm_axis(axis, a.rank(), "slice");
  const auto dimlen = a.shape()[static_cast<std::size_t>(axis)];
  if (start < 0 || length <= 0 || start + length > dimlen)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(a.shape()));
  Shape out = a.shape();
  out[static_cast<std::size_t>(axis)] = length;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.shape()[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[static_cast<std::size_t>(i)];
  const std::int64_t in_row = dimlen * inner, out_row = length * inner, off = start * inner;
  Buffer data(a.dtype(), static_cast<std::size_t>(numel(out)));
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto o = data.as<T>();
    for (std::int64_t r0 = 0; r0 < outer; ++r0)
      std::copy_n(x.begin() + r0 * in_row + off, out_row, o.begin() + r0 * out_row);
  });
  return make_result("slice", out, std::move(data), {a}, [outer, in_row, out_row, off](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto gp = grad_of<T>(p);
      for (std::int64_t r0 = 0; r0 < outer; ++r0)
        for (std::int64_t j = 0; j < out_row; ++j) gp[r0 * in_row + off + j] += g[r0 * out_row + j];
    });
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  const auto rows = table.dim(0), d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::int64_t>>(ids.begin(), ids.end());
  for (auto i : *idx)
    if (i < 0 || i >= rows)
      throw ShapeError("gather_rows: id " + std::to_string(i) + " out of range for " + shape_str(table.shape()));
  if (idx->empty()) throw ShapeError("gather_rows: empty id list");
  Shape out{static_cast<std::int64_t>(idx->size()), d};
  Buffer data(table.dtype(), static_cast<std::size_t>(numel(out)));
  dispatch(table.dtype(), [&]<class T>() {
    auto x = table.values<T>();
    auto o = data.as<T>();
    for (std::size_t r0 = 0; r0 < idx->size(); ++r0)
      std::copy_n(x.begin() + (*idx)[r0] * d, d, o.begin() + static_cast<std::int64_t>(r0) * d);
  });
  return make_result("gather_rows", out, std::move(data), {table}, [idx, d](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto gp = grad_of<T>(p);
      for (std::size_t r0 = 0; r0 < idx->size(); ++r0)
        for (std::int64_t j = 0; j < d; ++j) gp[(*idx)[r0] * d + j] += g[static_cast<std::int64_t>(r0) * d + j];
    });
  });
}

// ==================================================================== softmax & reductions

Tensor softmax(const Tensor& a, SoftmaxMask mask) {
  const auto cols = a.dim(-1);
  const auto rows = a.numel() / cols;
  std::int64_t q_len = 1, offset = 0;
  if (mask == SoftmaxMask::Causal) {
    if (a.rank() < 2) throw ShapeError("softmax: causal mask needs rank >= 2");
    q_len = a.dim(-2);
    offset = cols - q_len;
    if (offset < 0) throw ShapeError("softmax: causal mask needs keys >= queries, got " + shape_str(a.shape()));
  }
  // Number of visible keys for a given row.
  auto visible = [mask, q_len, offset, cols](std::int64_t row) {
    return mask == SoftmaxMask::Causal ? (row % q_len) + offset + 1 : cols;
  };
  Buffer data(a.dtype(), static_cast<std::size_t>(a.numel()));
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto o = data.as<T>();
    for (std::int64_t r0 = 0; r0 < rows; ++r0) {
      const auto vis = visible(r0);
      const T* xr = x.data() + r0 * cols;
      T* orow = o.data() + r0 * cols;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < vis; ++j) mx = std::max(mx, xr[j]);
      T total = 0;
      for (std::int64_t j = 0; j < vis; ++j) {
        orow[j] = std::exp(xr[j] - mx);
        total += orow[j];
      }
      for (std::int64_t j = 0; j < vis; ++j) orow[j] /= total;
      for (std::int64_t j = vis; j < cols; ++j) orow[j] = 0;
    }
  });
  return make_result("softmax", a.shape(), std::move(data), {a}, [rows, cols, visible](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto y = self.data.as<T>();
      auto gp = grad_of<T>(p);
      for (std::int64_t r0 = 0; r0 < rows; ++r0) {
        const auto vis = visible(r0);
        const auto base = r0 * cols;
        T dot = 0;
        for (std::int64_t j = 0; j < vis; ++j) dot += g[base + j] * y[base + j];
        for (std::int64_t j = 0; j < vis; ++j) gp[base + j] += y[base + j] * (g[base + j] - dot);
      }
    });
  });
}

Tensor sum(const Tensor& a) {
  Buffer data(a.dtype(), 1);
  dispatch(a.dtype(), [&]<class T>() {
    T s = 0;
    for (auto v : a.values<T>()) s += v;
    data.as<T>()[0] = s;
  });
  return make_result("sum", {1}, std::move(data), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      const T g = self.grad->as<T>()[0];
      for (auto& v : grad_of<T>(p)) v += g;
    });
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_last(const Tensor& a) {
  const auto cols = a.dim(-1);
  const auto rows = a.numel() / cols;
  Shape out = a.shape();
  out.back() = 1;
  Buffer data(a.dtype(), static_cast<std::size_t>(rows));
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto o = data.as<T>();
    for (std::int64_t r0 = 0; r0 < rows; ++r0) {
      T s = 0;
      for (std::int64_t j = 0; j < cols; ++j) s += x[r0 * cols + j];
      o[r0] = s / static_cast<T>(cols);
    }
  });
  return make_result("mean_last", out, std::move(data), {a}, [rows, cols](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto gp = grad_of<T>(p);
      for (std::int64_t r0 = 0; r0 < rows; ++r0)
        for (std::int64_t j = 0; j < cols; ++j) gp[r0 * cols + j] += g[r0] / static_cast<T>(cols);
    });
  });
}

// ==================================================================== fused

Tensor rms_normalize(const Tensor& x, double eps) {
  const auto cols = x.dim(-1);
  if (cols == 0) throw ShapeError("rms_normalize: zero-width input");
  const auto rows = x.numel() / cols;
  auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  Buffer data(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&]<class T>() {
    auto v = x.values<T>();
    auto o = data.as<T>();
    for (std::int64_t r0 = 0; r0 < rows; ++r0) {
      T ss = 0;
      for (std::int64_t j = 0; j < cols; ++j) ss += v[r0 * cols + j] * v[r0 * cols + j];
      const T r = T(1) / std::sqrt(ss / static_cast<T>(cols) + static_cast<T>(eps));
      (*inv)[static_cast<std::size_t>(r0)] = r;
      for (std::int64_t j = 0; j < cols; ++j) o[r0 * cols + j] = v[r0 * cols + j] * r;
    }
  });
  return make_result("rms_normalize", x.shape(), std::move(data), {x}, [inv, rows, cols](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      auto g = self.grad->as<T>();
      auto y = self.data.as<T>();
      auto gp = grad_of<T>(p);
      for (std::int64_t r0 = 0; r0 < rows; ++r0) {
        const auto base = r0 * cols;
        const T r = static_cast<T>((*inv)[static_cast<std::size_t>(r0)]);
        T dot = 0;
        for (std::int64_t j = 0; j < cols; ++j) dot += g[base + j] * y[base + j];
        dot /= static_cast<T>(cols);
        for (std::int64_t j = 0; j < cols; ++j) gp[base + j] += r * (g[base + j] - y[base + j] * dot);
      }
    });
  });
}

Tensor rotary(const Tensor& x, const Tensor& angles) {
  if (x.rank() < 3) throw ShapeError("rotary: expected [..., S, H, D], got " + shape_str(x.shape()));
  const auto seq = x.dim(-3), heads = x.dim(-2), d = x.dim(-1);
  if (d % 2 != 0) throw ShapeError("rotary: odd head_dim in " + shape_str(x.shape()));
  if (angles.rank() != 2 || angles.dim(0) != seq || angles.dim(1) != d / 2)
    throw ShapeError(mismatch("rotary", x.shape(), angles.shape()));
  const auto half = d / 2;
  auto cs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(seq * half * 2));
  {
    auto ang = angles.to_vector();
    for (std::size_t i = 0; i < ang.size(); ++i) {
      (*cs)[2 * i] = std::cos(ang[i]);
      (*cs)[2 * i + 1] = std::sin(ang[i]);
    }
  }
  const auto outer = x.numel() / (seq * heads * d);
  // sign = +1 rotates forward, -1 applies the inverse rotation.
  auto rotate = [=](auto src, auto dst, double sign, bool accumulate) {
    using T = std::remove_const_t<typename decltype(src)::element_type>;
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t s = 0; s < seq; ++s)
        for (std::int64_t h = 0; h < heads; ++h) {
          const auto base = ((o * seq + s) * heads + h) * d;
          for (std::int64_t j = 0; j < half; ++j) {
            const T c = static_cast<T>((*cs)[static_cast<std::size_t>(2 * (s * half + j))]);
            const T sn = static_cast<T>(sign * (*cs)[static_cast<std::size_t>(2 * (s * half + j) + 1)]);
            const T a = src[base + 2 * j], b = src[base + 2 * j + 1];
            const T ra = a * c - b * sn, rb = a * sn + b * c;
            if (accumulate) {
              dst[base + 2 * j] += ra;
              dst[base + 2 * j + 1] += rb;
            } else {
              dst[base + 2 * j] = ra;
              dst[base + 2 * j + 1] = rb;
            }
          }
        }
  };
  Buffer data(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&]<class T>() { rotate(x.values<T>(), data.as<T>(), 1.0, false); });
  return make_result("rotary", x.shape(), std::move(data), {x}, [rotate](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      rotate(std::span<const T>(self.grad->as<T>()), grad_of<T>(p), -1.0, true);
    });
  });
}

// ==================================================================== losses

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N, V], got " + shape_str(logits.shape()));
  const auto n = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(logits.shape()));
  auto tgt = std::make_shared<std::vector<std::int64_t>>(targets.begin(), targets.end());
  for (auto t : *tgt)
    if (t < 0 || t >= v) throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of range");
  Buffer data(logits.dtype(), 1);
  dispatch(logits.dtype(), [&]<class T>() {
    auto x = logits.values<T>();
    T total = 0;
    for (std::int64_t r0 = 0; r0 < n; ++r0) {
      const T* row = x.data() + r0 * v;
      const T mx = *std::max_element(row, row + v);
      T s = 0;
      for (std::int64_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
      total += mx + std::log(s) - row[(*tgt)[static_cast<std::size_t>(r0)]];
    }
    data.as<T>()[0] = total / static_cast<T>(n);
  });
  return make_result("cross_entropy", {1}, std::move(data), {logits}, [tgt, n, v](Node& self) {
    Node& p = *self.parents[0];
    dispatch(self.dtype(), [&]<class T>() {
      const T g = self.grad->as<T>()[0] / static_cast<T>(n);
      auto x = p.data.as<T>();
      auto gp = grad_of<T>(p);
      for (std::int64_t r0 = 0; r0 < n; ++r0) {
        const T* row = x.data() + r0 * v;
        const T mx = *std::max_element(row, row + v);
        T s = 0;
        for (std::int64_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
        for (std::int64_t j = 0; j < v; ++j) gp[r0 * v + j] += g * std::exp(row[j] - mx) / s;
        gp[r0 * v + (*tgt)[static_cast<std::size_t>(r0)]] -= g;
      }
    });
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  same_dtype("mse", a, b);
  if (a.shape() != b.shape()) throw ShapeError(mismatch("mse", a.shape(), b.shape()));
  const auto n = a.numel();
  Buffer data(a.dtype(), 1);
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto y = b.values<T>();
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T dlt = x[i] - y[i];
      s += dlt * dlt;
    }
    data.as<T>()[0] = s / static_cast<T>(n);
  });
  return make_result("mse", {1}, std::move(data), {a, b}, [n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    dispatch(self.dtype(), [&]<class T>() {
      const T g = self.grad->as<T>()[0] * T(2) / static_cast<T>(n);
      auto x = pa.data.as<T>();
      auto y = pb.data.as<T>();
      if (pa.requires_grad) {
        auto ga = grad_of<T>(pa);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g * (x[i] - y[i]);
      }
      if (pb.requires_grad) {
        auto gb = grad_of<T>(pb);
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= g * (x[i] - y[i]);
      }
    });
  });
}

}  // namespace alitok::ad
