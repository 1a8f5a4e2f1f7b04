#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "saor/diffcore/tensor.hpp"

namespace saor::ad {

enum class Binary { Add, Sub, Mul, Div };
enum class Unary { Relu, Tanh, Sigmoid, Exp, Log, Neg, Abs, Square, Sqrt };

namespace detail {

/// Index plan for a trailing-dimension broadcast of `in` into `out`.
struct Broadcast {
  Shape out;
  // For each output element, flat offset into the input. Empty means identity.
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
  bool a_identity = false;
  bool b_identity = false;
};

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t offset = r - in.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > offset;) {
    const std::size_t d = in[i - offset];
    stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t flat = 0;
  for (std::size_t k = 0; k < n; ++k) {
    index[k] = flat;
    for (std::size_t i = r; i-- > 0;) {
      ++counter[i];
      flat += stride[i];
      if (counter[i] < out[i]) break;
      flat -= stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return index;
}

inline Broadcast plan(const Shape& a, const Shape& b) {
  Broadcast p;
  p.out = broadcast_shape(a, b);
  p.a_identity = numel(a) == numel(p.out);
  p.b_identity = numel(b) == numel(p.out);
  if (!p.a_identity) p.a_index = broadcast_index(a, p.out);
  if (!p.b_identity) p.b_index = broadcast_index(b, p.out);
  return p;
}

template <typename T>
inline void accumulate(Node<T>& parent, std::span<const T> g, const std::vector<std::size_t>& index,
                       bool identity) {
  if (!parent.requires_grad) return;
  auto& dst = parent.grad_buffer();
  if (identity) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) dst[index[i]] += g[i];
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// dst[m,n] (+)= op(a) * op(b), where op transposes a stored [k,m] / b stored [n,k].
/// Operands are copied into owning (aligned) matrices so the kernel's summation
/// order does not depend on the heap addresses of the inputs.
template <typename T>
void gemm(T* dst, const T* a, bool ta, const T* b, bool tb, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  using CMap = Eigen::Map<const RowMat<T>>;
  const Eigen::Index M = Eigen::Index(m), K = Eigen::Index(k), N = Eigen::Index(n);
  RowMat<T> A = ta ? RowMat<T>(CMap(a, K, M).transpose()) : RowMat<T>(CMap(a, M, K));
  RowMat<T> B = tb ? RowMat<T>(CMap(b, N, K).transpose()) : RowMat<T>(CMap(b, K, N));
  RowMat<T> C(M, N);
  C.noalias() = A * B;
  const T* c = C.data();
  const std::size_t total = m * n;
  if (accumulate) {
    for (std::size_t i = 0; i < total; ++i) dst[i] += c[i];
  } else {
    std::copy(c, c + total, dst);
  }
}

}  // namespace detail

template <typename T>
BasicTensor<T> elementwise(Binary op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto p = std::make_shared<detail::Broadcast>(detail::plan(a.shape(), b.shape()));
  const std::size_t n = numel(p->out);
  std::vector<T> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  auto A = [&](std::size_t i) { return p->a_identity ? av[i] : av[p->a_index[i]]; };
  auto B = [&](std::size_t i) { return p->b_identity ? bv[i] : bv[p->b_index[i]]; };
  switch (op) {
    case Binary::Add: for (std::size_t i = 0; i < n; ++i) out[i] = A(i) + B(i); break;
    case Binary::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = A(i) - B(i); break;
    case Binary::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = A(i) * B(i); break;
    case Binary::Div: for (std::size_t i = 0; i < n; ++i) out[i] = A(i) / B(i); break;
  }
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  return make_result<T>(names[static_cast<int>(op)], p->out, std::move(out), {a, b},
      [op, p](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nb = *self.parents[1];
        const std::size_t n = self.grad.size();
        auto ai = [&](std::size_t i) { return p->a_identity ? i : p->a_index[i]; };
        auto bi = [&](std::size_t i) { return p->b_identity ? i : p->b_index[i]; };
        std::vector<T> ga, gb;
        switch (op) {
          case Binary::Add:
            detail::accumulate<T>(na, self.grad, p->a_index, p->a_identity);
            detail::accumulate<T>(nb, self.grad, p->b_index, p->b_identity);
            return;
          case Binary::Sub:
            detail::accumulate<T>(na, self.grad, p->a_index, p->a_identity);
            gb.resize(n);
            for (std::size_t i = 0; i < n; ++i) gb[i] = -self.grad[i];
            detail::accumulate<T>(nb, gb, p->b_index, p->b_identity);
            return;
          case Binary::Mul:
            ga.resize(n);
            gb.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
              ga[i] = self.grad[i] * nb.value[bi(i)];
              gb[i] = self.grad[i] * na.value[ai(i)];
            }
            break;
          case Binary::Div:
            ga.resize(n);
            gb.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
              const T bv = nb.value[bi(i)];
              ga[i] = self.grad[i] / bv;
              gb[i] = -self.grad[i] * na.value[ai(i)] / (bv * bv);
            }
            break;
        }
        detail::accumulate<T>(na, ga, p->a_index, p->a_identity);
        detail::accumulate<T>(nb, gb, p->b_index, p->b_identity);
      });
}

template <typename T>
BasicTensor<T> elementwise(Unary op, const BasicTensor<T>& a) {
  const auto av = a.values();
  const std::size_t n = av.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[i];
    switch (op) {
      case Unary::Relu: out[i] = x > T(0) ? x : T(0); break;
      case Unary::Tanh: out[i] = std::tanh(x); break;
      case Unary::Sigmoid:
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        break;
      case Unary::Exp: out[i] = std::exp(x); break;
      case Unary::Log: out[i] = std::log(x); break;
      case Unary::Neg: out[i] = -x; break;
      case Unary::Abs: out[i] = std::abs(x); break;
      case Unary::Square: out[i] = x * x; break;
      case Unary::Sqrt: out[i] = std::sqrt(x); break;
    }
  }
  static constexpr const char* names[] = {"relu", "tanh", "sigmoid", "exp", "log",
                                          "neg", "abs", "square", "sqrt"};
  return make_result<T>(names[static_cast<int>(op)], a.shape(), std::move(out), {a},
      [op](Node<T>& self) {
        Node<T>& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        const std::size_t n = self.grad.size();
        for (std::size_t i = 0; i < n; ++i) {
          const T x = in.value[i];
          const T y = self.value[i];
          const T go = self.grad[i];
          switch (op) {
            case Unary::Relu: g[i] += x > T(0) ? go : T(0); break;
            case Unary::Tanh: g[i] += go * (T(1) - y * y); break;
            case Unary::Sigmoid: g[i] += go * y * (T(1) - y); break;
            case Unary::Exp: g[i] += go * y; break;
            case Unary::Log: g[i] += go / x; break;
            case Unary::Neg: g[i] -= go; break;
            case Unary::Abs: g[i] += x > T(0) ? go : (x < T(0) ? -go : T(0)); break;
            case Unary::Square: g[i] += T(2) * x * go; break;
            case Unary::Sqrt: g[i] += y > T(0) ? go / (T(2) * y) : T(0); break;
          }
        }
      });
}

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(Binary::Add, a, b); }
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(Binary::Sub, a, b); }
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(Binary::Mul, a, b); }
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(Binary::Div, a, b); }
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& a) { return elementwise(Unary::Relu, a); }
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& a) { return elementwise(Unary::Tanh, a); }
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& a) { return elementwise(Unary::Sigmoid, a); }
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& a) { return elementwise(Unary::Exp, a); }
template <typename T> BasicTensor<T> log(const BasicTensor<T>& a) { return elementwise(Unary::Log, a); }
template <typename T> BasicTensor<T> neg(const BasicTensor<T>& a) { return elementwise(Unary::Neg, a); }
template <typename T> BasicTensor<T> abs(const BasicTensor<T>& a) { return elementwise(Unary::Abs, a); }
template <typename T> BasicTensor<T> square(const BasicTensor<T>& a) { return elementwise(Unary::Square, a); }
template <typename T> BasicTensor<T> sqrt(const BasicTensor<T>& a) { return elementwise(Unary::Sqrt, a); }

/// a * s + c for constants s, c.
template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& a, T s, T c = T(0)) {
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s + c;
  return make_result<T>("affine", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

/// Clamp to [lo, hi]; gradient is zero where clamped.
template <typename T>
BasicTensor<T> clamp(const BasicTensor<T>& a, T lo, T hi) {
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
  return make_result<T>("clamp", a.shape(), std::move(out), {a}, [lo, hi](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = in.value[i];
      if (x >= lo && x <= hi) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul inner dimensions disagree: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::gemm(out.data(), a.values().data(), false, b.values().data(), false, m, k, n, false);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    Node<T>& nb = *self.parents[1];
    if (na.requires_grad) {
      detail::gemm(na.grad_buffer().data(), self.grad.data(), false, nb.value.data(), true, m, n, k, true);
    }
    if (nb.requires_grad) {
      detail::gemm(nb.grad_buffer().data(), na.value.data(), true, self.grad.data(), false, k, m, n, true);
    }
  });
}

/// Same data, new shape.
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a}, [](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  const auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return make_result<T>("transpose", {c, r}, std::move(out), {a}, [r, c](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

namespace detail {
/// Splits a shape around `axis` into (outer, extent, inner) element counts.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent,
                       std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " invalid for " + to_string(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}
}  // namespace detail

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  return make_result<T>("sum", {1}, {acc}, {a}, [](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return affine(sum(a), T(1) / static_cast<T>(a.size()));
}

enum class Reduce { Sum, Mean };

/// Reduction along one axis; the axis is removed from the shape.
template <typename T>
BasicTensor<T> reduce(Reduce op, const BasicTensor<T>& a, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::split_axis(a.shape(), axis, outer, extent, inner);
  const T scale = op == Reduce::Mean ? T(1) / static_cast<T>(extent) : T(1);
  std::vector<T> out(outer * inner, T(0));
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * extent + e) * inner + i];
  for (auto& v : out) v *= scale;
  return make_result<T>(op == Reduce::Sum ? "sum_axis" : "mean_axis", detail::drop_axis(a.shape(), axis),
      std::move(out), {a}, [outer, extent, inner, scale](Node<T>& self) {
        Node<T>& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i)
              g[(o * extent + e) * inner + i] += self.grad[o * inner + i] * scale;
      });
}

/// Numerically stabilized softmax along `axis`.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::split_axis(a.shape(), axis, outer, extent, inner);
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      auto at = [&](std::size_t e) { return (o * extent + e) * inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, av[at(e)]);
      T z = T(0);
      for (std::size_t e = 0; e < extent; ++e) z += (out[at(e)] = std::exp(av[at(e)] - mx));
      for (std::size_t e = 0; e < extent; ++e) out[at(e)] /= z;
    }
  }
  return make_result<T>("softmax", a.shape(), std::move(out), {a}, [outer, extent, inner](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        auto at = [&](std::size_t e) { return (o * extent + e) * inner + i; };
        T dot = T(0);
        for (std::size_t e = 0; e < extent; ++e) dot += self.grad[at(e)] * self.value[at(e)];
        for (std::size_t e = 0; e < extent; ++e) g[at(e)] += self.value[at(e)] * (self.grad[at(e)] - dot);
      }
    }
  });
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::split_axis(a.shape(), axis, outer, extent, inner);
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      auto at = [&](std::size_t e) { return (o * extent + e) * inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, av[at(e)]);
      T z = T(0);
      for (std::size_t e = 0; e < extent; ++e) z += std::exp(av[at(e)] - mx);
      const T lz = mx + std::log(z);
      for (std::size_t e = 0; e < extent; ++e) out[at(e)] = av[at(e)] - lz;
    }
  }
  return make_result<T>("log_softmax", a.shape(), std::move(out), {a}, [outer, extent, inner](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        auto at = [&](std::size_t e) { return (o * extent + e) * inner + i; };
        T gs = T(0);
        for (std::size_t e = 0; e < extent; ++e) gs += self.grad[at(e)];
        for (std::size_t e = 0; e < extent; ++e)
          g[at(e)] += self.grad[at(e)] - std::exp(self.value[at(e)]) * gs;
      }
    }
  });
}

/// Rows [begin, end) along axis 0.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0)) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + to_string(a.shape()));
  }
  const std::size_t row = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.values().begin() + begin * row, a.values().begin() + end * row);
  return make_result<T>("slice_rows", std::move(shape), std::move(out), {a}, [begin, row](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * row + i] += self.grad[i];
  });
}

/// out[r] = a[index[r]] along axis 0.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& a, std::vector<std::size_t> index) {
  const std::size_t row = a.size() / a.dim(0);
  for (auto i : index) {
    if (i >= a.dim(0)) throw ShapeError("gather_rows index out of range");
  }
  Shape shape = a.shape();
  shape[0] = index.size();
  std::vector<T> out(index.size() * row);
  const auto av = a.values();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(av.begin() + index[r] * row, row, out.begin() + r * row);
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return make_result<T>("gather_rows", std::move(shape), std::move(out), {a}, [idx, row](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t r = 0; r < idx->size(); ++r)
      for (std::size_t j = 0; j < row; ++j) g[(*idx)[r] * row + j] += self.grad[r * row + j];
  });
}

/// Concatenation along axis 0.
template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    a[0] = b[0] = 0;
    if (a != b) throw ShapeError("concat_rows shape mismatch " + to_string(p.shape()) + " vs " + to_string(shape));
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<T> out;
  out.reserve(numel(shape));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result<T>("concat_rows", std::move(shape), std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& parent : self.parents) {
      const std::size_t n = parent->value.size();
      if (parent->requires_grad) {
        auto& g = parent->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

}  // namespace saor::ad
