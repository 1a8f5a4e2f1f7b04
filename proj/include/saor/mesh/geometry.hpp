#pragma once

#include <cmath>
#include <memory>

#include "saor/diffcore/ops.hpp"
#include "saor/mesh/trimesh.hpp"

// Differentiable per-mesh quantities over a [N,3] position tensor.

namespace saor::mesh {

/// Unnormalized cross-product normals (v1 - v0) x (v2 - v0): [F,3].
template <typename T>
ad::BasicTensor<T> face_normals(const std::vector<Face>& faces, const ad::BasicTensor<T>& positions) {
  if (positions.rank() != 2 || positions.dim(1) != 3) {
    throw ShapeError("face_normals expects [N,3] positions, got " + ad::to_string(positions.shape()));
  }
  const auto p = positions.values();
  std::vector<T> out(faces.size() * 3);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const T* a = &p[faces[f][0] * 3];
    const T* b = &p[faces[f][1] * 3];
    const T* c = &p[faces[f][2] * 3];
    const T e1[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const T e2[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
    out[f * 3 + 0] = e1[1] * e2[2] - e1[2] * e2[1];
    out[f * 3 + 1] = e1[2] * e2[0] - e1[0] * e2[2];
    out[f * 3 + 2] = e1[0] * e2[1] - e1[1] * e2[0];
  }
  auto fs = std::make_shared<std::vector<Face>>(faces);
  return ad::make_result<T>("face_normals", {faces.size(), 3}, std::move(out), {positions}, [fs](ad::Node<T>& self) {
    ad::Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const auto& p = in.value;
    for (std::size_t f = 0; f < fs->size(); ++f) {
      const auto ia = (*fs)[f][0] * 3, ib = (*fs)[f][1] * 3, ic = (*fs)[f][2] * 3;
      const T e1[3] = {p[ib] - p[ia], p[ib + 1] - p[ia + 1], p[ib + 2] - p[ia + 2]};
      const T e2[3] = {p[ic] - p[ia], p[ic + 1] - p[ia + 1], p[ic + 2] - p[ia + 2]};
      const T* gn = &self.grad[f * 3];
      // n = e1 x e2  =>  dn/de1 . gn = e2 x gn,  dn/de2 . gn = gn x e1
      const T g1[3] = {e2[1] * gn[2] - e2[2] * gn[1], e2[2] * gn[0] - e2[0] * gn[2], e2[0] * gn[1] - e2[1] * gn[0]};
      const T g2[3] = {gn[1] * e1[2] - gn[2] * e1[1], gn[2] * e1[0] - gn[0] * e1[2], gn[0] * e1[1] - gn[1] * e1[0]};
      for (int k = 0; k < 3; ++k) {
        g[ib + k] += g1[k];
        g[ic + k] += g2[k];
        g[ia + k] -= g1[k] + g2[k];
      }
    }
  });
}

/// L * positions for a sparse operator: [N,3] -> [N,3].
template <typename T>
ad::BasicTensor<T> apply_operator(const SparseOperator& L, const ad::BasicTensor<T>& positions) {
  if (positions.rank() != 2 || positions.dim(0) != L.rows) {
    throw ShapeError("operator with " + std::to_string(L.rows) + " rows applied to " + ad::to_string(positions.shape()));
  }
  const std::size_t d = positions.dim(1);
  const auto p = positions.values();
  std::vector<T> out(L.rows * d, T(0));
  for (std::size_t i = 0; i < L.rows; ++i)
    for (std::size_t e = L.row_ptr[i]; e < L.row_ptr[i + 1]; ++e)
      for (std::size_t k = 0; k < d; ++k) out[i * d + k] += T(L.vals[e]) * p[L.cols[e] * d + k];
  auto op = std::make_shared<SparseOperator>(L);
  return ad::make_result<T>("sparse_apply", positions.shape(), std::move(out), {positions}, [op, d](ad::Node<T>& self) {
    ad::Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < op->rows; ++i)
      for (std::size_t e = op->row_ptr[i]; e < op->row_ptr[i + 1]; ++e)
        for (std::size_t k = 0; k < d; ++k) g[op->cols[e] * d + k] += T(op->vals[e]) * self.grad[i * d + k];
  });
}

/// Euclidean norm of each row: [n,d] -> [n]. The gradient at a zero row is 0.
template <typename T>
ad::BasicTensor<T> row_norms(const ad::BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("row_norms expects rank 2, got " + ad::to_string(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto v = x.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0);
    for (std::size_t k = 0; k < d; ++k) s += v[i * d + k] * v[i * d + k];
    out[i] = std::sqrt(s);
  }
  return ad::make_result<T>("row_norms", {n}, std::move(out), {x}, [n, d](ad::Node<T>& self) {
    ad::Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      const T r = self.value[i];
      if (r <= T(0)) continue;
      for (std::size_t k = 0; k < d; ++k) g[i * d + k] += self.grad[i] * in.value[i * d + k] / r;
    }
  });
}

}  // namespace saor::mesh
