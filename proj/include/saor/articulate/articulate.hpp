#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "saor/core/rotation.hpp"
#include "saor/diffcore/ops.hpp"

namespace saor::articulate {

/// Decoded articulation. W: [N,K], scales: [K,3], rotations: [K,3,3] row-major,
/// translations: [K,3].
template <typename T>
struct BasicArticulation {
  ad::BasicTensor<T> W;
  ad::BasicTensor<T> scales;
  ad::BasicTensor<T> rotations;
  ad::BasicTensor<T> translations;

  std::size_t num_vertices() const { return W.dim(0); }
  std::size_t num_parts() const { return W.dim(1); }
};
using Articulation = BasicArticulation<float>;

inline constexpr double kDegenerateColumn = 1e-8;
inline constexpr double kMaxLogScale = 0.7;
inline constexpr double kMaxPartAngleDeg = 45.0;
inline constexpr double kMaxPartTranslation = 0.3;

/// Rotation matrices from per-row Euler angles in radians: [K,3] -> [K,3,3].
template <typename T>
ad::BasicTensor<T> euler_rotation(const ad::BasicTensor<T>& angles) {
  if (angles.rank() != 2 || angles.dim(1) != 3) {
    throw ShapeError("euler_rotation expects [K,3], got " + ad::to_string(angles.shape()));
  }
  const std::size_t K = angles.dim(0);
  const auto a = angles.values();
  std::vector<T> out(K * 9);
  for (std::size_t k = 0; k < K; ++k) {
    const auto R = euler_zyx(a[k * 3], a[k * 3 + 1], a[k * 3 + 2]);
    std::copy(R.begin(), R.end(), out.begin() + k * 9);
  }
  return ad::make_result<T>("euler_rotation", {K, 3, 3}, std::move(out), {angles}, [K](ad::Node<T>& self) {
    ad::Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t k = 0; k < K; ++k) {
      const auto dR = euler_zyx_grad(in.value[k * 3], in.value[k * 3 + 1], in.value[k * 3 + 2]);
      for (int j = 0; j < 3; ++j) {
        T s = T(0);
        for (int e = 0; e < 9; ++e) s += dR[j][e] * self.grad[k * 9 + e];
        g[k * 3 + j] += s;
      }
    }
  });
}

/// Raw per-part parameters [K,9] -> (scale, rotation, translation).
/// scale = exp(clamp(raw, ±0.7)), angles = 45°·tanh(raw), t = 0.3·tanh(raw).
template <typename T>
BasicArticulation<T> decode(const ad::BasicTensor<T>& W, const ad::BasicTensor<T>& raw) {
  if (raw.rank() != 2 || raw.dim(1) != 9 || W.rank() != 2 || W.dim(1) != raw.dim(0)) {
    throw ShapeError("decode expects W [N,K] and raw [K,9], got " + ad::to_string(W.shape()) + " and " +
                     ad::to_string(raw.shape()));
  }
  const auto cols = [&](std::size_t from) {
    return ad::transpose(ad::slice_rows(ad::transpose(raw), from, from + 3));
  };
  const T max_angle = T(kMaxPartAngleDeg * std::numbers::pi / 180.0);
  BasicArticulation<T> A;
  A.W = W;
  A.scales = ad::exp(ad::clamp(cols(0), T(-kMaxLogScale), T(kMaxLogScale)));
  A.rotations = euler_rotation(ad::affine(ad::tanh(cols(3)), max_angle));
  A.translations = ad::affine(ad::tanh(cols(6)), T(kMaxPartTranslation));
  return A;
}

/// Uniform W and identity transforms.
template <typename T>
BasicArticulation<T> identity(std::size_t N, std::size_t K) {
  BasicArticulation<T> A;
  A.W = ad::BasicTensor<T>::full({N, K}, T(1) / T(K));
  A.scales = ad::BasicTensor<T>::full({K, 3}, T(1));
  std::vector<T> r(K * 9, T(0));
  for (std::size_t k = 0; k < K; ++k) r[k * 9] = r[k * 9 + 4] = r[k * 9 + 8] = T(1);
  A.rotations = ad::BasicTensor<T>::constant({K, 3, 3}, std::move(r));
  A.translations = ad::BasicTensor<T>::zeros({K, 3});
  return A;
}

/// c_k = Σ_i s'_i W_ik / Σ_i W_ik: [K,3].
template <typename T>
ad::BasicTensor<T> part_centers(const ad::BasicTensor<T>& S, const ad::BasicTensor<T>& W) {
  if (S.rank() != 2 || S.dim(1) != 3 || W.rank() != 2 || W.dim(0) != S.dim(0)) {
    throw ShapeError("part_centers expects S [N,3] and W [N,K], got " + ad::to_string(S.shape()) + " and " +
                     ad::to_string(W.shape()));
  }
  const std::size_t N = W.dim(0), K = W.dim(1);
  const auto w = W.values();
  for (std::size_t k = 0; k < K; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < N; ++i) s += w[i * K + k];
    if (s < kDegenerateColumn) {
      throw NumericError("part_centers", "part " + std::to_string(k) + " has no assigned vertices (column sum " +
                                             std::to_string(s) + ")");
    }
  }
  const auto Wt = ad::transpose(W);
  const auto weighted = ad::matmul(Wt, S);
  const auto mass = ad::reshape(ad::reduce(ad::Reduce::Sum, W, 0), {K, 1});
  return ad::div(weighted, mass);
}

/// s_i = Σ_k W_ik z_k ⊙ (r_k (s'_i − c_k) + t_k), with c supplied by the caller.
template <typename T>
ad::BasicTensor<T> blend(const ad::BasicTensor<T>& S, const ad::BasicTensor<T>& W, const ad::BasicTensor<T>& C,
                         const ad::BasicTensor<T>& Z, const ad::BasicTensor<T>& R, const ad::BasicTensor<T>& Tr) {
  const std::size_t N = S.dim(0), K = W.dim(1);
  if (S.shape() != ad::Shape{N, 3} || W.shape() != ad::Shape{N, K} || C.shape() != ad::Shape{K, 3} ||
      Z.shape() != ad::Shape{K, 3} || R.shape() != ad::Shape{K, 3, 3} || Tr.shape() != ad::Shape{K, 3}) {
    throw ShapeError("lbs shapes inconsistent: S " + ad::to_string(S.shape()) + " W " + ad::to_string(W.shape()) +
                     " R " + ad::to_string(R.shape()));
  }
  const auto s = S.values(), w = W.values(), c = C.values(), z = Z.values(), r = R.values(), t = Tr.values();
  std::vector<T> out(N * 3, T(0));
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const T u[3] = {s[i * 3] - c[k * 3], s[i * 3 + 1] - c[k * 3 + 1], s[i * 3 + 2] - c[k * 3 + 2]};
      for (int a = 0; a < 3; ++a) {
        const T q = r[k * 9 + a * 3] * u[0] + r[k * 9 + a * 3 + 1] * u[1] + r[k * 9 + a * 3 + 2] * u[2] + t[k * 3 + a];
        out[i * 3 + a] += w[i * K + k] * z[k * 3 + a] * q;
      }
    }
  }
  return ad::make_result<T>("lbs", {N, 3}, std::move(out), {S, W, C, Z, R, Tr}, [N, K](ad::Node<T>& self) {
    auto& nS = *self.parents[0];
    auto& nW = *self.parents[1];
    auto& nC = *self.parents[2];
    auto& nZ = *self.parents[3];
    auto& nR = *self.parents[4];
    auto& nT = *self.parents[5];
    const auto& s = nS.value;
    const auto& w = nW.value;
    const auto& c = nC.value;
    const auto& z = nZ.value;
    const auto& r = nR.value;
    const auto& t = nT.value;
    std::vector<T> gS(N * 3, T(0)), gW(N * K, T(0)), gC(K * 3, T(0)), gZ(K * 3, T(0)), gR(K * 9, T(0)),
        gT(K * 3, T(0));
    for (std::size_t i = 0; i < N; ++i) {
      const T* g = &self.grad[i * 3];
      for (std::size_t k = 0; k < K; ++k) {
        const T u[3] = {s[i * 3] - c[k * 3], s[i * 3 + 1] - c[k * 3 + 1], s[i * 3 + 2] - c[k * 3 + 2]};
        T h[3];
        T dw = T(0);
        for (int a = 0; a < 3; ++a) {
          const T q = r[k * 9 + a * 3] * u[0] + r[k * 9 + a * 3 + 1] * u[1] + r[k * 9 + a * 3 + 2] * u[2] + t[k * 3 + a];
          dw += g[a] * z[k * 3 + a] * q;
          gZ[k * 3 + a] += w[i * K + k] * g[a] * q;
          h[a] = w[i * K + k] * z[k * 3 + a] * g[a];
          gT[k * 3 + a] += h[a];
          for (int b = 0; b < 3; ++b) gR[k * 9 + a * 3 + b] += h[a] * u[b];
        }
        gW[i * K + k] += dw;
        for (int b = 0; b < 3; ++b) {
          const T du = r[k * 9 + b] * h[0] + r[k * 9 + 3 + b] * h[1] + r[k * 9 + 6 + b] * h[2];
          gS[i * 3 + b] += du;
          gC[k * 3 + b] -= du;
        }
      }
    }
    const auto put = [](ad::Node<T>& n, const std::vector<T>& src) {
      if (!n.requires_grad) return;
      auto& dst = n.grad_buffer();
      for (std::size_t e = 0; e < src.size(); ++e) dst[e] += src[e];
    };
    put(nS, gS);
    put(nW, gW);
    put(nC, gC);
    put(nZ, gZ);
    put(nR, gR);
    put(nT, gT);
  });
}

/// Blend with the part center subtracted and not re-added.
template <typename T>
ad::BasicTensor<T> lbs_apply(const ad::BasicTensor<T>& S, const BasicArticulation<T>& A) {
  const auto C = part_centers(S, A.W);
  return blend(S, A.W, C, A.scales, A.rotations, A.translations);
}

/// ξ(S'_j, A_i): donor shape with the recipient's articulation.
template <typename T>
ad::BasicTensor<T> swap_shape(const ad::BasicTensor<T>& donor, const BasicArticulation<T>& recipient) {
  if (donor.rank() != 2 || donor.dim(0) != recipient.num_vertices()) {
    throw MeshError("swap_shape topology mismatch: donor " + ad::to_string(donor.shape()) + " vs W " +
                    ad::to_string(recipient.W.shape()));
  }
  return lbs_apply(donor, recipient);
}

/// Per-vertex argmax of W, lowest index on ties.
template <typename T>
std::vector<std::uint32_t> hard_parts(const ad::BasicTensor<T>& W) {
  const std::size_t N = W.dim(0), K = W.dim(1);
  const auto w = W.values();
  std::vector<std::uint32_t> labels(N, 0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 1; k < K; ++k) {
      if (w[i * K + k] > w[i * K + labels[i]]) labels[i] = static_cast<std::uint32_t>(k);
    }
  }
  return labels;
}

}  // namespace saor::articulate
