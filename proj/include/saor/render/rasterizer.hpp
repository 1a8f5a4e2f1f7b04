#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "saor/core/parallel.hpp"
#include "saor/diffcore/ops.hpp"
#include "saor/mesh/trimesh.hpp"

namespace saor::render {

struct RasterConfig {
  std::size_t height = 128;
  std::size_t width = 128;
  double sigma = 1e-4;
  double gamma = 1e-4;
  std::size_t max_faces = 16;
  double near = 0.1;
  double far = 10.0;
  double background = 0.5;
};

/// Occupancy below sigmoid(-kSupport) is treated as exactly zero.
inline constexpr double kSupport = 20.0;

namespace detail {

template <typename T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
struct FaceGeom {
  T x[3], y[3], z[3];
  T area;
};

/// Everything the forward pass derives for one (pixel, face) pair.
template <typename T>
struct Fragment {
  T b[3];      // raw barycentrics
  T w[3];      // clamped, renormalized barycentrics
  T wsum;      // sum of clamped barycentrics
  T dd;        // squared distance to the closest edge
  int edge;    // index of that edge (v[edge] -> v[edge+1])
  T t;         // segment parameter of the closest point
  T qx, qy;    // closest point
  T sign;      // +1 inside, -1 outside
  T x;         // sign * dd / sigma
  T D, logD, log1mD;
  T z, u, v;
};

template <typename T>
Fragment<T> fragment(const FaceGeom<T>& f, T px, T py, T inv_sigma) {
  Fragment<T> r;
  for (int i = 0; i < 3; ++i) {
    const int a = (i + 1) % 3, c = (i + 2) % 3;
    r.b[i] = ((f.x[a] - px) * (f.y[c] - py) - (f.y[a] - py) * (f.x[c] - px)) / f.area;
  }
  const bool inside = r.b[0] >= T(0) && r.b[1] >= T(0) && r.b[2] >= T(0);
  r.sign = inside ? T(1) : T(-1);
  r.dd = std::numeric_limits<T>::max();
  for (int e = 0; e < 3; ++e) {
    const int n = (e + 1) % 3;
    const T ex = f.x[n] - f.x[e], ey = f.y[n] - f.y[e];
    const T len2 = ex * ex + ey * ey;
    T t = len2 > T(0) ? ((px - f.x[e]) * ex + (py - f.y[e]) * ey) / len2 : T(0);
    t = std::clamp(t, T(0), T(1));
    const T qx = f.x[e] + t * ex, qy = f.y[e] + t * ey;
    const T dd = (px - qx) * (px - qx) + (py - qy) * (py - qy);
    if (dd < r.dd) {
      r.dd = dd;
      r.edge = e;
      r.t = t;
      r.qx = qx;
      r.qy = qy;
    }
  }
  r.x = r.sign * r.dd * inv_sigma;
  r.logD = -softplus(-r.x);
  r.log1mD = -softplus(r.x);
  r.D = std::exp(r.logD);
  r.wsum = T(0);
  for (int i = 0; i < 3; ++i) r.wsum += std::clamp(r.b[i], T(0), T(1));
  for (int i = 0; i < 3; ++i) r.w[i] = std::clamp(r.b[i], T(0), T(1)) / r.wsum;
  r.z = r.w[0] * f.z[0] + r.w[1] * f.z[1] + r.w[2] * f.z[2];
  return r;
}

/// Bilinear lookup with u wrapping and v clamped. v = 1 is the top row.
template <typename T>
struct TexelTaps {
  std::size_t idx[4];
  T wt[4];
  T dcol_w[4], drow_w[4];  // derivatives of the tap weights
};

template <typename T>
TexelTaps<T> texel_taps(T u, T v, std::size_t th, std::size_t tw) {
  const T col = u * T(tw) - T(0.5);
  const T row = (T(1) - v) * T(th) - T(0.5);
  const T c0f = std::floor(col), r0f = std::floor(row);
  const T fc = col - c0f, fr = row - r0f;
  const long W = static_cast<long>(tw), H = static_cast<long>(th);
  const auto wrap = [W](long c) { return static_cast<std::size_t>(((c % W) + W) % W); };
  const auto clampr = [H](long r) { return static_cast<std::size_t>(std::clamp(r, 0L, H - 1)); };
  const long c0 = static_cast<long>(c0f), r0 = static_cast<long>(r0f);
  TexelTaps<T> t;
  t.idx[0] = clampr(r0) * tw + wrap(c0);
  t.idx[1] = clampr(r0) * tw + wrap(c0 + 1);
  t.idx[2] = clampr(r0 + 1) * tw + wrap(c0);
  t.idx[3] = clampr(r0 + 1) * tw + wrap(c0 + 1);
  t.wt[0] = (1 - fr) * (1 - fc);
  t.wt[1] = (1 - fr) * fc;
  t.wt[2] = fr * (1 - fc);
  t.wt[3] = fr * fc;
  t.dcol_w[0] = -(1 - fr);
  t.dcol_w[1] = 1 - fr;
  t.dcol_w[2] = -fr;
  t.dcol_w[3] = fr;
  t.drow_w[0] = -(1 - fc);
  t.drow_w[1] = -fc;
  t.drow_w[2] = 1 - fc;
  t.drow_w[3] = fc;
  return t;
}

struct Bins {
  std::vector<std::uint32_t> offset;  // H*W+1
  std::vector<std::uint32_t> faces;
};

template <typename T>
Bins bin_faces(const std::vector<FaceGeom<T>>& geo, const std::vector<bool>& valid, std::size_t H, std::size_t W,
               T margin) {
  // Pixel centres: x = -1 + (2c+1)/W, y = 1 - (2r+1)/H.
  auto col_range = [W](T lo, T hi, long& c0, long& c1) {
    c0 = static_cast<long>(std::ceil((lo + 1) * T(W) / 2 - T(0.5)));
    c1 = static_cast<long>(std::floor((hi + 1) * T(W) / 2 - T(0.5)));
    c0 = std::max(c0, 0L);
    c1 = std::min(c1, static_cast<long>(W) - 1);
  };
  auto row_range = [H](T lo, T hi, long& r0, long& r1) {
    r0 = static_cast<long>(std::ceil((1 - hi) * T(H) / 2 - T(0.5)));
    r1 = static_cast<long>(std::floor((1 - lo) * T(H) / 2 - T(0.5)));
    r0 = std::max(r0, 0L);
    r1 = std::min(r1, static_cast<long>(H) - 1);
  };
  Bins bins;
  bins.offset.assign(H * W + 1, 0);
  std::vector<std::array<long, 4>> rect(geo.size());
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<std::uint32_t> cursor;
    if (pass == 1) {
      for (std::size_t p = 0; p < H * W; ++p) bins.offset[p + 1] += bins.offset[p];
      bins.faces.resize(bins.offset.back());
      cursor.assign(bins.offset.begin(), bins.offset.end() - 1);
    }
    for (std::size_t f = 0; f < geo.size(); ++f) {
      if (!valid[f]) continue;
      auto& rc = rect[f];
      if (pass == 0) {
        const auto& g = geo[f];
        const T xlo = std::min({g.x[0], g.x[1], g.x[2]}) - margin, xhi = std::max({g.x[0], g.x[1], g.x[2]}) + margin;
        const T ylo = std::min({g.y[0], g.y[1], g.y[2]}) - margin, yhi = std::max({g.y[0], g.y[1], g.y[2]}) + margin;
        col_range(xlo, xhi, rc[0], rc[1]);
        row_range(ylo, yhi, rc[2], rc[3]);
      }
      for (long r = rc[2]; r <= rc[3]; ++r)
        for (long c = rc[0]; c <= rc[1]; ++c) {
          const std::size_t p = static_cast<std::size_t>(r) * W + static_cast<std::size_t>(c);
          if (pass == 0) {
            ++bins.offset[p + 1];
          } else {
            bins.faces[cursor[p]++] = static_cast<std::uint32_t>(f);
          }
        }
    }
  }
  return bins;
}

}  // namespace detail

/// Soft rasterization of a textured mesh. `screen` is [N,3] with
/// (x_ndc, y_ndc, camera depth); `texture` is [3,th,tw]. Returns [5,H,W]:
/// rgb, silhouette, depth.
template <typename T>
ad::BasicTensor<T> soft_rasterize(const std::vector<mesh::Face>& faces,
                                  const std::vector<std::array<mesh::Vec2, 3>>& face_uv,
                                  const ad::BasicTensor<T>& screen, const ad::BasicTensor<T>& texture,
                                  const RasterConfig& cfg = {}) {
  if (screen.rank() != 2 || screen.dim(1) != 3) {
    throw ShapeError("soft_rasterize expects [N,3] screen coordinates, got " + ad::to_string(screen.shape()));
  }
  if (texture.rank() != 3 || texture.dim(0) != 3) {
    throw ShapeError("soft_rasterize expects a [3,h,w] texture, got " + ad::to_string(texture.shape()));
  }
  if (face_uv.size() != faces.size()) throw ShapeError("face_uv must have one entry per face");
  const std::size_t H = cfg.height, W = cfg.width, F = faces.size(), N = screen.dim(0);
  const std::size_t th = texture.dim(1), tw = texture.dim(2), K = cfg.max_faces;
  const T inv_sigma = T(1.0 / cfg.sigma), inv_gamma = T(1.0 / cfg.gamma);
  const T far = T(cfg.far), near = T(cfg.near), bg = T(cfg.background);
  const T zscale = T(1) / (far - near);

  const auto sv = screen.values();
  for (T v : sv) {
    if (!std::isfinite(v)) throw NumericError("render", "non-finite screen coordinates");
  }
  auto geo = std::make_shared<std::vector<detail::FaceGeom<T>>>(F);
  std::vector<bool> valid(F);
  for (std::size_t f = 0; f < F; ++f) {
    auto& g = (*geo)[f];
    for (int k = 0; k < 3; ++k) {
      const std::size_t v = faces[f][k];
      if (v >= N) throw ShapeError("face references vertex " + std::to_string(v) + " of " + std::to_string(N));
      g.x[k] = sv[v * 3];
      g.y[k] = sv[v * 3 + 1];
      g.z[k] = sv[v * 3 + 2];
    }
    g.area = (g.x[1] - g.x[0]) * (g.y[2] - g.y[0]) - (g.y[1] - g.y[0]) * (g.x[2] - g.x[0]);
    valid[f] = std::abs(g.area) > T(1e-12);
  }
  const T margin = T(std::sqrt(kSupport * cfg.sigma));
  const auto bins = detail::bin_faces(*geo, valid, H, W, margin);

  auto sel = std::make_shared<std::vector<std::uint32_t>>(H * W * K);
  auto sel_n = std::make_shared<std::vector<std::uint8_t>>(H * W, 0);
  auto uvs = std::make_shared<std::vector<std::array<mesh::Vec2, 3>>>(face_uv);
  auto topo = std::make_shared<std::vector<mesh::Face>>(faces);
  const auto tex = texture.values();
  const std::size_t plane = th * tw;

  std::vector<T> out(5 * H * W);
  parallel_for(H, [&](std::size_t r) {
    std::vector<std::pair<T, std::uint32_t>> cand;
    std::vector<detail::Fragment<T>> frags;
    const T py = T(1) - T(2 * r + 1) / T(H);
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t p = r * W + c;
      const T px = T(-1) + T(2 * c + 1) / T(W);
      cand.clear();
      for (std::uint32_t e = bins.offset[p]; e < bins.offset[p + 1]; ++e) {
        const std::uint32_t f = bins.faces[e];
        const auto fr = detail::fragment((*geo)[f], px, py, inv_sigma);
        if (fr.x < T(-kSupport)) continue;
        cand.emplace_back(fr.z, f);
      }
      const std::size_t n = std::min(cand.size(), K);
      std::partial_sort(cand.begin(), cand.begin() + n, cand.end());
      for (std::size_t j = 0; j < n; ++j) (*sel)[p * K + j] = cand[j].second;
      (*sel_n)[p] = static_cast<std::uint8_t>(n);

      if (n == 0) {
        for (int ch = 0; ch < 3; ++ch) out[ch * H * W + p] = bg;
        out[3 * H * W + p] = T(0);
        out[4 * H * W + p] = far;
        continue;
      }
      T lmax = -std::numeric_limits<T>::infinity(), log_empty = T(0);
      frags.resize(n);
      std::vector<T> logits(n);
      for (std::size_t j = 0; j < n; ++j) {
        frags[j] = detail::fragment((*geo)[cand[j].second], px, py, inv_sigma);
        logits[j] = frags[j].logD + (far - frags[j].z) * zscale * inv_gamma;
        lmax = std::max(lmax, logits[j]);
        log_empty += frags[j].log1mD;
      }
      T wsum = T(0);
      for (auto& l : logits) wsum += (l = std::exp(l - lmax));
      T rgb[3] = {0, 0, 0}, zb = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T wj = logits[j] / wsum;
        const auto& fr = frags[j];
        const auto& uv = (*uvs)[cand[j].second];
        const T u = fr.w[0] * uv[0][0] + fr.w[1] * uv[1][0] + fr.w[2] * uv[2][0];
        const T v = fr.w[0] * uv[0][1] + fr.w[1] * uv[1][1] + fr.w[2] * uv[2][1];
        const auto taps = detail::texel_taps(u, v, th, tw);
        for (int ch = 0; ch < 3; ++ch) {
          T col = T(0);
          for (int q = 0; q < 4; ++q) col += taps.wt[q] * tex[ch * plane + taps.idx[q]];
          rgb[ch] += wj * col;
        }
        zb += wj * fr.z;
      }
      const T sil = T(1) - std::exp(log_empty);
      for (int ch = 0; ch < 3; ++ch) out[ch * H * W + p] = sil * rgb[ch] + (T(1) - sil) * bg;
      out[3 * H * W + p] = sil;
      out[4 * H * W + p] = sil * zb + (T(1) - sil) * far;
    }
  });

  return ad::make_result<T>(
      "soft_rasterize", {5, H, W}, std::move(out), {screen, texture},
      [=](ad::Node<T>& self) {
        auto& nS = *self.parents[0];
        auto& nT = *self.parents[1];
        const auto& texv = nT.value;
        const std::size_t blocks = std::min<std::size_t>(H, 16);
        std::vector<std::vector<T>> gS(blocks), gT(blocks);
        parallel_for(blocks, [&](std::size_t b) {
          auto& gs = gS[b];
          auto& gt = gT[b];
          gs.assign(N * 3, T(0));
          if (nT.requires_grad) gt.assign(3 * plane, T(0));
          std::vector<detail::Fragment<T>> frags;
          std::vector<T> wts;
          std::vector<std::array<T, 3>> cols;
          std::vector<detail::TexelTaps<T>> taps;
          const std::size_t r0 = b * H / blocks, r1 = (b + 1) * H / blocks;
          for (std::size_t r = r0; r < r1; ++r) {
            const T py = T(1) - T(2 * r + 1) / T(H);
            for (std::size_t c = 0; c < W; ++c) {
              const std::size_t p = r * W + c;
              const std::size_t n = (*sel_n)[p];
              if (n == 0) continue;
              const T px = T(-1) + T(2 * c + 1) / T(W);
              frags.resize(n);
              wts.resize(n);
              cols.resize(n);
              taps.resize(n);
              T lmax = -std::numeric_limits<T>::infinity(), log_empty = T(0);
              for (std::size_t j = 0; j < n; ++j) {
                const std::uint32_t f = (*sel)[p * K + j];
                frags[j] = detail::fragment((*geo)[f], px, py, inv_sigma);
                wts[j] = frags[j].logD + (far - frags[j].z) * zscale * inv_gamma;
                lmax = std::max(lmax, wts[j]);
                log_empty += frags[j].log1mD;
                const auto& uv = (*uvs)[f];
                const auto& fr = frags[j];
                const T u = fr.w[0] * uv[0][0] + fr.w[1] * uv[1][0] + fr.w[2] * uv[2][0];
                const T v = fr.w[0] * uv[0][1] + fr.w[1] * uv[1][1] + fr.w[2] * uv[2][1];
                frags[j].u = u;
                frags[j].v = v;
                taps[j] = detail::texel_taps(u, v, th, tw);
                for (int ch = 0; ch < 3; ++ch) {
                  T col = T(0);
                  for (int q = 0; q < 4; ++q) col += taps[j].wt[q] * texv[ch * plane + taps[j].idx[q]];
                  cols[j][ch] = col;
                }
              }
              T wsum = T(0);
              for (auto& l : wts) wsum += (l = std::exp(l - lmax));
              T B[3] = {0, 0, 0}, zb = T(0);
              for (std::size_t j = 0; j < n; ++j) {
                wts[j] /= wsum;
                for (int ch = 0; ch < 3; ++ch) B[ch] += wts[j] * cols[j][ch];
                zb += wts[j] * frags[j].z;
              }
              const T empty = std::exp(log_empty);
              const T sil = T(1) - empty;
              const T g_rgb[3] = {self.grad[p], self.grad[H * W + p], self.grad[2 * H * W + p]};
              const T g_sil = self.grad[3 * H * W + p];
              const T g_d = self.grad[4 * H * W + p];

              T gsil = g_sil + g_d * (zb - far);
              for (int ch = 0; ch < 3; ++ch) gsil += g_rgb[ch] * (B[ch] - bg);
              T dB[3];
              for (int ch = 0; ch < 3; ++ch) dB[ch] = sil * g_rgb[ch];
              const T dZb = sil * g_d;
              const T mean_term = dB[0] * B[0] + dB[1] * B[1] + dB[2] * B[2] + dZb * zb;

              for (std::size_t j = 0; j < n; ++j) {
                const std::uint32_t f = (*sel)[p * K + j];
                const auto& fr = frags[j];
                const auto& g = (*geo)[f];
                const auto& face = (*topo)[f];
                const auto& uv = (*uvs)[f];
                const T wj = wts[j];
                const T dl = wj * (dB[0] * cols[j][0] + dB[1] * cols[j][1] + dB[2] * cols[j][2] + dZb * fr.z - mean_term);
                const T dz_frag = wj * dZb - dl * zscale * inv_gamma;
                const T dx = dl * (T(1) - fr.D) + gsil * fr.D * empty;

                // Texture sampling.
                T dcol = T(0), drow = T(0);
                for (int ch = 0; ch < 3; ++ch) {
                  const T dc = wj * dB[ch];
                  if (dc == T(0)) continue;
                  for (int q = 0; q < 4; ++q) {
                    const T texel = texv[ch * plane + taps[j].idx[q]];
                    if (nT.requires_grad) gt[ch * plane + taps[j].idx[q]] += dc * taps[j].wt[q];
                    dcol += dc * taps[j].dcol_w[q] * texel;
                    drow += dc * taps[j].drow_w[q] * texel;
                  }
                }
                const T du = dcol * T(tw), dv = -drow * T(th);

                // Clamped barycentric weights feed depth and uv.
                T dw[3];
                for (int i = 0; i < 3; ++i) {
                  dw[i] = g.z[i] * dz_frag + uv[i][0] * du + uv[i][1] * dv;
                  gs[face[i] * 3 + 2] += fr.w[i] * dz_frag;
                }
                const T wdw = fr.w[0] * dw[0] + fr.w[1] * dw[1] + fr.w[2] * dw[2];
                T db[3];
                for (int i = 0; i < 3; ++i) {
                  db[i] = (fr.b[i] > T(0) && fr.b[i] < T(1)) ? (dw[i] - wdw) / fr.wsum : T(0);
                }
                // b_i = E_i / A with E_i = cross(v_{i+1} - P, v_{i+2} - P).
                T gx[3] = {0, 0, 0}, gy[3] = {0, 0, 0};
                const T dA = -(fr.b[0] * db[0] + fr.b[1] * db[1] + fr.b[2] * db[2]) / g.area;
                for (int i = 0; i < 3; ++i) {
                  const T dE = db[i] / g.area;
                  if (dE == T(0)) continue;
                  const int a = (i + 1) % 3, c2 = (i + 2) % 3;
                  gx[a] += dE * (g.y[c2] - py);
                  gy[a] += -dE * (g.x[c2] - px);
                  gx[c2] += -dE * (g.y[a] - py);
                  gy[c2] += dE * (g.x[a] - px);
                }
                if (dA != T(0)) {
                  const T ax = g.x[1] - g.x[0], ay = g.y[1] - g.y[0];
                  const T bx = g.x[2] - g.x[0], by = g.y[2] - g.y[0];
                  gx[1] += dA * by;
                  gy[1] += -dA * bx;
                  gx[2] += -dA * ay;
                  gy[2] += dA * ax;
                  gx[0] -= dA * (by - ay);
                  gy[0] -= dA * (ax - bx);
                }
                // Squared edge distance.
                if (dx != T(0)) {
                  const T ddd = dx * fr.sign * inv_sigma;
                  const int e0 = fr.edge, e1 = (fr.edge + 1) % 3;
                  const T rx = -T(2) * (px - fr.qx), ry = -T(2) * (py - fr.qy);
                  gx[e0] += ddd * rx * (T(1) - fr.t);
                  gy[e0] += ddd * ry * (T(1) - fr.t);
                  gx[e1] += ddd * rx * fr.t;
                  gy[e1] += ddd * ry * fr.t;
                }
                for (int i = 0; i < 3; ++i) {
                  gs[face[i] * 3] += gx[i];
                  gs[face[i] * 3 + 1] += gy[i];
                }
              }
            }
          }
        });
        if (nS.requires_grad) {
          auto& dst = nS.grad_buffer();
          for (std::size_t b = 0; b < blocks; ++b)
            for (std::size_t e = 0; e < N * 3; ++e) dst[e] += gS[b][e];
        }
        if (nT.requires_grad) {
          auto& dst = nT.grad_buffer();
          for (std::size_t b = 0; b < blocks; ++b)
            for (std::size_t e = 0; e < 3 * plane; ++e) dst[e] += gT[b][e];
        }
      });
}

}  // namespace saor::render
