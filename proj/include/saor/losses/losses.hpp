#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "saor/diffcore/image_ops.hpp"
#include "saor/diffcore/ops.hpp"
#include "saor/diffcore/param_store.hpp"
#include "saor/mesh/geometry.hpp"
#include "saor/mesh/trimesh.hpp"

namespace saor::losses {

enum class Reduction { Mean, Sum };

namespace detail {

template <typename T>
void require_same(const ad::BasicTensor<T>& a, const ad::BasicTensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + ad::to_string(a.shape()) + " vs " +
                     ad::to_string(b.shape()));
  }
}

template <typename T>
ad::BasicTensor<T> reduce_all(const ad::BasicTensor<T>& x, Reduction r) {
  return r == Reduction::Mean ? ad::mean(x) : ad::sum(x);
}

}  // namespace detail

template <typename T>
ad::BasicTensor<T> mse(const ad::BasicTensor<T>& a, const ad::BasicTensor<T>& b) {
  detail::require_same(a, b, "mse");
  return ad::mean(ad::square(ad::sub(a, b)));
}

/// Per-pixel Euclidean distance over channels, averaged (or summed) over pixels.
/// Images are [c,h,w].
template <typename T>
ad::BasicTensor<T> l_rgb(const ad::BasicTensor<T>& target, const ad::BasicTensor<T>& pred,
                         Reduction r = Reduction::Mean) {
  detail::require_same(target, pred, "l_rgb");
  const std::size_t c = pred.dim(0), hw = pred.size() / c;
  const auto diff = ad::transpose(ad::reshape(ad::sub(pred, target), {c, hw}));
  return detail::reduce_all(mesh::row_norms(diff), r);
}

template <typename T>
ad::BasicTensor<T> l_mask(const ad::BasicTensor<T>& target, const ad::BasicTensor<T>& pred,
                          Reduction r = Reduction::Mean) {
  detail::require_same(target, pred, "l_mask");
  return detail::reduce_all(ad::square(ad::sub(pred, target)), r);
}

/// Least-squares (a, b) minimising Σ_mask (a·pred + b − target)².
struct DepthAlignment {
  double scale = 0, shift = 0;
  std::size_t count = 0;
};

template <typename T>
DepthAlignment align_depth(std::span<const T> pred, std::span<const T> target, std::span<const T> mask,
                           bool fit = true) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] <= T(0.5)) continue;
    const double x = double(pred[i]), y = double(target[i]);
    n += 1;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  DepthAlignment a;
  a.count = static_cast<std::size_t>(n);
  if (!fit) {
    a.scale = 1;
    return a;
  }
  if (n == 0) return a;
  const double var = sxx - sx * sx / n;
  const double cov = sxy - sx * sy / n;
  a.scale = var > 1e-12 * std::max(1.0, sxx) ? cov / var : 0.0;
  a.shift = (sy - a.scale * sx) / n;
  return a;
}

/// Depth error over pixels where mask > 0.5. With `aligned`, the prediction is
/// first fitted to the target by a scale and shift; the gradient treats the
/// fit as fixed (it is optimal, so its own derivative vanishes).
template <typename T>
ad::BasicTensor<T> l_depth(const ad::BasicTensor<T>& target, const ad::BasicTensor<T>& pred,
                           const ad::BasicTensor<T>& mask, bool aligned = true) {
  detail::require_same(target, pred, "l_depth");
  detail::require_same(target, mask, "l_depth mask");
  const auto p = pred.values(), t = target.values(), m = mask.values();
  const auto fit = align_depth(p, t, m, aligned);
  if (fit.count == 0) {
    log::warn("l_depth: empty mask, depth term is 0");
    return ad::BasicTensor<T>::scalar(T(0));
  }
  const double a = fit.scale, b = fit.shift, n = double(fit.count);
  double loss = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] <= T(0.5)) continue;
    const double r = a * double(p[i]) + b - double(t[i]);
    loss += r * r;
  }
  loss /= n;
  auto tv = std::make_shared<std::vector<T>>(t.begin(), t.end());
  auto mv = std::make_shared<std::vector<T>>(m.begin(), m.end());
  return ad::make_result<T>("l_depth", {1}, {T(loss)}, {pred}, [a, b, n, tv, mv](ad::Node<T>& self) {
    ad::Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const double go = double(self.grad[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*mv)[i] <= T(0.5)) continue;
      const double r = a * double(in.value[i]) + b - double((*tv)[i]);
      g[i] += T(go * 2.0 * a * r / n);
    }
  });
}

/// λ_swap·mask + rgb of the swapped render against the recipient's image and mask.
template <typename T>
ad::BasicTensor<T> l_swap(const ad::BasicTensor<T>& image, const ad::BasicTensor<T>& mask,
                          const ad::BasicTensor<T>& rgb_sw, const ad::BasicTensor<T>& mask_sw, double lambda_swap) {
  return ad::add(ad::affine(l_mask(mask, mask_sw), T(lambda_swap)), l_rgb(image, rgb_sw));
}

/// Σ_k |Σ_i W_ik − N/K|.
template <typename T>
ad::BasicTensor<T> l_part(const ad::BasicTensor<T>& W) {
  const std::size_t N = W.dim(0), K = W.dim(1);
  const auto cols = ad::reduce(ad::Reduce::Sum, W, 0);
  return ad::sum(ad::abs(ad::affine(cols, T(1), -T(N) / T(K))));
}

/// Mean row norm of L·S.
template <typename T>
ad::BasicTensor<T> l_smooth(const mesh::SparseOperator& L, const ad::BasicTensor<T>& S) {
  return ad::mean(mesh::row_norms(mesh::apply_operator(L, S)));
}

inline constexpr double kNormalEps = 1e-8;

/// Mean over adjacent face pairs of 1 − cos(n_i, n_j). normals: [F,3].
template <typename T>
ad::BasicTensor<T> l_normal(const mesh::FaceAdjacency& adj, const ad::BasicTensor<T>& normals) {
  if (normals.rank() != 2 || normals.dim(1) != 3) {
    throw ShapeError("l_normal expects [F,3] normals, got " + ad::to_string(normals.shape()));
  }
  if (adj.pairs.empty()) return ad::BasicTensor<T>::scalar(T(0));
  const auto n = normals.values();
  const double count = double(adj.pairs.size());
  double total = 0;
  for (const auto& [i, j] : adj.pairs) {
    const T* a = &n[i * 3];
    const T* b = &n[j * 3];
    const double dot = double(a[0]) * b[0] + double(a[1]) * b[1] + double(a[2]) * b[2];
    const double la = std::sqrt(double(a[0]) * a[0] + double(a[1]) * a[1] + double(a[2]) * a[2]);
    const double lb = std::sqrt(double(b[0]) * b[0] + double(b[1]) * b[1] + double(b[2]) * b[2]);
    total += 1.0 - dot / std::max(la * lb, kNormalEps);
  }
  auto pairs = std::make_shared<std::vector<std::pair<std::uint32_t, std::uint32_t>>>(adj.pairs);
  return ad::make_result<T>("l_normal", {1}, {T(total / count)}, {normals}, [pairs, count](ad::Node<T>& self) {
    ad::Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const double go = double(self.grad[0]) / count;
    for (const auto& [i, j] : *pairs) {
      const T* a = &in.value[i * 3];
      const T* b = &in.value[j * 3];
      double A[3], B[3];
      for (int k = 0; k < 3; ++k) {
        A[k] = a[k];
        B[k] = b[k];
      }
      const double dot = A[0] * B[0] + A[1] * B[1] + A[2] * B[2];
      const double la = std::sqrt(A[0] * A[0] + A[1] * A[1] + A[2] * A[2]);
      const double lb = std::sqrt(B[0] * B[0] + B[1] * B[1] + B[2] * B[2]);
      const double den = la * lb;
      for (int k = 0; k < 3; ++k) {
        double ga, gb;
        if (den > kNormalEps) {
          // d(dot/(|a||b|))/da = b/(|a||b|) − dot·a/(|a|³|b|)
          ga = B[k] / den - dot * A[k] / (la * la * den);
          gb = A[k] / den - dot * B[k] / (lb * lb * den);
        } else {
          ga = B[k] / kNormalEps;
          gb = A[k] / kNormalEps;
        }
        g[i * 3 + k] += T(-go * ga);
        g[j * 3 + k] += T(-go * gb);
      }
    }
  });
}

inline constexpr double kPoseTemperature = 0.1;

inline std::vector<double> pose_target(const std::vector<double>& losses, double temperature = kPoseTemperature) {
  std::vector<double> q(losses.size());
  double lo = std::numeric_limits<double>::infinity();
  for (double l : losses) lo = std::min(lo, l);
  double s = 0;
  for (std::size_t c = 0; c < losses.size(); ++c) s += q[c] = std::exp(-(losses[c] - lo) / temperature);
  for (auto& v : q) v /= s;
  return q;
}

/// Cross-entropy between softmax(logits) and softmin(losses / temperature).
template <typename T>
ad::BasicTensor<T> l_pose_score(const ad::BasicTensor<T>& logits, const std::vector<double>& hypothesis_losses,
                                double temperature = kPoseTemperature) {
  const std::size_t C = logits.size();
  if (hypothesis_losses.size() != C) {
    throw ShapeError("l_pose_score: " + std::to_string(C) + " scores vs " + std::to_string(hypothesis_losses.size()) +
                     " hypothesis losses");
  }
  const auto target = pose_target(hypothesis_losses, temperature);
  std::vector<T> q(target.begin(), target.end());
  const auto lsm = ad::log_softmax(ad::reshape(logits, {1, C}), 1);
  return ad::neg(ad::sum(ad::mul(lsm, ad::BasicTensor<T>::constant({1, C}, std::move(q)))));
}

/// Frozen random-weight conv pyramid used as the perceptual feature extractor.
class RandomPyramid {
 public:
  explicit RandomPyramid(std::uint64_t seed = 7) {
    ad::Rng rng(seed);
    const std::size_t ch[4] = {3, 8, 16, 32};
    for (int l = 0; l < 3; ++l) {
      const std::size_t fan_in = ch[l] * 9;
      const double bound = std::sqrt(6.0 / double(fan_in));
      std::vector<float> w(ch[l + 1] * fan_in);
      for (auto& x : w) x = static_cast<float>(rng.uniform(-bound, bound));
      weights_.push_back(std::move(w));
      shapes_.push_back({ch[l + 1], ch[l], 3, 3});
    }
  }

  template <typename T>
  std::vector<ad::BasicTensor<T>> features(const ad::BasicTensor<T>& image) const {
    std::vector<ad::BasicTensor<T>> out;
    auto x = image;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      if (l > 0) x = ad::avg_pool2(x);
      std::vector<T> w(weights_[l].begin(), weights_[l].end());
      x = ad::relu(ad::conv2d(x, ad::BasicTensor<T>::constant(shapes_[l], std::move(w))));
      out.push_back(x);
    }
    return out;
  }

 private:
  std::vector<std::vector<float>> weights_;
  std::vector<ad::Shape> shapes_;
};

/// Σ over pyramid levels of feature MSE. A null extractor disables the term.
template <typename T>
ad::BasicTensor<T> l_percp(const ad::BasicTensor<T>& target, const ad::BasicTensor<T>& pred,
                           const RandomPyramid* extractor) {
  detail::require_same(target, pred, "l_percp");
  if (!extractor) return ad::BasicTensor<T>::scalar(T(0));
  const auto ft = extractor->features(target.detach());
  const auto fp = extractor->features(pred);
  auto total = mse(fp[0], ft[0].detach());
  for (std::size_t l = 1; l < fp.size(); ++l) total = ad::add(total, mse(fp[l], ft[l].detach()));
  return total;
}

struct LossWeights {
  double rgb = 1, percp = 10, mask = 1, depth = 1, swap = 1, smooth = 0.1, normal = 0.1, part = 1, pose = 0.05;
};

inline const std::vector<std::string>& term_names() {
  static const std::vector<std::string> names = {"rgb", "percp", "mask", "depth", "swap",
                                                 "part", "smooth", "normal", "pose"};
  return names;
}

/// Unweighted terms. `swap` already includes its internal λ_swap and enters
/// the total with weight 1. Missing terms are treated as 0.
template <typename T>
struct BasicLossTerms {
  ad::BasicTensor<T> rgb, percp, mask, depth, swap, part, smooth, normal, pose;

  std::vector<const ad::BasicTensor<T>*> ordered() const {
    return {&rgb, &percp, &mask, &depth, &swap, &part, &smooth, &normal, &pose};
  }
};
using LossTerms = BasicLossTerms<float>;

struct LossReport {
  std::vector<double> raw;       // per term, order of term_names()
  std::vector<double> weighted;  // contribution to the total
  double total = 0;

  double value(const std::string& name) const {
    for (std::size_t i = 0; i < term_names().size(); ++i)
      if (term_names()[i] == name) return raw[i];
    throw std::out_of_range("no loss term " + name);
  }
};

inline std::vector<double> weight_vector(const LossWeights& w) {
  return {w.rgb, w.percp, w.mask, w.depth, 1.0, w.part, w.smooth, w.normal, w.pose};
}

/// Weighted sum of the terms. Throws NumericError naming the first non-finite term.
template <typename T>
std::pair<ad::BasicTensor<T>, LossReport> total_loss(const BasicLossTerms<T>& terms, const LossWeights& weights) {
  const auto lam = weight_vector(weights);
  LossReport report;
  ad::BasicTensor<T> total;
  bool have = false;
  const auto ordered = terms.ordered();
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    const auto* t = ordered[i];
    double v = 0;
    if (t->node()) {
      v = double(t->item());
      if (!std::isfinite(v)) throw NumericError("loss", "non-finite loss term '" + term_names()[i] + "'");
      const auto contrib = ad::affine(*t, T(lam[i]));
      total = have ? ad::add(total, contrib) : contrib;
      have = true;
    }
    report.raw.push_back(v);
    report.weighted.push_back(lam[i] * v);
  }
  if (!have) total = ad::BasicTensor<T>::scalar(T(0));
  report.total = double(total.item());
  return {total, report};
}

}  // namespace saor::losses
