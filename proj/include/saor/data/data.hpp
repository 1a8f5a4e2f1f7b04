#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "saor/core/error.hpp"
#include "saor/diffcore/param_store.hpp"
#include "saor/io/image.hpp"

namespace saor::data {

using json = nlohmann::json;

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
};

struct DetectionMeta {
  BBox bbox;
  double confidence = 0;
  std::size_t image_width = 0, image_height = 0;
};

struct FilterResult {
  bool keep = true;
  std::string reason;  // empty when kept
};

inline constexpr double kMinConfidence = 0.8;
inline constexpr double kMinBoxSide = 32;
inline constexpr double kMinBoxMaxSide = 128;
inline constexpr double kMinBorderMargin = 10;

inline FilterResult filter_detection(const DetectionMeta& m) {
  const auto& b = m.bbox;
  if (m.confidence < kMinConfidence) return {false, "confidence"};
  if (std::min(b.w, b.h) < kMinBoxSide) return {false, "min_side"};
  if (std::max(b.w, b.h) < kMinBoxMaxSide) return {false, "max_side"};
  const double margin = std::min({b.x, b.y, double(m.image_width) - (b.x + b.w), double(m.image_height) - (b.y + b.h)});
  if (margin <= kMinBorderMargin) return {false, "margin"};
  return {};
}

struct Keypoint {
  std::string name;
  double x = 0, y = 0;
  bool visible = true;
};

/// One manifest line. Paths are stored as written; resolve() makes them absolute.
struct ManifestEntry {
  std::string image, mask, depth;
  std::string keypoints;  // optional JSON-lines sidecar
  BBox bbox;
  double confidence = 1.0;
  std::size_t image_width = 0, image_height = 0;
  int cluster_id = -1;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  std::string resolve(const std::string& p) const {
    if (p.empty()) return p;
    const std::filesystem::path q(p);
    return q.is_absolute() ? p : (base_dir / q).string();
  }
};

inline ManifestEntry parse_entry(const json& j) {
  ManifestEntry e;
  e.image = j.at("image").get<std::string>();
  e.mask = j.at("mask").get<std::string>();
  e.depth = j.at("depth").get<std::string>();
  const auto b = j.at("bbox").get<std::array<double, 4>>();
  e.bbox = {b[0], b[1], b[2], b[3]};
  e.confidence = j.value("confidence", 1.0);
  if (j.contains("image_size")) {
    const auto wh = j.at("image_size").get<std::array<std::size_t, 2>>();
    e.image_width = wh[0];
    e.image_height = wh[1];
  }
  if (j.contains("keypoints") && !j.at("keypoints").is_null()) e.keypoints = j.at("keypoints").get<std::string>();
  e.cluster_id = j.value("cluster_id", -1);
  return e;
}

inline json entry_json(const ManifestEntry& e) {
  json j;
  j["image"] = e.image;
  j["mask"] = e.mask;
  j["depth"] = e.depth;
  j["bbox"] = {e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h};
  j["confidence"] = e.confidence;
  if (e.image_width) j["image_size"] = {e.image_width, e.image_height};
  if (!e.keypoints.empty()) j["keypoints"] = e.keypoints;
  if (e.cluster_id >= 0) j["cluster_id"] = e.cluster_id;
  return j;
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest " + path);
  Manifest m;
  m.base_dir = std::filesystem::absolute(path).parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.entries.push_back(parse_entry(json::parse(line)));
    } catch (const json::exception& ex) {
      throw IoError("manifest " + path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

inline void write_manifest(const Manifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest " + path);
  for (const auto& e : m.entries) f << entry_json(e).dump() << '\n';
  if (!f) throw IoError("failed writing manifest " + path);
}

inline std::vector<Keypoint> read_keypoints(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open keypoints " + path);
  std::vector<Keypoint> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("name").get<std::string>(), j.at("x").get<double>(), j.at("y").get<double>(),
                     j.value("visible", true)});
    } catch (const json::exception& ex) {
      throw IoError("keypoints " + path + ": " + ex.what());
    }
  }
  return out;
}

inline void write_keypoints(const std::vector<Keypoint>& kps, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write keypoints " + path);
  for (const auto& k : kps) f << json{{"name", k.name}, {"x", k.x}, {"y", k.y}, {"visible", k.visible}}.dump() << '\n';
}

inline DetectionMeta detection_meta(const Manifest& m, const ManifestEntry& e) {
  DetectionMeta d{e.bbox, e.confidence, e.image_width, e.image_height};
  if (!d.image_width) std::tie(d.image_width, d.image_height) = io::png_size(m.resolve(e.image));
  return d;
}

inline constexpr double kCropPadding = 0.1;

/// Square crop around a box: side = max(w,h)·(1 + 2·padding), centred on the
/// box, resampled to size×size. Pixel centres sit at integer coordinates.
struct CropTransform {
  double x0 = 0, y0 = 0, side = 1;
  std::size_t size = 128;

  static CropTransform around(const BBox& b, std::size_t size, double padding = kCropPadding) {
    const double side = std::max(b.w, b.h) * (1.0 + 2.0 * padding);
    return {b.x + b.w / 2 - side / 2, b.y + b.h / 2 - side / 2, side, size};
  }
  double scale() const { return double(size) / side; }
  std::array<double, 2> forward(double x, double y) const {
    return {(x + 0.5 - x0) * scale() - 0.5, (y + 0.5 - y0) * scale() - 0.5};
  }
  std::array<double, 2> inverse(double u, double v) const {
    return {(u + 0.5) / scale() + x0 - 0.5, (v + 0.5) / scale() + y0 - 0.5};
  }
};

enum class Border { Clamp, Zero };

/// Bilinear resample of every channel of `src` through the crop.
inline io::Image crop_resample(const io::Image& src, const CropTransform& t, Border border) {
  io::Image out(src.channels, t.size, t.size);
  const auto H = static_cast<std::ptrdiff_t>(src.height), W = static_cast<std::ptrdiff_t>(src.width);
  auto fetch = [&](std::size_t c, std::ptrdiff_t y, std::ptrdiff_t x) -> float {
    if (y < 0 || x < 0 || y >= H || x >= W) {
      if (border == Border::Zero) return 0.f;
      y = std::clamp<std::ptrdiff_t>(y, 0, H - 1);
      x = std::clamp<std::ptrdiff_t>(x, 0, W - 1);
    }
    return src.at(c, std::size_t(y), std::size_t(x));
  };
  for (std::size_t v = 0; v < t.size; ++v)
    for (std::size_t u = 0; u < t.size; ++u) {
      const auto [sx, sy] = t.inverse(double(u), double(v));
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const auto ix = static_cast<std::ptrdiff_t>(fx), iy = static_cast<std::ptrdiff_t>(fy);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = (1 - ax) * fetch(c, iy, ix) + ax * fetch(c, iy, ix + 1);
        const double bot = (1 - ax) * fetch(c, iy + 1, ix) + ax * fetch(c, iy + 1, ix + 1);
        out.at(c, v, u) = static_cast<float>((1 - ay) * top + ay * bot);
      }
    }
  return out;
}

struct SampleRecord {
  io::Image image;  // [3,s,s] in [0,1]
  std::vector<float> mask;   // s·s in {0,1}
  std::vector<float> depth;  // s·s, relative
  std::vector<Keypoint> keypoints;
  CropTransform crop;
  int cluster_id = -1;
  std::string source;
  bool usable = true;  // false for an all-background mask
  std::size_t size() const { return image.height; }
};

inline SampleRecord load_sample(const Manifest& m, const ManifestEntry& e, std::size_t size = 128) {
  const auto img = io::read_png(m.resolve(e.image), 3);
  const auto msk = io::read_png(m.resolve(e.mask), 1);
  const auto dep = io::read_pfm(m.resolve(e.depth));
  if (msk.height != img.height || msk.width != img.width || dep.height != img.height || dep.width != img.width) {
    throw ShapeError("modality size mismatch for " + e.image + ": image " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + ", mask " + std::to_string(msk.width) + "x" +
                     std::to_string(msk.height) + ", depth " + std::to_string(dep.width) + "x" +
                     std::to_string(dep.height));
  }
  if (e.bbox.w <= 0 || e.bbox.h <= 0) throw ShapeError("empty bbox for " + e.image);
  SampleRecord r;
  r.crop = CropTransform::around(e.bbox, size);
  r.image = crop_resample(img, r.crop, Border::Clamp);
  auto mk = crop_resample(msk, r.crop, Border::Zero);
  r.mask.resize(size * size);
  double area = 0;
  for (std::size_t i = 0; i < r.mask.size(); ++i) area += r.mask[i] = mk.data[i] >= 0.5f ? 1.f : 0.f;
  r.usable = area > 0;
  if (!r.usable) log::warn("all-background mask in %s", e.mask.c_str());
  io::Image d1(1, dep.height, dep.width);
  std::copy_n(dep.data.begin(), d1.data.size(), d1.data.begin());
  r.depth = crop_resample(d1, r.crop, Border::Clamp).data;
  if (!e.keypoints.empty()) {
    for (auto k : read_keypoints(m.resolve(e.keypoints))) {
      const auto [u, v] = r.crop.forward(k.x, k.y);
      k.x = u;
      k.y = v;
      k.visible = k.visible && u >= -0.5 && v >= -0.5 && u <= size - 0.5 && v <= size - 0.5;
      r.keypoints.push_back(std::move(k));
    }
  }
  r.cluster_id = e.cluster_id;
  r.source = e.image;
  return r;
}

// ---------------------------------------------------------------------------
// Silhouette clustering

inline constexpr std::size_t kClusterGrid = 32;
inline constexpr double kVarianceFloor = 1e-6;

/// s×s mask -> binarized 32×32 grid, flattened row-major.
inline std::vector<double> mask_feature(const std::vector<float>& mask, std::size_t h, std::size_t w) {
  io::Image src(1, h, w);
  src.data = mask;
  // Square grids map pixel centres onto each other; non-square inputs stretch.
  const std::size_t g = kClusterGrid;
  std::vector<double> out(g * g);
  for (std::size_t v = 0; v < g; ++v)
    for (std::size_t u = 0; u < g; ++u) {
      const double sx = (u + 0.5) * double(w) / g - 0.5, sy = (v + 0.5) * double(h) / g - 0.5;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      auto at = [&](double y, double x) {
        const auto yi = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(y), 0, std::ptrdiff_t(h) - 1);
        const auto xi = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(x), 0, std::ptrdiff_t(w) - 1);
        return double(src.at(0, std::size_t(yi), std::size_t(xi)));
      };
      const double val = (1 - ay) * ((1 - ax) * at(fy, fx) + ax * at(fy, fx + 1)) +
                         ay * ((1 - ax) * at(fy + 1, fx) + ax * at(fy + 1, fx + 1));
      out[v * g + u] = val >= 0.5 ? 1.0 : 0.0;
    }
  return out;
}

struct ClusterModel {
  std::size_t k = 0, dim = 0;
  std::vector<double> means;      // k·dim
  std::vector<double> variances;  // k·dim
  std::vector<double> weights;    // k
  std::vector<double> log_likelihood;  // mean per-sample value after each E-step
  bool converged = false;

  /// Per-component log p(x, z=j).
  std::vector<double> joint_log(const std::vector<double>& x) const {
    static const double kLog2Pi = std::log(2.0 * 3.14159265358979323846);
    std::vector<double> out(k);
    for (std::size_t j = 0; j < k; ++j) {
      double s = std::log(weights[j]);
      const double* mu = &means[j * dim];
      const double* var = &variances[j * dim];
      for (std::size_t d = 0; d < dim; ++d) {
        const double r = x[d] - mu[d];
        s -= 0.5 * (kLog2Pi + std::log(var[d]) + r * r / var[d]);
      }
      out[j] = s;
    }
    return out;
  }

  int assign(const std::vector<double>& x) const {
    const auto l = joint_log(x);
    return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
  }

  json to_json() const {
    return {{"k", k}, {"dim", dim}, {"means", means}, {"variances", variances}, {"weights", weights},
            {"log_likelihood", log_likelihood}, {"converged", converged}};
  }
  static ClusterModel from_json(const json& j) {
    ClusterModel m;
    m.k = j.at("k");
    m.dim = j.at("dim");
    m.means = j.at("means").get<std::vector<double>>();
    m.variances = j.at("variances").get<std::vector<double>>();
    m.weights = j.at("weights").get<std::vector<double>>();
    m.log_likelihood = j.value("log_likelihood", std::vector<double>{});
    m.converged = j.value("converged", false);
    if (m.means.size() != m.k * m.dim || m.variances.size() != m.k * m.dim || m.weights.size() != m.k) {
      throw IoError("cluster model arrays do not match k and dim");
    }
    return m;
  }
};

struct GmmOptions {
  std::size_t max_iterations = 200;
  double tolerance = 1e-4;
  double variance_floor = kVarianceFloor;
};

namespace detail {

inline double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double sq_dist(const double* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace detail

/// Diagonal-covariance EM with k-means++ seeding.
inline ClusterModel fit_gmm(const std::vector<std::vector<double>>& x, std::size_t k, std::uint64_t seed,
                            const GmmOptions& opt = {}) {
  const std::size_t n = x.size();
  if (k == 0 || n < k) {
    throw std::invalid_argument("fit_gmm needs at least k=" + std::to_string(k) + " samples, got " + std::to_string(n));
  }
  const std::size_t dim = x[0].size();
  for (const auto& row : x)
    if (row.size() != dim) throw ShapeError("fit_gmm: ragged feature vectors");

  ClusterModel m;
  m.k = k;
  m.dim = dim;
  m.means.resize(k * dim);
  m.variances.resize(k * dim);
  m.weights.assign(k, 1.0 / double(k));

  // k-means++ seeding
  ad::Rng rng(seed);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(n);
  for (std::size_t j = 0; j < k; ++j) {
    std::copy(x[pick].begin(), x[pick].end(), m.means.begin() + std::ptrdiff_t(j * dim));
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], detail::sq_dist(x[i].data(), &m.means[j * dim], dim));
      total += d2[i];
    }
    if (j + 1 == k) break;
    if (total <= 0) {
      pick = rng.below(n);
      continue;
    }
    double r = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= d2[i];
      if (r < 0 && d2[i] > 0) {
        pick = i;
        break;
      }
    }
  }
  std::vector<double> mean(dim, 0.0), var(dim, 0.0);
  for (const auto& row : x)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += row[d] / double(n);
  for (const auto& row : x)
    for (std::size_t d = 0; d < dim; ++d) var[d] += (row[d] - mean[d]) * (row[d] - mean[d]) / double(n);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t d = 0; d < dim; ++d) m.variances[j * dim + d] = std::max(var[d], opt.variance_floor);

  std::vector<double> resp(n * k);
  auto e_step = [&]() {
    double ll = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto l = m.joint_log(x[i]);
      const double z = detail::log_sum_exp(l);
      ll += z;
      for (std::size_t j = 0; j < k; ++j) resp[i * k + j] = std::exp(l[j] - z);
    }
    return ll / double(n);
  };

  double ll = e_step();
  m.log_likelihood.push_back(ll);
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    for (std::size_t j = 0; j < k; ++j) {
      double nk = 0;
      for (std::size_t i = 0; i < n; ++i) nk += resp[i * k + j];
      m.weights[j] = nk / double(n);
      if (nk <= 0) continue;  // keep the previous mean and variance of a dead component
      double* mu = &m.means[j * dim];
      double* vr = &m.variances[j * dim];
      std::fill(mu, mu + dim, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp[i * k + j] / nk;
        if (r == 0) continue;
        for (std::size_t d = 0; d < dim; ++d) mu[d] += r * x[i][d];
      }
      std::fill(vr, vr + dim, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp[i * k + j] / nk;
        if (r == 0) continue;
        for (std::size_t d = 0; d < dim; ++d) vr[d] += r * (x[i][d] - mu[d]) * (x[i][d] - mu[d]);
      }
      for (std::size_t d = 0; d < dim; ++d) vr[d] = std::max(vr[d], opt.variance_floor);
    }
    const double next = e_step();
    m.log_likelihood.push_back(next);
    if (next < ll - 1e-9 * std::max(1.0, std::abs(ll))) {
      log::warn("fit_gmm: log-likelihood decreased at iteration %zu (%.12g -> %.12g)", it, ll, next);
    }
    const bool done = std::abs(next - ll) < opt.tolerance;
    ll = next;
    if (done) {
      m.converged = true;
      break;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Balanced sampling

/// Batches draw an equal share from every non-empty cluster. The remainder
/// rotates across clusters from batch to batch. Batch b depends only on
/// (seed, b), so a resumed run sees the same sequence.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<int>& cluster_ids, std::size_t num_clusters, std::size_t batch_size,
                  std::uint64_t seed)
      : batch_size_(batch_size), seed_(seed), members_(num_clusters) {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    for (std::size_t i = 0; i < cluster_ids.size(); ++i) {
      const int c = cluster_ids[i];
      if (c < 0 || std::size_t(c) >= num_clusters) {
        throw std::invalid_argument("record " + std::to_string(i) + " has cluster id " + std::to_string(c) +
                                    " outside [0," + std::to_string(num_clusters) + ")");
      }
      members_[std::size_t(c)].push_back(i);
    }
    for (std::size_t c = 0; c < num_clusters; ++c) {
      if (members_[c].empty()) {
        log::warn("cluster %zu is empty; its quota is shared by the others", c);
      } else {
        active_.push_back(c);
      }
    }
    if (active_.empty()) throw std::invalid_argument("no records to sample");
  }

  std::size_t batch_size() const { return batch_size_; }
  const std::vector<std::size_t>& active_clusters() const { return active_; }

  /// Per-cluster counts for batch b (indexed by cluster id).
  std::vector<std::size_t> quotas(std::uint64_t b) const {
    const std::size_t m = active_.size(), base = batch_size_ / m, rem = batch_size_ % m;
    std::vector<std::size_t> q(members_.size(), 0);
    const std::size_t start = static_cast<std::size_t>((b * rem) % m);
    for (std::size_t r = 0; r < m; ++r) {
      const bool extra = (r + m - start) % m < rem;
      q[active_[r]] = base + (extra ? 1 : 0);
    }
    return q;
  }

  std::vector<std::size_t> batch(std::uint64_t b) const {
    ad::Rng rng(ad::mix_seed(seed_, b, 0x5a3b));
    const auto q = quotas(b);
    std::vector<std::size_t> out;
    out.reserve(batch_size_);
    for (std::size_t c : active_) {
      const auto& mem = members_[c];
      if (mem.size() < q[c]) {
        for (std::size_t t = 0; t < q[c]; ++t) out.push_back(mem[rng.below(mem.size())]);
      } else {
        auto pool = mem;
        for (std::size_t t = 0; t < q[c]; ++t) {
          std::swap(pool[t], pool[t + rng.below(pool.size() - t)]);
          out.push_back(pool[t]);
        }
      }
    }
    for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
    return out;
  }

 private:
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::size_t> active_;
};

}  // namespace saor::data
