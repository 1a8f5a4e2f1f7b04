#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "saor/core/rotation.hpp"
#include "saor/data/data.hpp"
#include "saor/mesh/trimesh.hpp"
#include "saor/render/render.hpp"

namespace saor::eval {

// ---------------------------------------------------------------------------
// Metrics

/// IoU of masks thresholded at `threshold`; two empty masks score 1.
inline double mask_iou(std::span<const float> a, std::span<const float> b, float threshold = 0.5f) {
  if (a.size() != b.size()) {
    throw ShapeError("mask_iou size mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] >= threshold, y = b[i] >= threshold;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

/// Largest side of the tight box around mask pixels >= 0.5 (0 for an empty mask).
inline double mask_bbox_max_side(std::span<const float> mask, std::size_t h, std::size_t w) {
  std::size_t x0 = w, y0 = h, x1 = 0, y1 = 0;
  bool any = false;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask[y * w + x] >= 0.5f) {
        any = true;
        x0 = std::min(x0, x), x1 = std::max(x1, x);
        y0 = std::min(y0, y), y1 = std::max(y1, y);
      }
  return any ? double(std::max(x1 - x0 + 1, y1 - y0 + 1)) : 0.0;
}

struct PixelPoint {
  double x = 0, y = 0;
  bool valid = false;  // false: missing prediction or invisible ground truth
};

struct PckResult {
  double pck = 0;
  std::size_t correct = 0, evaluated = 0;
};

/// Fraction of ground-truth-valid keypoints whose prediction lies within
/// threshold·normalizer. Missing predictions count as misses.
inline PckResult pck(const std::vector<PixelPoint>& pred, const std::vector<PixelPoint>& gt, double normalizer,
                     double threshold = 0.1) {
  if (pred.size() != gt.size()) throw ShapeError("pck: prediction and ground truth lengths differ");
  PckResult r;
  const double radius = threshold * normalizer;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt[i].valid) continue;
    ++r.evaluated;
    if (pred[i].valid && std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y) <= radius) ++r.correct;
  }
  if (r.evaluated == 0) throw std::invalid_argument("pck: no evaluable keypoint pairs");
  r.pck = double(r.correct) / double(r.evaluated);
  return r;
}

// ---------------------------------------------------------------------------
// Projection and hard visibility

struct Projected {
  double col = 0, row = 0, z = 0;
};

/// Screen coordinates [N,3] (x_ndc, y_ndc, z) to pixel coordinates with pixel
/// centres at integers.
inline std::vector<Projected> to_pixels(std::span<const float> screen, std::size_t size) {
  std::vector<Projected> out(screen.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = {((screen[i * 3] + 1.0) * double(size) - 1.0) / 2.0, ((1.0 - screen[i * 3 + 1]) * double(size) - 1.0) / 2.0,
              screen[i * 3 + 2]};
  }
  return out;
}

/// Nearest-depth z-buffer sampled at pixel centres. Depth is interpolated
/// linearly in screen space, like the soft rasterizer.
inline std::vector<double> hard_zbuffer(const std::vector<mesh::Face>& faces, const std::vector<Projected>& p,
                                        std::size_t size) {
  std::vector<double> zbuf(size * size, std::numeric_limits<double>::infinity());
  const auto S = static_cast<double>(size);
  for (const auto& f : faces) {
    const auto &a = p[f[0]], &b = p[f[1]], &c = p[f[2]];
    const double area = (b.col - a.col) * (c.row - a.row) - (b.row - a.row) * (c.col - a.col);
    if (std::abs(area) < 1e-12) continue;
    const double lo_x = std::max(0.0, std::ceil(std::min({a.col, b.col, c.col})));
    const double hi_x = std::min(S - 1, std::floor(std::max({a.col, b.col, c.col})));
    const double lo_y = std::max(0.0, std::ceil(std::min({a.row, b.row, c.row})));
    const double hi_y = std::min(S - 1, std::floor(std::max({a.row, b.row, c.row})));
    for (double y = lo_y; y <= hi_y; ++y)
      for (double x = lo_x; x <= hi_x; ++x) {
        const double w0 = ((b.col - x) * (c.row - y) - (b.row - y) * (c.col - x)) / area;
        const double w1 = ((c.col - x) * (a.row - y) - (c.row - y) * (a.col - x)) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double z = w0 * a.z + w1 * b.z + w2 * c.z;
        auto& dst = zbuf[std::size_t(y) * size + std::size_t(x)];
        dst = std::min(dst, z);
      }
  }
  return zbuf;
}

inline constexpr double kVisibilityTolerance = 0.05;

/// A vertex is visible when it lies inside the image and no surface is in
/// front of it at its nearest pixel centre.
inline std::vector<bool> vertex_visibility(const std::vector<mesh::Face>& faces, const std::vector<Projected>& p,
                                           std::size_t size, double tol = kVisibilityTolerance) {
  const auto zbuf = hard_zbuffer(faces, p, size);
  std::vector<bool> vis(p.size(), false);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = std::round(p[i].col), r = std::round(p[i].row);
    if (c < 0 || r < 0 || c >= double(size) || r >= double(size)) continue;
    vis[i] = p[i].z <= zbuf[std::size_t(r) * size + std::size_t(c)] + tol;
  }
  return vis;
}

inline constexpr double kTransferRadius = 10.0;

/// One reconstruction as seen by keypoint transfer: pixel positions of every
/// vertex and their visibility.
struct ProjectedShape {
  std::vector<Projected> points;
  std::vector<bool> visible;
};

inline ProjectedShape project_shape(const std::vector<mesh::Face>& faces, std::span<const float> screen,
                                    std::size_t size) {
  ProjectedShape s;
  s.points = to_pixels(screen, size);
  s.visible = vertex_visibility(faces, s.points, size);
  return s;
}

/// Maps pixel positions through a crop; visibility is kept.
inline ProjectedShape crop_shape(const ProjectedShape& s, const data::CropTransform& crop) {
  ProjectedShape out = s;
  for (auto& p : out.points) {
    const auto uv = crop.forward(p.col, p.row);
    p.col = uv[0];
    p.row = uv[1];
  }
  return out;
}

/// Source keypoint -> nearest visible source vertex within `radius` px ->
/// that vertex's position in the target. Invisible or unmatched keypoints
/// come back invalid.
inline std::vector<PixelPoint> transfer_keypoints(const std::vector<data::Keypoint>& source_kps,
                                                  const ProjectedShape& src, const ProjectedShape& tgt,
                                                  double radius = kTransferRadius) {
  if (src.points.size() != tgt.points.size()) throw ShapeError("transfer_keypoints: topologies differ");
  std::vector<PixelPoint> out(source_kps.size());
  for (std::size_t k = 0; k < source_kps.size(); ++k) {
    const auto& kp = source_kps[k];
    if (!kp.visible) continue;
    double best = 0;
    std::optional<std::size_t> hit;
    for (std::size_t v = 0; v < src.points.size(); ++v) {
      if (!src.visible[v]) continue;
      const double d = std::hypot(src.points[v].col - kp.x, src.points[v].row - kp.y);
      if (d <= radius && (!hit || d < best)) {
        best = d;
        hit = v;
      }
    }
    if (hit) out[k] = {tgt.points[*hit].col, tgt.points[*hit].row, true};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural quadruped

struct Tube {
  std::array<double, 3> start, end;
  double r0 = 0.1, r1 = 0.1;
};

struct SyntheticSpec {
  std::array<double, 3> body_radii{0.62, 0.3, 0.26};
  std::array<double, 3> head_start{0.5, 0.15, 0.0}, nose{0.9, 0.28, 0.0};
  double head_radius = 0.17, snout_radius = 0.09;
  std::array<double, 2> front_hip{0.36, -0.12}, back_hip{-0.38, -0.12};  // (x, y); legs at ±z
  double hip_z = 0.15;
  double leg_length = 0.5, leg_radius = 0.075;
  std::array<double, 3> tail_start{-0.58, 0.08, 0.0}, tail_end{-0.88, 0.3, 0.0};
  double tail_radius = 0.045;
  double max_swing_deg = 25;
  double min_elevation_deg = 0, max_elevation_deg = 20;
  double azimuth_jitter_deg = 5;
  int texture_pattern = 1;  // 0 solid, 1 stripes, 2 checker
  std::size_t render_size = 128;
  int body_subdivisions = 2;
  int tube_segments = 8;

  data::json to_json() const {
    return {{"body_radii", body_radii}, {"head_start", head_start}, {"nose", nose}, {"head_radius", head_radius},
            {"snout_radius", snout_radius}, {"front_hip", front_hip}, {"back_hip", back_hip}, {"hip_z", hip_z},
            {"leg_length", leg_length}, {"leg_radius", leg_radius}, {"tail_start", tail_start},
            {"tail_end", tail_end}, {"tail_radius", tail_radius}, {"max_swing_deg", max_swing_deg},
            {"min_elevation_deg", min_elevation_deg}, {"max_elevation_deg", max_elevation_deg},
            {"azimuth_jitter_deg", azimuth_jitter_deg}, {"texture_pattern", texture_pattern},
            {"render_size", render_size}, {"body_subdivisions", body_subdivisions},
            {"tube_segments", tube_segments}};
  }
  static SyntheticSpec from_json(const data::json& j) {
    SyntheticSpec s;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("body_radii", s.body_radii);
    get("head_start", s.head_start);
    get("nose", s.nose);
    get("head_radius", s.head_radius);
    get("snout_radius", s.snout_radius);
    get("front_hip", s.front_hip);
    get("back_hip", s.back_hip);
    get("hip_z", s.hip_z);
    get("leg_length", s.leg_length);
    get("leg_radius", s.leg_radius);
    get("tail_start", s.tail_start);
    get("tail_end", s.tail_end);
    get("tail_radius", s.tail_radius);
    get("max_swing_deg", s.max_swing_deg);
    get("min_elevation_deg", s.min_elevation_deg);
    get("max_elevation_deg", s.max_elevation_deg);
    get("azimuth_jitter_deg", s.azimuth_jitter_deg);
    get("texture_pattern", s.texture_pattern);
    get("render_size", s.render_size);
    get("body_subdivisions", s.body_subdivisions);
    get("tube_segments", s.tube_segments);
    return s;
  }
};

inline const std::vector<std::string>& keypoint_names() {
  static const std::vector<std::string> names = {"nose", "tail", "front_left_foot", "front_right_foot",
                                                 "back_left_foot", "back_right_foot"};
  return names;
}

struct QuadrupedMesh {
  mesh::TriMesh mesh;
  std::vector<std::uint32_t> keypoint_vertices;  // aligned with keypoint_names()
};

namespace detail {

using V3 = std::array<double, 3>;

inline V3 sub(const V3& a, const V3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline V3 cross(const V3& a, const V3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double dot(const V3& a, const V3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline V3 normalized(const V3& a) {
  const double n = std::sqrt(dot(a, a));
  return {a[0] / n, a[1] / n, a[2] / n};
}

/// Appends a component and orients its faces away from the component centroid
/// (every component is convex).
inline void append(mesh::TriMesh& m, const std::vector<V3>& verts, std::vector<mesh::Face> faces) {
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  V3 centre{0, 0, 0};
  for (const auto& v : verts)
    for (int k = 0; k < 3; ++k) centre[k] += v[k] / double(verts.size());
  for (auto& f : faces) {
    const V3 n = cross(sub(verts[f[1]], verts[f[0]]), sub(verts[f[2]], verts[f[0]]));
    V3 c{0, 0, 0};
    for (int k = 0; k < 3; ++k) c[k] = (verts[f[0]][k] + verts[f[1]][k] + verts[f[2]][k]) / 3.0;
    if (dot(n, sub(c, centre)) < 0) std::swap(f[1], f[2]);
    m.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
  }
  for (const auto& v : verts) m.vertices.push_back({float(v[0]), float(v[1]), float(v[2])});
}

/// Closed tapered tube between two points whose axis lies in the xy-plane.
/// Ring vertices are symmetric under z -> -z about the axis. Returns the index
/// (within the component) of the end-cap centre.
inline std::uint32_t tube(mesh::TriMesh& m, const Tube& t, int segments) {
  const V3 axis = normalized(sub(t.end, t.start));
  const V3 u{0, 0, 1};
  const V3 w = normalized(cross(axis, u));
  std::vector<V3> v;
  std::vector<mesh::Face> f;
  const auto n = static_cast<std::uint32_t>(segments);
  for (int ring = 0; ring < 2; ++ring) {
    const V3& c = ring ? t.end : t.start;
    const double r = ring ? t.r1 : t.r0;
    for (std::uint32_t k = 0; k < n; ++k) {
      const double th = 2 * std::numbers::pi * k / n;
      v.push_back({c[0] + r * (std::cos(th) * u[0] + std::sin(th) * w[0]),
                   c[1] + r * (std::cos(th) * u[1] + std::sin(th) * w[1]),
                   c[2] + r * (std::cos(th) * u[2] + std::sin(th) * w[2])});
    }
  }
  v.push_back(t.start);
  v.push_back(t.end);
  const std::uint32_t cs = 2 * n, ce = 2 * n + 1;
  for (std::uint32_t k = 0; k < n; ++k) {
    const std::uint32_t k1 = (k + 1) % n;
    f.push_back({k, k1, n + k1});
    f.push_back({k, n + k1, n + k});
    f.push_back({cs, k1, k});
    f.push_back({ce, n + k, n + k1});
  }
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  append(m, v, f);
  return base + ce;
}

inline V3 rotate_about_z(const V3& p, const V3& pivot, double deg) {
  const double a = deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
  const V3 d = sub(p, pivot);
  return {pivot[0] + c * d[0] - s * d[1], pivot[1] + s * d[0] + c * d[1], p[2]};
}

}  // namespace detail

/// Body ellipsoid, head, tail and four legs. Front legs swing by
/// front_swing_deg about the z axis through the hip, back legs by
/// back_swing_deg; left and right legs of a pair move together so the mesh
/// stays symmetric about z = 0.
inline QuadrupedMesh build_quadruped(const SyntheticSpec& spec, double front_swing_deg, double back_swing_deg) {
  QuadrupedMesh q;
  auto& m = q.mesh;
  {
    const auto ico = mesh::icosphere(spec.body_subdivisions);
    std::vector<detail::V3> v;
    for (const auto& p : ico.vertices) {
      v.push_back({p[0] * spec.body_radii[0], p[1] * spec.body_radii[1], p[2] * spec.body_radii[2]});
    }
    detail::append(m, v, ico.faces);
  }
  const auto nose =
      detail::tube(m, {spec.head_start, spec.nose, spec.head_radius, spec.snout_radius}, spec.tube_segments);
  const auto tail =
      detail::tube(m, {spec.tail_start, spec.tail_end, spec.tail_radius, spec.tail_radius * 0.6}, spec.tube_segments);
  std::vector<std::uint32_t> feet;
  for (int pair = 0; pair < 2; ++pair) {
    const auto& hip = pair == 0 ? spec.front_hip : spec.back_hip;
    const double swing = pair == 0 ? front_swing_deg : back_swing_deg;
    for (double side : {1.0, -1.0}) {
      const detail::V3 top{hip[0], hip[1], side * spec.hip_z};
      const detail::V3 foot = detail::rotate_about_z({hip[0], hip[1] - spec.leg_length, side * spec.hip_z}, top, swing);
      feet.push_back(detail::tube(m, {top, foot, spec.leg_radius, spec.leg_radius * 0.8}, spec.tube_segments));
    }
  }
  mesh::assign_sphere_uv(m);
  q.keypoint_vertices = {nose, tail, feet[0], feet[1], feet[2], feet[3]};
  return q;
}

/// Texture image [3,64,128] for a pattern id.
inline std::vector<float> synthetic_texture(int pattern, std::size_t th = 64, std::size_t tw = 128) {
  const std::array<float, 3> base{0.62f, 0.42f, 0.24f}, dark{0.25f, 0.16f, 0.1f};
  std::vector<float> t(3 * th * tw);
  for (std::size_t y = 0; y < th; ++y)
    for (std::size_t x = 0; x < tw; ++x) {
      bool alt = false;
      if (pattern == 1) alt = (x / 8) % 2 == 1;
      if (pattern == 2) alt = ((x / 16) + (y / 16)) % 2 == 1;
      const auto& col = alt ? dark : base;
      for (std::size_t c = 0; c < 3; ++c) t[(c * th + y) * tw + x] = col[c];
    }
  return t;
}

struct SyntheticSample {
  QuadrupedMesh shape;
  render::CameraPose pose;
  double front_swing = 0, back_swing = 0;
};

/// Sample i of a sweep of `count`: azimuth covers [-180, 180) evenly with
/// jitter, legs swing randomly. Depends only on (spec, seed, i, count).
inline SyntheticSample synthetic_sample(const SyntheticSpec& spec, std::uint64_t seed, std::size_t i,
                                        std::size_t count) {
  ad::Rng rng(ad::mix_seed(seed, i, 0x51a7));
  SyntheticSample s;
  s.front_swing = rng.uniform(-spec.max_swing_deg, spec.max_swing_deg);
  s.back_swing = rng.uniform(-spec.max_swing_deg, spec.max_swing_deg);
  s.shape = build_quadruped(spec, s.front_swing, s.back_swing);
  double az = -180.0 + 360.0 * (double(i) + 0.5) / double(count) +
              rng.uniform(-spec.azimuth_jitter_deg, spec.azimuth_jitter_deg);
  if (az >= 180.0) az -= 360.0;
  if (az < -180.0) az += 360.0;
  s.pose.azimuth = az;
  s.pose.elevation = rng.uniform(spec.min_elevation_deg, spec.max_elevation_deg);
  return s;
}

inline render::RenderConfig hard_render_config(std::size_t size) {
  auto cfg = render::RenderConfig::square(size);
  cfg.raster.sigma = 1e-7;
  cfg.raster.gamma = 1e-6;
  return cfg;
}

struct RenderedSample {
  io::Image rgb, mask, depth;
  std::vector<data::Keypoint> keypoints;  // render-pixel coordinates
  ProjectedShape projected;
};

inline RenderedSample render_synthetic(const SyntheticSample& s, const SyntheticSpec& spec) {
  const std::size_t R = spec.render_size;
  const auto& m = s.shape.mesh;
  const auto S = ad::Tensor::constant({m.num_vertices(), 3}, m.flat_vertices());
  const auto tex = ad::Tensor::constant({3, 64, 128}, synthetic_texture(spec.texture_pattern));
  const auto pose = render::pose_tensor<float>(s.pose);
  const auto cfg = hard_render_config(R);
  const auto out = render::render(m, S, tex, pose, cfg);
  RenderedSample r;
  r.rgb = io::Image(3, R, R);
  r.mask = io::Image(1, R, R);
  r.depth = io::Image(1, R, R);
  std::copy(out.rgb.values().begin(), out.rgb.values().end(), r.rgb.data.begin());
  const auto sil = out.silhouette.values();
  for (std::size_t i = 0; i < R * R; ++i) r.mask.data[i] = sil[i] >= 0.5f ? 1.f : 0.f;
  std::copy(out.depth.values().begin(), out.depth.values().end(), r.depth.data.begin());
  const auto screen = render::view_project(S, pose, cfg.camera);
  r.projected = project_shape(m.faces, screen.values(), R);
  for (std::size_t k = 0; k < keypoint_names().size(); ++k) {
    const auto& p = r.projected.points[s.shape.keypoint_vertices[k]];
    r.keypoints.push_back({keypoint_names()[k], p.col, p.row, bool(r.projected.visible[s.shape.keypoint_vertices[k]])});
  }
  return r;
}

inline std::optional<data::BBox> mask_bbox(const io::Image& mask) {
  std::size_t x0 = mask.width, y0 = mask.height, x1 = 0, y1 = 0;
  bool any = false;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (mask.at(0, y, x) >= 0.5f) {
        any = true;
        x0 = std::min(x0, x), x1 = std::max(x1, x);
        y0 = std::min(y0, y), y1 = std::max(y1, y);
      }
  if (!any) return std::nullopt;
  return data::BBox{double(x0), double(y0), double(x1 - x0 + 1), double(y1 - y0 + 1)};
}

/// Writes count samples (rgb/mask PNG, depth PFM, keypoint sidecar) plus
/// manifest.jsonl and truth.jsonl into out_dir. Returns the manifest.
inline data::Manifest generate_synthetic(const SyntheticSpec& spec, std::size_t count, std::uint64_t seed,
                                         const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  data::Manifest manifest;
  manifest.base_dir = fs::absolute(out_dir);
  std::ofstream truth(fs::path(out_dir) / "truth.jsonl", std::ios::trunc);
  if (!truth) throw IoError("cannot write " + (fs::path(out_dir) / "truth.jsonl").string());
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = synthetic_sample(spec, seed, i, count);
    const auto r = render_synthetic(s, spec);
    const auto box = mask_bbox(r.mask);
    if (!box) throw MeshError("synthetic sample " + std::to_string(i) + " rendered an empty mask");
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const std::string st(stem);
    io::write_png(r.rgb, (fs::path(out_dir) / (st + "_rgb.png")).string());
    io::write_png(r.mask, (fs::path(out_dir) / (st + "_mask.png")).string());
    io::write_pfm(r.depth, (fs::path(out_dir) / (st + "_depth.pfm")).string());
    data::write_keypoints(r.keypoints, (fs::path(out_dir) / (st + "_kp.jsonl")).string());
    data::ManifestEntry e;
    e.image = st + "_rgb.png";
    e.mask = st + "_mask.png";
    e.depth = st + "_depth.pfm";
    e.keypoints = st + "_kp.jsonl";
    e.bbox = *box;
    e.confidence = 1.0;
    e.image_width = e.image_height = spec.render_size;
    manifest.entries.push_back(e);
    truth << data::json{{"index", i}, {"azimuth", s.pose.azimuth}, {"elevation", s.pose.elevation},
                        {"front_swing", s.front_swing}, {"back_swing", s.back_swing}}
                 .dump()
          << '\n';
  }
  data::write_manifest(manifest, (fs::path(out_dir) / "manifest.jsonl").string());
  std::ofstream(fs::path(out_dir) / "spec.json") << spec.to_json().dump(2) << '\n';
  return manifest;
}

}  // namespace saor::eval
