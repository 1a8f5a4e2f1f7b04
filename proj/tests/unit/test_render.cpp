#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numbers>

#include "saor/diffcore/param_store.hpp"
#include "saor/io/image.hpp"
#include "saor/render/render.hpp"
#include "support/gradcheck.hpp"
#include "support/meshes.hpp"

using namespace saor;
using ad::Tensor;
using saor::testing::DTensor;

namespace {

mesh::TriMesh single_triangle(mesh::Vec3 a, mesh::Vec3 b, mesh::Vec3 c) {
  mesh::TriMesh m;
  m.vertices = {a, b, c};
  m.faces = {{0, 1, 2}};
  m.face_uv = {{mesh::Vec2{0.1f, 0.1f}, mesh::Vec2{0.9f, 0.1f}, mesh::Vec2{0.5f, 0.9f}}};
  return m;
}

// Direct screen-space evaluation: projects vertices by explicit matrix products.
Eigen::Vector3d oracle_project(const Eigen::Vector3d& s, const std::array<double, 6>& pose,
                               const render::CameraConfig& cam) {
  const double deg = std::numbers::pi / 180.0;
  const Eigen::Matrix3d R = (Eigen::AngleAxisd(pose[2] * deg, Eigen::Vector3d::UnitZ()) *
                             Eigen::AngleAxisd(pose[1] * deg, Eigen::Vector3d::UnitX()) *
                             Eigen::AngleAxisd(pose[0] * deg, Eigen::Vector3d::UnitY()))
                                .toRotationMatrix();
  Eigen::Vector3d p = R * s + Eigen::Vector3d(pose[3], pose[4], pose[5]) + Eigen::Vector3d(0, 0, cam.distance);
  const double f = 1.0 / std::tan(cam.fov_deg * std::numbers::pi / 360.0);
  return {f * p.x() / p.z(), f * p.y() / p.z(), p.z()};
}

bool point_in_triangle(double px, double py, const double* x, const double* y) {
  const auto edge = [&](int a, int b) { return (x[b] - x[a]) * (py - y[a]) - (y[b] - y[a]) * (px - x[a]); };
  const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
  return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double ex = bx - ax, ey = by - ay;
  const double t = std::clamp(((px - ax) * ex + (py - ay) * ey) / (ex * ex + ey * ey), 0.0, 1.0);
  return std::hypot(px - ax - t * ex, py - ay - t * ey);
}

Tensor flat_texture(float r, float g, float b, std::size_t th = 8, std::size_t tw = 16) {
  std::vector<float> v(3 * th * tw);
  for (std::size_t i = 0; i < th * tw; ++i) {
    v[i] = r;
    v[th * tw + i] = g;
    v[2 * th * tw + i] = b;
  }
  return Tensor::constant({3, th, tw}, v);
}

}  // namespace

TEST(ViewProject, OriginMapsToImageCentre) {
  const auto out = render::view_project(Tensor::zeros({1, 3}), Tensor::zeros({6}));
  EXPECT_EQ(out[0], 0.f);
  EXPECT_EQ(out[1], 0.f);
  EXPECT_NEAR(out[2], render::CameraConfig{}.distance, 1e-5);
}

TEST(ViewProject, UnitSphereFillsSeventyPercent) {
  const auto m = mesh::icosphere(4);
  const auto out = render::view_project(Tensor::constant({m.num_vertices(), 3}, m.flat_vertices()), Tensor::zeros({6}));
  float top = 0;
  for (std::size_t i = 0; i < m.num_vertices(); ++i) top = std::max(top, out[i * 3 + 1]);
  EXPECT_NEAR(top, 0.7f, 0.01f);
}

TEST(ViewProject, AzimuthHalfTurnMirrorsXZ) {
  const std::vector<float> p = {0.3f, -0.2f, 0.6f};
  const auto a = render::view_project(Tensor::constant({1, 3}, p), Tensor::constant({6}, {180, 0, 0, 0, 0, 0}));
  const auto b = render::view_project(Tensor::constant({1, 3}, {-p[0], p[1], -p[2]}), Tensor::zeros({6}));
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(a[k], b[k], 1e-5);
}

TEST(ViewProject, MatchesMatrixOracleAndKeepsDepthOrder) {
  ad::Rng rng(2);
  const render::CameraConfig cam;
  for (int trial = 0; trial < 20; ++trial) {
    const std::array<double, 6> pose = {rng.uniform(-180, 180), rng.uniform(-15, 30), rng.uniform(-30, 30),
                                        rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    std::vector<double> s(6);
    for (auto& x : s) x = rng.uniform(-1, 1);
    const auto out = render::view_project(DTensor::constant({2, 3}, s),
                                          DTensor::constant({6}, std::vector<double>(pose.begin(), pose.end())), cam);
    for (int i = 0; i < 2; ++i) {
      const auto ref = oracle_project({s[i * 3], s[i * 3 + 1], s[i * 3 + 2]}, pose, cam);
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(out[i * 3 + k], ref[k], 1e-9);
    }
    const auto r0 = oracle_project({s[0], s[1], s[2]}, pose, cam);
    const auto r1 = oracle_project({s[3], s[4], s[5]}, pose, cam);
    EXPECT_EQ(out[2] < out[5], r0.z() < r1.z());
  }
}

TEST(ViewProject, GradientsMatchFiniteDifferences) {
  ad::Rng rng(9);
  std::vector<double> s(15), w(15);
  for (auto& x : s) x = rng.uniform(-1, 1);
  for (auto& x : w) x = rng.uniform(-1, 1);
  const std::vector<double> pose = {35, 12, -8, 0.1, -0.2, 0.3};
  auto r = saor::testing::grad_check(
      [&](const std::vector<DTensor>& in) {
        return ad::sum(ad::mul(render::view_project(in[0], in[1]), DTensor::constant({5, 3}, w)));
      },
      {{5, 3}, {6}}, {s, pose}, 1e-5);
  EXPECT_LT(r.rel_error, 1e-5);
}

TEST(ViewProject, NearPlaneClampIsCounted) {
  const auto before = render::near_clamp_count().load();
  log::threshold() = log::Level::Error;
  const auto out = render::view_project(Tensor::constant({1, 3}, {0, 0, -10}), Tensor::zeros({6}));
  log::threshold() = log::Level::Info;
  EXPECT_EQ(render::near_clamp_count().load(), before + 1);
  EXPECT_FLOAT_EQ(out[2], 0.1f);
}

TEST(SoftRasterize, NoFacesGivesBackground) {
  render::RasterConfig cfg;
  cfg.height = cfg.width = 8;
  const auto out = render::unpack(render::soft_rasterize<float>({}, {}, Tensor::zeros({1, 3}), flat_texture(1, 0, 0), cfg));
  for (float v : out.silhouette.values()) EXPECT_EQ(v, 0.f);
  for (float v : out.depth.values()) EXPECT_EQ(v, 10.f);
  for (float v : out.rgb.values()) EXPECT_EQ(v, 0.5f);
}

TEST(SoftRasterize, SharpSilhouetteMatchesPointInTriangle) {
  const double x[3] = {-0.7, 0.8, 0.1}, y[3] = {-0.6, -0.3, 0.75};
  const Tensor screen = Tensor::constant({3, 3}, {float(x[0]), float(y[0]), 3, float(x[1]), float(y[1]), 3,
                                                  float(x[2]), float(y[2]), 3});
  const auto tri = single_triangle({}, {}, {});
  render::RasterConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.sigma = 1e-7;
  const auto out = render::unpack(render::soft_rasterize(tri.faces, tri.face_uv, screen, flat_texture(1, 1, 1), cfg));
  const double pixel = 2.0 / 32;
  int checked = 0;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) {
      const double px = -1 + (2.0 * c + 1) / 32, py = 1 - (2.0 * r + 1) / 32;
      double edge = 1e9;
      for (int e = 0; e < 3; ++e)
        edge = std::min(edge, segment_distance(px, py, x[e], y[e], x[(e + 1) % 3], y[(e + 1) % 3]));
      if (edge < pixel) continue;
      ++checked;
      EXPECT_EQ(out.silhouette[r * 32 + c] > 0.5f, point_in_triangle(px, py, x, y)) << r << "," << c;
    }
  EXPECT_GT(checked, 700);
}

TEST(SoftRasterize, ConstantTextureColour) {
  const auto m = mesh::icosphere(2);
  auto cfg = render::RenderConfig::square(32);
  const auto out = render::render(m, Tensor::constant({m.num_vertices(), 3}, m.flat_vertices()),
                                  flat_texture(0.2f, 0.6f, 0.9f), Tensor::constant({6}, {20, 10, 5, 0, 0, 0}), cfg);
  int covered = 0;
  const float col[3] = {0.2f, 0.6f, 0.9f};
  for (std::size_t p = 0; p < 32 * 32; ++p) {
    if (out.silhouette[p] <= 0.99f) continue;
    ++covered;
    for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(out.rgb[ch * 1024 + p], col[ch], 0.01f);
  }
  EXPECT_GT(covered, 100);
}

TEST(SoftRasterize, DepthConvergesToInterpolatedDepth) {
  // Tilted triangle; the oracle solves the plane through the screen-space vertices.
  const double x[3] = {-0.8, 0.8, 0.0}, y[3] = {-0.7, -0.6, 0.8}, z[3] = {3.0, 4.0, 5.0};
  std::vector<float> s;
  for (int i = 0; i < 3; ++i) s.insert(s.end(), {float(x[i]), float(y[i]), float(z[i])});
  const auto tri = single_triangle({}, {}, {});
  render::RasterConfig cfg;
  cfg.height = cfg.width = 16;
  cfg.sigma = 1e-7;
  cfg.gamma = 1e-6;
  const auto out = render::unpack(render::soft_rasterize(tri.faces, tri.face_uv, Tensor::constant({3, 3}, s),
                                                         flat_texture(1, 1, 1), cfg));
  Eigen::Matrix3d A;
  for (int i = 0; i < 3; ++i) A.row(i) << x[i], y[i], 1;
  const Eigen::Vector3d plane = A.colPivHouseholderQr().solve(Eigen::Vector3d(z[0], z[1], z[2]));
  int checked = 0;
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      const std::size_t p = r * 16 + c;
      if (out.silhouette[p] < 0.999f) continue;
      const double px = -1 + (2.0 * c + 1) / 16, py = 1 - (2.0 * r + 1) / 16;
      EXPECT_NEAR(out.depth[p], plane.dot(Eigen::Vector3d(px, py, 1)), 1e-3);
      ++checked;
    }
  EXPECT_GT(checked, 40);
}

TEST(SoftRasterize, NearerFaceOccludes) {
  mesh::TriMesh m;
  m.faces = {{0, 1, 2}, {3, 4, 5}};
  m.face_uv = {{mesh::Vec2{0.1f, 0.5f}, mesh::Vec2{0.1f, 0.5f}, mesh::Vec2{0.1f, 0.5f}},
               {mesh::Vec2{0.6f, 0.5f}, mesh::Vec2{0.6f, 0.5f}, mesh::Vec2{0.6f, 0.5f}}};
  const Tensor screen = Tensor::constant({6, 3}, {-0.9f, -0.9f, 4, 0.9f, -0.9f, 4, 0, 0.9f, 4,
                                                  -0.9f, -0.9f, 3, 0.9f, -0.9f, 3, 0, 0.9f, 3});
  // Left half of the texture red, right half green.
  std::vector<float> tex(3 * 4 * 8, 0.f);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) (c < 4 ? tex[r * 8 + c] : tex[32 + r * 8 + c]) = 1.f;
  render::RasterConfig cfg;
  cfg.height = cfg.width = 16;
  const auto out = render::unpack(render::soft_rasterize(m.faces, m.face_uv, screen, Tensor::constant({3, 4, 8}, tex), cfg));
  const std::size_t p = 10 * 16 + 8;
  EXPECT_GT(out.silhouette[p], 0.99f);
  EXPECT_NEAR(out.rgb[p], 0.f, 1e-3);
  EXPECT_NEAR(out.rgb[256 + p], 1.f, 1e-3);
  EXPECT_NEAR(out.depth[p], 3.f, 1e-3);
}

TEST(SoftRasterize, InteriorOccupancyMonotoneInSigma) {
  const Tensor screen = Tensor::constant({3, 3}, {-0.8f, -0.8f, 3, 0.8f, -0.8f, 3, 0, 0.8f, 3});
  const auto tri = single_triangle({}, {}, {});
  float prev = 0;
  for (double sigma : {1e-6, 1e-5, 1e-4, 1e-3, 1e-2}) {
    render::RasterConfig cfg;
    cfg.height = cfg.width = 16;
    cfg.sigma = sigma;
    const auto out = render::unpack(render::soft_rasterize(tri.faces, tri.face_uv, screen, flat_texture(1, 1, 1), cfg));
    const float centre = out.silhouette[8 * 16 + 8];
    EXPECT_GE(centre, 0.5f);
    if (sigma > 1e-6) EXPECT_LE(centre, prev + 1e-6f);  // interior occupancy shrinks toward 0.5 as edges blur
    prev = centre;
  }
}

TEST(Render, SilhouetteAndColourGradientsMatchFiniteDifferences) {
  auto tet = saor::testing::tetrahedron();
  for (auto& v : tet.vertices)
    for (auto& x : v) x *= 0.45f;
  mesh::assign_sphere_uv(tet);
  render::RenderConfig cfg = render::RenderConfig::square(16);
  cfg.raster.sigma = 1e-2;
  cfg.raster.gamma = 1e-2;
  const auto flat = tet.flat_vertices();
  const std::vector<double> s(flat.begin(), flat.end());
  ad::Rng rng(31);
  std::vector<double> tex(3 * 4 * 8), wr(3 * 16 * 16), wd(16 * 16);
  for (auto& x : tex) x = rng.uniform(0.1, 0.9);
  for (auto& x : wr) x = rng.uniform(-1, 1);
  for (auto& x : wd) x = rng.uniform(-1, 1);
  const std::vector<double> pose = {25, 10, 5, 0.05, -0.05, 0};

  auto sil = saor::testing::grad_check(
      [&](const std::vector<DTensor>& in) {
        return ad::mean(render::render(tet, in[0], DTensor::constant({3, 4, 8}, tex), DTensor::constant({6}, pose), cfg)
                            .silhouette);
      },
      {{4, 3}}, {s}, 1e-5);
  EXPECT_LT(sil.rel_error, 1e-2);
  EXPECT_GT(sil.analytic_norm, 1e-6);

  auto full = saor::testing::grad_check(
      [&](const std::vector<DTensor>& in) {
        const auto out = render::render(tet, in[0], in[1], in[2], cfg);
        return ad::add(ad::sum(ad::mul(out.rgb, DTensor::constant({3, 16, 16}, wr))),
                       ad::mean(ad::mul(out.depth, DTensor::constant({16, 16}, wd))));
      },
      {{4, 3}, {3, 4, 8}, {6}}, {s, tex, pose}, 1e-5);
  EXPECT_LT(full.rel_error, 1e-2);
}

TEST(Render, FarAwayFacesGetNoGradient) {
  mesh::TriMesh m;
  m.vertices = {{-0.3f, -0.3f, 0}, {0.3f, -0.3f, 0}, {0, 0.3f, 0}, {30, 30, 0}, {31, 30, 0}, {30, 31, 0}};
  m.faces = {{0, 1, 2}, {3, 4, 5}};
  mesh::assign_sphere_uv(m);
  const auto S = Tensor::variable({6, 3}, m.flat_vertices());
  const auto out = render::render(m, S, flat_texture(0.3f, 0.3f, 0.3f), Tensor::zeros({6}), render::RenderConfig::square(16));
  ad::backward(ad::mean(out.silhouette));
  double near_norm = 0;
  for (std::size_t e = 0; e < 9; ++e) near_norm += std::abs(S.grad()[e]);
  EXPECT_GT(near_norm, 0.0);
  for (std::size_t e = 9; e < 18; ++e) EXPECT_LE(std::abs(S.grad()[e]), 1e-8);
}

TEST(Render, BitwiseDeterministicAcrossRunsAndThreadCounts) {
  const auto m = mesh::icosphere(2);
  const auto cfg = render::RenderConfig::square(32);
  ad::Rng rng(1);
  std::vector<float> tex(3 * 8 * 16);
  for (auto& x : tex) x = static_cast<float>(rng.uniform());
  auto run = [&] {
    const auto S = Tensor::variable({m.num_vertices(), 3}, m.flat_vertices());
    const auto out = render::render(m, S, Tensor::constant({3, 8, 16}, tex), Tensor::constant({6}, {30, 5, 0, 0, 0, 0}), cfg);
    ad::backward(ad::add(ad::mean(out.rgb), ad::mean(out.silhouette)));
    std::vector<float> all(out.rgb.values().begin(), out.rgb.values().end());
    all.insert(all.end(), S.grad().begin(), S.grad().end());
    return all;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  setenv("SAOR_THREADS", "1", 1);
  const auto b = run();
  unsetenv("SAOR_THREADS");
  EXPECT_EQ(a, b);
}

TEST(ImageIo, PngAndPfmRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path();
  io::Image im(3, 5, 7);
  for (std::size_t i = 0; i < im.data.size(); ++i) im.data[i] = static_cast<float>(i % 256) / 255.f;
  io::write_png(im, (dir / "saor_rt.png").string());
  const auto back = io::read_png((dir / "saor_rt.png").string());
  ASSERT_EQ(back.data.size(), im.data.size());
  for (std::size_t i = 0; i < im.data.size(); ++i) EXPECT_NEAR(back.data[i], im.data[i], 1e-6);

  io::Image d(1, 4, 6);
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = 0.25f * static_cast<float>(i) - 1.f;
  io::write_pfm(d, (dir / "saor_rt.pfm").string());
  const auto dback = io::read_pfm((dir / "saor_rt.pfm").string());
  EXPECT_EQ(dback.data, d.data);
  EXPECT_THROW(io::read_png((dir / "missing.png").string()), IoError);
}
