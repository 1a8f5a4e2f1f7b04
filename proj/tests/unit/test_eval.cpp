#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "saor/eval/eval.hpp"
#include "support/synthetic_oracle.hpp"

using namespace saor;
namespace fs = std::filesystem;

namespace {

std::vector<float> square_mask(std::size_t s, std::size_t x0, std::size_t y0, std::size_t side) {
  std::vector<float> m(s * s, 0.f);
  for (std::size_t y = y0; y < y0 + side; ++y)
    for (std::size_t x = x0; x < x0 + side; ++x) m[y * s + x] = 1.f;
  return m;
}

eval::SyntheticSpec small_spec() {
  eval::SyntheticSpec s;
  s.render_size = 80;
  return s;
}

}  // namespace

TEST(MaskIou, Cases) {
  const auto a = square_mask(16, 0, 0, 8);
  EXPECT_DOUBLE_EQ(eval::mask_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(eval::mask_iou(a, square_mask(16, 8, 8, 8)), 0.0);
  // Unit squares overlapping by half: 32 / 96.
  const auto b = square_mask(16, 4, 0, 8);
  EXPECT_DOUBLE_EQ(eval::mask_iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(eval::mask_iou(b, a), eval::mask_iou(a, b));
  const std::vector<float> empty(256, 0.f);
  EXPECT_DOUBLE_EQ(eval::mask_iou(empty, empty), 1.0);
  EXPECT_THROW(eval::mask_iou(a, std::vector<float>(10)), ShapeError);
}

TEST(Pck, HandBuilt) {
  std::vector<eval::PixelPoint> gt = {{10, 10, true}, {20, 20, true}, {30, 30, true}, {40, 40, true}};
  EXPECT_DOUBLE_EQ(eval::pck(gt, gt, 50).pck, 1.0);
  // Radius 0.1 * 50 = 5 px: three within, one at 6 px.
  auto pred = gt;
  pred[0].x += 3;
  pred[1].y -= 4.9;
  pred[3].x += 6;
  const auto r = eval::pck(pred, gt, 50);
  EXPECT_DOUBLE_EQ(r.pck, 0.75);
  EXPECT_EQ(r.evaluated, 4u);
  // A missing prediction is a miss; an invisible ground truth is skipped.
  pred[0].valid = false;
  EXPECT_DOUBLE_EQ(eval::pck(pred, gt, 50).pck, 0.5);
  gt[3].valid = false;
  EXPECT_DOUBLE_EQ(eval::pck(pred, gt, 50).pck, 2.0 / 3.0);
  std::vector<eval::PixelPoint> none(2);
  EXPECT_THROW(eval::pck(none, none, 50), std::invalid_argument);
}

TEST(Pck, MonotoneInThreshold) {
  ad::Rng rng(3);
  std::vector<eval::PixelPoint> gt, pred;
  for (int i = 0; i < 50; ++i) {
    gt.push_back({rng.uniform(0, 64), rng.uniform(0, 64), true});
    pred.push_back({gt.back().x + rng.uniform(-10, 10), gt.back().y + rng.uniform(-10, 10), true});
  }
  double prev = 0;
  for (double t = 0.0; t <= 0.3; t += 0.01) {
    const double v = eval::pck(pred, gt, 64, t).pck;
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
}

TEST(Quadruped, ClosedSymmetricOutward) {
  const auto spec = small_spec();
  const auto q = eval::build_quadruped(spec, 15, -10);
  for (const auto& [edge, fs] : mesh::edge_faces(q.mesh)) ASSERT_EQ(fs.size(), 2u);
  const auto sym = mesh::symmetry_pairs(q.mesh, 1e-5);
  // Signed volume of every closed component adds up positive.
  double vol = 0;
  for (const auto& f : q.mesh.faces) {
    const auto &a = q.mesh.vertices[f[0]], &b = q.mesh.vertices[f[1]], &c = q.mesh.vertices[f[2]];
    vol += (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])) / 6.0;
  }
  EXPECT_GT(vol, 0.2);  // body ellipsoid alone is about 0.2
  // Left/right feet mirror each other in z.
  const auto& kv = q.keypoint_vertices;
  for (std::size_t pair : {2u, 4u}) {
    const auto& l = q.mesh.vertices[kv[pair]];
    const auto& r = q.mesh.vertices[kv[pair + 1]];
    EXPECT_FLOAT_EQ(l[0], r[0]);
    EXPECT_FLOAT_EQ(l[1], r[1]);
    EXPECT_FLOAT_EQ(l[2], -r[2]);
    EXPECT_EQ(sym.mirror[kv[pair]], kv[pair + 1]);
  }
  EXPECT_EQ(q.keypoint_vertices.size(), eval::keypoint_names().size());
}

TEST(Synthetic, SweepMasksAndDepth) {
  const auto spec = small_spec();
  const auto dir = fs::temp_directory_path() / "saor_eval_synth";
  fs::remove_all(dir);
  const std::size_t count = 12;
  const auto manifest = eval::generate_synthetic(spec, count, 5, dir.string());
  ASSERT_EQ(manifest.entries.size(), count);
  double lo = 360, hi = -360;
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = eval::synthetic_sample(spec, 5, i, count);
    lo = std::min(lo, s.pose.azimuth);
    hi = std::max(hi, s.pose.azimuth);
    const auto r = eval::render_synthetic(s, spec);
    double area = 0;
    for (float m : r.mask.data) area += m;
    EXPECT_GT(area, 50.0) << "sample " << i;
    const auto depth = io::read_pfm((dir / manifest.entries[i].depth).string());
    ASSERT_EQ(depth.data.size(), r.depth.data.size());
    for (std::size_t p = 0; p < depth.data.size(); ++p) ASSERT_EQ(depth.data[p], r.depth.data[p]);
    // Inside the mask the depth is the surface, outside it is the far plane.
    for (std::size_t p = 0; p < depth.data.size(); ++p) {
      if (r.mask.data[p] > 0.5f) {
        ASSERT_LT(depth.data[p], 8.f);
      }
    }
  }
  EXPECT_LT(lo, -150);
  EXPECT_GT(hi, 150);
  // Filters see a valid detection once the box is away from the border.
  const auto rec = data::load_sample(manifest, manifest.entries[0], 64);
  EXPECT_TRUE(rec.usable);
  EXPECT_EQ(rec.keypoints.size(), eval::keypoint_names().size());
}

TEST(Transfer, IdentityAndOcclusion) {
  const auto spec = small_spec();
  const auto s = eval::synthetic_sample(spec, 2, 3, 12);
  const auto r = eval::render_synthetic(s, spec);
  const auto pred = eval::transfer_keypoints(r.keypoints, r.projected, r.projected);
  std::size_t visible = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (!r.keypoints[k].visible) {
      EXPECT_FALSE(pred[k].valid);
      continue;
    }
    ++visible;
    ASSERT_TRUE(pred[k].valid);
    EXPECT_LE(std::hypot(pred[k].x - r.keypoints[k].x, pred[k].y - r.keypoints[k].y), 1.0);
  }
  EXPECT_GT(visible, 0u);

  // Off-surface query with nothing visible nearby is untransferable.
  std::vector<data::Keypoint> far = {{"x", -100.0, -100.0, true}};
  EXPECT_FALSE(eval::transfer_keypoints(far, r.projected, r.projected)[0].valid);
}

TEST(Transfer, HiddenVertexIsSkipped) {
  // Two parallel quads: the back one is hidden behind the front one.
  mesh::TriMesh m;
  m.vertices = {{-0.5f, -0.5f, 0}, {0.5f, -0.5f, 0}, {0.5f, 0.5f, 0}, {-0.5f, 0.5f, 0},
                {-0.5f, -0.5f, 1}, {0.5f, -0.5f, 1}, {0.5f, 0.5f, 1}, {-0.5f, 0.5f, 1}};
  m.faces = {{0, 1, 2}, {0, 2, 3}, {4, 5, 6}, {4, 6, 7}};
  const auto S = ad::Tensor::constant({8, 3}, m.flat_vertices());
  const auto screen = render::view_project(S, render::pose_tensor<float>({}), {});
  const auto shape = eval::project_shape(m.faces, screen.values(), 64);
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(shape.visible[std::size_t(i)]);
  // Back corners project inside the front quad and are occluded.
  for (int i = 4; i < 8; ++i) EXPECT_FALSE(shape.visible[std::size_t(i)]);
}

TEST(Transfer, GroundTruthOracle) {
  const auto dir = fs::temp_directory_path() / "saor_eval_oracle";
  fs::remove_all(dir);
  const auto pairs = saor::testing::oracle_transfer(small_spec(), 17, 8, dir.string(), 64);
  for (const auto& p : pairs) EXPECT_DOUBLE_EQ(p.result.pck, 1.0) << p.source << " -> " << p.target;
}
