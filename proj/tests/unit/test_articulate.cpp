#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "saor/articulate/articulate.hpp"
#include "saor/diffcore/param_store.hpp"
#include "support/gradcheck.hpp"
#include "support/meshes.hpp"

using namespace saor;
using ad::Tensor;
using saor::testing::DTensor;
using DArt = articulate::BasicArticulation<double>;

namespace {

std::vector<double> random_values(ad::Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

std::vector<double> random_rows_simplex(ad::Rng& rng, std::size_t N, std::size_t K) {
  std::vector<double> w(N * K);
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += w[i * K + k] = rng.uniform(0.05, 1.0);
    for (std::size_t k = 0; k < K; ++k) w[i * K + k] /= s;
  }
  return w;
}

// Direct double loop over the part-center and blend formulas.
std::vector<double> lbs_oracle(const std::vector<double>& s, const std::vector<double>& w,
                               const std::vector<double>& z, const std::vector<double>& r,
                               const std::vector<double>& t, std::size_t N, std::size_t K) {
  std::vector<double> c(K * 3, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double mass = 0;
    for (std::size_t i = 0; i < N; ++i) {
      mass += w[i * K + k];
      for (int a = 0; a < 3; ++a) c[k * 3 + a] += s[i * 3 + a] * w[i * K + k];
    }
    for (int a = 0; a < 3; ++a) c[k * 3 + a] /= mass;
  }
  std::vector<double> out(N * 3, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < K; ++k)
      for (int a = 0; a < 3; ++a) {
        double q = t[k * 3 + a];
        for (int b = 0; b < 3; ++b) q += r[k * 9 + a * 3 + b] * (s[i * 3 + b] - c[k * 3 + b]);
        out[i * 3 + a] += w[i * K + k] * z[k * 3 + a] * q;
      }
  return out;
}

std::vector<double> random_rotations(ad::Rng& rng, std::size_t K) {
  std::vector<double> r;
  for (std::size_t k = 0; k < K; ++k) {
    const auto R = euler_zyx(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    r.insert(r.end(), R.begin(), R.end());
  }
  return r;
}

DArt make_art(const std::vector<double>& w, const std::vector<double>& z, const std::vector<double>& r,
              const std::vector<double>& t, std::size_t N, std::size_t K) {
  return {DTensor::constant({N, K}, w), DTensor::constant({K, 3}, z), DTensor::constant({K, 3, 3}, r),
          DTensor::constant({K, 3}, t)};
}

}  // namespace

TEST(PartCenters, TrivialCases) {
  const Tensor S = Tensor::constant({3, 3}, {0, 0, 0, 3, 0, 0, 0, 6, 3});
  const auto c = articulate::part_centers(S, Tensor::full({3, 1}, 1.f));
  EXPECT_FLOAT_EQ(c[0], 1.f);
  EXPECT_FLOAT_EQ(c[1], 2.f);
  EXPECT_FLOAT_EQ(c[2], 1.f);

  const Tensor two = Tensor::constant({2, 3}, {0, 0, 0, 2, 0, 0});
  const auto hard = articulate::part_centers(two, Tensor::constant({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(std::vector<float>(hard.values().begin(), hard.values().end()), (std::vector<float>{0, 0, 0, 2, 0, 0}));
  EXPECT_THROW(articulate::part_centers(two, Tensor::constant({2, 2}, {1, 0, 1, 0})), NumericError);
}

TEST(PartCenters, MatchesLoopOracleAndPermutationEquivariance) {
  ad::Rng rng(11);
  const std::size_t N = 20, K = 3;
  const auto s = random_values(rng, N * 3, -1, 1);
  const auto w = random_rows_simplex(rng, N, K);
  const auto c = articulate::part_centers(DTensor::constant({N, 3}, s), DTensor::constant({N, K}, w));
  for (std::size_t k = 0; k < K; ++k) {
    double mass = 0, acc[3] = {0, 0, 0};
    for (std::size_t i = 0; i < N; ++i) {
      mass += w[i * K + k];
      for (int a = 0; a < 3; ++a) acc[a] += s[i * 3 + a] * w[i * K + k];
    }
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(c[k * 3 + a], acc[a] / mass, 1e-6);
  }
  const std::size_t perm[3] = {2, 0, 1};
  std::vector<double> wp(N * K);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < K; ++k) wp[i * K + k] = w[i * K + perm[k]];
  const auto cp = articulate::part_centers(DTensor::constant({N, 3}, s), DTensor::constant({N, K}, wp));
  for (std::size_t k = 0; k < K; ++k)
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(cp[k * 3 + a], c[perm[k] * 3 + a], 1e-12);
}

TEST(Lbs, IdentityTransformsGiveLiteralValue) {
  ad::Rng rng(5);
  const std::size_t N = 30, K = 4;
  const auto s = random_values(rng, N * 3, -1, 1);
  const auto w = random_rows_simplex(rng, N, K);
  auto A = articulate::identity<double>(N, K);
  A.W = DTensor::constant({N, K}, w);
  const DTensor S = DTensor::constant({N, 3}, s);
  const auto out = articulate::lbs_apply(S, A);
  const auto c = articulate::part_centers(S, A.W);
  for (std::size_t i = 0; i < N; ++i)
    for (int a = 0; a < 3; ++a) {
      double wc = 0;
      for (std::size_t k = 0; k < K; ++k) wc += w[i * K + k] * c[k * 3 + a];
      EXPECT_NEAR(out[i * 3 + a], s[i * 3 + a] - wc, 1e-12);
    }
}

TEST(Lbs, SinglePartTranslationRestoresCentroid) {
  const auto cube = saor::testing::unit_cube();
  const Tensor S = Tensor::constant({8, 3}, cube.flat_vertices());
  auto A = articulate::identity<float>(8, 1);
  A.translations = Tensor::constant({1, 3}, {0.5f, 0.5f, 0.5f});
  const auto out = articulate::lbs_apply(S, A);
  for (std::size_t e = 0; e < out.size(); ++e) EXPECT_NEAR(out[e], S[e], 1e-6);
}

TEST(Lbs, CubeHardSplitNinetyDegrees) {
  const auto cube = saor::testing::unit_cube();
  const std::size_t N = 8, K = 2;
  const auto flat = cube.flat_vertices();
  std::vector<double> s(flat.begin(), flat.end());
  std::vector<double> w(N * K);
  for (std::size_t i = 0; i < N; ++i) w[i * K + (s[i * 3] < 0.5 ? 0 : 1)] = 1.0;
  const std::vector<double> z = {1, 1, 1, 1, 1, 1};
  std::vector<double> r = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  const auto rz = rot_z(std::numbers::pi / 2);
  r.insert(r.end(), rz.begin(), rz.end());
  const std::vector<double> t = {0, 0, 0, 0.1, 0.2, 0.3};
  const auto out = articulate::lbs_apply(DTensor::constant({N, 3}, s), make_art(w, z, r, t, N, K));
  const auto ref = lbs_oracle(s, w, z, r, t, N, K);
  for (std::size_t e = 0; e < ref.size(); ++e) EXPECT_NEAR(out[e], ref[e], 1e-6);
}

TEST(Lbs, RandomInstancesMatchLoopOracle) {
  ad::Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + rng.below(50), K = 1 + rng.below(5);
    const auto s = random_values(rng, N * 3, -1, 1);
    const auto w = random_rows_simplex(rng, N, K);
    const auto z = random_values(rng, K * 3, 0.5, 2);
    const auto r = random_rotations(rng, K);
    const auto t = random_values(rng, K * 3, -0.3, 0.3);
    const auto out = articulate::lbs_apply(DTensor::constant({N, 3}, s), make_art(w, z, r, t, N, K));
    const auto ref = lbs_oracle(s, w, z, r, t, N, K);
    for (std::size_t e = 0; e < ref.size(); ++e) EXPECT_NEAR(out[e], ref[e], 1e-6);
  }
}

TEST(Lbs, GlobalRotationEquivariance) {
  ad::Rng rng(8);
  const std::size_t N = 40, K = 4;
  const auto s = random_values(rng, N * 3, -1, 1);
  const auto w = random_rows_simplex(rng, N, K);
  const std::vector<double> z(K * 3, 1.0);  // isotropic scales commute with R
  const auto r = random_rotations(rng, K);
  const auto t = random_values(rng, K * 3, -0.3, 0.3);
  const auto G = euler_zyx(0.4, -0.7, 1.1);

  std::vector<double> s2(N * 3), r2(K * 9), t2(K * 3);
  for (std::size_t i = 0; i < N; ++i)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) s2[i * 3 + a] += G[a * 3 + b] * s[i * 3 + b];
  Mat3<double> Gt;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) Gt[a * 3 + b] = G[b * 3 + a];
  for (std::size_t k = 0; k < K; ++k) {
    Mat3<double> rk;
    std::copy_n(r.begin() + k * 9, 9, rk.begin());
    const auto conj = matmul3(G, matmul3(rk, Gt));
    std::copy(conj.begin(), conj.end(), r2.begin() + k * 9);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) t2[k * 3 + a] += G[a * 3 + b] * t[k * 3 + b];
  }
  const auto out = articulate::lbs_apply(DTensor::constant({N, 3}, s), make_art(w, z, r, t, N, K));
  const auto out2 = articulate::lbs_apply(DTensor::constant({N, 3}, s2), make_art(w, z, r2, t2, N, K));
  for (std::size_t i = 0; i < N; ++i)
    for (int a = 0; a < 3; ++a) {
      double ref = 0;
      for (int b = 0; b < 3; ++b) ref += G[a * 3 + b] * out[i * 3 + b];
      EXPECT_NEAR(out2[i * 3 + a], ref, 1e-5);
    }
}

TEST(Lbs, GradientsMatchFiniteDifferences) {
  ad::Rng rng(13);
  const std::size_t N = 12, K = 3;
  const auto s = random_values(rng, N * 3, -1, 1);
  const auto logits = random_values(rng, N * K, -1, 1);
  const auto raw = random_values(rng, K * 9, -0.5, 0.5);
  const auto proj = random_values(rng, N * 3, -1, 1);
  auto r = saor::testing::grad_check(
      [&](const std::vector<DTensor>& in) {
        const auto A = articulate::decode(ad::softmax(in[1], 1), in[2]);
        return ad::sum(ad::mul(articulate::lbs_apply(in[0], A), DTensor::constant({N, 3}, proj)));
      },
      {{N, 3}, {N, K}, {K, 9}}, {s, logits, raw}, 1e-5);
  EXPECT_LT(r.rel_error, 1e-3);
  EXPECT_GT(r.analytic_norm, 0.0);
}

TEST(Decode, ZeroRawIsIdentityAndRangesHold) {
  const std::size_t K = 12;
  const auto A = articulate::decode(Tensor::full({5, K}, 1.f / K), Tensor::zeros({K, 9}));
  for (std::size_t k = 0; k < K; ++k)
    for (int a = 0; a < 3; ++a) {
      EXPECT_FLOAT_EQ(A.scales[k * 3 + a], 1.f);
      EXPECT_FLOAT_EQ(A.translations[k * 3 + a], 0.f);
      for (int b = 0; b < 3; ++b) EXPECT_FLOAT_EQ(A.rotations[k * 9 + a * 3 + b], a == b ? 1.f : 0.f);
    }
  ad::Rng rng(4);
  std::vector<float> raw(K * 9);
  for (auto& x : raw) x = static_cast<float>(rng.uniform(-50, 50));
  const auto B = articulate::decode(Tensor::full({5, K}, 1.f / K), Tensor::constant({K, 9}, raw));
  for (float v : B.scales.values()) {
    EXPECT_GE(v, std::exp(-0.7f) - 1e-6f);
    EXPECT_LE(v, std::exp(0.7f) + 1e-6f);
  }
  for (float v : B.translations.values()) EXPECT_LE(std::abs(v), 0.3f + 1e-6f);
  for (std::size_t k = 0; k < K; ++k) {
    Mat3<double> R;
    for (int e = 0; e < 9; ++e) R[e] = B.rotations[k * 9 + e];
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        double d = 0;
        for (int e = 0; e < 3; ++e) d += R[a * 3 + e] * R[b * 3 + e];
        EXPECT_NEAR(d, a == b ? 1.0 : 0.0, 1e-5);
      }
    const double det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
                       R[2] * (R[3] * R[7] - R[4] * R[6]);
    EXPECT_NEAR(det, 1.0, 1e-5);
  }
}

TEST(Swap, SameShapeEqualsLbsAndGradientsReachBoth) {
  ad::Rng rng(17);
  const std::size_t N = 15, K = 3;
  const auto s = random_values(rng, N * 3, -1, 1);
  const auto w = random_rows_simplex(rng, N, K);
  const auto raw = random_values(rng, K * 9, -0.5, 0.5);
  const auto A = articulate::decode(DTensor::constant({N, K}, w), DTensor::constant({K, 9}, raw));
  const DTensor S = DTensor::constant({N, 3}, s);
  const auto a = articulate::swap_shape(S, A);
  const auto b = articulate::lbs_apply(S, A);
  for (std::size_t e = 0; e < a.size(); ++e) EXPECT_EQ(a[e], b[e]);

  const auto donor = DTensor::variable({N, 3}, random_values(rng, N * 3, -1, 1));
  const auto raw_v = DTensor::variable({K, 9}, raw);
  const auto logits = DTensor::variable({N, K}, random_values(rng, N * K, -1, 1));
  const auto out = articulate::swap_shape(donor, articulate::decode(ad::softmax(logits, 1), raw_v));
  ad::backward(ad::sum(ad::square(out)));
  const auto norm = [](std::span<const double> g) {
    double n = 0;
    for (double x : g) n += x * x;
    return n;
  };
  EXPECT_GT(norm(donor.grad()), 0.0);
  EXPECT_GT(norm(raw_v.grad()), 0.0);
  EXPECT_GT(norm(logits.grad()), 0.0);

  const auto I = articulate::identity<double>(N, K);
  EXPECT_THROW(articulate::swap_shape(DTensor::zeros({N + 1, 3}), I), MeshError);
}

TEST(HardParts, ArgmaxWithLowestIndexTies) {
  const Tensor W = Tensor::constant({3, 3}, {0, 1, 0, 0.25f, 0.25f, 0.5f, 1.f / 3, 1.f / 3, 1.f / 3});
  EXPECT_EQ(articulate::hard_parts(W), (std::vector<std::uint32_t>{1, 2, 0}));
}
