#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "saor/articulate/articulate.hpp"
#include "saor/diffcore/image_ops.hpp"
#include "saor/diffcore/param_store.hpp"
#include "saor/mesh/trimesh.hpp"
#include "saor/render/camera.hpp"

namespace saor::nets {

using ad::Tensor;

struct NetConfig {
  std::size_t image_size = 128;
  int subdivisions = 4;
  std::size_t num_parts = 12;
  std::size_t num_cameras = 4;
  std::size_t feature_dim = 512;
  std::size_t hidden_dim = 512;  // point / feature embedding width of f_d and f_a
  std::size_t mlp_dim = 128;
  std::size_t pose_dim = 128;
  std::size_t encoder_width = 64;  // stem channels; stages use 1x, 2x, 4x, 8x
  std::vector<std::size_t> texture_channels = {512, 256, 128, 64, 32, 16};
  std::size_t texture_height = 64;
  std::size_t texture_width = 128;
  bool articulation_enabled = true;
};

/// Decoded camera hypotheses. raw and decoded are [C,6]; scores are softmax(logits).
struct PoseOutput {
  Tensor decoded;
  Tensor logits;  // [C]
  Tensor scores;  // [C]
  std::size_t chosen = 0;

  Tensor hypothesis(std::size_t c) const { return ad::reshape(ad::slice_rows(decoded, c, c + 1), {6}); }
  Tensor chosen_pose() const { return hypothesis(chosen); }
};

inline constexpr double kAzimuthRange = 180.0;
inline constexpr double kElevationCentre = 7.5;
inline constexpr double kElevationHalfRange = 22.5;
inline constexpr double kRollRange = 30.0;
inline constexpr double kTranslationRange = 0.5;

/// raw [C,6] -> azimuth ±180°, elevation [−15°, 30°], roll ±30°, translation ±0.5.
inline Tensor decode_pose(const Tensor& raw) {
  const auto scale = Tensor::constant({6}, {float(kAzimuthRange), float(kElevationHalfRange), float(kRollRange),
                                            float(kTranslationRange), float(kTranslationRange),
                                            float(kTranslationRange)});
  const auto offset = Tensor::constant({6}, {0.f, float(kElevationCentre), 0.f, 0.f, 0.f, 0.f});
  return ad::add(ad::mul(ad::tanh(raw), scale), offset);
}

/// The five heads over one parameter store. Parameter names carry the head
/// prefix: enc., def., art., tex., pose.
class NetBundle {
 public:
  NetBundle(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    canonical_ = mesh::icosphere(cfg_.subdivisions);
    symmetry_ = mesh::symmetry_pairs(canonical_);
    build_symmetry_gather();
    canonical_tensor_ = Tensor::constant({canonical_.num_vertices(), 3}, canonical_.flat_vertices());
    std::vector<std::size_t> pos(symmetry_.positive_set.begin(), symmetry_.positive_set.end());
    canonical_positive_ = ad::gather_rows(canonical_tensor_, pos);
    ad::Rng rng(seed);
    build_encoder(rng);
    build_deform(rng);
    build_articulation(rng);
    build_texture(rng);
    build_pose(rng);
  }

  const NetConfig& config() const { return cfg_; }
  ad::ParamStore<float>& store() { return store_; }
  const ad::ParamStore<float>& store() const { return store_; }
  const mesh::TriMesh& canonical() const { return canonical_; }
  const Tensor& canonical_vertices() const { return canonical_tensor_; }
  const mesh::SymmetryMap& symmetry() const { return symmetry_; }
  std::size_t num_vertices() const { return canonical_.num_vertices(); }
  bool articulation_enabled() const { return articulation_enabled_; }
  void set_articulation_enabled(bool on) { articulation_enabled_ = on; }

  /// φ_im = f_enc(I); image [3,s,s] -> [1,D].
  Tensor encode(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size) {
      throw ShapeError("encode expects [3," + std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                       "], got " + ad::to_string(image.shape()));
    }
    auto x = ad::relu(conv("enc.stem", image));
    for (int s = 0; s < 4; ++s) {
      const std::string p = "enc.s" + std::to_string(s);
      x = ad::relu(conv(p + ".down", ad::avg_pool2(x)));
      const auto h = ad::relu(conv(p + ".res1", x));
      x = ad::relu(ad::add(x, conv(p + ".res2", h)));
    }
    return linear("enc.fc", ad::global_avg_pool(x));
  }

  /// S' = S° + f_d(S°, φ), mirrored across z = 0.
  Tensor deform(const Tensor& phi) const {
    const auto h = trunk("def", canonical_positive_, phi);
    const auto disp_pos = linear("def.out", h);  // [P,3]
    const auto disp = ad::mul(ad::gather_rows(disp_pos, gather_), sign_mask_);
    return ad::add(canonical_tensor_, disp);
  }

  /// W = softmax(f_a(S°, φ)) and decoded per-part transforms.
  articulate::Articulation articulation(const Tensor& phi) const {
    const std::size_t N = num_vertices(), K = cfg_.num_parts;
    if (!articulation_enabled_) return articulate::identity<float>(N, K);
    const auto logits = linear("art.out", trunk("art", canonical_tensor_, phi));
    const auto W = ad::softmax(logits, 1);
    const auto raw = ad::reshape(linear("art.pi", phi), {K, 9});
    return articulate::decode(W, raw);
  }

  /// UV texture [3, th, tw] in [0,1].
  Tensor texture(const Tensor& phi) const {
    const std::size_t c0 = cfg_.texture_channels.front();
    auto x = ad::reshape(ad::relu(linear("tex.fc", phi)), {c0, 1, 1});
    x = ad::upsample_nearest2(ad::upsample_nearest2(x));
    for (std::size_t s = 1; s < cfg_.texture_channels.size(); ++s) {
      x = ad::relu(conv("tex.up" + std::to_string(s), ad::upsample_nearest2(x)));
    }
    x = ad::sigmoid(conv("tex.out", x));
    if (x.dim(1) == cfg_.texture_height && x.dim(2) == cfg_.texture_width) return x;
    return ad::resize_bilinear(x, cfg_.texture_height, cfg_.texture_width);
  }

  PoseOutput pose(const Tensor& phi) const {
    const std::size_t C = cfg_.num_cameras;
    const auto h = ad::relu(linear("pose.fc", phi));
    PoseOutput out;
    out.decoded = decode_pose(ad::reshape(linear("pose.heads", h), {C, 6}));
    out.logits = ad::reshape(linear("pose.score", h), {C});
    out.scores = ad::softmax(out.logits, 0);
    const auto s = out.scores.values();
    out.chosen = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
    return out;
  }

 private:
  Tensor linear(const std::string& name, const Tensor& x) const {
    return ad::add(ad::matmul(x, store_.get(name + ".w")), store_.get(name + ".b"));
  }

  Tensor conv(const std::string& name, const Tensor& x) const {
    return ad::conv2d(x, store_.get(name + ".w"), store_.get(name + ".b"));
  }

  /// relu(S W_x + φ W_z) -> relu(·128) -> relu(128·128).
  Tensor trunk(const std::string& p, const Tensor& points, const Tensor& phi) const {
    const auto lx = linear(p + ".point", points);
    const auto lz = linear(p + ".feat", phi);
    auto h = ad::relu(ad::add(lx, lz));
    h = ad::relu(linear(p + ".fc1", h));
    return ad::relu(linear(p + ".fc2", h));
  }

  void add_linear(const std::string& name, std::size_t in, std::size_t out, ad::Rng& rng, bool zero = false) {
    if (zero) {
      store_.add_zeros(name + ".w", {in, out});
    } else {
      store_.add_kaiming(name + ".w", {in, out}, in, rng);
    }
    store_.add_zeros(name + ".b", {out});
  }

  void add_conv(const std::string& name, std::size_t in, std::size_t out, ad::Rng& rng) {
    store_.add_kaiming(name + ".w", {out, in, 3, 3}, in * 9, rng);
    store_.add_zeros(name + ".b", {out});
  }

  void build_encoder(ad::Rng& rng) {
    const std::size_t w = cfg_.encoder_width;
    add_conv("enc.stem", 3, w, rng);
    std::size_t c = w;
    for (int s = 0; s < 4; ++s) {
      const std::size_t out = w << s;
      const std::string p = "enc.s" + std::to_string(s);
      add_conv(p + ".down", c, out, rng);
      add_conv(p + ".res1", out, out, rng);
      add_conv(p + ".res2", out, out, rng);
      c = out;
    }
    add_linear("enc.fc", c, cfg_.feature_dim, rng);
  }

  void add_trunk(const std::string& p, ad::Rng& rng) {
    add_linear(p + ".point", 3, cfg_.hidden_dim, rng);
    add_linear(p + ".feat", cfg_.feature_dim, cfg_.hidden_dim, rng);
    add_linear(p + ".fc1", cfg_.hidden_dim, cfg_.mlp_dim, rng);
    add_linear(p + ".fc2", cfg_.mlp_dim, cfg_.mlp_dim, rng);
  }

  void build_deform(ad::Rng& rng) {
    add_trunk("def", rng);
    add_linear("def.out", cfg_.mlp_dim, 3, rng, true);
  }

  void build_articulation(ad::Rng& rng) {
    add_trunk("art", rng);
    add_linear("art.out", cfg_.mlp_dim, cfg_.num_parts, rng);
    add_linear("art.pi", cfg_.feature_dim, cfg_.num_parts * 9, rng, true);
  }

  void build_texture(ad::Rng& rng) {
    const auto& ch = cfg_.texture_channels;
    if (ch.size() < 2) throw std::invalid_argument("texture_channels needs at least two entries");
    add_linear("tex.fc", cfg_.feature_dim, ch[0], rng);
    for (std::size_t s = 1; s < ch.size(); ++s) add_conv("tex.up" + std::to_string(s), ch[s - 1], ch[s], rng);
    add_conv("tex.out", ch.back(), 3, rng);
  }

  void build_pose(ad::Rng& rng) {
    add_linear("pose.fc", cfg_.feature_dim, cfg_.pose_dim, rng);
    add_linear("pose.heads", cfg_.pose_dim, cfg_.num_cameras * 6, rng);
    add_linear("pose.score", cfg_.pose_dim, cfg_.num_cameras, rng);
  }

  void build_symmetry_gather() {
    const std::size_t N = canonical_.num_vertices();
    std::vector<std::size_t> slot(N, SIZE_MAX);
    for (std::size_t p = 0; p < symmetry_.positive_set.size(); ++p) slot[symmetry_.positive_set[p]] = p;
    gather_.resize(N);
    std::vector<float> mask(N * 3, 1.f);
    for (std::size_t i = 0; i < N; ++i) {
      if (slot[i] != SIZE_MAX) {
        gather_[i] = slot[i];
        if (symmetry_.on_plane[i]) mask[i * 3 + 2] = 0.f;
      } else {
        gather_[i] = slot[symmetry_.mirror[i]];
        mask[i * 3 + 2] = -1.f;
      }
    }
    sign_mask_ = Tensor::constant({N, 3}, std::move(mask));
  }

  NetConfig cfg_;
  bool articulation_enabled_ = true;
  mesh::TriMesh canonical_;
  mesh::SymmetryMap symmetry_;
  Tensor canonical_tensor_, canonical_positive_, sign_mask_;
  std::vector<std::size_t> gather_;
  ad::ParamStore<float> store_;
};

}  // namespace saor::nets
