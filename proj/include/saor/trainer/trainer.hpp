#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "saor/articulate/articulate.hpp"
#include "saor/data/data.hpp"
#include "saor/diffcore/checkpoint.hpp"
#include "saor/losses/losses.hpp"
#include "saor/mesh/geometry.hpp"
#include "saor/nets/nets.hpp"
#include "saor/render/render.hpp"

namespace saor::trainer {

using ad::Tensor;
using json = nlohmann::json;

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch = 96;
  double lr = 1e-4;
  std::size_t image = 128;
  std::size_t articulation_start_epoch = 100;
  std::uint64_t seed = 0;
  losses::LossWeights weights;
  std::string finetune_from;

  // architecture
  int subdivisions = 4;
  std::size_t parts = 12;
  std::size_t cameras = 4;
  std::size_t feature_dim = 512;
  std::size_t hidden_dim = 512;
  std::size_t mlp_dim = 128;
  std::size_t pose_dim = 128;
  std::size_t encoder_width = 64;
  std::vector<std::size_t> texture_channels = {512, 256, 128, 64, 32, 16};
  std::size_t texture_height = 64;
  std::size_t texture_width = 128;

  // renderer and losses
  double sigma = 1e-4;
  double gamma = 1e-4;
  std::size_t max_faces = 16;
  bool aligned_depth = true;
  bool perceptual = true;
  std::size_t pose_downsample = 4;

  // bookkeeping
  std::size_t clusters = 10;
  std::size_t checkpoint_every = 25;
  std::size_t steps_per_epoch = 0;  // 0: ceil(records / batch)
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(trim(item)));
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("not a boolean: " + v);
}

}  // namespace detail

/// Sets one key. Unknown keys and malformed values throw std::invalid_argument.
inline void set_option(TrainConfig& c, const std::string& key, const std::string& value) {
  auto& w = c.weights;
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"epochs", [&](const std::string& v) { c.epochs = std::stoul(v); }},
      {"batch", [&](const std::string& v) { c.batch = std::stoul(v); }},
      {"lr", [&](const std::string& v) { c.lr = std::stod(v); }},
      {"image", [&](const std::string& v) { c.image = std::stoul(v); }},
      {"articulation_start_epoch", [&](const std::string& v) { c.articulation_start_epoch = std::stoul(v); }},
      {"seed", [&](const std::string& v) { c.seed = std::stoull(v); }},
      {"finetune_from", [&](const std::string& v) { c.finetune_from = v; }},
      {"subdivisions", [&](const std::string& v) { c.subdivisions = std::stoi(v); }},
      {"parts", [&](const std::string& v) { c.parts = std::stoul(v); }},
      {"cameras", [&](const std::string& v) { c.cameras = std::stoul(v); }},
      {"feature_dim", [&](const std::string& v) { c.feature_dim = std::stoul(v); }},
      {"hidden_dim", [&](const std::string& v) { c.hidden_dim = std::stoul(v); }},
      {"mlp_dim", [&](const std::string& v) { c.mlp_dim = std::stoul(v); }},
      {"pose_dim", [&](const std::string& v) { c.pose_dim = std::stoul(v); }},
      {"encoder_width", [&](const std::string& v) { c.encoder_width = std::stoul(v); }},
      {"texture_channels", [&](const std::string& v) { c.texture_channels = detail::parse_list(v); }},
      {"texture_height", [&](const std::string& v) { c.texture_height = std::stoul(v); }},
      {"texture_width", [&](const std::string& v) { c.texture_width = std::stoul(v); }},
      {"sigma", [&](const std::string& v) { c.sigma = std::stod(v); }},
      {"gamma", [&](const std::string& v) { c.gamma = std::stod(v); }},
      {"max_faces", [&](const std::string& v) { c.max_faces = std::stoul(v); }},
      {"aligned_depth", [&](const std::string& v) { c.aligned_depth = detail::parse_bool(v); }},
      {"perceptual", [&](const std::string& v) { c.perceptual = detail::parse_bool(v); }},
      {"pose_downsample", [&](const std::string& v) { c.pose_downsample = std::stoul(v); }},
      {"clusters", [&](const std::string& v) { c.clusters = std::stoul(v); }},
      {"checkpoint_every", [&](const std::string& v) { c.checkpoint_every = std::stoul(v); }},
      {"steps_per_epoch", [&](const std::string& v) { c.steps_per_epoch = std::stoul(v); }},
      {"w_rgb", [&](const std::string& v) { w.rgb = std::stod(v); }},
      {"w_percp", [&](const std::string& v) { w.percp = std::stod(v); }},
      {"w_mask", [&](const std::string& v) { w.mask = std::stod(v); }},
      {"w_depth", [&](const std::string& v) { w.depth = std::stod(v); }},
      {"w_swap", [&](const std::string& v) { w.swap = std::stod(v); }},
      {"w_smooth", [&](const std::string& v) { w.smooth = std::stod(v); }},
      {"w_normal", [&](const std::string& v) { w.normal = std::stod(v); }},
      {"w_part", [&](const std::string& v) { w.part = std::stod(v); }},
      {"w_pose", [&](const std::string& v) { w.pose = std::stod(v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  try {
    it->second(value);
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("bad value for '" + key + "': '" + value + "'");
  } catch (const std::out_of_range&) {
    throw std::invalid_argument("value out of range for '" + key + "': '" + value + "'");
  }
}

inline void validate(const TrainConfig& c) {
  if (c.articulation_start_epoch > c.epochs) {
    throw std::invalid_argument("articulation_start_epoch (" + std::to_string(c.articulation_start_epoch) +
                                ") exceeds epochs (" + std::to_string(c.epochs) + ")");
  }
  if (c.batch == 0) throw std::invalid_argument("batch must be positive");
  if (c.image < 16 || c.image % 16 != 0) throw std::invalid_argument("image size must be a multiple of 16");
  if (c.pose_downsample == 0 || c.image % c.pose_downsample != 0) {
    throw std::invalid_argument("pose_downsample must divide the image size");
  }
  for (double v : losses::weight_vector(c.weights))
    if (v < 0) throw std::invalid_argument("loss weights must be non-negative");
}

/// Flat key=value text; '#' starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    set_option(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  validate(base);
  return base;
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string to_text(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  std::string ch;
  for (std::size_t i = 0; i < c.texture_channels.size(); ++i) ch += (i ? "," : "") + std::to_string(c.texture_channels[i]);
  const auto& w = c.weights;
  o << "epochs=" << c.epochs << "\nbatch=" << c.batch << "\nlr=" << c.lr << "\nimage=" << c.image
    << "\narticulation_start_epoch=" << c.articulation_start_epoch << "\nseed=" << c.seed;
  if (!c.finetune_from.empty()) o << "\nfinetune_from=" << c.finetune_from;
  o << "\nsubdivisions=" << c.subdivisions << "\nparts=" << c.parts << "\ncameras=" << c.cameras
    << "\nfeature_dim=" << c.feature_dim << "\nhidden_dim=" << c.hidden_dim << "\nmlp_dim=" << c.mlp_dim
    << "\npose_dim=" << c.pose_dim << "\nencoder_width=" << c.encoder_width << "\ntexture_channels=" << ch
    << "\ntexture_height=" << c.texture_height << "\ntexture_width=" << c.texture_width << "\nsigma=" << c.sigma
    << "\ngamma=" << c.gamma << "\nmax_faces=" << c.max_faces << "\naligned_depth=" << c.aligned_depth
    << "\nperceptual=" << c.perceptual << "\npose_downsample=" << c.pose_downsample << "\nclusters=" << c.clusters
    << "\ncheckpoint_every=" << c.checkpoint_every << "\nsteps_per_epoch=" << c.steps_per_epoch
    << "\nw_rgb=" << w.rgb << "\nw_percp=" << w.percp << "\nw_mask=" << w.mask << "\nw_depth=" << w.depth
    << "\nw_swap=" << w.swap << "\nw_smooth=" << w.smooth << "\nw_normal=" << w.normal << "\nw_part=" << w.part
    << "\nw_pose=" << w.pose << '\n';
  return o.str();
}

inline nets::NetConfig net_config(const TrainConfig& c) {
  nets::NetConfig n;
  n.image_size = c.image;
  n.subdivisions = c.subdivisions;
  n.num_parts = c.parts;
  n.num_cameras = c.cameras;
  n.feature_dim = c.feature_dim;
  n.hidden_dim = c.hidden_dim;
  n.mlp_dim = c.mlp_dim;
  n.pose_dim = c.pose_dim;
  n.encoder_width = c.encoder_width;
  n.texture_channels = c.texture_channels;
  n.texture_height = c.texture_height;
  n.texture_width = c.texture_width;
  return n;
}

inline render::RenderConfig render_config(const TrainConfig& c, std::size_t size) {
  auto r = render::RenderConfig::square(size);
  r.raster.sigma = c.sigma;
  r.raster.gamma = c.gamma;
  r.raster.max_faces = c.max_faces;
  return r;
}

/// Decoded training sample as constant tensors.
struct TrainSample {
  Tensor image;         // [3,s,s]
  Tensor mask;          // [s,s]
  Tensor depth;         // [s,s]
  Tensor mask_coarse;   // [s/k, s/k], average-pooled
  int cluster_id = 0;
};

inline TrainSample to_train_sample(const data::SampleRecord& r, std::size_t pose_downsample) {
  const std::size_t s = r.size();
  TrainSample t;
  t.image = Tensor::constant({3, s, s}, r.image.data);
  t.mask = Tensor::constant({s, s}, r.mask);
  t.depth = Tensor::constant({s, s}, r.depth);
  const std::size_t k = pose_downsample, c = s / k;
  std::vector<float> coarse(c * c, 0.f);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) coarse[(y / k) * c + x / k] += r.mask[y * s + x] / float(k * k);
  t.mask_coarse = Tensor::constant({c, c}, std::move(coarse));
  t.cluster_id = std::max(0, r.cluster_id);
  return t;
}

/// Everything the generation phase produces for one image.
struct Forward {
  Tensor phi, deformed, shape, texture;
  articulate::Articulation articulation;
  nets::PoseOutput pose;
  render::RenderOutput render;
};

inline void require_finite(const Tensor& t, const char* stage) {
  for (float v : t.values())
    if (!std::isfinite(v)) throw NumericError(stage, std::string("non-finite values after ") + stage);
}

/// I -> φ -> S' -> S = LBS(S', A) -> render with the top-scoring camera.
inline Forward forward_sample(const nets::NetBundle& nets, const Tensor& image, const render::RenderConfig& rc) {
  Forward f;
  f.phi = nets.encode(image);
  require_finite(f.phi, "encode");
  f.deformed = nets.deform(f.phi);
  require_finite(f.deformed, "deform");
  f.articulation = nets.articulation(f.phi);
  f.shape = articulate::lbs_apply(f.deformed, f.articulation);
  require_finite(f.shape, "articulate");
  f.texture = nets.texture(f.phi);
  require_finite(f.texture, "texture");
  f.pose = nets.pose(f.phi);
  require_finite(f.pose.decoded, "pose");
  f.render = render::render(nets.canonical(), f.shape, f.texture, f.pose.chosen_pose(), rc);
  require_finite(f.render.rgb, "render");
  return f;
}

/// j(i) = (i + r) mod B with r uniform in [1, B-1]. Empty for B < 2.
inline std::vector<std::size_t> swap_pairing(std::size_t batch, std::uint64_t seed) {
  if (batch < 2) return {};
  ad::Rng rng(seed);
  const std::size_t r = 1 + static_cast<std::size_t>(rng.below(batch - 1));
  std::vector<std::size_t> j(batch);
  for (std::size_t i = 0; i < batch; ++i) j[i] = (i + r) % batch;
  return j;
}

/// Silhouette MSE of every camera hypothesis at reduced resolution, without gradient.
inline std::vector<double> hypothesis_losses(const nets::NetBundle& nets, const Forward& f, const Tensor& mask_coarse,
                                             const render::RenderConfig& coarse) {
  const auto S = f.shape.detach();
  const auto tex = Tensor::full({3, 2, 2}, 0.5f);
  const auto decoded = f.pose.decoded.detach();
  std::vector<double> out;
  for (std::size_t c = 0; c < decoded.dim(0); ++c) {
    const auto pose = ad::reshape(ad::slice_rows(decoded, c, c + 1), {6});
    const auto r = render::render(nets.canonical(), S, tex, pose, coarse);
    out.push_back(double(losses::mse(r.silhouette, mask_coarse).item()));
  }
  return out;
}

struct StepResult {
  std::size_t epoch = 0, step = 0;
  losses::LossReport mean;           // batch mean of every term
  std::vector<double> sample_totals; // per-sample totals, batch order
  std::vector<std::size_t> indices;
};

struct EpochResult {
  std::size_t epoch = 0, steps = 0;
  std::vector<double> mean_raw;  // epoch mean of every raw term
  double mean_total = 0;
  bool articulation = false;
};

inline std::string csv_header(const char* lead) {
  std::string h = lead;
  for (const auto& n : losses::term_names()) h += "," + n;
  return h + ",total";
}

/// Owns the networks, optimizer state, sampler and counters.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<data::SampleRecord> records)
      : cfg_((validate(cfg), std::move(cfg))),
        nets_(net_config(cfg_), ad::mix_seed(cfg_.seed, 0x6e657473)),
        render_cfg_(render_config(cfg_, cfg_.image)),
        coarse_cfg_(render_config(cfg_, cfg_.image / cfg_.pose_downsample)),
        laplacian_(mesh::uniform_laplacian(nets_.canonical())),
        adjacency_(mesh::face_adjacency(nets_.canonical())),
        pyramid_(7) {
    if (records.empty()) throw std::invalid_argument("no training records");
    std::vector<int> ids;
    for (const auto& r : records) {
      if (r.size() != cfg_.image) {
        throw ShapeError("record " + r.source + " has size " + std::to_string(r.size()) + ", config expects " +
                         std::to_string(cfg_.image));
      }
      samples_.push_back(to_train_sample(r, cfg_.pose_downsample));
      ids.push_back(samples_.back().cluster_id);
    }
    std::size_t k = cfg_.clusters;
    for (int id : ids) k = std::max(k, std::size_t(id) + 1);
    sampler_ = std::make_unique<data::BalancedSampler>(ids, k, cfg_.batch, ad::mix_seed(cfg_.seed, 0x73616d70));
    steps_per_epoch_ = cfg_.steps_per_epoch ? cfg_.steps_per_epoch : (samples_.size() + cfg_.batch - 1) / cfg_.batch;
    epoch_sums_.assign(losses::term_names().size() + 1, 0.0);
  }

  const TrainConfig& config() const { return cfg_; }
  nets::NetBundle& nets() { return nets_; }
  const nets::NetBundle& nets() const { return nets_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t global_step() const { return step_; }
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  const std::vector<TrainSample>& samples() const { return samples_; }
  const render::RenderConfig& render_cfg() const { return render_cfg_; }

  bool articulation_active() const { return finetune_ || epoch_ >= cfg_.articulation_start_epoch; }

  /// Loads weights from a base model and enables articulation from the first step.
  void start_finetune(const std::string& checkpoint) {
    ad::load_checkpoint(nets_.store(), checkpoint, false);
    finetune_ = true;
  }

  /// Terms for a batch of samples sharing one tape. perm may be empty.
  std::vector<losses::LossTerms> batch_terms(const std::vector<std::size_t>& idx, const std::vector<std::size_t>& perm) {
    nets_.set_articulation_enabled(articulation_active());
    std::vector<Forward> fw;
    fw.reserve(idx.size());
    for (auto i : idx) fw.push_back(forward_sample(nets_, samples_[i].image, render_cfg_));
    const bool swap = cfg_.weights.swap > 0 && !perm.empty();
    const auto* pyr = cfg_.perceptual && cfg_.weights.percp > 0 ? &pyramid_ : nullptr;
    std::vector<losses::LossTerms> terms(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& s = samples_[idx[b]];
      const auto& f = fw[b];
      auto& t = terms[b];
      t.rgb = losses::l_rgb(s.image, f.render.rgb);
      t.percp = losses::l_percp(s.image, f.render.rgb, pyr);
      t.mask = losses::l_mask(s.mask, f.render.silhouette);
      t.depth = losses::l_depth(s.depth, f.render.depth, s.mask, cfg_.aligned_depth);
      if (swap) {
        const auto Ssw = articulate::swap_shape(fw[perm[b]].deformed, f.articulation);
        const auto rs = render::render(nets_.canonical(), Ssw, f.texture, f.pose.chosen_pose(), render_cfg_);
        t.swap = losses::l_swap(s.image, s.mask, rs.rgb, rs.silhouette, cfg_.weights.swap);
      }
      if (articulation_active()) t.part = losses::l_part(f.articulation.W);
      t.smooth = losses::l_smooth(laplacian_, f.shape);
      t.normal = losses::l_normal(adjacency_, mesh::face_normals(nets_.canonical().faces, f.shape));
      if (cfg_.weights.pose > 0 && cfg_.cameras > 1) {
        t.pose = losses::l_pose_score(f.pose.logits, hypothesis_losses(nets_, f, s.mask_coarse, coarse_cfg_));
      }
    }
    return terms;
  }

  /// One optimizer step on the next balanced batch.
  StepResult step() {
    StepResult r;
    r.epoch = epoch_;
    r.step = step_;
    r.indices = sampler_->batch(step_);
    const auto perm = swap_pairing(r.indices.size(), ad::mix_seed(cfg_.seed, 0x73776170, step_));
    const auto terms = batch_terms(r.indices, perm);
    Tensor total;
    std::vector<double> raw(losses::term_names().size(), 0.0);
    double mean_total = 0;
    const double inv = 1.0 / double(terms.size());
    for (std::size_t b = 0; b < terms.size(); ++b) {
      auto [t, rep] = losses::total_loss(terms[b], cfg_.weights);
      r.sample_totals.push_back(rep.total);
      for (std::size_t k = 0; k < raw.size(); ++k) raw[k] += rep.raw[k] * inv;
      mean_total += rep.total * inv;
      const auto scaled = ad::affine(t, float(inv));
      total = b ? ad::add(total, scaled) : scaled;
    }
    if (!std::isfinite(mean_total)) throw NumericError("loss", "non-finite total loss");
    ad::backward(total);
    nets_.store().adam_step({cfg_.lr, 0.9, 0.999, 1e-8});
    nets_.store().zero_grad();
    r.mean.raw = raw;
    r.mean.total = mean_total;
    r.mean.weighted = raw;
    const auto lam = losses::weight_vector(cfg_.weights);
    for (std::size_t k = 0; k < raw.size(); ++k) r.mean.weighted[k] = lam[k] * raw[k];

    for (std::size_t k = 0; k < raw.size(); ++k) epoch_sums_[k] += raw[k];
    epoch_sums_.back() += mean_total;
    ++epoch_steps_;
    ++step_;
    return r;
  }

  bool epoch_done() const { return epoch_steps_ >= steps_per_epoch_; }

  /// Closes the epoch: returns its means and advances the epoch counter.
  EpochResult finish_epoch() {
    EpochResult e;
    e.epoch = epoch_;
    e.steps = epoch_steps_;
    e.articulation = articulation_active();
    const double n = std::max<std::size_t>(1, epoch_steps_);
    for (std::size_t k = 0; k + 1 < epoch_sums_.size(); ++k) e.mean_raw.push_back(epoch_sums_[k] / n);
    e.mean_total = epoch_sums_.back() / n;
    std::fill(epoch_sums_.begin(), epoch_sums_.end(), 0.0);
    epoch_steps_ = 0;
    ++epoch_;
    return e;
  }

  EpochResult run_epoch(const std::function<void(const StepResult&)>& on_step = {}) {
    while (!epoch_done()) {
      const auto r = step();
      if (on_step) on_step(r);
    }
    return finish_epoch();
  }

  std::string meta() const {
    return json{{"epoch", epoch_}, {"step", step_}, {"epoch_steps", epoch_steps_}, {"epoch_sums", epoch_sums_},
                {"finetune", finetune_}, {"config", to_text(cfg_)}}
        .dump();
  }

  void save(const std::string& path) const { ad::save_checkpoint(nets_.store(), path, meta()); }

  /// Restores weights, optimizer state and counters written by save().
  void resume(const std::string& path) {
    const auto m = json::parse(ad::load_checkpoint(nets_.store(), path, true));
    epoch_ = m.at("epoch");
    step_ = m.at("step");
    epoch_steps_ = m.at("epoch_steps");
    epoch_sums_ = m.at("epoch_sums").get<std::vector<double>>();
    finetune_ = m.value("finetune", false);
  }

 private:
  TrainConfig cfg_;
  nets::NetBundle nets_;
  render::RenderConfig render_cfg_, coarse_cfg_;
  mesh::SparseOperator laplacian_;
  mesh::FaceAdjacency adjacency_;
  losses::RandomPyramid pyramid_;
  std::vector<TrainSample> samples_;
  std::unique_ptr<data::BalancedSampler> sampler_;
  std::size_t steps_per_epoch_ = 1;
  std::size_t epoch_ = 0, step_ = 0, epoch_steps_ = 0;
  std::vector<double> epoch_sums_;
  bool finetune_ = false;
};

struct RunOptions {
  std::string out_dir;
  bool quiet = false;
};

inline std::string format_row(std::size_t a, std::size_t b, const std::vector<double>& raw, double total) {
  std::ostringstream o;
  o.precision(9);
  o << a << ',' << b;
  for (double v : raw) o << ',' << v;
  o << ',' << total;
  return o.str();
}

/// Runs to cfg.epochs from the trainer's current epoch, writing loss.csv
/// (one row per epoch), steps.csv (one row per step) and checkpoints into
/// out_dir. A non-finite loss writes halt.ckpt and rethrows.
inline std::vector<EpochResult> run_training(Trainer& tr, const RunOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);
  const fs::path out(opt.out_dir);
  const bool fresh = tr.global_step() == 0;
  std::ofstream loss_csv(out / "loss.csv", fresh ? std::ios::trunc : std::ios::app);
  std::ofstream steps_csv(out / "steps.csv", fresh ? std::ios::trunc : std::ios::app);
  if (!loss_csv || !steps_csv) throw IoError("cannot write CSV files in " + opt.out_dir);
  if (fresh) {
    loss_csv << csv_header("epoch,steps") << ",articulation\n";
    steps_csv << csv_header("epoch,step") << '\n';
    std::ofstream(out / "config.txt") << to_text(tr.config());
  }
  std::vector<EpochResult> results;
  const auto& cfg = tr.config();
  while (tr.epoch() < cfg.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochResult e;
    try {
      e = tr.run_epoch([&](const StepResult& r) {
        steps_csv << format_row(r.epoch, r.step, r.mean.raw, r.mean.total) << '\n';
      });
    } catch (const NumericError& ex) {
      tr.save((out / "halt.ckpt").string());
      log::warn("halting at step %zu (%s): %s", tr.global_step(), ex.stage.c_str(), ex.what());
      throw;
    }
    loss_csv << format_row(e.epoch, e.steps, e.mean_raw, e.mean_total) << ',' << (e.articulation ? 1 : 0) << '\n';
    loss_csv.flush();
    steps_csv.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!opt.quiet) log::info("epoch %zu/%zu loss %.5f (%.1fs)", e.epoch + 1, cfg.epochs, e.mean_total, secs);
    results.push_back(e);
    const std::size_t done = tr.epoch();
    if (cfg.checkpoint_every && done % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", done);
      tr.save((out / name).string());
    }
  }
  tr.save((out / "last.ckpt").string());
  return results;
}

/// Loads and crops every usable manifest record.
inline std::vector<data::SampleRecord> load_records(const data::Manifest& m, std::size_t size) {
  std::vector<data::SampleRecord> out;
  for (const auto& e : m.entries) {
    auto r = data::load_sample(m, e, size);
    if (r.usable) out.push_back(std::move(r));
  }
  return out;
}

}  // namespace saor::trainer
