#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "saor/eval/eval.hpp"
#include "saor/mesh/io.hpp"
#include "saor/trainer/trainer.hpp"

namespace saor::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Flag values shared by the subcommands. Unset optionals leave the config untouched.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> image_size, parts, cameras, epochs;
};

/// Defaults < config file < flags.
inline trainer::TrainConfig resolve_config(const Overrides& o, trainer::TrainConfig base = {}) {
  auto c = o.config.empty() ? base : trainer::load_config(o.config, base);
  if (o.seed) c.seed = *o.seed;
  if (o.image_size) c.image = *o.image_size;
  if (o.parts) c.parts = *o.parts;
  if (o.cameras) c.cameras = *o.cameras;
  if (o.epochs) {
    c.epochs = *o.epochs;
    c.articulation_start_epoch = std::min(c.articulation_start_epoch, c.epochs);
  }
  trainer::validate(c);
  return c;
}

inline void write_json(const json& j, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

/// Rewrites entry paths so the manifest can live in another directory.
inline data::Manifest absolutized(const data::Manifest& m) {
  data::Manifest out;
  out.base_dir = m.base_dir;
  for (auto e : m.entries) {
    e.image = m.resolve(e.image);
    e.mask = m.resolve(e.mask);
    e.depth = m.resolve(e.depth);
    e.keypoints = m.resolve(e.keypoints);
    out.entries.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------- preprocess

struct PreprocessReport {
  std::size_t kept = 0;
  std::map<std::string, std::size_t> rejected;
};

/// Applies the detection filters; writes <out>/manifest.jsonl and report.json.
inline PreprocessReport preprocess(const std::string& manifest_path, const std::string& out_dir) {
  const auto m = absolutized(data::read_manifest(manifest_path));
  fs::create_directories(out_dir);
  data::Manifest kept;
  kept.base_dir = out_dir;
  PreprocessReport rep;
  for (const auto& e : m.entries) {
    const auto r = data::filter_detection(data::detection_meta(m, e));
    if (r.keep) {
      kept.entries.push_back(e);
      ++rep.kept;
    } else {
      ++rep.rejected[r.reason];
    }
  }
  data::write_manifest(kept, (fs::path(out_dir) / "manifest.jsonl").string());
  write_json({{"input", m.entries.size()}, {"kept", rep.kept}, {"rejected", rep.rejected}},
             fs::path(out_dir) / "report.json");
  return rep;
}

// ------------------------------------------------------------------- cluster

/// Fits the shape-family GMM on binarized crop masks and annotates cluster ids.
/// Writes <out>/manifest.jsonl and <out>/clusters.json.
inline data::ClusterModel cluster(const std::string& manifest_path, const std::string& out_dir, std::size_t k,
                                  std::uint64_t seed, std::size_t image_size) {
  auto m = absolutized(data::read_manifest(manifest_path));
  std::vector<std::vector<double>> feats;
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto r = data::load_sample(m, m.entries[i], image_size);
    if (!r.usable) continue;
    feats.push_back(data::mask_feature(r.mask, image_size, image_size));
    used.push_back(i);
  }
  const auto model = data::fit_gmm(feats, k, seed);
  for (std::size_t n = 0; n < used.size(); ++n) m.entries[used[n]].cluster_id = model.assign(feats[n]);
  fs::create_directories(out_dir);
  m.base_dir = out_dir;
  data::write_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
  write_json(model.to_json(), fs::path(out_dir) / "clusters.json");
  return model;
}

// --------------------------------------------------------------------- train

/// Records with cluster ids; a manifest without ids is treated as one cluster.
inline std::vector<data::SampleRecord> training_records(const std::string& manifest_path, std::size_t size) {
  auto recs = trainer::load_records(data::read_manifest(manifest_path), size);
  if (recs.empty()) throw std::invalid_argument("manifest " + manifest_path + " has no usable records");
  bool missing = false;
  for (auto& r : recs) {
    if (r.cluster_id < 0) {
      missing = true;
      r.cluster_id = 0;
    }
  }
  if (missing) log::warn("records without cluster_id are sampled as cluster 0; run `cluster` first");
  return recs;
}

/// Trains from scratch, or continues from `resume` when it names a checkpoint.
inline std::vector<trainer::EpochResult> train(const trainer::TrainConfig& cfg, const std::string& manifest_path,
                                               const std::string& out_dir, const std::string& resume = {},
                                               bool quiet = false) {
  trainer::Trainer tr(cfg, training_records(manifest_path, cfg.image));
  if (!resume.empty()) tr.resume(resume);
  return trainer::run_training(tr, {out_dir, quiet});
}

inline std::vector<trainer::EpochResult> finetune(trainer::TrainConfig cfg, const std::string& manifest_path,
                                                  const std::string& base_checkpoint, const std::string& out_dir,
                                                  bool quiet = false) {
  cfg.finetune_from = base_checkpoint;
  trainer::Trainer tr(cfg, training_records(manifest_path, cfg.image));
  tr.start_finetune(base_checkpoint);
  return trainer::run_training(tr, {out_dir, quiet});
}

// --------------------------------------------------------------------- model

/// Networks restored from a checkpoint. The architecture comes from the
/// checkpoint's own config unless `cfg` is given.
struct Model {
  trainer::TrainConfig cfg;
  std::unique_ptr<nets::NetBundle> nets;
  render::RenderConfig render_cfg;

  static Model load(const std::string& checkpoint, const std::optional<trainer::TrainConfig>& cfg = {}) {
    const auto meta = json::parse(ad::read_checkpoint_meta(checkpoint), nullptr, false);
    Model m;
    if (cfg) {
      m.cfg = *cfg;
    } else if (!meta.is_discarded() && meta.contains("config")) {
      m.cfg = trainer::parse_config(meta.at("config").get<std::string>());
    } else {
      throw IoError("checkpoint " + checkpoint + " carries no config; pass --config");
    }
    m.nets = std::make_unique<nets::NetBundle>(trainer::net_config(m.cfg), 0);
    ad::load_checkpoint(m.nets->store(), checkpoint, false);
    bool active = false;
    if (!meta.is_discarded()) {
      active = meta.value("finetune", false) || meta.value("epoch", std::size_t(0)) >= m.cfg.articulation_start_epoch;
    }
    m.nets->set_articulation_enabled(active);
    m.render_cfg = trainer::render_config(m.cfg, m.cfg.image);
    return m;
  }

  trainer::Forward forward(const io::Image& crop) const {
    if (crop.channels != 3 || crop.height != cfg.image || crop.width != cfg.image) {
      throw ShapeError("model expects a 3x" + std::to_string(cfg.image) + "x" + std::to_string(cfg.image) + " crop");
    }
    return trainer::forward_sample(*nets, ad::Tensor::constant({3, cfg.image, cfg.image}, crop.data), render_cfg);
  }

  /// Predicted shape projected with the chosen camera, in crop pixels.
  eval::ProjectedShape project(const trainer::Forward& f) const {
    const auto screen = render::view_project(f.shape.detach(), f.pose.chosen_pose().detach(), render_cfg.camera);
    return eval::project_shape(nets->canonical().faces, screen.values(), cfg.image);
  }
};

/// Square crop of an image file: around the mask's bounding box when a mask
/// is given, otherwise the whole frame.
inline io::Image load_crop(const std::string& image_path, const std::string& mask_path, std::size_t size) {
  const auto img = io::read_png(image_path, 3);
  data::BBox box{0, 0, double(img.width), double(img.height)};
  double padding = 0;
  if (!mask_path.empty()) {
    const auto mask = io::read_png(mask_path, 1);
    if (mask.width != img.width || mask.height != img.height) throw ShapeError("mask and image sizes differ");
    const auto b = eval::mask_bbox(mask);
    if (!b) throw std::invalid_argument("mask " + mask_path + " is empty");
    box = *b;
    padding = data::kCropPadding;
  }
  return data::crop_resample(img, data::CropTransform::around(box, size, padding), data::Border::Clamp);
}

inline json pose_json(const render::CameraPose& p) {
  return {{"azimuth", p.azimuth}, {"elevation", p.elevation}, {"roll", p.roll}, {"tx", p.tx}, {"ty", p.ty}, {"tz", p.tz}};
}

inline render::CameraPose to_pose(const ad::Tensor& t) {
  const auto v = t.values();
  return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

inline double wrap_degrees(double a) {
  a = std::fmod(a + 180.0, 360.0);
  if (a < 0) a += 360.0;
  return a - 180.0;
}

inline io::Image to_image(const ad::Tensor& t, std::size_t c, std::size_t h, std::size_t w) {
  io::Image im(c, h, w);
  std::copy(t.values().begin(), t.values().end(), im.data.begin());
  return im;
}

// --------------------------------------------------------------------- infer

inline constexpr std::array<double, 4> kViewOffsets = {0.0, 90.0, 180.0, 270.0};

/// One forward pass. Writes shape.obj, parts.ply, pose.json and
/// view_000/090/180/270.png into out_dir; returns the pose JSON.
inline json infer(const Model& model, const io::Image& crop, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  const auto f = model.forward(crop);
  const auto& topo = model.nets->canonical();
  mesh::export_obj(topo, f.shape.values(), (out / "shape.obj").string());
  const auto labels = articulate::hard_parts(f.articulation.W);
  std::vector<std::array<std::uint8_t, 3>> colors;
  for (auto l : labels) colors.push_back(mesh::part_color(l));
  mesh::export_ply(topo, f.shape.values(), colors, (out / "parts.ply").string());

  const auto chosen = to_pose(f.pose.chosen_pose());
  json hyps = json::array();
  for (std::size_t c = 0; c < f.pose.decoded.dim(0); ++c) {
    auto h = pose_json(to_pose(f.pose.hypothesis(c)));
    h["score"] = f.pose.scores[c];
    hyps.push_back(h);
  }
  const auto& A = f.articulation;
  std::vector<std::size_t> part_sizes(A.W.dim(1), 0);
  for (auto l : labels) ++part_sizes[l];
  json j = {{"pose", pose_json(chosen)},
            {"chosen", f.pose.chosen},
            {"hypotheses", hyps},
            {"articulation",
             {{"enabled", model.nets->articulation_enabled()},
              {"scales", std::vector<float>(A.scales.values().begin(), A.scales.values().end())},
              {"rotations", std::vector<float>(A.rotations.values().begin(), A.rotations.values().end())},
              {"translations", std::vector<float>(A.translations.values().begin(), A.translations.values().end())},
              {"part_sizes", part_sizes}}},
            {"num_vertices", topo.num_vertices()}};
  write_json(j, out / "pose.json");

  const auto rc = eval::hard_render_config(model.cfg.image);
  for (double off : kViewOffsets) {
    auto p = chosen;
    p.azimuth = wrap_degrees(p.azimuth + off);
    const auto r = render::render(topo, f.shape.detach(), f.texture.detach(), render::pose_tensor<float>(p), rc);
    char name[32];
    std::snprintf(name, sizeof name, "view_%03d.png", int(off));
    io::write_png(to_image(r.rgb, 3, model.cfg.image, model.cfg.image), (out / name).string());
  }
  return j;
}

// -------------------------------------------------------------- render-views

/// Renders the prediction at `count` evenly spaced azimuths with the training
/// renderer: rgb and silhouette PNG, depth PFM.
inline void render_views(const Model& model, const io::Image& crop, std::size_t count, const std::string& out_dir) {
  if (count == 0) throw std::invalid_argument("render-views needs at least one view");
  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  const auto f = model.forward(crop);
  const auto base = to_pose(f.pose.chosen_pose());
  const std::size_t R = model.cfg.image;
  for (std::size_t v = 0; v < count; ++v) {
    auto p = base;
    p.azimuth = wrap_degrees(p.azimuth + 360.0 * double(v) / double(count));
    const auto r = render::render(model.nets->canonical(), f.shape.detach(), f.texture.detach(),
                                  render::pose_tensor<float>(p), model.render_cfg);
    char stem[32];
    std::snprintf(stem, sizeof stem, "view_%02zu", v);
    io::write_png(to_image(r.rgb, 3, R, R), (out / (std::string(stem) + "_rgb.png")).string());
    io::write_png(to_image(r.silhouette, 1, R, R), (out / (std::string(stem) + "_mask.png")).string());
    io::write_pfm(to_image(r.depth, 1, R, R), (out / (std::string(stem) + "_depth.pfm")).string());
  }
}

// -------------------------------------------------------------------- export

/// Batch export of predictions for every usable manifest record into
/// <out>/NNNNN/{shape.obj, parts.ply, pose.json, view_*.png}.
inline std::size_t export_predictions(const Model& model, const std::string& manifest_path, const std::string& out_dir) {
  const auto m = data::read_manifest(manifest_path);
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto r = data::load_sample(m, m.entries[i], model.cfg.image);
    if (!r.usable) continue;
    char name[16];
    std::snprintf(name, sizeof name, "%05zu", i);
    infer(model, r.image, (fs::path(out_dir) / name).string());
    ++n;
  }
  return n;
}

// ---------------------------------------------------------------------- eval

struct PairSpec {
  std::size_t source = 0, target = 0;
};

/// JSON lines {"source": i, "target": j} indexing manifest entries.
inline std::vector<PairSpec> read_pairs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open pairs file " + path);
  std::vector<PairSpec> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("source").get<std::size_t>(), j.at("target").get<std::size_t>()});
    } catch (const json::exception& ex) {
      throw IoError("pairs " + path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

/// i -> (i + 1) mod n.
inline std::vector<PairSpec> cyclic_pairs(std::size_t n) {
  std::vector<PairSpec> out;
  if (n < 2) return out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({i, (i + 1) % n});
  return out;
}

/// Keypoint transfer PCK@threshold over pairs of manifest entries, plus mean
/// mask IoU of the rendered silhouettes. The pooled PCK counts every
/// evaluated keypoint once.
inline json evaluate(const Model& model, const std::string& manifest_path, std::vector<PairSpec> pairs,
                     double threshold = 0.1) {
  const auto m = data::read_manifest(manifest_path);
  const std::size_t n = m.entries.size(), size = model.cfg.image;
  if (pairs.empty()) pairs = cyclic_pairs(n);
  if (pairs.empty()) throw std::invalid_argument("evaluation needs at least two records");
  std::vector<data::SampleRecord> recs(n);
  std::vector<eval::ProjectedShape> shapes(n);
  std::vector<double> iou(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    recs[i] = data::load_sample(m, m.entries[i], size);
    const auto f = model.forward(recs[i].image);
    shapes[i] = model.project(f);
    iou[i] = eval::mask_iou(f.render.silhouette.values(), recs[i].mask);
  }
  json per = json::array();
  std::size_t correct = 0, evaluated = 0, skipped = 0;
  for (const auto& p : pairs) {
    if (p.source >= n || p.target >= n) {
      throw std::invalid_argument("pair " + std::to_string(p.source) + "->" + std::to_string(p.target) +
                                  " outside the manifest");
    }
    const auto& src = recs[p.source];
    const auto& tgt = recs[p.target];
    if (src.keypoints.empty() || src.keypoints.size() != tgt.keypoints.size()) {
      throw std::invalid_argument("pair " + std::to_string(p.source) + "->" + std::to_string(p.target) +
                                  " lacks matching keypoints");
    }
    const auto pred = eval::transfer_keypoints(src.keypoints, shapes[p.source], shapes[p.target]);
    std::vector<eval::PixelPoint> gt;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      gt.push_back({tgt.keypoints[k].x, tgt.keypoints[k].y, src.keypoints[k].visible && tgt.keypoints[k].visible});
    }
    const double norm = eval::mask_bbox_max_side(tgt.mask, size, size);
    json row = {{"source", p.source}, {"target", p.target}};
    try {
      const auto r = eval::pck(pred, gt, norm, threshold);
      row["pck"] = r.pck;
      row["evaluated"] = r.evaluated;
      row["correct"] = r.correct;
      correct += r.correct;
      evaluated += r.evaluated;
    } catch (const std::invalid_argument&) {
      row["skipped"] = "no keypoint visible in both images";
      ++skipped;
    }
    per.push_back(row);
  }
  if (evaluated == 0) throw std::invalid_argument("no evaluable keypoint pairs");
  double mean_iou = 0;
  for (double v : iou) mean_iou += v / double(n);
  char key[32];
  std::snprintf(key, sizeof key, "pck@%g", threshold);
  return {{key, double(correct) / double(evaluated)},
          {"n_pairs", pairs.size() - skipped},
          {"n_keypoints", evaluated},
          {"skipped_pairs", skipped},
          {"mask_iou", mean_iou},
          {"pairs", per}};
}

// --------------------------------------------------------------------- synth

inline data::Manifest synth(const eval::SyntheticSpec& spec, std::size_t count, std::uint64_t seed,
                            const std::string& out_dir) {
  return eval::generate_synthetic(spec, count, seed, out_dir);
}

inline eval::SyntheticSpec load_spec(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream f(path);
  if (!f) throw IoError("cannot open spec " + path);
  try {
    return eval::SyntheticSpec::from_json(json::parse(f));
  } catch (const json::exception& ex) {
    throw IoError("spec " + path + ": " + ex.what());
  }
}

// --------------------------------------------------------------------- smoke

/// Small architecture for pipeline checks.
inline trainer::TrainConfig smoke_config(std::uint64_t seed) {
  trainer::TrainConfig c;
  c.epochs = 3;
  c.batch = 4;
  c.lr = 1e-3;
  c.image = 64;
  c.articulation_start_epoch = 2;
  c.seed = seed;
  c.subdivisions = 2;
  c.parts = 4;
  c.cameras = 2;
  c.feature_dim = 32;
  c.hidden_dim = 32;
  c.mlp_dim = 32;
  c.pose_dim = 32;
  c.encoder_width = 4;
  c.texture_channels = {32, 16, 8};
  c.texture_height = 16;
  c.texture_width = 32;
  c.clusters = 3;
  c.checkpoint_every = 0;
  return c;
}

/// Error carrying the pipeline stage that failed.
struct StageError : std::runtime_error {
  std::string stage;
  StageError(std::string s, const std::string& what) : std::runtime_error(what), stage(std::move(s)) {}
};

template <typename Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& ex) {
    throw StageError(name, ex.what());
  }
}

/// synth -> cluster -> train -> eval. With `manifest` set the
/// synth stage is skipped and that manifest is used instead. Returns the
/// eval metrics; throws StageError.
inline json smoke(const std::string& out_dir, std::uint64_t seed, const std::string& manifest = {},
                  std::optional<trainer::TrainConfig> cfg_in = {}) {
  const fs::path out(out_dir);
  const auto cfg = cfg_in ? *cfg_in : smoke_config(seed);
  std::string src = manifest;
  if (src.empty()) {
    stage("synth", [&] {
      eval::SyntheticSpec spec;
      spec.render_size = cfg.image + cfg.image / 4;
      synth(spec, 20, seed, (out / "synth").string());
    });
    src = (out / "synth" / "manifest.jsonl").string();
  }
  stage("cluster", [&] {
    cluster(src, (out / "clustered").string(), cfg.clusters, seed, cfg.image);
  });
  const auto train_manifest = (out / "clustered" / "manifest.jsonl").string();
  stage("train", [&] {
    const auto results = train(cfg, train_manifest, (out / "train").string(), {}, true);
    if (results.size() != cfg.epochs) throw std::runtime_error("expected " + std::to_string(cfg.epochs) + " epochs");
    for (const auto& e : results)
      if (!std::isfinite(e.mean_total)) throw NumericError("train", "non-finite epoch loss");
  });
  return stage("eval", [&] {
    const auto model = Model::load((out / "train" / "last.ckpt").string());
    const auto metrics = evaluate(model, train_manifest, {});
    const double p = metrics.at("pck@0.1").get<double>();
    if (!(p >= 0.0 && p <= 1.0)) throw std::runtime_error("PCK outside [0,1]");
    write_json(metrics, out / "metrics.json");
    return metrics;
  });
}

}  // namespace saor::cli
