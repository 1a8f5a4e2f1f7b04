#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "saor/cli/commands.hpp"

using namespace saor;

namespace {

struct Flags {
  std::string config, manifest, out, checkpoint, image, mask, pairs, spec, resume;
  std::uint64_t seed = 0;
  std::size_t image_size = 0, parts = 0, cameras = 0, epochs = 0, count = 0, views = 0, clusters = 0;
};

cli::Overrides overrides(const CLI::App& sub, const Flags& f) {
  cli::Overrides o;
  o.config = f.config;
  auto set = [&](const char* name, auto& dst, auto value) {
    const auto* opt = sub.get_option_no_throw(name);
    if (opt && opt->count()) dst = value;
  };
  set("--seed", o.seed, f.seed);
  set("--image-size", o.image_size, f.image_size);
  set("--parts", o.parts, f.parts);
  set("--cameras", o.cameras, f.cameras);
  set("--epochs", o.epochs, f.epochs);
  return o;
}

bool given(const CLI::App& sub, const char* name) {
  const auto* opt = sub.get_option_no_throw(name);
  return opt && opt->count();
}

void add_arch(CLI::App* s, Flags& f) {
  s->add_option("--config", f.config, "key=value config file (flags override it)")->check(CLI::ExistingFile);
  s->add_option("--seed", f.seed, "random seed");
  s->add_option("--image-size", f.image_size, "crop size fed to the networks");
  s->add_option("--parts", f.parts, "number of articulated parts K");
  s->add_option("--cameras", f.cameras, "number of camera hypotheses");
}

/// Model from a checkpoint; an explicit config or architecture flag replaces the stored one.
cli::Model load_model(const CLI::App& sub, const Flags& f) {
  const bool custom = !f.config.empty() || given(sub, "--image-size") || given(sub, "--parts") || given(sub, "--cameras");
  if (!custom) return cli::Model::load(f.checkpoint);
  trainer::TrainConfig base;
  if (f.config.empty()) {
    const auto meta = nlohmann::json::parse(ad::read_checkpoint_meta(f.checkpoint), nullptr, false);
    if (!meta.is_discarded() && meta.contains("config")) base = trainer::parse_config(meta.at("config").get<std::string>());
  }
  return cli::Model::load(f.checkpoint, cli::resolve_config(overrides(sub, f), base));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-view articulated 3D reconstruction: data preparation, training, inference and evaluation"};
  app.require_subcommand(1, 1);
  Flags f;
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  auto* pre = app.add_subcommand("preprocess", "filter detections; writes <out>/manifest.jsonl and report.json");
  pre->add_option("--manifest", f.manifest, "input manifest (JSON lines)")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", f.out, "output directory")->required();

  auto* clu = app.add_subcommand("cluster", "fit the mask GMM and annotate cluster_id; writes <out>/manifest.jsonl");
  clu->add_option("--manifest", f.manifest, "input manifest")->required()->check(CLI::ExistingFile);
  clu->add_option("--out", f.out, "output directory")->required();
  clu->add_option("--clusters", f.clusters, "number of mixture components (default: config value)");
  add_arch(clu, f);

  auto* tr = app.add_subcommand("train", "train from scratch; writes loss.csv, steps.csv and checkpoints into <out>");
  tr->add_option("--manifest", f.manifest, "clustered manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", f.out, "run directory")->required();
  tr->add_option("--checkpoint", f.resume, "resume from this checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--epochs", f.epochs, "total epochs");
  add_arch(tr, f);

  auto* ft = app.add_subcommand("finetune", "continue from a base model with articulation enabled from step one");
  ft->add_option("--manifest", f.manifest, "clustered manifest")->required()->check(CLI::ExistingFile);
  ft->add_option("--checkpoint", f.checkpoint, "base model checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--out", f.out, "run directory")->required();
  ft->add_option("--epochs", f.epochs, "fine-tuning epochs");
  add_arch(ft, f);

  auto* inf = app.add_subcommand("infer", "one forward pass: shape.obj, parts.ply, pose.json, view_{000,090,180,270}.png");
  inf->add_option("--image", f.image, "input PNG")->required()->check(CLI::ExistingFile);
  inf->add_option("--mask", f.mask, "optional mask PNG; the crop follows its bounding box")->check(CLI::ExistingFile);
  inf->add_option("--checkpoint", f.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", f.out, "output directory")->required();
  add_arch(inf, f);

  auto* ev = app.add_subcommand("eval", "keypoint transfer PCK@0.1 and mask IoU; writes a metrics JSON");
  ev->add_option("--manifest", f.manifest, "manifest with keypoint sidecars")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", f.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--pairs", f.pairs, "JSON lines {\"source\": i, \"target\": j}; default i -> i+1")
      ->check(CLI::ExistingFile);
  ev->add_option("--out", f.out, "metrics file (default: stdout only)");
  add_arch(ev, f);

  auto* ex = app.add_subcommand("export", "infer outputs for every manifest record into <out>/NNNNN/");
  ex->add_option("--manifest", f.manifest, "manifest")->required()->check(CLI::ExistingFile);
  ex->add_option("--checkpoint", f.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", f.out, "output directory")->required();
  add_arch(ex, f);

  auto* rv = app.add_subcommand("render-views", "render a prediction around 360 degrees: rgb/mask PNG, depth PFM");
  rv->add_option("--image", f.image, "input PNG")->required()->check(CLI::ExistingFile);
  rv->add_option("--mask", f.mask, "optional mask PNG for the crop")->check(CLI::ExistingFile);
  rv->add_option("--checkpoint", f.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  rv->add_option("--out", f.out, "output directory")->required();
  rv->add_option("--views", f.views, "number of azimuths")->default_val(8);
  add_arch(rv, f);

  auto* sy = app.add_subcommand("synth", "generate the synthetic quadruped dataset with keypoints");
  sy->add_option("--spec", f.spec, "SyntheticSpec JSON (default spec when omitted)")->check(CLI::ExistingFile);
  sy->add_option("--out", f.out, "output directory")->required();
  sy->add_option("--count", f.count, "number of samples")->default_val(200);
  sy->add_option("--seed", f.seed, "random seed")->default_val(1);

  auto* sm = app.add_subcommand("smoke", "synth 20 samples -> cluster -> train 3 epochs -> eval");
  sm->add_option("--out", f.out, "work directory")->required();
  sm->add_option("--seed", f.seed, "random seed")->default_val(1);
  sm->add_option("--manifest", f.manifest, "use this manifest instead of synthesizing one");
  sm->add_option("--config", f.config, "training config replacing the built-in smoke config")
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  if (verbose) log::threshold() = log::Level::Debug;
  log::debug("worker lanes: %zu", worker_count());

  const CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    if (name == "preprocess") {
      const auto rep = cli::preprocess(f.manifest, f.out);
      std::printf("kept %zu records\n", rep.kept);
      for (const auto& [reason, n] : rep.rejected) std::printf("rejected (%s): %zu\n", reason.c_str(), n);
    } else if (name == "cluster") {
      const auto cfg = cli::resolve_config(overrides(*sub, f));
      const auto model = cli::cluster(f.manifest, f.out, f.clusters ? f.clusters : cfg.clusters, cfg.seed, cfg.image);
      std::printf("fitted %zu components, final log-likelihood %.4f\n", model.k, model.log_likelihood.back());
    } else if (name == "train") {
      cli::train(cli::resolve_config(overrides(*sub, f)), f.manifest, f.out, f.resume);
    } else if (name == "finetune") {
      trainer::TrainConfig base;
      const auto meta = nlohmann::json::parse(ad::read_checkpoint_meta(f.checkpoint), nullptr, false);
      if (f.config.empty() && !meta.is_discarded() && meta.contains("config")) {
        base = trainer::parse_config(meta.at("config").get<std::string>());
      }
      cli::finetune(cli::resolve_config(overrides(*sub, f), base), f.manifest, f.checkpoint, f.out);
    } else if (name == "infer") {
      const auto model = load_model(*sub, f);
      const auto j = cli::infer(model, cli::load_crop(f.image, f.mask, model.cfg.image), f.out);
      std::cout << j.at("pose").dump() << '\n';
    } else if (name == "eval") {
      const auto model = load_model(*sub, f);
      const auto pairs = f.pairs.empty() ? std::vector<cli::PairSpec>{} : cli::read_pairs(f.pairs);
      const auto metrics = cli::evaluate(model, f.manifest, pairs);
      if (!f.out.empty()) {
        const auto parent = std::filesystem::path(f.out).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        cli::write_json(metrics, f.out);
      }
      std::cout << nlohmann::json{{"pck@0.1", metrics.at("pck@0.1")}, {"n_pairs", metrics.at("n_pairs")},
                                  {"mask_iou", metrics.at("mask_iou")}}
                       .dump()
                << '\n';
    } else if (name == "export") {
      const auto n = cli::export_predictions(load_model(*sub, f), f.manifest, f.out);
      std::printf("exported %zu records\n", n);
    } else if (name == "render-views") {
      const auto model = load_model(*sub, f);
      cli::render_views(model, cli::load_crop(f.image, f.mask, model.cfg.image), f.views, f.out);
    } else if (name == "synth") {
      const auto m = cli::synth(cli::load_spec(f.spec), f.count, f.seed, f.out);
      std::printf("wrote %zu samples to %s\n", m.entries.size(), f.out.c_str());
    } else if (name == "smoke") {
      std::optional<trainer::TrainConfig> cfg;
      if (!f.config.empty()) cfg = trainer::load_config(f.config);
      const auto metrics = cli::smoke(f.out, f.seed, f.manifest, cfg);
      std::printf("smoke ok: pck@0.1 %.3f over %zu pairs, mask IoU %.3f\n", metrics.at("pck@0.1").get<double>(),
                  metrics.at("n_pairs").get<std::size_t>(), metrics.at("mask_iou").get<double>());
    }
  } catch (const cli::StageError& e) {
    std::fprintf(stderr, "saor %s: failed at stage %s: %s\n", name.c_str(), e.stage.c_str(), e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "saor %s: numeric failure at stage %s: %s\n", name.c_str(), e.stage.c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "saor %s: error: %s\n", name.c_str(), e.what());
    return 1;
  }
  return 0;
}
