// osseg: dataset generation, training, evaluation and gradient checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "osseg/checkpoint.hpp"
#include "osseg/data.hpp"
#include "osseg/gradcheck.hpp"
#include "osseg/inference.hpp"
#include "osseg/kernels.hpp"
#include "osseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace osseg;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kVerify = 3 };

struct GenArgs {
  std::string spec, out;
  std::size_t count = 0;
  bool eval_bundle = false;
  std::size_t negative_factor = 4;
};

int cmd_gen(const GenArgs& a) {
  const DatasetSpec spec = dataset_spec_from(KeyValues::from_file(a.spec));
  write_dataset(spec, a.out, a.count, a.eval_bundle, a.negative_factor);
  std::cout << "wrote " << a.out << "/manifest.json\n";
  return kOk;
}

struct TrainArgs {
  std::string config, out, log;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  KeyValues kv = KeyValues::from_file(a.config);
  if (a.seed) kv.set("seed", std::to_string(*a.seed));
  const TrainConfig config = train_config_from(kv);

  std::ofstream log_file;
  TrainHooks hooks;
  if (!a.log.empty()) {
    log_file.open(a.log);
    if (!log_file) throw DataError(a.log + ": cannot open log for writing");
    hooks.log = &log_file;
  } else {
    hooks.log = &std::cerr;
  }
  const TrainResult r = train(config, hooks);
  save_checkpoint(a.out, r.checkpoint);
  std::cout << "wrote " << a.out << " after " << r.steps << " steps\n";
  return kOk;
}

struct EvalArgs {
  std::string ckpt, data, score = "max-softmax", report, maps;
  std::size_t assays = 50;
  double threshold = 0.5;
  double odin_temperature = 10.0, odin_epsilon = 1e-3;
  std::size_t mc_passes = 50;
  std::uint64_t seed = 0;
  bool raw = false;
};

void write_maps(Model& model, const EvalData& data, const EvalConfig& config, const EvalArgs& a) {
  fs::create_directories(a.maps);
  auto dump = [&](const std::string& subset, const std::vector<Sample>& samples) {
    const auto maps = predict_all(model, samples, config);
    char stem[64];
    for (std::size_t i = 0; i < maps.size(); ++i) {
      std::snprintf(stem, sizeof stem, "%s_%05zu", subset.c_str(), i);
      const std::string base = (fs::path(a.maps) / stem).string();
      write_score_png(base + "_outlier.png", maps[i].outlier_prob);
      write_index_png(base + "_merged.png", maps[i].merged, maps[i].height, maps[i].width);
      if (a.raw) write_raw_float(base + "_outlier", maps[i].outlier_prob);
    }
  };
  dump("inlier", data.inliers);
  dump("negative", data.negatives);
  dump("pasted", data.pasted);
  for (const auto& [h, samples] : data.hazards) dump("hazard_" + h, samples);
}

int cmd_eval(const EvalArgs& a) {
  EvalConfig config;
  try {
    config.mode = parse_score_mode(a.score);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  config.assays = a.assays;
  config.threshold = a.threshold;
  config.odin_temperature = a.odin_temperature;
  config.odin_epsilon = a.odin_epsilon;
  config.mc_passes = a.mc_passes;
  config.seed = a.seed;

  Checkpoint ckpt = load_checkpoint(a.ckpt);
  try {
    check_compatible(config.mode, ckpt.model.config().head_kind);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  DatasetSpec spec;
  spec.kind = DatasetKind::directory;
  spec.path = a.data;
  const DirectoryDataset ds(spec);
  for (const auto& w : ds.diagnostics()) std::cerr << "warning: " << w << "\n";
  const EvalData data = EvalData::from_directory(ds);

  const EvalReport report = evaluate(ckpt.model, data, config);
  const std::string json = report.to_json();
  if (!a.report.empty()) {
    std::ofstream out(a.report);
    if (!out) throw DataError(a.report + ": cannot open report for writing");
    out << json << "\n";
  } else {
    std::cout << json << "\n";
  }
  std::cout << render_table({report});
  if (!a.maps.empty()) write_maps(ckpt.model, data, config, a);
  return kOk;
}

struct GradcheckArgs {
  GradcheckOptions options;
  bool list = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.list) {
    for (const auto& n : gradcheck_cases()) std::cout << n << "\n";
    return kOk;
  }
  const auto results = run_gradcheck(a.options);
  if (results.empty()) {
    std::cerr << "error: no gradient check matches '" << a.options.filter << "'\n";
    return kUsage;
  }
  bool ok = true;
  double total = 0;
  std::printf("%-32s %12s %8s %8s %8s  %s\n", "case", "rel_error", "checked", "skipped", "seconds", "result");
  for (const auto& r : results) {
    std::printf("%-32s %12.3e %8zu %8zu %8.2f  %s\n", r.name.c_str(), r.max_rel_error, r.checked,
                r.skipped, r.seconds, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
    total += r.seconds;
  }
  std::printf("%zu cases, %.1f s, %s\n", results.size(), total, ok ? "all passed" : "FAILED");
  return ok ? kOk : kVerify;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kVerify;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set semantic segmentation with negative training data"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads for convolution kernels (0 = default)");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Write a synthetic dataset as PNG pairs plus manifest.json");
  g->add_option("--spec", gen.spec, "key=value dataset spec")->required()->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--count", gen.count, "number of images (per subset with --eval-bundle)")->required();
  g->add_flag("--eval-bundle", gen.eval_bundle, "write inlier, negative, pasted and hazard subsets");
  g->add_option("--negative-factor", gen.negative_factor, "negative images per inlier image in a bundle")
      ->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--config", tr.config, "key=value training config")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--seed", tr.seed, "overrides the config seed");
  t->add_option("--log", tr.log, "JSON-lines epoch log (default stderr)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on an evaluation bundle");
  e->add_option("--ckpt", ev.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "dataset directory written by gen --eval-bundle")
      ->required()
      ->check(CLI::ExistingDirectory);
  e->add_option("--score", ev.score,
                "max-softmax, odin, max-sigma, cplus1, cplus1-diff, twohead, confidence, mc-dropout")
      ->capture_default_str();
  e->add_option("--assays", ev.assays)->capture_default_str()->check(CLI::PositiveNumber);
  e->add_option("--threshold", ev.threshold)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  e->add_option("--odin-temperature", ev.odin_temperature)->capture_default_str();
  e->add_option("--odin-epsilon", ev.odin_epsilon)->capture_default_str();
  e->add_option("--mc-passes", ev.mc_passes)->capture_default_str()->check(CLI::PositiveNumber);
  e->add_option("--seed", ev.seed)->capture_default_str();
  e->add_option("--report", ev.report, "report JSON path (default stdout)");
  e->add_option("--maps", ev.maps, "directory for per-image outlier and merged PNG maps");
  e->add_flag("--raw", ev.raw, "also write raw float32 outlier maps");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference checks of every gradient");
  c->add_option("--seeds", gc.options.seeds)->capture_default_str();
  c->add_option("--filter", gc.options.filter, "only cases starting with this prefix");
  c->add_option("--inject-fault", gc.options.inject_fault, "perturb one case's gradient (test hook)");
  c->add_flag("--list", gc.list, "print case names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }
  if (threads > 0) kernels::set_threads(threads);

  if (*g) return guarded([&] { return cmd_gen(gen); });
  if (*t) return guarded([&] { return cmd_train(tr); });
  if (*e) return guarded([&] { return cmd_eval(ev); });
  return guarded([&] { return cmd_gradcheck(gc); });
}
