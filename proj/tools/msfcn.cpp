#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "msfcn/augment.hpp"
#include "msfcn/data_io.hpp"
#include "msfcn/error.hpp"
#include "msfcn/gradcheck_suite.hpp"
#include "msfcn/layer_graph.hpp"
#include "msfcn/trainer.hpp"

namespace fs = std::filesystem;
using namespace msfcn;

namespace {

constexpr double kOpTolerance = 1e-4;
constexpr double kModelTolerance = 1e-3;

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct SynthArgs {
  int n = 10;
  std::uint64_t seed = 1;
  int size = 128;
  int test = 0;
  double spacing = 1.25;
  PhantomSpec geometry;
  fs::path out = "phantoms";
};

int run_synth(const SynthArgs& a) {
  if (a.test < 0 || a.test > a.n) throw Error(ErrorKind::kConfig, "--test must be in [0, --n]");
  PhantomSpec spec = a.geometry;
  spec.seed = a.seed;
  spec.size = a.size;
  spec.spacing = Spacing{a.spacing, a.spacing};
  const auto phantoms = synth_phantoms(spec, a.n);
  const std::vector<Phantom> train(phantoms.begin(), phantoms.end() - a.test);
  const std::vector<Phantom> test(phantoms.end() - a.test, phantoms.end());
  Manifest m = write_phantom_dataset(train, a.out, Split::kTrain);
  const Manifest t = write_phantom_dataset(test, a.out, Split::kTest);
  m.default_spacing = spec.spacing;
  m.entries.insert(m.entries.end(), t.entries.begin(), t.entries.end());
  write_manifest(m, a.out / "manifest.json");
  std::printf("wrote %d phantoms (%d train, %d test) to %s\n", a.n, a.n - a.test, a.test,
              (a.out / "manifest.json").string().c_str());
  return 0;
}

struct AugmentArgs {
  fs::path in;
  fs::path out = "augmented";
  int crop = 108;
};

int run_augment(const AugmentArgs& a) {
  const Manifest src = read_manifest(a.in).filter(Split::kTrain);
  std::vector<Sample> samples;
  samples.reserve(src.entries.size());
  for (const auto& e : src.entries) samples.push_back(load_sample(src, e));
  AugmentOptions opt;
  opt.crop_size = a.crop;
  const auto augmented = augment_dataset(samples, opt);
  Manifest m = write_sample_dataset(augmented, a.out, Split::kTrain);
  m.default_spacing = src.default_spacing;
  write_manifest(m, a.out / "manifest.json");
  std::printf("augmented %zu samples into %zu at %s\n", samples.size(), augmented.size(),
              (a.out / "manifest.json").string().c_str());
  return 0;
}

struct TrainArgs {
  fs::path config;
  std::optional<int> max_iter;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::optional<fs::path> train_manifest;
  bool quiet = false;
};

TrainConfig resolve_config(const fs::path& config, const std::optional<std::uint64_t>& seed,
                           const std::optional<fs::path>& out) {
  TrainConfig cfg = load_train_config(config);
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = *out;
  return cfg;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg = resolve_config(a.config, a.seed, a.out);
  if (a.max_iter) cfg.max_iter = *a.max_iter;
  if (a.train_manifest) cfg.train_manifest = *a.train_manifest;
  TrainHooks hooks;
  if (!a.quiet) {
    hooks.on_step = [](const TrainEvent& e) {
      std::printf("iter %d lr %.6g loss %.6g\n", e.iter, e.lr, e.loss);
      std::fflush(stdout);
    };
  }
  const TrainResult r = train(cfg, hooks);
  std::printf("trained %d iterations on %zu samples (data hash %016llx); final checkpoint %s\n", r.iterations,
              r.samples, static_cast<unsigned long long>(r.data_hash), r.final_checkpoint.string().c_str());
  return 0;
}

struct EvalArgs {
  fs::path config;
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> manifest;
  std::optional<fs::path> out;
  int threads = 0;
};

fs::path latest_checkpoint(const TrainConfig& cfg) {
  const fs::path summary = cfg.output_dir / "train_summary.json";
  if (!fs::exists(summary)) {
    throw Error(ErrorKind::kIo, "no --checkpoint given and '" + summary.string() + "' does not exist");
  }
  const auto j = nlohmann::json::parse(read_file(summary));
  return cfg.output_dir / "checkpoints" / j.at("final_checkpoint").get<std::string>();
}

int run_eval(const EvalArgs& a) {
  TrainConfig cfg = resolve_config(a.config, std::nullopt, std::nullopt);
  const fs::path ckpt = a.checkpoint ? *a.checkpoint : latest_checkpoint(cfg);
  fs::path manifest_path = a.manifest ? *a.manifest : cfg.test_manifest;
  if (manifest_path.empty()) throw Error(ErrorKind::kConfig, "no --manifest given and test_manifest is unset");
  Manifest manifest = read_manifest(manifest_path);
  if (!a.manifest) manifest = evaluation_set(manifest);
  if (manifest.entries.empty()) {
    throw Error(ErrorKind::kConfig, "manifest '" + manifest_path.string() + "' has no entries to evaluate");
  }
  Model<float> model = load_model(cfg.model, ckpt);
  EvalOptions opt;
  opt.threads = a.threads;
  const MetricsReport report = evaluate(model, manifest, opt);
  const fs::path out = a.out ? *a.out : cfg.output_dir / "eval";
  const std::string text = format_report(report, manifest);
  write_file(out / "report.txt", text);
  write_file(out / "report.csv", report_csv(report));
  std::fputs(text.c_str(), stdout);
  return 0;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::size_t coordinates = 128;
  double eps = 1e-5;
  double model_eps = 1e-4;
  std::string model = "toy";
  bool skip_model = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  GradCheckOptions opt;
  opt.eps = a.eps;
  opt.coordinates = a.coordinates;
  bool ok = true;
  std::printf("%-26s %-18s %12s %6s %7s\n", "op", "shape", "max_rel_err", "coords", "skipped");
  for (const auto& r : run_op_gradchecks(a.seed, opt)) {
    const bool pass = r.result.max_rel_error < kOpTolerance;
    ok = ok && pass;
    std::printf("%-26s %-18s %12.3e %6zu %7zu%s\n", r.op.c_str(), r.shape.c_str(), r.result.max_rel_error,
                r.result.coordinates, r.result.skipped, pass ? "" : "  FAIL");
  }
  if (!a.skip_model) {
    GradCheckOptions mopt = opt;
    mopt.eps = a.model_eps;
    const auto r = run_model_gradcheck(load_model_config(a.model), a.seed, mopt);
    const bool pass = r.result.max_rel_error < kModelTolerance;
    ok = ok && pass;
    std::printf("%-26s %-18s %12.3e %6zu %7zu%s\n", ("model:" + a.model).c_str(), r.shape.c_str(),
                r.result.max_rel_error, r.result.coordinates, r.result.skipped, pass ? "" : "  FAIL");
  }
  std::printf("%s (ops < %.0e, model < %.0e)\n", ok ? "all gradients agree" : "gradient check FAILED", kOpTolerance,
              kModelTolerance);
  return ok ? 0 : 1;
}

struct AblateArgs {
  fs::path config;
  std::string suite = "all";
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
};

int run_ablate(const AblateArgs& a) {
  const TrainConfig cfg = resolve_config(a.config, a.seed, a.out);
  std::vector<AblationSuite> suites;
  if (a.suite == "all") {
    suites = {AblationSuite::kMsPooling, AblationSuite::kUpsampleMode, AblationSuite::kDenseDecoder};
  } else {
    suites = {parse_ablation_suite(a.suite)};
  }
  bool all_ok = true;
  for (const AblationSuite s : suites) {
    const AblationResult r = run_ablation(s, cfg);
    std::printf("%s\n", r.table().c_str());
    for (const auto& c : r.cells) all_ok = all_ok && c.error.empty();
  }
  return all_ok ? 0 : 1;
}

int run_describe(const std::string& config) {
  const ModelConfig cfg = load_model_config(config);
  const LayerGraph graph = build_graph(cfg);
  std::fputs(describe(graph).c_str(), stdout);
  return 0;
}

void report_error(std::string_view kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::fprintf(stderr, "%s\n", j.dump().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MS-FCN left-ventricle segmentation: data, training, evaluation and diagnostics"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate annulus phantoms with masks, contours and a manifest");
  synth_cmd->add_option("--n", synth.n, "Number of phantoms")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", synth.seed, "Random seed");
  synth_cmd->add_option("--size", synth.size, "Image side in pixels");
  synth_cmd->add_option("--test", synth.test, "How many of the phantoms go to the test split");
  synth_cmd->add_option("--spacing", synth.spacing, "Pixel spacing in mm")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--radius-min", synth.geometry.cavity_radius_min, "Smallest cavity radius (px)");
  synth_cmd->add_option("--radius-max", synth.geometry.cavity_radius_max, "Largest cavity radius (px)");
  synth_cmd->add_option("--thickness-min", synth.geometry.thickness_min, "Thinnest myocardium (px)");
  synth_cmd->add_option("--thickness-max", synth.geometry.thickness_max, "Thickest myocardium (px)");
  synth_cmd->add_option("--jitter", synth.geometry.center_jitter, "Largest centre offset (px)");
  synth_cmd->add_option("--noise", synth.geometry.noise_sigma, "Gaussian noise sigma");
  synth_cmd->add_option("--out", synth.out, "Output directory");

  AugmentArgs aug;
  auto* aug_cmd = app.add_subcommand("augment", "Expand the train split 40x (5 shifts x 8 symmetries)");
  aug_cmd->add_option("--in", aug.in, "Source manifest")->required();
  aug_cmd->add_option("--out", aug.out, "Output directory");
  aug_cmd->add_option("--crop", aug.crop, "Output side in pixels")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", tr.config, "Training config (JSON)")->required();
  train_cmd->add_option("--max-iter", tr.max_iter, "Override max_iter");
  train_cmd->add_option("--seed", tr.seed, "Override seed");
  train_cmd->add_option("--out", tr.out, "Override output_dir");
  train_cmd->add_option("--train-manifest", tr.train_manifest, "Override train_manifest");
  train_cmd->add_flag("--quiet", tr.quiet, "Do not print per-iteration losses");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint and write report.txt and report.csv");
  eval_cmd->add_option("--config", ev.config, "Training config (JSON)")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint (default: final one of the training run)");
  eval_cmd->add_option("--manifest", ev.manifest, "Manifest to score, all entries (default: test split of test_manifest)");
  eval_cmd->add_option("--out", ev.out, "Report directory (default: <output_dir>/eval)");
  eval_cmd->add_option("--threads", ev.threads, "Metric worker threads (0: MSFCN_THREADS)");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and the toy model");
  gc_cmd->add_option("--seed", gc.seed, "Random seed");
  gc_cmd->add_option("--coordinates", gc.coordinates, "Coordinates sampled per check");
  gc_cmd->add_option("--eps", gc.eps, "Step for the op checks");
  gc_cmd->add_option("--model-eps", gc.model_eps, "Step for the model check");
  gc_cmd->add_option("--model", gc.model, "Model preset or config for the model check");
  gc_cmd->add_flag("--skip-model", gc.skip_model, "Only check the ops");

  AblateArgs ab;
  auto* ab_cmd = app.add_subcommand("ablate", "Train and compare the presets of an ablation suite");
  ab_cmd->add_option("--config", ab.config, "Base training config (JSON)")->required();
  ab_cmd->add_option("--suite", ab.suite, "ms_pooling, upsample_mode, dense_decoder or all")
      ->check(CLI::IsMember({"all", "ms_pooling", "upsample_mode", "dense_decoder"}));
  ab_cmd->add_option("--seed", ab.seed, "Override seed");
  ab_cmd->add_option("--out", ab.out, "Override output_dir");

  std::string describe_config = "default";
  auto* desc_cmd = app.add_subcommand("describe", "Print the layer table of a model");
  desc_cmd->add_option("--config", describe_config, "Preset name (default, toy) or config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*aug_cmd) return run_augment(aug);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*gc_cmd) return run_gradcheck(gc);
    if (*ab_cmd) return run_ablate(ab);
    if (*desc_cmd) return run_describe(describe_config);
  } catch (const Error& e) {
    report_error(to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 2;
}
