#include "msfcn/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

#include "msfcn/augment.hpp"
#include "msfcn/checkpoint.hpp"
#include "msfcn/ops.hpp"

namespace msfcn {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write to '" + path.string() + "' failed");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Seeded permutation; std::shuffle is implementation-defined.
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::min(i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t value) { return fnv1a(&value, sizeof value, seed); }

std::vector<Sample> prepare(const std::vector<Sample>& samples, const TrainConfig& cfg) {
  const int size = cfg.model.input_size;
  if (cfg.augment) return augment_dataset(samples, AugmentOptions{size});
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) {
    if (s.image.rows == size && s.image.cols == size) {
      s.validate(cfg.model.classes);
      out.push_back(s);
    } else {
      out.push_back(center_crop(s, size));
    }
  }
  return out;
}

std::string checkpoint_name(int iter) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%07d.msfc", iter);
  return buf;
}

int threads_from_env() {
  if (const char* v = std::getenv("MSFCN_THREADS")) {
    const int n = std::atoi(v);
    if (n > 0) return n;
  }
  return 1;
}

}  // namespace

std::uint64_t data_hash(const std::vector<Sample>& samples) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const Sample& s : samples) {
    h = fnv1a(s.id.data(), s.id.size(), h);
    h = fnv1a(s.image.data.data(), s.image.data.size() * sizeof(double), h);
    h = fnv1a(s.mask.data.data(), s.mask.data.size(), h);
  }
  return h;
}

TrainResult train_on(const TrainConfig& cfg, const std::vector<Sample>& raw, const TrainHooks& hooks) {
  cfg.validate();
  if (raw.empty()) throw Error(ErrorKind::kConfig, "train: no training samples");
  const std::vector<Sample> samples = prepare(raw, cfg);
  const int size = cfg.model.input_size;
  const int batches_per_epoch =
      static_cast<int>((samples.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size);
  const int max_iter = cfg.max_iter.value_or(cfg.epochs * batches_per_epoch);

  TrainResult result;
  result.samples = samples.size();
  result.data_hash = data_hash(samples);

  const fs::path ckpt_dir = cfg.output_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  TrainConfig echo = cfg;
  echo.max_iter = max_iter;
  write_text(cfg.output_dir / "train_config.json", train_config_to_json(echo));
  write_text(cfg.output_dir / "model.json", model_config_to_json(cfg.model));

  Model<float> model(cfg.model, cfg.seed);
  auto save = [&](int iter) {
    const fs::path path = ckpt_dir / checkpoint_name(iter);
    write_checkpoint_file(path, to_checkpoint(model.params()));
    result.final_checkpoint = path;
  };
  save(0);

  std::ofstream log(cfg.output_dir / "log.csv", std::ios::binary);
  if (!log) throw Error(ErrorKind::kIo, "cannot open '" + (cfg.output_dir / "log.csv").string() + "'");
  log << "iter,lr,loss\n";

  OptimizerState<float> state = OptimizerState<float>::init(model.params());
  std::vector<std::size_t> order;
  int order_epoch = -1;
  for (int iter = 0; iter < max_iter; ++iter) {
    const int epoch = iter / batches_per_epoch;
    if (epoch != order_epoch) {
      order = permutation(samples.size(), mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
      order_epoch = epoch;
    }
    const std::size_t first = static_cast<std::size_t>(iter % batches_per_epoch) * cfg.batch_size;
    const std::size_t last = std::min(samples.size(), first + static_cast<std::size_t>(cfg.batch_size));
    const int batch = static_cast<int>(last - first);

    Tensor<float> input(Shape{batch, 1, size, size});
    LabelMap labels{batch, size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(batch) * size * size)};
    for (int b = 0; b < batch; ++b) {
      const Sample& s = samples[order[first + b]];
      const std::size_t plane = static_cast<std::size_t>(size) * size;
      for (std::size_t k = 0; k < plane; ++k) {
        input[b * plane + k] = static_cast<float>(s.image.data[k]);
        labels.data[b * plane + k] = s.mask.data[k];
      }
    }

    const double lr = poly_lr(iter, max_iter, cfg.base_lr, cfg.power);
    Tape<float> tape;
    const Var x = tape.constant(std::move(input));
    const Var logits = model.forward(tape, x, Mode::kTrain, mix(cfg.seed ^ 0x5bd1e995ULL, static_cast<std::uint64_t>(iter)));
    const Var loss = ops::softmax_cross_entropy(tape, logits, labels);
    const double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value)) {
      log.flush();
      throw Error(ErrorKind::kNumeric, "train: non-finite loss at iter " + std::to_string(iter) +
                                           "; last checkpoint " + result.final_checkpoint.string());
    }
    tape.backward(loss);
    nesterov_step(model.params(), state, StepOptions{lr, cfg.momentum, cfg.weight_decay});

    result.losses.push_back(loss_value);
    result.iterations = iter + 1;
    log << iter << "," << fmt("%.9g", lr) << "," << fmt("%.9g", loss_value) << "\n";
    if (hooks.on_step) hooks.on_step(TrainEvent{iter, lr, loss_value});
    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < max_iter) save(iter + 1);
  }
  if (max_iter > 0) save(max_iter);
  log.close();

  write_text(cfg.output_dir / "train_summary.json",
             "{\n  \"iterations\": " + std::to_string(result.iterations) + ",\n  \"samples\": " +
                 std::to_string(result.samples) + ",\n  \"data_hash\": \"" + hex(result.data_hash) +
                 "\",\n  \"final_checkpoint\": \"" + result.final_checkpoint.filename().generic_string() + "\"\n}\n");
  return result;
}

TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.train_manifest.empty()) throw Error(ErrorKind::kConfig, "train config: train_manifest is required");
  const Manifest manifest = read_manifest(cfg.train_manifest).filter(Split::kTrain);
  std::vector<Sample> samples;
  for (const auto& e : manifest.entries) samples.push_back(load_sample(manifest, e, cfg.model.classes));
  return train_on(cfg, samples, hooks);
}

Model<float> load_model(const ModelConfig& cfg, const fs::path& checkpoint) {
  Model<float> model(cfg, 0);
  try {
    load_into(read_checkpoint_file(checkpoint), model.params());
  } catch (const Error& e) {
    throw Error(e.kind(), checkpoint.string() + ": " + e.what());
  }
  return model;
}

Mask predict(Model<float>& model, const Image& image, std::pair<int, int>* offset) {
  const int size = model.config().input_size;
  if (image.rows < size || image.cols < size) {
    throw_invalid("predict: image " + std::to_string(image.rows) + "x" + std::to_string(image.cols) +
                  " is smaller than the model input " + std::to_string(size));
  }
  const int r0 = (image.rows - size) / 2;
  const int c0 = (image.cols - size) / 2;
  Tensor<float> input(Shape{1, 1, size, size});
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) input(0, 0, r, c) = static_cast<float>(image(r0 + r, c0 + c));
  }
  const LabelMap labels = argmax_labels(model.infer(input));
  Mask out(size, size);
  out.data = labels.data;
  if (offset) *offset = {r0, c0};
  return out;
}

namespace {

std::optional<Polygon> shifted(const std::optional<Polygon>& poly, int r0, int c0) {
  if (!poly) return std::nullopt;
  Polygon out = *poly;
  for (Point& p : out) {
    p.x -= c0;
    p.y -= r0;
  }
  return out;
}

}  // namespace

MetricsReport evaluate(Model<float>& model, const Manifest& manifest, const EvalOptions& opt) {
  const std::size_t n = manifest.entries.size();
  std::vector<PredictedSlice> preds(n);
  std::vector<ContourSet> gts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ManifestEntry& e = manifest.entries[i];
    std::pair<int, int> off;
    preds[i] = PredictedSlice{e.id, e.case_id, predict(model, load_image_pgm(e.image), &off)};
    ContourSet gt = load_contours(manifest, e, model.config().classes);
    gt.endo = shifted(gt.endo, off.first, off.second);
    gt.epi = shifted(gt.epi, off.first, off.second);
    gts[i] = std::move(gt);
  }

  std::vector<SliceRecord> records(n);
  const int threads = std::max(1, std::min<int>(opt.threads > 0 ? opt.threads : threads_from_env(), static_cast<int>(n)));
  std::vector<std::string> errors(n);
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < n; i += step) {
      try {
        records[i] = evaluate_case({preds[i]}, {gts[i]}, opt.metrics).front();
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
      }
    }
  };
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, static_cast<std::size_t>(t), static_cast<std::size_t>(threads));
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw Error(ErrorKind::kInvalidArgument, "evaluate: slice '" + preds[i].slice_id + "': " + errors[i]);
  }
  return aggregate_report(records, opt.metrics.threshold_mm);
}

Manifest evaluation_set(const Manifest& manifest) {
  Manifest test = manifest.filter(Split::kTest);
  return test.entries.empty() ? manifest : test;
}

std::string format_report(const MetricsReport& report, const Manifest& manifest) {
  std::set<std::pair<double, double>> spacings;
  for (const auto& e : manifest.entries) {
    const Spacing s = manifest.spacing_of(e);
    spacings.insert({s.row_mm, s.col_mm});
  }
  std::string out = "spacing (row x col, mm):";
  for (const auto& [r, c] : spacings) out += " " + fmt("%g", r) + "x" + fmt("%g", c);
  out += "\ngood contour threshold: APD < " + fmt("%g", report.threshold_mm) + " mm\n";
  out += "cases: " + std::to_string(report.cases.size()) + ", slices: " + std::to_string(report.slices.size()) + "\n\n";
  out += format_comparison_table({ComparisonRow{"MS-FCN", report.cases.size(), report.overall}});
  return out;
}

std::string_view to_string(AblationSuite suite) noexcept {
  switch (suite) {
    case AblationSuite::kMsPooling: return "ms_pooling";
    case AblationSuite::kUpsampleMode: return "upsample_mode";
    case AblationSuite::kDenseDecoder: return "dense_decoder";
  }
  return "?";
}

AblationSuite parse_ablation_suite(std::string_view text) {
  for (auto s : {AblationSuite::kMsPooling, AblationSuite::kUpsampleMode, AblationSuite::kDenseDecoder}) {
    if (text == to_string(s)) return s;
  }
  throw Error(ErrorKind::kConfig,
              "unknown ablation suite '" + std::string(text) + "' (expected ms_pooling, upsample_mode or dense_decoder)");
}

std::vector<AblationPreset> ablation_presets(AblationSuite suite, const ModelConfig& base) {
  std::vector<AblationPreset> out;
  auto with = [&](std::string label, std::string slug, auto edit) {
    ModelConfig cfg = base;
    edit(cfg);
    out.push_back({std::move(label), std::move(slug), cfg});
  };
  switch (suite) {
    case AblationSuite::kMsPooling:
      with("Pooling layer", "pooling_layer", [](ModelConfig& c) { c.ms_pooling = false; });
      with("Multi-scale pooling module", "ms_pooling", [](ModelConfig& c) { c.ms_pooling = true; });
      break;
    case AblationSuite::kUpsampleMode:
      with("Bilinear interpolation", "bilinear", [](ModelConfig& c) {
        c.ms_pooling = true;
        c.ms_upsample_mode = UpsampleMode::kBilinear;
      });
      with("Deconvolution", "deconv", [](ModelConfig& c) {
        c.ms_pooling = true;
        c.ms_upsample_mode = UpsampleMode::kDeconv;
      });
      with("Group deconvolution", "group_deconv", [](ModelConfig& c) {
        c.ms_pooling = true;
        c.ms_upsample_mode = UpsampleMode::kGroupDeconv;
      });
      break;
    case AblationSuite::kDenseDecoder:
      with("Without", "without", [](ModelConfig& c) { c.dense_decoder = false; });
      with("With", "with", [](ModelConfig& c) { c.dense_decoder = true; });
      break;
  }
  return out;
}

std::string AblationResult::title() const {
  switch (suite) {
    case AblationSuite::kMsPooling: return "Downsampling after the first encoder stage";
    case AblationSuite::kUpsampleMode: return "Upsampling in the multi-scale pooling module";
    case AblationSuite::kDenseDecoder: return "Dense connection decoder";
  }
  return {};
}

std::string AblationResult::table() const {
  std::vector<std::string> labels;
  std::vector<std::optional<MetricSummary>> summaries;
  for (const auto& c : cells) {
    labels.push_back(c.preset.label);
    summaries.push_back(c.summary);
  }
  std::string out = title() + "\n" + format_metrics_table(labels, summaries);
  for (const auto& c : cells) {
    out += "  " + c.preset.label + ": " + std::to_string(c.parameters) + " parameters";
    if (c.summary) out += ", data hash " + hex(c.data_hash);
    if (!c.error.empty()) out += ", failed: " + c.error;
    out += "\n";
  }
  return out;
}

AblationResult run_ablation(AblationSuite suite, const TrainConfig& base) {
  base.validate();
  AblationResult result;
  result.suite = suite;
  const fs::path root = base.output_dir / std::string(to_string(suite));
  const fs::path test = base.test_manifest.empty() ? base.train_manifest : base.test_manifest;
  for (const AblationPreset& preset : ablation_presets(suite, base.model)) {
    AblationCell cell;
    cell.preset = preset;
    try {
      cell.parameters = parameter_count(build_graph(preset.model)).total;
      TrainConfig cfg = base;
      cfg.model = preset.model;
      cfg.output_dir = root / preset.slug;
      const TrainResult trained = train(cfg);
      cell.data_hash = trained.data_hash;
      Model<float> model = load_model(preset.model, trained.final_checkpoint);
      const Manifest manifest = evaluation_set(read_manifest(test));
      const MetricsReport report = evaluate(model, manifest);
      write_text(cfg.output_dir / "report.csv", report_csv(report));
      cell.summary = report.overall;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    result.cells.push_back(std::move(cell));
  }
  write_text(root / "table.txt", result.table());
  return result;
}

}  // namespace msfcn
