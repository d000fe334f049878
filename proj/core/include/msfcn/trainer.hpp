#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msfcn/data_io.hpp"
#include "msfcn/metrics.hpp"
#include "msfcn/model.hpp"
#include "msfcn/model_config.hpp"

namespace msfcn {

struct TrainConfig {
  double base_lr = 0.01;
  double power = 0.5;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  /// Absent: `epochs` passes over the training set. Zero: initial checkpoint only.
  std::optional<int> max_iter;
  int epochs = 10;
  int batch_size = 8;
  std::uint64_t seed = 1;
  /// Checkpoint period in iterations; 0 writes only the initial and final ones.
  int checkpoint_every = 0;
  /// Expand the training set 40x with displacements and dihedral transforms.
  bool augment = false;
  ModelConfig model;
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path output_dir = "run";

  /// Throws a config error listing every violated field.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// JSON with the field names above; model settings sit under "model" (either an
/// object or a preset name). Relative manifest and output paths are resolved
/// against `base_dir`. Unknown keys are rejected.
TrainConfig parse_train_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
TrainConfig load_train_config(const std::filesystem::path& path);
std::string train_config_to_json(const TrainConfig& cfg);

ModelConfig parse_model_config(std::string_view json_text);
/// A preset name ("default", "toy") or a JSON file.
ModelConfig load_model_config(const std::string& name_or_path);
std::string model_config_to_json(const ModelConfig& cfg);

/// base_lr * (1 - iter / max_iter)^power.
double poly_lr(int iter, int max_iter, double base_lr, double power);

/// One velocity buffer per trainable parameter, zero-initialised.
template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> velocity;
  int iter = 0;

  static OptimizerState init(const ParamStore<T>& params);
};

struct StepOptions {
  double lr = 0.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Nesterov update in look-ahead form for one parameter:
///   g' = g + weight_decay * w (when decayed)
///   v  = momentum * v - lr * g'
///   w  = w + momentum * v - lr * g'
template <typename T>
void nesterov_update(std::span<T> w, std::span<const T> g, std::span<T> v, const StepOptions& opt,
                     bool decayed);

/// Applies nesterov_update to every trainable parameter using its grad slot.
/// A non-finite gradient aborts before any parameter changes.
template <typename T>
void nesterov_step(ParamStore<T>& params, OptimizerState<T>& state, const StepOptions& opt);

/// 0.5 * sum of squared conv/deconv weights.
template <typename T>
double l2_penalty(const ParamStore<T>& params);

/// Hash of the ordered sample ids, images and masks.
std::uint64_t data_hash(const std::vector<Sample>& samples);

struct TrainEvent {
  int iter = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  int iterations = 0;
  std::vector<double> losses;
  std::filesystem::path final_checkpoint;
  std::uint64_t data_hash = 0;
  std::size_t samples = 0;
};

struct TrainHooks {
  std::function<void(const TrainEvent&)> on_step;
};

/// Trains on the samples of `cfg.train_manifest` (all splits other than test).
TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {});
/// Trains on in-memory samples; each must already be input_size x input_size
/// unless `cfg.augment` crops them.
TrainResult train_on(const TrainConfig& cfg, const std::vector<Sample>& samples, const TrainHooks& hooks = {});

/// Loads a checkpoint written by `train` into a freshly built model.
Model<float> load_model(const ModelConfig& cfg, const std::filesystem::path& checkpoint);

struct EvalOptions {
  EvaluateOptions metrics;
  /// Worker threads for the per-slice metrics; 0 reads MSFCN_THREADS (default 1).
  int threads = 0;
};

/// Eval-mode prediction for one image: centre-cropped to the model input, then
/// argmax. `offset` receives the (row, col) of the crop.
Mask predict(Model<float>& model, const Image& image, std::pair<int, int>* offset = nullptr);

/// Predicts every entry of `manifest` and scores it against its contours
/// (or the contours traced from its mask).
MetricsReport evaluate(Model<float>& model, const Manifest& manifest, const EvalOptions& opt = {});

/// The test split of `manifest`, or every entry when it has no test split.
Manifest evaluation_set(const Manifest& manifest);

/// Text report: spacing line, metrics table and per-case count.
std::string format_report(const MetricsReport& report, const Manifest& manifest);

enum class AblationSuite { kMsPooling, kUpsampleMode, kDenseDecoder };

std::string_view to_string(AblationSuite suite) noexcept;
AblationSuite parse_ablation_suite(std::string_view text);

struct AblationPreset {
  std::string label;
  std::string slug;
  ModelConfig model;
};

/// Columns of the comparison table, derived from `base`.
std::vector<AblationPreset> ablation_presets(AblationSuite suite, const ModelConfig& base);

struct AblationCell {
  AblationPreset preset;
  std::optional<MetricSummary> summary;
  std::string error;
  std::uint64_t data_hash = 0;
  /// Trainable scalars of the preset.
  std::size_t parameters = 0;
};

struct AblationResult {
  AblationSuite suite = AblationSuite::kMsPooling;
  std::vector<AblationCell> cells;

  std::string title() const;
  std::string table() const;
};

/// Trains and evaluates every preset with the same seed and data. A preset
/// that fails is reported in its column and the others still run.
AblationResult run_ablation(AblationSuite suite, const TrainConfig& base);

}  // namespace msfcn
