#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace msfcn {

enum class UpsampleMode { kBilinear, kDeconv, kGroupDeconv };

std::string_view to_string(UpsampleMode mode) noexcept;
UpsampleMode parse_upsample_mode(std::string_view text);

/// Declarative description of an MS-FCN variant.
struct ModelConfig {
  int input_size = 108;
  int in_channels = 1;
  /// background / myocardium / cavity
  int classes = 3;
  int base_channels = 64;
  std::vector<int> encoder_pool_ratios{2, 2, 3};

  bool ms_pooling = true;
  std::vector<int> ms_subpath_ratios{2, 6, 18, 36};
  UpsampleMode ms_upsample_mode = UpsampleMode::kGroupDeconv;
  int ms_group = 32;
  int ms_compression_channels = 32;

  bool dense_decoder = true;
  std::vector<int> dense_decoder_ratios{3, 6};
  int decoder_channels = 128;

  double dropout_p = 0.5;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  /// Throws a config error listing every violated field.
  void validate() const;

  int downsample_factor() const;
  int bottleneck_size() const { return input_size / downsample_factor(); }
  /// Channel width of encoder stage `stage` (0..2) and of the bottleneck (3).
  int stage_channels(int stage) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A small variant (36x36 input, narrow layers) with the same topology,
/// for gradient checks and fast end-to-end runs.
ModelConfig toy_model_config();

/// "default" or "toy".
ModelConfig model_config_preset(std::string_view name);

/// Conv layers per encoder stage: three pre-downsample stages plus the bottleneck.
inline constexpr int kEncoderConvsPerStage[4] = {4, 4, 4, 3};
inline constexpr int kEncoderConvCount = 15;

}  // namespace msfcn
