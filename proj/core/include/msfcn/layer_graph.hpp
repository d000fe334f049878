#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "msfcn/model_config.hpp"
#include "msfcn/ops.hpp"
#include "msfcn/param_store.hpp"

namespace msfcn {

enum class LayerOp { kInput, kConv, kBatchNorm, kRelu, kMaxPool, kDeconv, kBilinear, kConcat, kDropout };

std::string_view to_string(LayerOp op) noexcept;

/// Per-sample feature extent (batch excluded).
struct FeatureShape {
  int c = 0;
  int h = 0;
  int w = 0;
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
  std::string str() const;
};

struct ParamSpec {
  std::string name;
  std::vector<int> dims;
  ParamRole role = ParamRole::kWeight;
  int fan_in = 0;
  int fan_out = 0;

  std::size_t numel() const noexcept;
};

struct LayerNode {
  std::string name;
  LayerOp op = LayerOp::kInput;
  std::vector<int> inputs;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  int groups = 1;
  int ratio = 1;
  DeconvGeometry deconv;
  double dropout_p = 0.0;
  /// Conv/deconv: weight[, bias]. Batch norm: scale, shift, running mean, running var.
  std::vector<std::string> params;
  FeatureShape out;
};

/// Ordered, acyclic layer list. Every node's inputs precede it, and shapes are
/// inferred and validated as nodes are added; violations raise config errors.
class LayerGraph {
 public:
  explicit LayerGraph(FeatureShape input);

  int input() const noexcept { return 0; }

  int conv(const std::string& name, int in, int out_channels, int kernel, int pad, bool bias);
  int batchnorm(const std::string& name, int in);
  int relu(const std::string& name, int in);
  /// 3x3 "same" conv (no bias) + batch norm + ReLU.
  int conv_block(const std::string& name, int in, int out_channels);
  int maxpool(const std::string& name, int in, int ratio);
  /// Learnable upsample with the default geometry for `ratio`; no bias.
  int deconv(const std::string& name, int in, int out_channels, int ratio, int groups);
  int bilinear(const std::string& name, int in, int ratio);
  int concat(const std::string& name, std::vector<int> inputs);
  int dropout(const std::string& name, int in, double p);

  void set_output(int node);
  int output() const noexcept { return output_; }

  const std::vector<LayerNode>& nodes() const noexcept { return nodes_; }
  const LayerNode& node(int i) const { return nodes_.at(i); }
  const std::vector<ParamSpec>& params() const noexcept { return params_; }
  /// Node id by name, -1 if absent.
  int find(std::string_view name) const;
  int count(LayerOp op) const;

 private:
  int push(LayerNode node);
  const LayerNode& checked(int id, const std::string& user) const;
  void add_param(LayerNode& node, ParamSpec spec);

  std::vector<LayerNode> nodes_;
  std::vector<ParamSpec> params_;
  int output_ = -1;
};

/// Skip taps keyed by spatial resolution, plus the bottleneck node.
struct EncoderOutputs {
  std::map<int, int> taps;
  int bottleneck = -1;
};

/// Parallel pooling subpaths (pool -> 1x1 compression -> upsample to the
/// baseline resolution) concatenated along channels. Returns the concat node.
int build_ms_pooling_module(LayerGraph& graph, const ModelConfig& cfg, int input);

/// 15 conv+BN+ReLU layers around three downsampling stages; the first stage
/// uses the multi-scale module when enabled. Dropout follows the bottleneck.
EncoderOutputs build_encoder(LayerGraph& graph, const ModelConfig& cfg);

/// Upsamples the bottleneck by several ratios in parallel, joins the
/// same-resolution results with the matching tap, then climbs to full size.
int build_dense_decoder(LayerGraph& graph, const ModelConfig& cfg, const EncoderOutputs& enc);

/// Alternating upsample / conv-block ladder with skip concatenations.
int build_plain_decoder(LayerGraph& graph, const ModelConfig& cfg, const EncoderOutputs& enc);

LayerGraph build_graph(const ModelConfig& cfg);

struct LayerParamCount {
  std::string layer;
  std::size_t count = 0;
};

struct ParameterBreakdown {
  std::size_t total = 0;
  std::vector<LayerParamCount> layers;

  std::size_t of(std::string_view layer) const;
};

/// Trainable scalar parameters (batch-norm running statistics excluded).
ParameterBreakdown parameter_count(const LayerGraph& graph);

/// Human-readable layer table: name, op, in-shape, out-shape, params.
std::string describe(const LayerGraph& graph);

}  // namespace msfcn
