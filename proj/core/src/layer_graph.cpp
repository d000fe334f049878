#include "msfcn/layer_graph.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace msfcn {

// ---------------------------------------------------------------------------
// ModelConfig

std::string_view to_string(UpsampleMode mode) noexcept {
  switch (mode) {
    case UpsampleMode::kBilinear: return "bilinear";
    case UpsampleMode::kDeconv: return "deconv";
    case UpsampleMode::kGroupDeconv: return "group_deconv";
  }
  return "unknown";
}

UpsampleMode parse_upsample_mode(std::string_view text) {
  if (text == "bilinear") return UpsampleMode::kBilinear;
  if (text == "deconv") return UpsampleMode::kDeconv;
  if (text == "group_deconv") return UpsampleMode::kGroupDeconv;
  throw Error(ErrorKind::kConfig, "ms_upsample_mode: unknown value '" + std::string(text) +
                                      "' (expected bilinear, deconv or group_deconv)");
}

int ModelConfig::downsample_factor() const {
  int f = 1;
  for (int r : encoder_pool_ratios) f *= std::max(r, 1);
  return f;
}

int ModelConfig::stage_channels(int stage) const {
  static constexpr int kMultiplier[4] = {1, 2, 4, 4};
  return base_channels * kMultiplier[stage];
}

ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.input_size = 36;
  cfg.base_channels = 4;
  cfg.ms_compression_channels = 8;
  cfg.ms_group = 4;
  cfg.decoder_channels = 8;
  return cfg;
}

ModelConfig model_config_preset(std::string_view name) {
  if (name == "default") return ModelConfig{};
  if (name == "toy") return toy_model_config();
  throw Error(ErrorKind::kConfig, "unknown model preset '" + std::string(name) + "' (expected default or toy)");
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  auto fail = [&](const std::string& field, const std::string& msg) {
    problems.push_back(field + ": " + msg);
  };
  if (input_size <= 0) fail("input_size", "must be positive");
  if (in_channels <= 0) fail("in_channels", "must be positive");
  if (classes < 2) fail("classes", "must be >= 2");
  if (base_channels <= 0) fail("base_channels", "must be positive");
  if (decoder_channels <= 0) fail("decoder_channels", "must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p", "must lie in [0, 1)");
  if (!(bn_eps > 0.0)) fail("bn_eps", "must be > 0");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) fail("bn_momentum", "must lie in [0, 1]");

  bool pools_ok = encoder_pool_ratios.size() == 3;
  if (!pools_ok) fail("encoder_pool_ratios", "must list exactly 3 downsampling ratios");
  for (int r : encoder_pool_ratios) {
    if (r < 2) {
      fail("encoder_pool_ratios", "every ratio must be >= 2");
      pools_ok = false;
      break;
    }
  }
  if (pools_ok && input_size > 0 && input_size % downsample_factor() != 0) {
    fail("input_size", std::to_string(input_size) + " not divisible by product(encoder_pool_ratios) = " +
                           std::to_string(downsample_factor()));
  }

  if (ms_pooling) {
    if (ms_subpath_ratios.empty()) fail("ms_subpath_ratios", "must not be empty");
    if (pools_ok && !ms_subpath_ratios.empty() && ms_subpath_ratios[0] != encoder_pool_ratios[0]) {
      fail("ms_subpath_ratios", "first (baseline) ratio must equal encoder_pool_ratios[0]");
    }
    for (std::size_t i = 0; i < ms_subpath_ratios.size(); ++i) {
      const int r = ms_subpath_ratios[i];
      if (r < 1) {
        fail("ms_subpath_ratios", "ratios must be positive");
        break;
      }
      if (input_size > 0 && input_size % r != 0) {
        fail("ms_subpath_ratios", "ratio " + std::to_string(r) + " does not divide input_size " +
                                      std::to_string(input_size));
      }
      if (i > 0) {
        if (r <= ms_subpath_ratios[i - 1]) fail("ms_subpath_ratios", "ratios must be strictly increasing");
        if (ms_subpath_ratios[0] > 0 && r % ms_subpath_ratios[0] != 0) {
          fail("ms_subpath_ratios", "ratio " + std::to_string(r) + " is not a multiple of the baseline ratio " +
                                        std::to_string(ms_subpath_ratios[0]));
        }
      }
    }
    if (ms_compression_channels <= 0) fail("ms_compression_channels", "must be positive");
    if (ms_upsample_mode == UpsampleMode::kGroupDeconv) {
      if (ms_group <= 0) {
        fail("ms_group", "must be positive");
      } else if (ms_compression_channels % ms_group != 0) {
        fail("ms_compression_channels", std::to_string(ms_compression_channels) +
                                            " not divisible by ms_group " + std::to_string(ms_group));
      }
    }
  }

  if (dense_decoder) {
    if (dense_decoder_ratios.empty()) fail("dense_decoder_ratios", "must not be empty");
    for (std::size_t i = 0; i < dense_decoder_ratios.size(); ++i) {
      if (dense_decoder_ratios[i] < 2) fail("dense_decoder_ratios", "ratios must be >= 2");
      if (i > 0 && dense_decoder_ratios[i] <= dense_decoder_ratios[i - 1]) {
        fail("dense_decoder_ratios", "ratios must be strictly increasing");
      }
    }
  }

  if (!problems.empty()) {
    std::string msg = "invalid model config: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw Error(ErrorKind::kConfig, msg);
  }
}

// ---------------------------------------------------------------------------
// LayerGraph

std::string_view to_string(LayerOp op) noexcept {
  switch (op) {
    case LayerOp::kInput: return "input";
    case LayerOp::kConv: return "conv";
    case LayerOp::kBatchNorm: return "batchnorm";
    case LayerOp::kRelu: return "relu";
    case LayerOp::kMaxPool: return "maxpool";
    case LayerOp::kDeconv: return "deconv";
    case LayerOp::kBilinear: return "bilinear";
    case LayerOp::kConcat: return "concat";
    case LayerOp::kDropout: return "dropout";
  }
  return "unknown";
}

std::string FeatureShape::str() const {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

std::size_t ParamSpec::numel() const noexcept {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

namespace {

[[noreturn]] void build_error(const std::string& msg) { throw Error(ErrorKind::kConfig, msg); }

}  // namespace

LayerGraph::LayerGraph(FeatureShape input) {
  if (input.c <= 0 || input.h <= 0 || input.w <= 0) build_error("graph input shape must be positive");
  LayerNode node;
  node.name = "input";
  node.op = LayerOp::kInput;
  node.out = input;
  nodes_.push_back(std::move(node));
}

int LayerGraph::push(LayerNode node) {
  if (find(node.name) >= 0) build_error("duplicate layer name '" + node.name + "'");
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

const LayerNode& LayerGraph::checked(int id, const std::string& user) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) {
    build_error("layer '" + user + "' references unknown input node " + std::to_string(id));
  }
  return nodes_[id];
}

void LayerGraph::add_param(LayerNode& node, ParamSpec spec) {
  node.params.push_back(spec.name);
  params_.push_back(std::move(spec));
}

int LayerGraph::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

int LayerGraph::count(LayerOp op) const {
  return static_cast<int>(
      std::count_if(nodes_.begin(), nodes_.end(), [op](const LayerNode& n) { return n.op == op; }));
}

int LayerGraph::conv(const std::string& name, int in, int out_channels, int kernel, int pad, bool bias) {
  const FeatureShape s = checked(in, name).out;
  if (out_channels <= 0) build_error(name + ": output channels must be positive");
  if (s.h + 2 * pad < kernel || s.w + 2 * pad < kernel) {
    build_error(name + ": kernel " + std::to_string(kernel) + " larger than padded input " + s.str());
  }
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kConv;
  node.inputs = {in};
  node.kernel = kernel;
  node.pad = pad;
  node.out = FeatureShape{out_channels, s.h + 2 * pad - kernel + 1, s.w + 2 * pad - kernel + 1};
  const int k2 = kernel * kernel;
  add_param(node, ParamSpec{name + ".weight", {out_channels, s.c, kernel, kernel}, ParamRole::kWeight,
                            s.c * k2, out_channels * k2});
  if (bias) add_param(node, ParamSpec{name + ".bias", {out_channels}, ParamRole::kBias, 0, 0});
  return push(std::move(node));
}

int LayerGraph::batchnorm(const std::string& name, int in) {
  const FeatureShape s = checked(in, name).out;
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kBatchNorm;
  node.inputs = {in};
  node.out = s;
  add_param(node, ParamSpec{name + ".scale", {s.c}, ParamRole::kBnScale, 0, 0});
  add_param(node, ParamSpec{name + ".shift", {s.c}, ParamRole::kBnShift, 0, 0});
  add_param(node, ParamSpec{name + ".running_mean", {s.c}, ParamRole::kBnRunningMean, 0, 0});
  add_param(node, ParamSpec{name + ".running_var", {s.c}, ParamRole::kBnRunningVar, 0, 0});
  return push(std::move(node));
}

int LayerGraph::relu(const std::string& name, int in) {
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kRelu;
  node.inputs = {in};
  node.out = checked(in, name).out;
  return push(std::move(node));
}

int LayerGraph::conv_block(const std::string& name, int in, int out_channels) {
  const int c = conv(name + ".conv", in, out_channels, 3, 1, false);
  const int b = batchnorm(name + ".bn", c);
  return relu(name + ".relu", b);
}

int LayerGraph::maxpool(const std::string& name, int in, int ratio) {
  const FeatureShape s = checked(in, name).out;
  if (ratio < 1) build_error(name + ": pooling ratio must be >= 1");
  if (s.h % ratio != 0 || s.w % ratio != 0) {
    build_error(name + ": input " + s.str() + " not divisible by pooling ratio " + std::to_string(ratio));
  }
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kMaxPool;
  node.inputs = {in};
  node.ratio = ratio;
  node.out = FeatureShape{s.c, s.h / ratio, s.w / ratio};
  return push(std::move(node));
}

int LayerGraph::deconv(const std::string& name, int in, int out_channels, int ratio, int groups) {
  const FeatureShape s = checked(in, name).out;
  if (groups < 1 || s.c % groups != 0 || out_channels % groups != 0) {
    build_error(name + ": channels " + std::to_string(s.c) + "->" + std::to_string(out_channels) +
                " not divisible by groups " + std::to_string(groups));
  }
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kDeconv;
  node.inputs = {in};
  node.ratio = ratio;
  node.groups = groups;
  try {
    node.deconv = DeconvGeometry::for_ratio(ratio);
    node.deconv.validate_ratio(s.h, ratio);
  } catch (const Error& e) {
    build_error(name + ": " + e.what());
  }
  node.kernel = node.deconv.kernel;
  node.stride = node.deconv.stride;
  node.pad = node.deconv.pad;
  node.out = FeatureShape{out_channels, s.h * ratio, s.w * ratio};
  const int k2 = node.kernel * node.kernel;
  add_param(node, ParamSpec{name + ".weight", {s.c, out_channels / groups, node.kernel, node.kernel},
                            ParamRole::kWeight, s.c / groups * k2, out_channels / groups * k2});
  return push(std::move(node));
}

int LayerGraph::bilinear(const std::string& name, int in, int ratio) {
  const FeatureShape s = checked(in, name).out;
  if (ratio < 1) build_error(name + ": bilinear ratio must be >= 1");
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kBilinear;
  node.inputs = {in};
  node.ratio = ratio;
  node.out = FeatureShape{s.c, s.h * ratio, s.w * ratio};
  return push(std::move(node));
}

int LayerGraph::concat(const std::string& name, std::vector<int> inputs) {
  if (inputs.size() < 2) build_error(name + ": concat needs at least two inputs");
  const FeatureShape first = checked(inputs[0], name).out;
  int channels = 0;
  for (int id : inputs) {
    const FeatureShape s = checked(id, name).out;
    if (s.h != first.h || s.w != first.w) {
      build_error(name + ": input '" + nodes_[id].name + "' is " + s.str() + ", expected spatial " +
                  std::to_string(first.h) + "x" + std::to_string(first.w));
    }
    channels += s.c;
  }
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kConcat;
  node.inputs = std::move(inputs);
  node.out = FeatureShape{channels, first.h, first.w};
  return push(std::move(node));
}

int LayerGraph::dropout(const std::string& name, int in, double p) {
  LayerNode node;
  node.name = name;
  node.op = LayerOp::kDropout;
  node.inputs = {in};
  node.dropout_p = p;
  node.out = checked(in, name).out;
  return push(std::move(node));
}

void LayerGraph::set_output(int node) {
  checked(node, "output");
  output_ = node;
}

// ---------------------------------------------------------------------------
// Builders

int build_ms_pooling_module(LayerGraph& graph, const ModelConfig& cfg, int input) {
  const std::vector<int>& ratios = cfg.ms_subpath_ratios;
  const FeatureShape in = graph.node(input).out;
  const int baseline = ratios.at(0);
  if (in.h % baseline != 0) {
    build_error("ms: input " + in.str() + " not divisible by baseline ratio " + std::to_string(baseline));
  }
  const int target = in.h / baseline;
  const int width = cfg.ms_compression_channels;
  std::vector<int> paths;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const std::string prefix = "ms.path" + std::to_string(i + 1);
    const int r = ratios[i];
    if (in.h % r != 0) {
      build_error(prefix + ": subpath ratio " + std::to_string(r) + " does not divide input " + in.str());
    }
    int node = graph.maxpool(prefix + ".pool", input, r);
    node = graph.conv(prefix + ".compress", node, width, 1, 0, true);
    node = graph.relu(prefix + ".compress_relu", node);
    const int size = in.h / r;
    if (size != target) {
      if (target % size != 0) {
        build_error(prefix + ": cannot upsample " + std::to_string(size) + " to " + std::to_string(target));
      }
      const int up = target / size;
      switch (cfg.ms_upsample_mode) {
        case UpsampleMode::kBilinear: node = graph.bilinear(prefix + ".up", node, up); break;
        case UpsampleMode::kDeconv: node = graph.deconv(prefix + ".up", node, width, up, 1); break;
        case UpsampleMode::kGroupDeconv:
          node = graph.deconv(prefix + ".up", node, width, up, cfg.ms_group);
          break;
      }
    }
    paths.push_back(node);
  }
  if (paths.size() == 1) return paths.front();
  return graph.concat("ms.concat", paths);
}

EncoderOutputs build_encoder(LayerGraph& graph, const ModelConfig& cfg) {
  EncoderOutputs out;
  int node = graph.input();
  for (int stage = 0; stage < 3; ++stage) {
    const std::string prefix = "enc" + std::to_string(stage + 1);
    for (int i = 0; i < kEncoderConvsPerStage[stage]; ++i) {
      node = graph.conv_block(prefix + ".block" + std::to_string(i + 1), node, cfg.stage_channels(stage));
    }
    out.taps[graph.node(node).out.h] = node;
    const int ratio = cfg.encoder_pool_ratios.at(stage);
    if (stage == 0 && cfg.ms_pooling) {
      if (cfg.ms_subpath_ratios.at(0) != ratio) {
        build_error("ms: baseline ratio must equal the first encoder pooling ratio");
      }
      node = build_ms_pooling_module(graph, cfg, node);
    } else {
      node = graph.maxpool(prefix + ".pool", node, ratio);
    }
  }
  for (int i = 0; i < kEncoderConvsPerStage[3]; ++i) {
    node = graph.conv_block("bottleneck.block" + std::to_string(i + 1), node, cfg.stage_channels(3));
  }
  node = graph.dropout("bottleneck.dropout", node, cfg.dropout_p);
  out.bottleneck = node;
  return out;
}

namespace {

/// Climbs from `node` at resolution `res` to the full input size, one tap
/// level at a time, then applies the 1x1 classifier head.
int decoder_ladder(LayerGraph& graph, const ModelConfig& cfg, const EncoderOutputs& enc, int node, int res) {
  while (res < cfg.input_size) {
    auto it = enc.taps.upper_bound(res);
    const int next = it == enc.taps.end() ? cfg.input_size : it->first;
    if (next % res != 0) {
      build_error("dec: cannot climb from " + std::to_string(res) + " to " + std::to_string(next));
    }
    const std::string tag = std::to_string(next);
    node = graph.deconv("dec.up" + tag, node, cfg.decoder_channels, next / res, 1);
    if (it != enc.taps.end()) node = graph.concat("dec.concat" + tag, {node, it->second});
    if (next < cfg.input_size) node = graph.conv_block("dec.block" + tag, node, cfg.decoder_channels);
    res = next;
  }
  return graph.conv("head", node, cfg.classes, 1, 0, true);
}

}  // namespace

int build_dense_decoder(LayerGraph& graph, const ModelConfig& cfg, const EncoderOutputs& enc) {
  if (!cfg.dense_decoder) build_error("dense decoder requested with dense_decoder = false");
  const int bottleneck = graph.node(enc.bottleneck).out.h;
  std::vector<int> ratios = cfg.dense_decoder_ratios;
  std::sort(ratios.begin(), ratios.end());
  const int join = bottleneck * ratios.back();
  if (join > cfg.input_size || cfg.input_size % join != 0) {
    build_error("dense_decoder_ratios: join resolution " + std::to_string(join) +
                " does not divide input_size " + std::to_string(cfg.input_size));
  }
  std::vector<int> parts;
  for (int r : ratios) {
    const std::string prefix = "dec.path" + std::to_string(r);
    int node = graph.deconv(prefix + ".up", enc.bottleneck, cfg.decoder_channels, r, 1);
    const int res = bottleneck * r;
    if (res != join) {
      if (join % res != 0) {
        build_error(prefix + ": resolution " + std::to_string(res) + " does not divide join resolution " +
                    std::to_string(join));
      }
      node = graph.deconv(prefix + ".refine", node, cfg.decoder_channels, join / res, 1);
    }
    parts.push_back(node);
  }
  if (auto tap = enc.taps.find(join); tap != enc.taps.end()) parts.push_back(tap->second);
  int node = parts.size() > 1 ? graph.concat("dec.join.concat", parts) : parts.front();
  if (join < cfg.input_size) {
    node = graph.conv_block("dec.join.block", node, cfg.decoder_channels);
    return decoder_ladder(graph, cfg, enc, node, join);
  }
  return graph.conv("head", node, cfg.classes, 1, 0, true);
}

int build_plain_decoder(LayerGraph& graph, const ModelConfig& cfg, const EncoderOutputs& enc) {
  if (cfg.dense_decoder) build_error("plain decoder requested with dense_decoder = true");
  return decoder_ladder(graph, cfg, enc, enc.bottleneck, graph.node(enc.bottleneck).out.h);
}

LayerGraph build_graph(const ModelConfig& cfg) {
  cfg.validate();
  LayerGraph graph(FeatureShape{cfg.in_channels, cfg.input_size, cfg.input_size});
  const EncoderOutputs enc = build_encoder(graph, cfg);
  const int logits = cfg.dense_decoder ? build_dense_decoder(graph, cfg, enc)
                                       : build_plain_decoder(graph, cfg, enc);
  const FeatureShape out = graph.node(logits).out;
  if (out != FeatureShape{cfg.classes, cfg.input_size, cfg.input_size}) {
    build_error("model output " + out.str() + " does not match expected logits shape");
  }
  graph.set_output(logits);
  return graph;
}

// ---------------------------------------------------------------------------
// Introspection

std::size_t ParameterBreakdown::of(std::string_view layer) const {
  for (const auto& l : layers) {
    if (l.layer == layer) return l.count;
  }
  return 0;
}

ParameterBreakdown parameter_count(const LayerGraph& graph) {
  std::map<std::string, const ParamSpec*> specs;
  for (const auto& p : graph.params()) specs.emplace(p.name, &p);
  ParameterBreakdown out;
  for (const auto& node : graph.nodes()) {
    std::size_t n = 0;
    for (const auto& name : node.params) {
      const ParamSpec& spec = *specs.at(name);
      if (spec.role == ParamRole::kBnRunningMean || spec.role == ParamRole::kBnRunningVar) continue;
      n += spec.numel();
    }
    if (!node.params.empty()) out.layers.push_back(LayerParamCount{node.name, n});
    out.total += n;
  }
  return out;
}

std::string describe(const LayerGraph& graph) {
  const ParameterBreakdown counts = parameter_count(graph);
  std::vector<std::string> ins;
  std::size_t name_w = 4, in_w = 8, out_w = 9;
  for (const auto& n : graph.nodes()) {
    std::string in;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      in += (i ? "+" : "") + graph.node(n.inputs[i]).out.str();
    }
    if (in.empty()) in = "-";
    name_w = std::max(name_w, n.name.size());
    in_w = std::max(in_w, in.size());
    out_w = std::max(out_w, n.out.str().size());
    ins.push_back(std::move(in));
  }
  const auto col = [](std::size_t w) { return std::setw(static_cast<int>(w) + 2); };
  std::ostringstream os;
  os << std::left << col(name_w) << "name" << std::setw(11) << "op" << col(in_w) << "in-shape" << col(out_w)
     << "out-shape" << "params\n";
  for (std::size_t i = 0; i < graph.nodes().size(); ++i) {
    const auto& n = graph.nodes()[i];
    os << col(name_w) << n.name << std::setw(11) << to_string(n.op) << col(in_w) << ins[i] << col(out_w)
       << n.out.str() << counts.of(n.name) << "\n";
  }
  os << "total trainable parameters: " << counts.total << "\n";
  return os.str();
}

}  // namespace msfcn
