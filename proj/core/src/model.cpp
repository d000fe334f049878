#include "msfcn/model.hpp"

#include "msfcn/ops.hpp"

namespace msfcn {

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), graph_(build_graph(cfg)) {
  for (const ParamSpec& spec : graph_.params()) {
    Param<T>& p = params_.add(spec.name, spec.dims, spec.role);
    switch (spec.role) {
      case ParamRole::kWeight: {
        Rng rng(fnv1a(spec.name.data(), spec.name.size(), fnv1a(&seed, sizeof seed)));
        p.value = xavier_init<T>(p.value.shape(), spec.fan_in, spec.fan_out, rng);
        break;
      }
      case ParamRole::kBnScale:
      case ParamRole::kBnRunningVar:
        for (T& v : p.value.values()) v = T{1};
        break;
      case ParamRole::kBias:
      case ParamRole::kBnShift:
      case ParamRole::kBnRunningMean:
        break;
    }
  }
}

template <typename T>
std::vector<Var> Model<T>::forward_all(Tape<T>& tape, Var input, Mode mode, std::uint64_t dropout_seed) {
  const Shape s = tape.value(input).shape();
  if (s.c != cfg_.in_channels || s.h != cfg_.input_size || s.w != cfg_.input_size) {
    throw_invalid("model input " + s.str() + " does not match (N, " + std::to_string(cfg_.in_channels) +
                  ", " + std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) + ")");
  }
  Rng rng(dropout_seed);
  const BatchNormOptions bn{cfg_.bn_momentum, cfg_.bn_eps};
  std::vector<Var> out(graph_.nodes().size());
  out[0] = input;
  auto param = [&](const std::string& name) { return tape.parameter(params_.get(name).value); };
  for (std::size_t i = 1; i < graph_.nodes().size(); ++i) {
    const LayerNode& node = graph_.node(static_cast<int>(i));
    const Var x = out[node.inputs.front()];
    switch (node.op) {
      case LayerOp::kInput:
        break;
      case LayerOp::kConv: {
        const Var w = param(node.params[0]);
        std::optional<Var> b;
        if (node.params.size() > 1) b = param(node.params[1]);
        out[i] = ops::conv2d(tape, x, w, b, Conv2dOptions{1, node.pad, 1});
        break;
      }
      case LayerOp::kBatchNorm: {
        const Var scale = param(node.params[0]);
        const Var shift = param(node.params[1]);
        BatchNormStats<T> stats{&params_.get(node.params[2]).value, &params_.get(node.params[3]).value};
        out[i] = ops::batchnorm2d(tape, x, scale, shift, mode, stats, bn);
        break;
      }
      case LayerOp::kRelu:
        out[i] = ops::relu(tape, x);
        break;
      case LayerOp::kMaxPool:
        out[i] = ops::maxpool2d(tape, x, node.ratio);
        break;
      case LayerOp::kDeconv:
        out[i] = ops::deconv2d(tape, x, param(node.params[0]), std::nullopt, node.deconv, node.groups);
        break;
      case LayerOp::kBilinear:
        out[i] = ops::bilinear_upsample(tape, x, node.ratio);
        break;
      case LayerOp::kConcat: {
        std::vector<Var> xs;
        for (int id : node.inputs) xs.push_back(out[id]);
        out[i] = ops::concat<T>(tape, xs);
        break;
      }
      case LayerOp::kDropout:
        out[i] = ops::dropout(tape, x, node.dropout_p, mode, rng);
        break;
    }
  }
  return out;
}

template <typename T>
Var Model<T>::forward(Tape<T>& tape, Var input, Mode mode, std::uint64_t dropout_seed) {
  return forward_all(tape, input, mode, dropout_seed)[graph_.output()];
}

template <typename T>
Tensor<T> Model<T>::infer(const Tensor<T>& input) {
  Tape<T> tape;
  const Var x = tape.constant(input);
  const Var y = forward(tape, x, Mode::kEval, 0);
  Tensor<T> logits = tape.value(y);
  logits.clear_grad();
  return logits;
}

template class Model<float>;
template class Model<double>;

template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  LabelMap out{s.n, s.h, s.w, std::vector<std::uint8_t>(static_cast<std::size_t>(s.n) * s.plane())};
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      T best_v = logits[static_cast<std::size_t>(n) * s.c * plane + p];
      for (int c = 1; c < s.c; ++c) {
        const T v = logits[(static_cast<std::size_t>(n) * s.c + c) * plane + p];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.data[static_cast<std::size_t>(n) * plane + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

template LabelMap argmax_labels<float>(const Tensor<float>&);
template LabelMap argmax_labels<double>(const Tensor<double>&);

}  // namespace msfcn
