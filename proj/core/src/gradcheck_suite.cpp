#include "msfcn/gradcheck_suite.hpp"

#include <array>

#include "msfcn/model.hpp"
#include "msfcn/ops.hpp"

namespace msfcn {

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (double& v : t.values()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

int pick(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); }

/// Holds the tensors of one check so the loss closure can bind them.
struct Case {
  std::string op;
  std::vector<Tensor<double>> tensors;
  std::vector<std::string> names;
  Tensor<double> projection;

  std::vector<GradCheckTarget> targets() {
    std::vector<GradCheckTarget> out;
    for (std::size_t i = 0; i < tensors.size(); ++i) out.push_back({names[i], &tensors[i]});
    return out;
  }
};

OpCheckReport check(Case& c, const std::function<Var(Tape<double>&, std::span<const Var>)>& op,
                    const GradCheckOptions& options) {
  const LossFn loss = [&](Tape<double>& tape) {
    std::vector<Var> vars;
    for (auto& t : c.tensors) vars.push_back(tape.parameter(t));
    const Var y = op(tape, vars);
    if (c.projection.size() == 0) return y;
    return ops::dot(tape, y, c.projection);
  };
  // Size the projection from one forward pass so every output element matters.
  if (c.projection.size() == 0) {
    Tape<double> probe;
    std::vector<Var> vars;
    for (auto& t : c.tensors) vars.push_back(probe.constant(t));
    const Shape s = probe.value(op(probe, vars)).shape();
    if (s.numel() != 1) {
      Rng rng(fnv1a(c.op.data(), c.op.size()));
      c.projection = random_tensor(s, rng);
    }
  }
  const auto targets = c.targets();
  return {c.op, c.tensors.front().shape().str(), grad_check(loss, targets, options)};
}

}  // namespace

std::vector<OpCheckReport> run_op_gradchecks(std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  std::vector<OpCheckReport> out;
  auto shape = [&](int ratio) {
    const int n = pick(rng, 1, 2);
    const int c = pick(rng, 1, 4);
    const int h = ratio * pick(rng, 1, 12 / ratio);
    const int w = ratio * pick(rng, 1, 12 / ratio);
    return Shape{n, c, h, w};
  };

  {
    const Shape s = shape(1);
    const int cout = pick(rng, 1, 4);
    Case c{"conv2d", {random_tensor(s, rng), random_tensor({cout, s.c, 3, 3}, rng), random_tensor({cout, 1, 1, 1}, rng)},
           {"x", "w", "b"}, {}};
    out.push_back(check(c, [](Tape<double>& t, std::span<const Var> v) {
      return ops::conv2d(t, v[0], v[1], v[2], Conv2dOptions{1, 1, 1});
    }, options));
  }
  {
    Shape s = shape(2);
    s.c = 4;
    Case c{"conv2d_grouped_strided", {random_tensor(s, rng), random_tensor({4, 2, 3, 3}, rng)}, {"x", "w"}, {}};
    out.push_back(check(c, [](Tape<double>& t, std::span<const Var> v) {
      return ops::conv2d(t, v[0], v[1], std::nullopt, Conv2dOptions{2, 1, 2});
    }, options));
  }
  for (int ratio : {2, 3}) {
    const Shape s = shape(1);
    const auto g = DeconvGeometry::for_ratio(ratio);
    const int cout = pick(rng, 1, 4);
    Case c{"deconv2d_x" + std::to_string(ratio),
           {random_tensor({s.n, s.c, std::min(s.h, 12 / ratio), std::min(s.w, 12 / ratio)}, rng),
            random_tensor({s.c, cout, g.kernel, g.kernel}, rng), random_tensor({cout, 1, 1, 1}, rng)},
           {"x", "w", "b"}, {}};
    out.push_back(check(c, [g](Tape<double>& t, std::span<const Var> v) {
      return ops::deconv2d(t, v[0], v[1], v[2], g, 1);
    }, options));
  }
  {
    const auto g = DeconvGeometry::for_ratio(2);
    Case c{"deconv2d_grouped", {random_tensor({pick(rng, 1, 2), 4, pick(rng, 1, 6), pick(rng, 1, 6)}, rng),
                                random_tensor({4, 1, g.kernel, g.kernel}, rng)},
           {"x", "w"}, {}};
    out.push_back(check(c, [g](Tape<double>& t, std::span<const Var> v) {
      return ops::deconv2d(t, v[0], v[1], std::nullopt, g, 4);
    }, options));
  }
  for (int ratio : {2, 3}) {
    const Shape s = shape(1);
    Case c{"bilinear_upsample_x" + std::to_string(ratio),
           {random_tensor({s.n, s.c, std::min(s.h, 12 / ratio), std::min(s.w, 12 / ratio)}, rng)}, {"x"}, {}};
    out.push_back(check(c, [ratio](Tape<double>& t, std::span<const Var> v) {
      return ops::bilinear_upsample(t, v[0], ratio);
    }, options));
  }
  for (int ratio : {2, 3}) {
    Case c{"maxpool2d_x" + std::to_string(ratio), {random_tensor(shape(ratio), rng)}, {"x"}, {}};
    out.push_back(check(c, [ratio](Tape<double>& t, std::span<const Var> v) {
      return ops::maxpool2d(t, v[0], ratio);
    }, options));
  }
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    Shape s = shape(1);
    s.n = 2;
    const Shape ch{1, s.c, 1, 1};
    auto mean = std::make_shared<Tensor<double>>(random_tensor(ch, rng, -0.5, 0.5));
    auto var = std::make_shared<Tensor<double>>(random_tensor(ch, rng, 0.5, 1.5));
    Case c{mode == Mode::kTrain ? "batchnorm2d_train" : "batchnorm2d_eval",
           {random_tensor(s, rng), random_tensor(ch, rng, 0.5, 1.5), random_tensor(ch, rng)},
           {"x", "scale", "shift"}, {}};
    out.push_back(check(c, [mode, mean, var](Tape<double>& t, std::span<const Var> v) {
      return ops::batchnorm2d(t, v[0], v[1], v[2], mode, BatchNormStats<double>{mean.get(), var.get()},
                              BatchNormOptions{});
    }, options));
  }
  {
    Case c{"relu", {random_tensor(shape(1), rng)}, {"x"}, {}};
    out.push_back(check(c, [](Tape<double>& t, std::span<const Var> v) { return ops::relu(t, v[0]); }, options));
  }
  {
    const Shape a = shape(1);
    const Shape b{a.n, pick(rng, 1, 4), a.h, a.w};
    Case c{"concat", {random_tensor(a, rng), random_tensor(b, rng)}, {"a", "b"}, {}};
    out.push_back(check(c, [](Tape<double>& t, std::span<const Var> v) { return ops::concat<double>(t, v); }, options));
  }
  {
    Case c{"dropout", {random_tensor(shape(1), rng)}, {"x"}, {}};
    const std::uint64_t mask_seed = rng();
    out.push_back(check(c, [mask_seed](Tape<double>& t, std::span<const Var> v) {
      Rng r(mask_seed);
      return ops::dropout(t, v[0], 0.5, Mode::kTrain, r);
    }, options));
  }
  {
    const Shape s{pick(rng, 1, 2), 3, pick(rng, 1, 12), pick(rng, 1, 12)};
    auto labels = std::make_shared<LabelMap>(LabelMap{s.n, s.h, s.w, std::vector<std::uint8_t>(s.n * s.plane())});
    for (auto& l : labels->data) l = static_cast<std::uint8_t>(rng() % 3);
    Case c{"softmax_cross_entropy", {random_tensor(s, rng, -2.0, 2.0)}, {"logits"}, {}};
    out.push_back(check(c, [labels](Tape<double>& t, std::span<const Var> v) {
      return ops::softmax_cross_entropy(t, v[0], *labels);
    }, options));
  }
  {
    Case c{"sum_squares", {random_tensor(shape(1), rng)}, {"x"}, {}};
    out.push_back(check(c, [](Tape<double>& t, std::span<const Var> v) { return ops::sum_squares(t, v[0]); }, options));
  }
  {
    Case c{"sum", {random_tensor(shape(1), rng)}, {"x"}, {}};
    c.projection = random_tensor({1, 1, 1, 1}, rng);
    out.push_back(check(c, [](Tape<double>& t, std::span<const Var> v) { return ops::sum(t, v[0]); }, options));
  }
  return out;
}

OpCheckReport run_model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& options) {
  Model<double> model(cfg, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Tensor<double> input = random_tensor({1, cfg.in_channels, cfg.input_size, cfg.input_size}, rng, 0.0, 1.0);
  LabelMap labels{1, cfg.input_size, cfg.input_size,
                  std::vector<std::uint8_t>(static_cast<std::size_t>(cfg.input_size) * cfg.input_size)};
  for (auto& l : labels.data) l = static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(cfg.classes));
  const std::uint64_t dropout_seed = rng();

  std::vector<GradCheckTarget> targets{{"input", &input}};
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    Param<double>& p = model.params().at(i);
    if (p.trainable()) targets.push_back({p.name, &p.value});
  }
  const LossFn loss = [&](Tape<double>& tape) {
    const Var x = tape.parameter(input);
    return ops::softmax_cross_entropy(tape, model.forward(tape, x, Mode::kTrain, dropout_seed), labels);
  };
  return {"model", input.shape().str(), grad_check(loss, targets, options)};
}

}  // namespace msfcn
