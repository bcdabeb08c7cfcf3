#include "psla/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "psla/errors.hpp"
#include "psla/ops.hpp"

namespace psla {

Var GradTape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var GradTape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    node(in);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const GradTape::Node& GradTape::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw UsageError("variable " + std::to_string(v.id) + " was not recorded on this tape");
  }
  return nodes_[v.id];
}

const Tensor& GradTape::value(Var v) const { return node(v).value; }

bool GradTape::requires_grad(Var v) const { return node(v).requires_grad; }

bool GradTape::has_grad(Var v) const { return ran_backward_ && !node(v).grad.empty(); }

const Tensor& GradTape::grad(Var v) const {
  const Node& n = node(v);
  if (!ran_backward_) throw UsageError("grad() requested before backward()");
  if (!n.requires_grad) throw UsageError("variable " + std::to_string(v.id) + " does not require gradients");
  return n.grad;
}

void GradTape::backward(Var root) {
  const Tensor& value = node(root).value;
  backward(root, Tensor(value.shape(), 1.0f));
}

void GradTape::backward(Var root, const Tensor& seed) {
  const Node& r = node(root);
  if (!r.requires_grad) throw UsageError("backward() from a value with no recorded differentiable inputs");
  if (!seed.same_shape(r.value)) throw UsageError("backward() seed shape does not match root");
  for (auto& n : nodes_) n.grad = Tensor();
  visit_log_.clear();
  nodes_[root.id].grad = seed;

  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    visit_log_.push_back(id);
    std::vector<bool> needs(n.inputs.size());
    for (std::size_t k = 0; k < n.inputs.size(); ++k) needs[k] = nodes_[n.inputs[k].id].requires_grad;
    std::vector<Tensor> in_grads = n.backward(n.grad, needs);
    if (in_grads.size() != n.inputs.size()) throw UsageError("backward rule returned wrong gradient count");
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      if (!needs[k] || in_grads[k].empty()) continue;
      Node& dst = nodes_[n.inputs[k].id];
      if (!in_grads[k].same_shape(dst.value)) {
        throw UsageError("backward rule produced gradient of shape " + shape_string(in_grads[k].shape()) +
                         " for value of shape " + shape_string(dst.value.shape()));
      }
      if (dst.grad.empty()) {
        dst.grad = std::move(in_grads[k]);
      } else {
        auto d = dst.grad.data();
        auto s = in_grads[k].data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
      }
    }
  }
  for (auto& n : nodes_) {
    if (n.requires_grad && n.grad.empty()) n.grad = Tensor(n.value.shape());
  }
  ran_backward_ = true;
}

namespace ag {

ConvVars bind(GradTape& tape, const ConvParams& params, bool requires_grad) {
  params.validate();
  ConvVars vars;
  vars.weights = tape.leaf(params.weights, requires_grad);
  if (params.has_bias()) vars.bias = tape.leaf(params.bias, requires_grad);
  return vars;
}

Var conv2d(GradTape& tape, Var input, const ConvVars& layer, std::size_t padding) {
  const Tensor& w = tape.value(layer.weights);
  const Tensor empty;
  const Tensor& b = layer.bias ? tape.value(*layer.bias) : empty;
  Tensor out = psla::conv2d(tape.value(input), w, b, padding);
  std::vector<Var> inputs{input, layer.weights};
  const bool has_bias = layer.bias.has_value();
  if (has_bias) inputs.push_back(*layer.bias);
  return tape.record(std::move(out), std::move(inputs),
                     [&tape, input, layer, padding, has_bias](const Tensor& g, const std::vector<bool>& needs) {
                       const bool need_params = needs[1] || (has_bias && needs[2]);
                       ConvGrads cg = conv2d_backward(tape.value(input), tape.value(layer.weights), has_bias, g,
                                                      padding, needs[0], need_params);
                       std::vector<Tensor> grads{std::move(cg.input), std::move(cg.weights)};
                       if (has_bias) grads.push_back(std::move(cg.bias));
                       return grads;
                     });
}

Var conv2d(GradTape& tape, Var input, const ConvVars& layer) {
  const std::size_t k = tape.value(layer.weights).dim(2);
  return conv2d(tape, input, layer, (k - 1) / 2);
}

Var relu(GradTape& tape, Var input) {
  tape.note_branches(tape.value(input).data());
  return tape.record(psla::relu(tape.value(input)), {input},
                     [&tape, input](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{relu_backward(tape.value(input), g)};
                     });
}

Var concat_channels(GradTape& tape, Var a, Var b) {
  const std::size_t split = tape.value(a).size();
  return tape.record(psla::concat_channels(tape.value(a), tape.value(b)), {a, b},
                     [&tape, a, b, split](const Tensor& g, const std::vector<bool>&) {
                       auto src = g.data();
                       Tensor ga(tape.value(a).shape(), std::vector<float>(src.begin(), src.begin() + split));
                       Tensor gb(tape.value(b).shape(), std::vector<float>(src.begin() + split, src.end()));
                       return std::vector<Tensor>{std::move(ga), std::move(gb)};
                     });
}

Var channel_softmax(GradTape& tape, Var logits) {
  const Tensor& in = tape.value(logits);
  const std::size_t C = in.channels(), P = in.plane();
  Tensor out(in.shape());
  for (std::size_t p = 0; p < P; ++p) {
    float peak = in[p];
    for (std::size_t c = 1; c < C; ++c) peak = std::max(peak, in[c * P + p]);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out[c * P + p] = std::exp(in[c * P + p] - peak);
      total += out[c * P + p];
    }
    for (std::size_t c = 0; c < C; ++c) out[c * P + p] = static_cast<float>(out[c * P + p] / total);
  }
  const Var self{tape.size()};
  return tape.record(std::move(out), {logits}, [&tape, self](const Tensor& g, const std::vector<bool>&) {
    const Tensor& y = tape.value(self);
    const std::size_t C = y.channels(), P = y.plane();
    Tensor gin(y.shape());
    for (std::size_t p = 0; p < P; ++p) {
      double inner = 0.0;
      for (std::size_t c = 0; c < C; ++c) inner += static_cast<double>(y[c * P + p]) * g[c * P + p];
      for (std::size_t c = 0; c < C; ++c) {
        gin[c * P + p] = static_cast<float>(y[c * P + p] * (g[c * P + p] - inner));
      }
    }
    return std::vector<Tensor>{std::move(gin)};
  });
}

Var fuse(GradTape& tape, Var weights, Var a, Var b) {
  const Tensor& w = tape.value(weights);
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (w.rank() != 3 || w.channels() != 2) throw ConfigError("fuse weights must be (2,H,W)");
  if (!av.same_shape(bv) || av.height() != w.height() || av.width() != w.width()) {
    throw ConfigError("fuse operand shape mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  const std::size_t C = av.channels(), P = av.plane();
  Tensor out(av.shape());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < P; ++p) out[c * P + p] = w[p] * av[c * P + p] + w[P + p] * bv[c * P + p];
  }
  return tape.record(std::move(out), {weights, a, b},
                     [&tape, weights, a, b](const Tensor& g, const std::vector<bool>& needs) {
                       const Tensor& w = tape.value(weights);
                       const Tensor& av = tape.value(a);
                       const Tensor& bv = tape.value(b);
                       const std::size_t C = av.channels(), P = av.plane();
                       std::vector<Tensor> grads(3);
                       if (needs[0]) {
                         grads[0] = Tensor(w.shape());
                         for (std::size_t p = 0; p < P; ++p) {
                           double ga = 0.0, gb = 0.0;
                           for (std::size_t c = 0; c < C; ++c) {
                             ga += static_cast<double>(g[c * P + p]) * av[c * P + p];
                             gb += static_cast<double>(g[c * P + p]) * bv[c * P + p];
                           }
                           grads[0][p] = static_cast<float>(ga);
                           grads[0][P + p] = static_cast<float>(gb);
                         }
                       }
                       if (needs[1] || needs[2]) {
                         grads[1] = Tensor(av.shape());
                         grads[2] = Tensor(bv.shape());
                         for (std::size_t c = 0; c < C; ++c) {
                           for (std::size_t p = 0; p < P; ++p) {
                             grads[1][c * P + p] = w[p] * g[c * P + p];
                             grads[2][c * P + p] = w[P + p] * g[c * P + p];
                           }
                         }
                       }
                       return grads;
                     });
}

Var add(GradTape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (!av.same_shape(bv)) throw ConfigError("add shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{g, g}; });
}

Var sum(GradTape& tape, Var input) {
  double total = 0.0;
  for (float v : tape.value(input).data()) total += v;
  return tape.record(Tensor::scalar(static_cast<float>(total)), {input},
                     [&tape, input](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{Tensor(tape.value(input).shape(), g[0])};
                     });
}

Var mse(GradTape& tape, Var prediction, const Tensor& target) {
  const Tensor& pred = tape.value(prediction);
  if (!pred.same_shape(target)) {
    throw ConfigError("mse shape mismatch " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    total += d * d;
  }
  const double n = static_cast<double>(std::max<std::size_t>(pred.size(), 1));
  return tape.record(Tensor::scalar(static_cast<float>(total / n)), {prediction},
                     [&tape, prediction, target, n](const Tensor& g, const std::vector<bool>&) {
                       const Tensor& pred = tape.value(prediction);
                       Tensor gin(pred.shape());
                       const double scale = 2.0 * g[0] / n;
                       for (std::size_t i = 0; i < pred.size(); ++i) {
                         gin[i] = static_cast<float>(scale * (static_cast<double>(pred[i]) - target[i]));
                       }
                       return std::vector<Tensor>{std::move(gin)};
                     });
}

Var stop_gradient(GradTape& tape, Var input) { return tape.leaf(tape.value(input), false); }

}  // namespace ag

namespace {

double summed_output(const TapeFunction& fn, std::span<const Tensor> inputs, std::vector<std::uint8_t>* branches) {
  GradTape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, false));
  const Tensor& out = tape.value(fn(tape, vars));
  double total = 0.0;
  for (float v : out.data()) total += v;
  if (branches) *branches = tape.branch_signature();
  return total;
}

}  // namespace

GradCheckResult grad_check_detailed(const TapeFunction& fn, std::span<const Tensor> inputs, double epsilon,
                                    bool skip_kinks) {
  if (!(epsilon >= 1e-4 && epsilon <= 1e-2)) {
    throw InvalidInputError("grad_check epsilon must lie in [1e-4, 1e-2]");
  }
  GradTape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  const Var loss = ag::sum(tape, fn(tape, vars));
  tape.backward(loss);

  GradCheckResult result;
  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const Tensor& analytic = tape.grad(vars[i]);
    for (std::size_t j = 0; j < probe[i].size(); ++j) {
      const float original = probe[i][j];
      const float up = static_cast<float>(original + epsilon);
      const float down = static_cast<float>(original - epsilon);
      std::vector<std::uint8_t> up_branches, down_branches;
      probe[i][j] = up;
      const double f_up = summed_output(fn, probe, skip_kinks ? &up_branches : nullptr);
      probe[i][j] = down;
      const double f_down = summed_output(fn, probe, skip_kinks ? &down_branches : nullptr);
      probe[i][j] = original;
      if (skip_kinks && up_branches != down_branches) {
        ++result.skipped;
        continue;
      }
      ++result.checked;
      const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
      const double a = analytic[j];
      const double rel = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      if (!(rel <= result.max_rel_error)) {
        result.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
        result.worst_input = i;
        result.worst_index = j;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

void GradTape::note_branches(std::span<const float> values) {
  for (float v : values) branches_.push_back(v > 0.0f ? 1 : 0);
}

double grad_check(const TapeFunction& fn, std::span<const Tensor> inputs, double epsilon) {
  return grad_check_detailed(fn, inputs, epsilon).max_rel_error;
}

}  // namespace psla
