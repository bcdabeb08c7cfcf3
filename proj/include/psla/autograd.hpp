#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "psla/tensor.hpp"

namespace psla {

// Records executed operations so gradients can be replayed in reverse.
// 
// Each recorded node keeps its forward value, the ids of its inputs and a
// backward rule. backward() walks nodes in strict reverse execution order and
// accumulates input gradients additively, so a value that feeds several
// consumers receives the sum of their contributions. One tape per training
// step; tapes are not thread-safe.
class GradTape {
 public:
  struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
  };

  // Receives the output gradient and a per-input "needs gradient" flag;
  // returns one tensor per input (empty where not needed).
  using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needs)>;

  Var leaf(Tensor value, bool requires_grad = true);
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient accumulated by the last backward(); zeros if none reached v.
  const Tensor& grad(Var v) const;
  bool has_grad(Var v) const;

  // Seeds the root with ones (any shape) and propagates.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Piecewise ops (relu, clamps) append which piece each element landed on.
  // Two forward passes with equal signatures ran on the same smooth piece.
  void note_branches(std::span<const float> values);
  const std::vector<std::uint8_t>& branch_signature() const noexcept { return branches_; }
  // Node ids in the order the last backward() visited them.
  const std::vector<std::size_t>& visit_log() const noexcept { return visit_log_; }

 private:
  struct Node {
    Tensor value;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Tensor grad;
  };
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_log_;
  std::vector<std::uint8_t> branches_;
  bool ran_backward_ = false;
};

using Var = GradTape::Var;

// Parameters of a convolution layer bound to a tape.
struct ConvVars {
  Var weights;
  std::optional<Var> bias;
};

namespace ag {

ConvVars bind(GradTape& tape, const ConvParams& params, bool requires_grad = true);

Var conv2d(GradTape& tape, Var input, const ConvVars& layer, std::size_t padding);
Var conv2d(GradTape& tape, Var input, const ConvVars& layer);
Var relu(GradTape& tape, Var input);
Var concat_channels(GradTape& tape, Var a, Var b);
// Per-location softmax across the channel axis of a (C,H,W) map.
Var channel_softmax(GradTape& tape, Var logits);
// out = weights[0] * a + weights[1] * b, weights (2,H,W) broadcast over channels.
Var fuse(GradTape& tape, Var weights, Var a, Var b);
Var add(GradTape& tape, Var a, Var b);
Var sum(GradTape& tape, Var input);
// Mean squared error over all entries; target receives no gradient.
Var mse(GradTape& tape, Var prediction, const Tensor& target);
// Copies the value into a fresh leaf that does not require gradients.
Var stop_gradient(GradTape& tape, Var input);

}  // namespace ag

// Builds the function under test on a fresh tape from leaves holding the
// given inputs. The output is reduced with a sum before differentiation.
using TapeFunction = std::function<Var(GradTape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Entries whose finite-difference stencil crossed a branch of a piecewise op.
  std::size_t skipped = 0;
  std::size_t checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares tape gradients against central differences of the summed output.
// Relative error per entry is |a - n| / max(1, |a|, |n|); numeric sums use
// double accumulation. epsilon must lie in [1e-4, 1e-2]. With skip_kinks,
// entries whose +/- epsilon evaluations land on different pieces of a relu
// or clamp are left out and counted in `skipped`; the derivative there is
// not what the central difference measures.
GradCheckResult grad_check_detailed(const TapeFunction& fn, std::span<const Tensor> inputs, double epsilon = 1e-3,
                                    bool skip_kinks = true);
double grad_check(const TapeFunction& fn, std::span<const Tensor> inputs, double epsilon = 1e-3);

}  // namespace psla
