#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "spx/ops.hpp"
#include "spx/rng.hpp"
#include "spx/tensor.hpp"

namespace spx::testing {

using GradFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Collapses a non-scalar output to sum(out * R) with a fixed random R, so
// every output element contributes to the checked gradient.
inline Var project(Var out, std::uint64_t seed = 1234) {
  if (out.value().numel() == 1) return out;
  Rng rng(seed);
  Var r = out.tape()->constant(random_tensor(out.shape(), rng));
  return ops::sum(ops::mul(out, r));
}

struct GradCheckResult {
  double worst_rel_error = 0.0;
  std::string worst_input;
};

// Central differences (step eps) against the tape's gradient for every input;
// the error is norm-wise: |g_tape - g_fd| / max(|g_tape| + |g_fd|, floor).
// The floor keeps identically-zero gradients (a conv bias ahead of batch
// norm) from turning finite-difference round-off into a relative error.
inline constexpr double kGradNormFloor = 1e-6;

inline GradCheckResult gradcheck(const GradFn& fn, const std::vector<Tensor>& inputs, double eps = 1e-5) {
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return project(fn(tape, vars)).value().item();
  };

  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  Var loss = project(fn(tape, vars));
  tape.backward(loss);

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    std::vector<Tensor> probe = inputs;
    double diff2 = 0.0, norm_a = 0.0, norm_n = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + eps;
      const double up = evaluate(probe);
      probe[k][i] = x0 - eps;
      const double down = evaluate(probe);
      probe[k][i] = x0;
      const double numeric = (up - down) / (2.0 * eps);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      norm_a += analytic[i] * analytic[i];
      norm_n += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(norm_a) + std::sqrt(norm_n), kGradNormFloor);
    if (rel >= result.worst_rel_error) {
      result.worst_rel_error = rel;
      result.worst_input = "input " + std::to_string(k);
    }
  }
  return result;
}

}  // namespace spx::testing

namespace spx::testing {

// Finite-difference check of parameter gradients. `loss_fn` must build the
// forward pass on the given tape, binding the parameters as trainable. At
// most `samples` coordinates per parameter are probed (0 = all).
//
// Each parameter is probed at every step in `steps` and keeps its smallest
// error: large steps straddle ReLU/max-pool kinks, small steps drown tiny
// gradients in round-off, and a wrong gradient fails at every step.
inline GradCheckResult param_gradcheck(const std::vector<Parameter*>& params, const std::function<Var(Tape&)>& loss_fn,
                                       std::size_t samples = 0, std::vector<double> steps = {1e-5, 1e-6},
                                       std::uint64_t seed = 7) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss_fn(tape));
  }
  auto evaluate = [&] {
    Tape tape;
    return loss_fn(tape).value().item();
  };
  Rng rng(seed);
  GradCheckResult result;
  for (auto* p : params) {
    std::vector<std::size_t> coords;
    const std::size_t n = p->value.numel();
    if (samples == 0 || samples >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t s = 0; s < samples; ++s) coords.push_back(rng.below(n));
    }
    double best = std::numeric_limits<double>::infinity();
    for (double eps : steps) {
      double diff2 = 0.0, norm_a = 0.0, norm_n = 0.0;
      for (std::size_t i : coords) {
        const double x0 = p->value[i];
        p->value[i] = x0 + eps;
        const double up = evaluate();
        p->value[i] = x0 - eps;
        const double down = evaluate();
        p->value[i] = x0;
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = p->grad[i];
        diff2 += (analytic - numeric) * (analytic - numeric);
        norm_a += analytic * analytic;
        norm_n += numeric * numeric;
      }
      best = std::min(best, std::sqrt(diff2) / std::max(std::sqrt(norm_a) + std::sqrt(norm_n), kGradNormFloor));
    }
    if (best >= result.worst_rel_error) {
      result.worst_rel_error = best;
      result.worst_input = p->name;
    }
  }
  return result;
}

}  // namespace spx::testing
