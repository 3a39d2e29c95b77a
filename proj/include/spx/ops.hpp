#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "spx/tensor.hpp"

// Differentiable primitives. Each records one node on the inputs' tape.
namespace spx::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

// a: M x K, b: K x N.
Var matmul(Var a, Var b);

// x: N x in, weight: out x in, bias: out. Returns N x out.
Var linear(Var x, Var weight, Var bias);

// x: N x C_in x H x W, weight: C_out x C_in x k x k, bias: C_out.
Var conv2d(Var x, Var weight, Var bias, int stride, int padding);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

enum class Mode { train, eval };

// x: N x C x H x W or N x C. Train mode normalizes by the biased batch
// variance and folds the unbiased one into the running estimate.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);

Var relu(Var x);
Var elu(Var x, double alpha = 1.0);
Var leaky_relu(Var x, double slope);

// Non-overlapping max pooling; output dims are floor(H / k). Ties go to
// the first element in scan order, which also receives the gradient.
Var maxpool2d(Var x, int kernel = 2);

// Mean over rows of -log softmax(logits)[target]. logits: N x K.
Var softmax_cross_entropy(Var logits, std::span<const int> targets);

// x (N x F) plus b (F) added to every row.
Var add_bias(Var x, Var b);

// Rows of x (V x F) selected by index: E x F.
Var gather_rows(Var x, std::span<const std::int32_t> index);

// x: E x F scaled row-wise by w (E x 1).
Var row_scale(Var x, Var w);

// Weighted message passing: out[dst[e]] += w[e] * x[src[e]] for every edge,
// giving num_nodes x F. Equivalent to
// scatter_segment(sum, row_scale(gather_rows(x, src), w), dst) without the
// E x F intermediates.
Var edge_aggregate(Var x, Var w, std::span<const std::int32_t> src, std::span<const std::int32_t> dst,
                   std::size_t num_nodes);

enum class Reduce { sum, mean, max, softmax };

// Reduction of `values` (E x F) grouped by segment id. sum/mean/max return
// num_segments x F with zeros for empty segments; softmax returns E x F
// normalized within each segment.
Var scatter_segment(Reduce op, Var values, std::span<const std::int32_t> segment_ids,
                    std::size_t num_segments);

}  // namespace spx::ops
