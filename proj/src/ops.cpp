#include "spx/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "spx/error.hpp"

namespace spx::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Tape& tape_of(Var v) {
  if (!v.valid()) throw ContractError("operation on an unbound variable");
  return *v.tape();
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

void require_rank(const char* op, Var v, std::size_t rank) {
  if (v.value().ndim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(v.shape()));
  }
}

void accumulate(Tensor* slot, const Tensor& g) {
  if (slot == nullptr) return;
  for (std::size_t i = 0; i < g.numel(); ++i) (*slot)[i] += g[i];
}

// Elementwise unary op with derivative expressed in terms of input and output.
template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = f(in[i]);
  return tape_of(x).record(std::move(out), {x}, [x, df](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_slot(x);
    if (!gx) return;
    const Tensor& in = x.value();
    for (std::size_t i = 0; i < in.numel(); ++i) (*gx)[i] += g[i] * df(in[i]);
  });
}

void im2col(const double* img, std::size_t channels, std::size_t h, std::size_t w, int k, int stride,
            int pad, std::size_t out_h, std::size_t out_w, double* cols) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            row[oy * out_w + ox] = (iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(w))
                                       ? img[(c * h + iy) * w + ix]
                                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, int k, int stride,
            int pad, std::size_t out_h, std::size_t out_w, double* img) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            img[(c * h + iy) * w + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

void check_segment_ids(std::span<const std::int32_t> ids, std::size_t num_segments) {
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= num_segments) {
      throw IndexError("segment id " + std::to_string(id) + " outside [0, " +
                       std::to_string(num_segments) + ")");
    }
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    accumulate(tape.grad_slot(a), g);
    accumulate(tape.grad_slot(b), g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    accumulate(tape.grad_slot(a), g);
    if (Tensor* gb = tape.grad_slot(b)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_slot(a)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * b.value()[i];
    }
    if (Tensor* gb = tape.grad_slot(b)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * a.value()[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * factor;
  return tape_of(a).record(std::move(out), {a}, [a, factor](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_slot(a)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * factor;
    }
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return tape_of(a).record(Tensor::scalar(total), {a}, [a](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_slot(a)) {
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g[0];
    }
  });
}

Var mean(Var a) {
  if (a.value().numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(out), {a}, [a](Tape& tape, const Tensor& g) {
    accumulate(tape.grad_slot(a), g);
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " are incompatible");
  }
  Tensor out({m, n});
  MatMap(out.ptr(), m, n).noalias() = ConstMatMap(a.value().ptr(), m, k) * ConstMatMap(b.value().ptr(), k, n);
  return tape_of(a).record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tape, const Tensor& g) {
    const ConstMatMap gm(g.ptr(), m, n);
    if (Tensor* ga = tape.grad_slot(a)) {
      MatMap(ga->ptr(), m, k).noalias() += gm * ConstMatMap(b.value().ptr(), k, n).transpose();
    }
    if (Tensor* gb = tape.grad_slot(b)) {
      MatMap(gb->ptr(), k, n).noalias() += ConstMatMap(a.value().ptr(), m, k).transpose() * gm;
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t n = x.value().dim(0), in = x.value().dim(1), out_dim = weight.value().dim(0);
  if (weight.value().dim(1) != in || bias.value().numel() != out_dim) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                     ", bias " + shape_str(bias.shape()) + " are incompatible");
  }
  Tensor out({n, out_dim});
  MatMap om(out.ptr(), n, out_dim);
  om.noalias() = ConstMatMap(x.value().ptr(), n, in) * ConstMatMap(weight.value().ptr(), out_dim, in).transpose();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < out_dim; ++c) om(r, c) += bias.value()[c];
  }
  return tape_of(x).record(
      std::move(out), {x, weight, bias}, [x, weight, bias, n, in, out_dim](Tape& tape, const Tensor& g) {
        const ConstMatMap gm(g.ptr(), n, out_dim);
        if (Tensor* gx = tape.grad_slot(x)) {
          MatMap(gx->ptr(), n, in).noalias() += gm * ConstMatMap(weight.value().ptr(), out_dim, in);
        }
        if (Tensor* gw = tape.grad_slot(weight)) {
          MatMap(gw->ptr(), out_dim, in).noalias() += gm.transpose() * ConstMatMap(x.value().ptr(), n, in);
        }
        if (Tensor* gb = tape.grad_slot(bias)) {
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < out_dim; ++c) (*gb)[c] += gm(r, c);
          }
        }
      });
}

Var conv2d(Var x, Var weight, Var bias, int stride, int padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const std::size_t n = xs[0], c_in = xs[1], h = xs[2], w = xs[3];
  const std::size_t c_out = ws[0];
  const int k = static_cast<int>(ws[2]);
  auto fail = [&](const std::string& why) {
    return ShapeError("conv2d: input " + shape_str(xs) + " and weight " + shape_str(ws) + " " + why);
  };
  if (stride < 1 || padding < 0) throw fail("need stride >= 1 and padding >= 0");
  if (ws[1] != c_in) throw fail("disagree on input channels");
  if (ws[2] != ws[3]) throw fail("need a square kernel");
  if (bias.value().numel() != c_out) throw fail("need a bias of " + std::to_string(c_out));
  const long span_h = static_cast<long>(h) + 2 * padding - k;
  const long span_w = static_cast<long>(w) + 2 * padding - k;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw fail("give a non-integral output size");
  }
  const std::size_t out_h = static_cast<std::size_t>(span_h / stride) + 1;
  const std::size_t out_w = static_cast<std::size_t>(span_w / stride) + 1;
  const std::size_t patch = c_in * k * k, plane = out_h * out_w;

  Tensor out({n, c_out, out_h, out_w});
  AlignedBuffer cols(patch * plane);
  const ConstMatMap wm(weight.value().ptr(), c_out, patch);
  for (std::size_t b = 0; b < n; ++b) {
    im2col(x.value().ptr() + b * c_in * h * w, c_in, h, w, k, stride, padding, out_h, out_w, cols.data());
    MatMap om(out.ptr() + b * c_out * plane, c_out, plane);
    om.noalias() = wm * ConstMatMap(cols.data(), patch, plane);
    for (std::size_t c = 0; c < c_out; ++c) om.row(c).array() += bias.value()[c];
  }

  return tape_of(x).record(std::move(out), {x, weight, bias}, [=](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_slot(x);
    Tensor* gw = tape.grad_slot(weight);
    Tensor* gb = tape.grad_slot(bias);
    AlignedBuffer cols(patch * plane);
    const ConstMatMap wm(weight.value().ptr(), c_out, patch);
    for (std::size_t b = 0; b < n; ++b) {
      const ConstMatMap gm(g.ptr() + b * c_out * plane, c_out, plane);
      if (gw) {
        im2col(x.value().ptr() + b * c_in * h * w, c_in, h, w, k, stride, padding, out_h, out_w, cols.data());
        MatMap(gw->ptr(), c_out, patch).noalias() += gm * ConstMatMap(cols.data(), patch, plane).transpose();
      }
      if (gb) {
        for (std::size_t c = 0; c < c_out; ++c) (*gb)[c] += gm.row(c).sum();
      }
      if (gx) {
        MatMap(cols.data(), patch, plane).noalias() = wm.transpose() * gm;
        col2im(cols.data(), c_in, h, w, k, stride, padding, out_h, out_w, gx->ptr() + b * c_in * h * w);
      }
    }
  });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 && xs.size() != 4) {
    throw ShapeError("batchnorm: expected N x C or N x C x H x W, got " + shape_str(xs));
  }
  const std::size_t n = xs[0], channels = xs[1];
  const std::size_t spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;
  if (gamma.value().numel() != channels || beta.value().numel() != channels ||
      state.running_mean.numel() != channels || state.running_var.numel() != channels) {
    throw ShapeError("batchnorm: parameters do not match " + std::to_string(channels) + " channels");
  }
  if (mode == Mode::train && n < 2) {
    throw DegenerateBatchError("batchnorm in train mode needs at least 2 samples, got " + std::to_string(n));
  }

  const double count = static_cast<double>(n * spatial);
  auto index = [=](std::size_t b, std::size_t c, std::size_t s) { return (b * channels + c) * spatial + s; };

  // xhat and 1/std per channel are kept for the backward rule.
  auto xhat = std::make_shared<Tensor>(xs);
  auto inv_std = std::make_shared<std::vector<double>>(channels);
  const Tensor& in = x.value();
  for (std::size_t c = 0; c < channels; ++c) {
    double mu, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < spatial; ++p) s += in[index(b, c, p)];
      mu = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < spatial; ++p) ss += (in[index(b, c, p)] - mu) * (in[index(b, c, p)] - mu);
      var = ss / count;
      state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1 - state.momentum) * state.running_var[c] + state.momentum * ss / (count - 1);
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    (*inv_std)[c] = 1.0 / std::sqrt(var + state.epsilon);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < spatial; ++p) (*xhat)[index(b, c, p)] = (in[index(b, c, p)] - mu) * (*inv_std)[c];
  }

  Tensor out(xs);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < spatial; ++p)
        out[index(b, c, p)] = gamma.value()[c] * (*xhat)[index(b, c, p)] + beta.value()[c];

  return tape_of(x).record(std::move(out), {x, gamma, beta}, [=](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_slot(x);
    Tensor* gg = tape.grad_slot(gamma);
    Tensor* gbeta = tape.grad_slot(beta);
    for (std::size_t c = 0; c < channels; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < spatial; ++p) {
          const std::size_t i = index(b, c, p);
          sum_g += g[i];
          sum_gx += g[i] * (*xhat)[i];
        }
      }
      if (gg) (*gg)[c] += sum_gx;
      if (gbeta) (*gbeta)[c] += sum_g;
      if (!gx) continue;
      const double gam = gamma.value()[c];
      const double istd = (*inv_std)[c];
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < spatial; ++p) {
          const std::size_t i = index(b, c, p);
          if (mode == Mode::train) {
            (*gx)[i] += gam * istd * (g[i] - sum_g / count - (*xhat)[i] * sum_gx / count);
          } else {
            (*gx)[i] += gam * istd * g[i];
          }
        }
      }
    }
  });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var elu(Var x, double alpha) {
  return unary(
      x, [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
      [alpha](double v) { return v > 0.0 ? 1.0 : alpha * std::exp(v); });
}

Var leaky_relu(Var x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v) { return v > 0.0 ? 1.0 : slope; });
}

Var maxpool2d(Var x, int kernel) {
  require_rank("maxpool2d", x, 4);
  const Shape& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t k = static_cast<std::size_t>(kernel);
  if (kernel < 1 || h < k || w < k) {
    throw ShapeError("maxpool2d: input " + shape_str(xs) + " is smaller than the " + std::to_string(kernel) +
                     "x" + std::to_string(kernel) + " window");
  }
  const std::size_t out_h = h / k, out_w = w / k;
  Tensor out({n, c, out_h, out_w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const Tensor& in = x.value();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        std::size_t best = base + (oy * k) * w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = base + (oy * k + dy) * w + ox * k + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (plane * out_h + oy) * out_w + ox;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
    }
  }
  return tape_of(x).record(std::move(out), {x}, [x, argmax](Tape& tape, const Tensor& g) {
    if (Tensor* gx = tape.grad_slot(x)) {
      for (std::size_t o = 0; o < g.numel(); ++o) (*gx)[(*argmax)[o]] += g[o];
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.value().dim(0), k = logits.value().dim(1);
  if (targets.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy on an empty batch");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw IndexError("target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto probs = std::make_shared<Tensor>(logits.shape());
  const Tensor& z = logits.value();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z[r * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[r * k + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(z[r * k + j] - lse);
    total += lse - z[r * k + targets[r]];
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return tape_of(logits).record(
      Tensor::scalar(total / static_cast<double>(n)), {logits},
      [logits, probs, tgt = std::move(tgt), n, k](Tape& tape, const Tensor& g) {
        Tensor* gz = tape.grad_slot(logits);
        if (!gz) return;
        const double factor = g[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = static_cast<std::size_t>(tgt[r]) == j ? 1.0 : 0.0;
            (*gz)[r * k + j] += factor * ((*probs)[r * k + j] - onehot);
          }
        }
      });
}

Var add_bias(Var x, Var b) {
  require_rank("add_bias", x, 2);
  const std::size_t n = x.value().dim(0), f = x.value().dim(1);
  if (b.value().numel() != f) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match columns of " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] += bv[j];
  return tape_of(x).record(std::move(out), {x, b}, [x, b, n, f](Tape& tape, const Tensor& g) {
    if (Tensor* gx = tape.grad_slot(x)) {
      for (std::size_t i = 0; i < n * f; ++i) (*gx)[i] += g[i];
    }
    if (Tensor* gb = tape.grad_slot(b)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < f; ++j) (*gb)[j] += g[r * f + j];
    }
  });
}

Var gather_rows(Var x, std::span<const std::int32_t> index) {
  require_rank("gather_rows", x, 2);
  const std::size_t rows = x.value().dim(0), f = x.value().dim(1);
  check_segment_ids(index, rows);
  Tensor out({index.size(), f});
  for (std::size_t e = 0; e < index.size(); ++e) {
    std::copy_n(x.value().ptr() + index[e] * f, f, out.ptr() + e * f);
  }
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return tape_of(x).record(std::move(out), {x}, [x, idx = std::move(idx), f](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_slot(x);
    if (!gx) return;
    for (std::size_t e = 0; e < idx.size(); ++e) {
      double* dst = gx->ptr() + idx[e] * f;
      const double* src = g.ptr() + e * f;
      for (std::size_t j = 0; j < f; ++j) dst[j] += src[j];
    }
  });
}

Var row_scale(Var x, Var w) {
  require_rank("row_scale", x, 2);
  const std::size_t e = x.value().dim(0), f = x.value().dim(1);
  if (w.value().numel() != e) {
    throw ShapeError("row_scale: weights " + shape_str(w.shape()) + " do not match rows of " + shape_str(x.shape()));
  }
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  Tensor out({e, f});
  for (std::size_t r = 0; r < e; ++r)
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] = xv[r * f + j] * wv[r];
  return tape_of(x).record(std::move(out), {x, w}, [x, w, e, f](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (Tensor* gx = tape.grad_slot(x)) {
      for (std::size_t r = 0; r < e; ++r)
        for (std::size_t j = 0; j < f; ++j) (*gx)[r * f + j] += g[r * f + j] * wv[r];
    }
    if (Tensor* gw = tape.grad_slot(w)) {
      for (std::size_t r = 0; r < e; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < f; ++j) s += g[r * f + j] * xv[r * f + j];
        (*gw)[r] += s;
      }
    }
  });
}

Var edge_aggregate(Var x, Var w, std::span<const std::int32_t> src, std::span<const std::int32_t> dst,
                   std::size_t num_nodes) {
  require_rank("edge_aggregate", x, 2);
  const std::size_t rows = x.value().dim(0), f = x.value().dim(1), e = src.size();
  if (dst.size() != e || w.value().numel() != e) {
    throw ShapeError("edge_aggregate: " + std::to_string(src.size()) + " sources, " + std::to_string(dst.size()) +
                     " destinations and weights " + shape_str(w.shape()) + " disagree");
  }
  check_segment_ids(src, rows);
  check_segment_ids(dst, num_nodes);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  Tensor out({num_nodes, f});
  for (std::size_t k = 0; k < e; ++k) {
    const double* in = xv.ptr() + src[k] * f;
    double* acc = out.ptr() + dst[k] * f;
    const double a = wv[k];
    for (std::size_t j = 0; j < f; ++j) acc[j] += a * in[j];
  }
  std::vector<std::int32_t> s(src.begin(), src.end()), d(dst.begin(), dst.end());
  return tape_of(x).record(std::move(out), {x, w}, [x, w, s = std::move(s), d = std::move(d), f](Tape& tape,
                                                                                                 const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    Tensor* gx = tape.grad_slot(x);
    Tensor* gw = tape.grad_slot(w);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double* go = g.ptr() + d[k] * f;
      if (gx) {
        double* gi = gx->ptr() + s[k] * f;
        const double a = wv[k];
        for (std::size_t j = 0; j < f; ++j) gi[j] += a * go[j];
      }
      if (gw) {
        const double* in = xv.ptr() + s[k] * f;
        double acc = 0.0;
        for (std::size_t j = 0; j < f; ++j) acc += go[j] * in[j];
        (*gw)[k] += acc;
      }
    }
  });
}

Var scatter_segment(Reduce op, Var values, std::span<const std::int32_t> segment_ids, std::size_t num_segments) {
  require_rank("scatter_segment", values, 2);
  const std::size_t e = values.value().dim(0), f = values.value().dim(1);
  if (segment_ids.size() != e) {
    throw ShapeError("scatter_segment: " + std::to_string(segment_ids.size()) + " ids for values " +
                     shape_str(values.shape()));
  }
  check_segment_ids(segment_ids, num_segments);
  std::vector<std::int32_t> ids(segment_ids.begin(), segment_ids.end());
  const Tensor& v = values.value();
  Tape& tape = tape_of(values);

  switch (op) {
    case Reduce::sum:
    case Reduce::mean: {
      Tensor out({num_segments, f});
      std::vector<double> count(num_segments, 0.0);
      for (std::size_t r = 0; r < e; ++r) {
        count[ids[r]] += 1.0;
        for (std::size_t j = 0; j < f; ++j) out[ids[r] * f + j] += v[r * f + j];
      }
      if (op == Reduce::mean) {
        for (std::size_t s = 0; s < num_segments; ++s) {
          if (count[s] == 0.0) continue;
          for (std::size_t j = 0; j < f; ++j) out[s * f + j] /= count[s];
        }
      }
      return tape.record(std::move(out), {values},
                         [values, ids = std::move(ids), count = std::move(count), op, f](Tape& t, const Tensor& g) {
                           Tensor* gv = t.grad_slot(values);
                           if (!gv) return;
                           for (std::size_t r = 0; r < ids.size(); ++r) {
                             const double factor = op == Reduce::mean ? 1.0 / count[ids[r]] : 1.0;
                             for (std::size_t j = 0; j < f; ++j) (*gv)[r * f + j] += g[ids[r] * f + j] * factor;
                           }
                         });
    }
    case Reduce::max: {
      Tensor out({num_segments, f});
      std::vector<std::int64_t> arg(num_segments * f, -1);
      for (std::size_t r = 0; r < e; ++r) {
        for (std::size_t j = 0; j < f; ++j) {
          auto& a = arg[ids[r] * f + j];
          if (a < 0 || v[r * f + j] > v[a * f + j]) a = static_cast<std::int64_t>(r);
        }
      }
      for (std::size_t s = 0; s < num_segments * f; ++s) {
        if (arg[s] >= 0) out[s] = v[arg[s] * f + s % f];
      }
      return tape.record(std::move(out), {values}, [values, arg = std::move(arg), f](Tape& t, const Tensor& g) {
        Tensor* gv = t.grad_slot(values);
        if (!gv) return;
        for (std::size_t s = 0; s < arg.size(); ++s) {
          if (arg[s] >= 0) (*gv)[arg[s] * f + s % f] += g[s];
        }
      });
    }
    case Reduce::softmax: {
      std::vector<double> mx(num_segments * f, -std::numeric_limits<double>::infinity());
      for (std::size_t r = 0; r < e; ++r)
        for (std::size_t j = 0; j < f; ++j) mx[ids[r] * f + j] = std::max(mx[ids[r] * f + j], v[r * f + j]);
      std::vector<double> denom(num_segments * f, 0.0);
      Tensor out({e, f});
      for (std::size_t r = 0; r < e; ++r) {
        for (std::size_t j = 0; j < f; ++j) {
          out[r * f + j] = std::exp(v[r * f + j] - mx[ids[r] * f + j]);
          denom[ids[r] * f + j] += out[r * f + j];
        }
      }
      for (std::size_t r = 0; r < e; ++r)
        for (std::size_t j = 0; j < f; ++j) out[r * f + j] /= denom[ids[r] * f + j];
      auto y = std::make_shared<Tensor>(out);
      return tape.record(std::move(out), {values},
                         [values, y, ids = std::move(ids), num_segments, f](Tape& t, const Tensor& g) {
                           Tensor* gv = t.grad_slot(values);
                           if (!gv) return;
                           std::vector<double> dot(num_segments * f, 0.0);
                           for (std::size_t r = 0; r < ids.size(); ++r)
                             for (std::size_t j = 0; j < f; ++j) dot[ids[r] * f + j] += g[r * f + j] * (*y)[r * f + j];
                           for (std::size_t r = 0; r < ids.size(); ++r)
                             for (std::size_t j = 0; j < f; ++j)
                               (*gv)[r * f + j] += (*y)[r * f + j] * (g[r * f + j] - dot[ids[r] * f + j]);
                         });
    }
  }
  throw ContractError("unknown scatter reduction");
}

}  // namespace spx::ops
