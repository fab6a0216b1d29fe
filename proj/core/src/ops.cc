#include "robustlens/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "robustlens/parallel.h"

namespace rl {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": shape " + to_string(a) + " incompatible with " +
                       to_string(b));
}

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw StateError(std::string(op) + ": operands on different tapes");
  if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& from, T factor = T{1}) {
  T* dst = into.raw();
  const T* src = from.raw();
  const Index n = into.size();
  for (Index i = 0; i < n; ++i) dst[i] += factor * src[i];
}

struct ConvGeometry {
  Index n, c, h, w, out_c, kh, kw, stride, pad, oh, ow;
  Index patch() const { return c * kh * kw; }
  Index positions() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + k is in range.
inline std::pair<Index, Index> valid_span(Index k, Index stride, Index pad, Index in, Index out) {
  const Index first = pad - k;
  Index lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const Index last = in - 1 + pad - k;
  Index hi = last < 0 ? 0 : last / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// Gathers the receptive fields of one [C,H,W] image into a [C*kH*kW, oH*oW]
// matrix.
template <typename T>
void gather_patches(const ConvGeometry& g, const T* image, T* cols) {
  const Index positions = g.positions();
  for (Index c = 0; c < g.c; ++c) {
    const T* plane = image + c * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * positions;
        const auto [lo, hi] = valid_span(kj, g.stride, g.pad, g.w, g.ow);
        for (Index oy = 0; oy < g.oh; ++oy) {
          T* out = dst + oy * g.ow;
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(out, g.ow, T{0});
            continue;
          }
          std::fill_n(out, lo, T{0});
          const T* in = plane + iy * g.w + lo * g.stride - g.pad + kj;
          if (g.stride == 1) {
            std::copy_n(in, hi - lo, out + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) out[ox] = in[(ox - lo) * g.stride];
          }
          std::fill(out + hi, out + g.ow, T{0});
        }
      }
    }
  }
}

// Adjoint of gather_patches: adds column gradients back onto one image.
template <typename T>
void scatter_patches(const ConvGeometry& g, const T* cols, T* image) {
  const Index positions = g.positions();
  for (Index c = 0; c < g.c; ++c) {
    T* plane = image + c * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * positions;
        const auto [lo, hi] = valid_span(kj, g.stride, g.pad, g.w, g.ow);
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const T* in = src + oy * g.ow;
          T* out = plane + iy * g.w + lo * g.stride - g.pad + kj;
          for (Index ox = lo; ox < hi; ++ox) out[(ox - lo) * g.stride] += in[ox];
        }
      }
    }
  }
}

// Images per weight-gradient partial sum. Fixed so the reduction order does
// not depend on the worker count.
constexpr Index kConvChunk = 8;

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  return a.tape().record("add", std::move(out), {a, b}, [](const BackwardContext<T>& ctx) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (auto* g = ctx.input_grad(i)) accumulate(*g, ctx.output_grad());
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out = a.value();
  accumulate(out, b.value(), T{-1});
  return a.tape().record("sub", std::move(out), {a, b}, [](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) accumulate(*g, ctx.output_grad());
    if (auto* g = ctx.input_grad(1)) accumulate(*g, ctx.output_grad(), T{-1});
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  for (Index i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record("mul", std::move(out), {a, b}, [](const BackwardContext<T>& ctx) {
    const auto& dy = ctx.output_grad();
    if (auto* g = ctx.input_grad(0)) {
      for (Index i = 0; i < dy.size(); ++i) (*g)[i] += dy[i] * ctx.input(1)[i];
    }
    if (auto* g = ctx.input_grad(1)) {
      for (Index i = 0; i < dy.size(); ++i) (*g)[i] += dy[i] * ctx.input(0)[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape().record("scale", std::move(out), {a}, [factor](const BackwardContext<T>& ctx) {
    accumulate(*ctx.input_grad(0), ctx.output_grad(), factor);
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  return a.tape().record("sum", Tensor<T>(Shape{}, total), {a}, [](const BackwardContext<T>& ctx) {
    const T dy = ctx.output_grad()[0];
    for (auto& v : ctx.input_grad(0)->data()) v += dy;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const Index n = a.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return a.tape().record("relu", std::move(out), {a}, [](const BackwardContext<T>& ctx) {
    const auto& x = ctx.input(0);
    const auto& dy = ctx.output_grad();
    auto& dx = *ctx.input_grad(0);
    for (Index i = 0; i < dy.size(); ++i) {
      if (x[i] > T{0}) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(out), {a}, [](const BackwardContext<T>& ctx) {
    accumulate(*ctx.input_grad(0), ctx.output_grad());
  });
}

template <typename T>
Var<T> flatten(const Var<T>& a) {
  if (a.value().rank() < 1) throw DimensionError("flatten needs a leading batch axis");
  return reshape(a, Shape{a.shape()[0], a.value().row_size()});
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::optional<Var<T>>& bias,
              Conv2dOptions options) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = kernel.value();
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    shape_mismatch("conv2d", x.shape(), w.shape());
  }
  if (options.stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (options.padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 options.stride, options.padding, 0, 0};
  g.oh = conv_output_extent(g.h, g.kh, g.stride, g.pad);
  g.ow = conv_output_extent(g.w, g.kw, g.stride, g.pad);
  if (g.oh < 1 || g.ow < 1) shape_mismatch("conv2d", x.shape(), w.shape());
  if (bias && bias->shape() != Shape{g.out_c}) shape_mismatch("conv2d bias", bias->shape(), w.shape());

  const Index p = g.positions();
  const Index image_size = g.c * g.h * g.w;
  Tensor<T> out(Shape{g.n, g.out_c, g.oh, g.ow});
  ConstMatrixMap<T> wm(w.raw(), g.out_c, g.patch());
  parallel_for(g.n, [&](Index n) {
    RowMatrix<T> cols(g.patch(), p);
    gather_patches(g, x.raw() + n * image_size, cols.data());
    MatrixMap<T> y(out.raw() + n * g.out_c * p, g.out_c, p);
    y.noalias() = wm * cols;
    if (bias) {
      for (Index o = 0; o < g.out_c; ++o) y.row(o).array() += bias->value()[o];
    }
  });

  // Patches are re-gathered from the saved input instead of being kept.
  auto backward = [g](const BackwardContext<T>& ctx) {
    const Index p = g.positions();
    const Index image_size = g.c * g.h * g.w;
    const T* x = ctx.input(0).raw();
    const T* go = ctx.output_grad().raw();
    ConstMatrixMap<T> wm(ctx.input(1).raw(), g.out_c, g.patch());
    Tensor<T>* dw = ctx.input_grad(1);
    Tensor<T>* dx = ctx.input_grad(0);
    if (ctx.num_inputs() > 2 && ctx.input_grad(2) != nullptr) {
      auto& db = *ctx.input_grad(2);
      for (Index n = 0; n < g.n; ++n) {
        for (Index o = 0; o < g.out_c; ++o) {
          const T* row = go + (n * g.out_c + o) * p;
          T acc{0};
          for (Index i = 0; i < p; ++i) acc += row[i];
          db[o] += acc;
        }
      }
    }
    if (dw == nullptr && dx == nullptr) return;
    const Index chunks = (g.n + kConvChunk - 1) / kConvChunk;
    std::vector<RowMatrix<T>> partial(static_cast<std::size_t>(dw ? chunks : 0));
    parallel_for(chunks, [&](Index chunk) {
      RowMatrix<T> cols(g.patch(), p);
      RowMatrix<T> dcols;
      if (dw) partial[static_cast<std::size_t>(chunk)] = RowMatrix<T>::Zero(g.out_c, g.patch());
      const Index end = std::min(g.n, (chunk + 1) * kConvChunk);
      for (Index n = chunk * kConvChunk; n < end; ++n) {
        ConstMatrixMap<T> dy(go + n * g.out_c * p, g.out_c, p);
        if (dw) {
          gather_patches(g, x + n * image_size, cols.data());
          partial[static_cast<std::size_t>(chunk)].noalias() += dy * cols.transpose();
        }
        if (dx) {
          dcols.noalias() = wm.transpose() * dy;
          scatter_patches(g, dcols.data(), dx->raw() + n * image_size);
        }
      }
    });
    if (dw) {
      MatrixMap<T> dwm(dw->raw(), g.out_c, g.patch());
      for (const auto& part : partial) dwm += part;
    }
  };
  if (bias) return input.tape().record("conv2d", std::move(out), {input, kernel, *bias}, backward);
  return input.tape().record("conv2d", std::move(out), {input, kernel}, backward);
}

template <typename T>
BatchNormResult<T> batchnorm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                               std::span<const T> running_mean, std::span<const T> running_var,
                               BatchNormMode mode, T epsilon) {
  const Tensor<T>& x = input.value();
  if (x.rank() != 4) throw DimensionError("batchnorm2d: expected [N,C,H,W], got " + to_string(x.shape()));
  const Index n = x.dim(0), channels = x.dim(1), spatial = x.dim(2) * x.dim(3);
  const Shape channel_shape{channels};
  if (gamma.shape() != channel_shape) shape_mismatch("batchnorm2d gamma", gamma.shape(), x.shape());
  if (beta.shape() != channel_shape) shape_mismatch("batchnorm2d beta", beta.shape(), x.shape());
  if (static_cast<Index>(running_mean.size()) != channels ||
      static_cast<Index>(running_var.size()) != channels) {
    throw DimensionError("batchnorm2d: running statistics length does not match " +
                         to_string(x.shape()));
  }

  const Index count = n * spatial;
  BatchNormResult<T> result;
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(channels));
  auto normalized = std::make_shared<Tensor<T>>(x.shape());
  std::vector<T> centre(static_cast<std::size_t>(channels));
  if (mode == BatchNormMode::kTrain) {
    if (count == 0) throw DimensionError("batchnorm2d: empty batch in train mode");
    result.batch_mean.assign(static_cast<std::size_t>(channels), T{0});
    result.batch_var.assign(static_cast<std::size_t>(channels), T{0});
    for (Index c = 0; c < channels; ++c) {
      T acc{0};
      for (Index b = 0; b < n; ++b) {
        const T* src = x.raw() + (b * channels + c) * spatial;
        for (Index i = 0; i < spatial; ++i) acc += src[i];
      }
      const T mu = acc / static_cast<T>(count);
      T sq{0};
      for (Index b = 0; b < n; ++b) {
        const T* src = x.raw() + (b * channels + c) * spatial;
        for (Index i = 0; i < spatial; ++i) sq += (src[i] - mu) * (src[i] - mu);
      }
      result.batch_mean[c] = mu;
      result.batch_var[c] = sq / static_cast<T>(count);
      centre[c] = mu;
      (*inv_std)[c] = T{1} / std::sqrt(result.batch_var[c] + epsilon);
    }
  } else {
    for (Index c = 0; c < channels; ++c) {
      centre[c] = running_mean[c];
      (*inv_std)[c] = T{1} / std::sqrt(running_var[c] + epsilon);
    }
  }

  Tensor<T> out(x.shape());
  for (Index b = 0; b < n; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index offset = (b * channels + c) * spatial;
      const T g = gamma.value()[c], be = beta.value()[c];
      for (Index i = 0; i < spatial; ++i) {
        const T xh = (x[offset + i] - centre[c]) * (*inv_std)[c];
        (*normalized)[offset + i] = xh;
        out[offset + i] = g * xh + be;
      }
    }
  }

  const bool train = mode == BatchNormMode::kTrain;
  result.output = input.tape().record(
      train ? "batchnorm2d.train" : "batchnorm2d.eval", std::move(out), {input, gamma, beta},
      [=](const BackwardContext<T>& ctx) {
        const auto& dy = ctx.output_grad();
        const auto& g = ctx.input(1);
        for (Index c = 0; c < channels; ++c) {
          T sum_dy{0}, sum_dy_xh{0};
          for (Index b = 0; b < n; ++b) {
            const Index offset = (b * channels + c) * spatial;
            for (Index i = 0; i < spatial; ++i) {
              sum_dy += dy[offset + i];
              sum_dy_xh += dy[offset + i] * (*normalized)[offset + i];
            }
          }
          if (auto* dg = ctx.input_grad(1)) (*dg)[c] += sum_dy_xh;
          if (auto* dbeta = ctx.input_grad(2)) (*dbeta)[c] += sum_dy;
          if (auto* dx = ctx.input_grad(0)) {
            const T k = g[c] * (*inv_std)[c];
            const T m = static_cast<T>(count);
            for (Index b = 0; b < n; ++b) {
              const Index offset = (b * channels + c) * spatial;
              for (Index i = 0; i < spatial; ++i) {
                if (train) {
                  (*dx)[offset + i] +=
                      k / m * (m * dy[offset + i] - sum_dy - (*normalized)[offset + i] * sum_dy_xh);
                } else {
                  (*dx)[offset + i] += k * dy[offset + i];
                }
              }
            }
          }
        }
      });
  return result;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
    shape_mismatch("linear", xv.shape(), wv.shape());
  }
  const Index n = xv.dim(0), in = xv.dim(1), out_features = wv.dim(0);
  if (bias && bias->shape() != Shape{out_features}) {
    shape_mismatch("linear bias", bias->shape(), wv.shape());
  }
  Tensor<T> out(Shape{n, out_features});
  MatrixMap<T> ym(out.raw(), n, out_features);
  ym.noalias() = ConstMatrixMap<T>(xv.raw(), n, in) *
                 ConstMatrixMap<T>(wv.raw(), out_features, in).transpose();
  if (bias) {
    for (Index r = 0; r < n; ++r) {
      for (Index o = 0; o < out_features; ++o) out[r * out_features + o] += bias->value()[o];
    }
  }
  auto backward = [n, in, out_features](const BackwardContext<T>& ctx) {
    ConstMatrixMap<T> dy(ctx.output_grad().raw(), n, out_features);
    if (auto* dx = ctx.input_grad(0)) {
      MatrixMap<T>(dx->raw(), n, in).noalias() +=
          dy * ConstMatrixMap<T>(ctx.input(1).raw(), out_features, in);
    }
    if (auto* dw = ctx.input_grad(1)) {
      MatrixMap<T>(dw->raw(), out_features, in).noalias() +=
          dy.transpose() * ConstMatrixMap<T>(ctx.input(0).raw(), n, in);
    }
    if (ctx.num_inputs() > 2 && ctx.input_grad(2) != nullptr) {
      auto& db = *ctx.input_grad(2);
      for (Index o = 0; o < out_features; ++o) db[o] += dy.col(o).sum();
    }
  };
  if (bias) return x.tape().record("linear", std::move(out), {x, weight, *bias}, backward);
  return x.tape().record("linear", std::move(out), {x, weight}, backward);
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& input, Index kernel) {
  const Tensor<T>& x = input.value();
  if (x.rank() != 4) throw DimensionError("avg_pool2d: expected [N,C,H,W], got " + to_string(x.shape()));
  if (kernel < 1 || x.dim(2) < kernel || x.dim(3) < kernel) {
    throw DimensionError("avg_pool2d: kernel " + std::to_string(kernel) + " does not fit " +
                         to_string(x.shape()));
  }
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = h / kernel, ow = w / kernel;
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  for (Index p = 0; p < planes; ++p) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (Index i = 0; i < kernel; ++i) {
          for (Index j = 0; j < kernel; ++j) acc += x[(p * h + oy * kernel + i) * w + ox * kernel + j];
        }
        out[(p * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  return input.tape().record(
      "avg_pool2d", std::move(out), {input}, [=](const BackwardContext<T>& ctx) {
        auto& dx = *ctx.input_grad(0);
        const auto& dy = ctx.output_grad();
        for (Index p = 0; p < planes; ++p) {
          for (Index oy = 0; oy < oh; ++oy) {
            for (Index ox = 0; ox < ow; ++ox) {
              const T g = dy[(p * oh + oy) * ow + ox] * inv;
              for (Index i = 0; i < kernel; ++i) {
                for (Index j = 0; j < kernel; ++j) dx[(p * h + oy * kernel + i) * w + ox * kernel + j] += g;
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
  const Tensor<T>& x = input.value();
  if (x.rank() != 4) {
    throw DimensionError("global_avg_pool: expected [N,C,H,W], got " + to_string(x.shape()));
  }
  const Index planes = x.dim(0) * x.dim(1), spatial = x.dim(2) * x.dim(3);
  const T inv = T{1} / static_cast<T>(spatial);
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  for (Index p = 0; p < planes; ++p) {
    T acc{0};
    for (Index i = 0; i < spatial; ++i) acc += x[p * spatial + i];
    out[p] = acc * inv;
  }
  return input.tape().record("global_avg_pool", std::move(out), {input},
                             [=](const BackwardContext<T>& ctx) {
                               auto& dx = *ctx.input_grad(0);
                               for (Index p = 0; p < planes; ++p) {
                                 const T g = ctx.output_grad()[p] * inv;
                                 for (Index i = 0; i < spatial; ++i) dx[p * spatial + i] += g;
                               }
                             });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels, Reduction reduction) {
  const Tensor<T>& t = logits.value();
  if (t.rank() != 2) throw DimensionError("cross_entropy: logits must be [N,C], got " + to_string(t.shape()));
  const Index n = t.dim(0), classes = t.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(t.shape()));
  }
  auto probs = std::make_shared<Tensor<T>>(t.shape());
  std::vector<int> targets(labels.begin(), labels.end());
  T total{0};
  for (Index r = 0; r < n; ++r) {
    const int y = targets[r];
    if (y < 0 || y >= classes) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const T* row = t.raw() + r * classes;
    const T peak = *std::max_element(row, row + classes);
    T z{0};
    for (Index c = 0; c < classes; ++c) z += std::exp(row[c] - peak);
    const T log_z = peak + std::log(z);
    for (Index c = 0; c < classes; ++c) (*probs)[r * classes + c] = std::exp(row[c] - log_z);
    total += log_z - row[y];
  }
  const T factor = reduction == Reduction::kMean ? T{1} / static_cast<T>(n) : T{1};
  return logits.tape().record(
      "cross_entropy", Tensor<T>(Shape{}, total * factor), {logits},
      [=](const BackwardContext<T>& ctx) {
        const T g = ctx.output_grad()[0] * factor;
        auto& dt = *ctx.input_grad(0);
        for (Index r = 0; r < n; ++r) {
          for (Index c = 0; c < classes; ++c) {
            const T onehot = c == targets[r] ? T{1} : T{0};
            dt[r * classes + c] += g * ((*probs)[r * classes + c] - onehot);
          }
        }
      });
}

template <typename T>
Var<T> softmax(const Var<T>& logits) {
  const Tensor<T>& t = logits.value();
  if (t.rank() != 2) throw DimensionError("softmax: logits must be [N,C], got " + to_string(t.shape()));
  const Index n = t.dim(0), classes = t.dim(1);
  Tensor<T> out(t.shape());
  for (Index r = 0; r < n; ++r) {
    const T* row = t.raw() + r * classes;
    const T peak = *std::max_element(row, row + classes);
    T z{0};
    for (Index c = 0; c < classes; ++c) z += std::exp(row[c] - peak);
    for (Index c = 0; c < classes; ++c) out[r * classes + c] = std::exp(row[c] - peak) / z;
  }
  return logits.tape().record("softmax", std::move(out), {logits}, [=](const BackwardContext<T>& ctx) {
    const auto& y = ctx.output();
    const auto& dy = ctx.output_grad();
    auto& dx = *ctx.input_grad(0);
    for (Index r = 0; r < n; ++r) {
      T dot{0};
      for (Index c = 0; c < classes; ++c) dot += dy[r * classes + c] * y[r * classes + c];
      for (Index c = 0; c < classes; ++c) dx[r * classes + c] += y[r * classes + c] * (dy[r * classes + c] - dot);
    }
  });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const int> index) {
  const Tensor<T>& v = x.value();
  if (v.rank() != 2 || static_cast<Index>(index.size()) != v.dim(0)) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " + to_string(v.shape()));
  }
  const Index n = v.dim(0), cols = v.dim(1);
  std::vector<int> idx(index.begin(), index.end());
  Tensor<T> out(Shape{n});
  for (Index r = 0; r < n; ++r) {
    if (idx[r] < 0 || idx[r] >= cols) {
      throw IndexError("pick: column " + std::to_string(idx[r]) + " outside [0, " + std::to_string(cols) + ")");
    }
    out[r] = v[r * cols + idx[r]];
  }
  return x.tape().record("pick", std::move(out), {x}, [=](const BackwardContext<T>& ctx) {
    auto& dx = *ctx.input_grad(0);
    for (Index r = 0; r < n; ++r) dx[r * cols + idx[r]] += ctx.output_grad()[r];
  });
}

template <typename T>
Var<T> row_l2_norm(const Var<T>& x) {
  const Tensor<T>& v = x.value();
  if (v.rank() < 1) throw DimensionError("row_l2_norm needs a leading batch axis");
  const Index n = v.dim(0), width = v.row_size();
  Tensor<T> out(Shape{n});
  for (Index r = 0; r < n; ++r) {
    T sq{0};
    for (Index i = 0; i < width; ++i) sq += v[r * width + i] * v[r * width + i];
    out[r] = std::sqrt(sq);
  }
  return x.tape().record("row_l2_norm", std::move(out), {x}, [=](const BackwardContext<T>& ctx) {
    auto& dx = *ctx.input_grad(0);
    for (Index r = 0; r < n; ++r) {
      const T norm = ctx.output()[r];
      if (norm == T{0}) continue;
      const T g = ctx.output_grad()[r] / norm;
      for (Index i = 0; i < width; ++i) dx[r * width + i] += g * ctx.input(0)[r * width + i];
    }
  });
}

#define RL_INSTANTIATE_OPS(T)                                                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                              \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale(const Var<T>&, T);                                                        \
  template Var<T> sum(const Var<T>&);                                                             \
  template Var<T> mean(const Var<T>&);                                                            \
  template Var<T> relu(const Var<T>&);                                                            \
  template Var<T> reshape(const Var<T>&, Shape);                                                  \
  template Var<T> flatten(const Var<T>&);                                                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,              \
                         Conv2dOptions);                                                          \
  template BatchNormResult<T> batchnorm2d(const Var<T>&, const Var<T>&, const Var<T>&,            \
                                          std::span<const T>, std::span<const T>, BatchNormMode, \
                                          T);                                                     \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);             \
  template Var<T> avg_pool2d(const Var<T>&, Index);                                               \
  template Var<T> global_avg_pool(const Var<T>&);                                                 \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>, Reduction);                  \
  template Var<T> softmax(const Var<T>&);                                                         \
  template Var<T> pick(const Var<T>&, std::span<const int>);                                      \
  template Var<T> row_l2_norm(const Var<T>&);

RL_INSTANTIATE_OPS(float)
RL_INSTANTIATE_OPS(double)

#undef RL_INSTANTIATE_OPS

}  // namespace rl
