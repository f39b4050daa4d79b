#pragma once

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <vector>

#include "lesionseg/rng.hpp"
#include "lesionseg/tensor.hpp"

namespace lesionseg {

enum class RunMode { train, infer };

namespace ops {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// 3x3x3 convolution kernel with per-output-channel bias.
template <typename T = float>
struct ConvKernel {
  Tensor<T> weights;  // [out_channels, in_channels, 3, 3, 3]
  Tensor<T> bias;     // [out_channels]

  ConvKernel() = default;
  ConvKernel(Tensor<T> w, Tensor<T> b) : weights(std::move(w)), bias(std::move(b)) {
    validate();
  }

  std::size_t out_channels() const { return weights.extent(0); }
  std::size_t in_channels() const { return weights.extent(1); }

  void validate() const {
    if (weights.rank() != 5 || weights.extent(2) != 3 || weights.extent(3) != 3 ||
        weights.extent(4) != 3) {
      throw ShapeError("conv kernel must be [out,in,3,3,3], got " +
                       shape_str(weights.shape()));
    }
    if (bias.rank() != 1 || bias.extent(0) != weights.extent(0)) {
      throw ShapeError("conv bias " + shape_str(bias.shape()) +
                       " does not match kernel " + shape_str(weights.shape()));
    }
  }
};

namespace detail {

/// Unfolds a zero-padded [cin,d,h,w] volume into a [cin*27, d*h*w] matrix
/// (row-major) for a 3x3x3 same-padding convolution.
template <typename T>
void im2col_3(const T* in, std::size_t cin, std::size_t d, std::size_t h,
              std::size_t w, T* col) {
  const std::size_t n_cols = d * h * w;
  const std::ptrdiff_t dd = static_cast<std::ptrdiff_t>(d);
  const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const T* chan = in + ci * n_cols;
    for (std::ptrdiff_t kz = -1; kz <= 1; ++kz) {
      for (std::ptrdiff_t ky = -1; ky <= 1; ++ky) {
        for (std::ptrdiff_t kx = -1; kx <= 1; ++kx, ++row) {
          T* dst = col + row * n_cols;
          for (std::ptrdiff_t z = 0; z < dd; ++z) {
            const std::ptrdiff_t zz = z + kz;
            if (zz < 0 || zz >= dd) {
              std::memset(dst, 0, sizeof(T) * h * w);
              dst += h * w;
              continue;
            }
            for (std::ptrdiff_t y = 0; y < hh; ++y) {
              const std::ptrdiff_t yy = y + ky;
              if (yy < 0 || yy >= hh) {
                std::memset(dst, 0, sizeof(T) * w);
                dst += w;
                continue;
              }
              const T* src = chan + (zz * hh + yy) * ww;
              // shift row by kx with zero fill at the borders
              if (kx < 0) {
                dst[0] = T(0);
                std::memcpy(dst + 1, src, sizeof(T) * (w - 1));
              } else if (kx > 0) {
                std::memcpy(dst, src + 1, sizeof(T) * (w - 1));
                dst[w - 1] = T(0);
              } else {
                std::memcpy(dst, src, sizeof(T) * w);
              }
              dst += w;
            }
          }
        }
      }
    }
  }
}

/// Scatter-adds a [cin*27, d*h*w] column-gradient matrix back onto the input
/// gradient volume [cin,d,h,w]. grad_in must be pre-zeroed.
template <typename T>
void col2im_3(const T* col, std::size_t cin, std::size_t d, std::size_t h,
              std::size_t w, T* grad_in) {
  const std::size_t n_cols = d * h * w;
  const std::ptrdiff_t dd = static_cast<std::ptrdiff_t>(d);
  const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    T* chan = grad_in + ci * n_cols;
    for (std::ptrdiff_t kz = -1; kz <= 1; ++kz) {
      for (std::ptrdiff_t ky = -1; ky <= 1; ++ky) {
        for (std::ptrdiff_t kx = -1; kx <= 1; ++kx, ++row) {
          const T* src = col + row * n_cols;
          for (std::ptrdiff_t z = 0; z < dd; ++z) {
            const std::ptrdiff_t zz = z + kz;
            if (zz < 0 || zz >= dd) {
              src += h * w;
              continue;
            }
            for (std::ptrdiff_t y = 0; y < hh; ++y) {
              const std::ptrdiff_t yy = y + ky;
              if (yy < 0 || yy >= hh) {
                src += w;
                continue;
              }
              T* dst = chan + (zz * hh + yy) * ww;
              const std::ptrdiff_t x0 = kx < 0 ? 1 : 0;
              const std::ptrdiff_t x1 = kx > 0 ? ww - 1 : ww;
              for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x + kx] += src[x];
              src += w;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_input(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  kernel.validate();
  if (input.rank() != 4) {
    throw ShapeError("conv3d input must be [c,d,h,w], got " + shape_str(input.shape()));
  }
  if (input.extent(0) != kernel.in_channels()) {
    throw ShapeError("conv3d channel mismatch: input " + shape_str(input.shape()) +
                     " vs kernel " + shape_str(kernel.weights.shape()));
  }
}

/// Forward pass into a caller-provided output buffer; col must hold
/// cin*27 * d*h*w elements.
template <typename T>
void conv3d_forward_into(const T* in, std::size_t cin, std::size_t cout,
                         std::size_t d, std::size_t h, std::size_t w,
                         const ConvKernel<T>& kernel, T* out, T* col) {
  const std::size_t k = cin * 27;
  const std::size_t n = d * h * w;
  im2col_3(in, cin, d, h, w, col);
  ConstMatMap<T> wm(kernel.weights.data(), static_cast<Eigen::Index>(cout),
                    static_cast<Eigen::Index>(k));
  ConstMatMap<T> cm(col, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MatMap<T> ym(out, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(n));
  ym.noalias() = wm * cm;
  for (std::size_t co = 0; co < cout; ++co) {
    ym.row(static_cast<Eigen::Index>(co)).array() += kernel.bias[co];
  }
}

/// Backward pass; writes grad_input (overwrite) and adds nothing: grad
/// buffers are overwritten. col must hold cin*27 * d*h*w elements.
template <typename T>
void conv3d_backward_into(const T* in, const T* upstream, std::size_t cin,
                          std::size_t cout, std::size_t d, std::size_t h,
                          std::size_t w, const ConvKernel<T>& kernel, T* grad_in,
                          T* grad_w, T* grad_b, T* col) {
  const std::size_t k = cin * 27;
  const std::size_t n = d * h * w;
  im2col_3(in, cin, d, h, w, col);
  ConstMatMap<T> um(upstream, static_cast<Eigen::Index>(cout),
                    static_cast<Eigen::Index>(n));
  {
    ConstMatMap<T> cm(col, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MatMap<T> gw(grad_w, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
    gw.noalias() = um * cm.transpose();
  }
  for (std::size_t co = 0; co < cout; ++co) {
    // fixed-order reduction: Eigen's vectorized sum peels by buffer
    // alignment, which breaks run-to-run bitwise reproducibility
    T acc = 0;
    const T* row = upstream + co * n;
    for (std::size_t j = 0; j < n; ++j) acc += row[j];
    grad_b[co] = acc;
  }
  {
    ConstMatMap<T> wm(kernel.weights.data(), static_cast<Eigen::Index>(cout),
                      static_cast<Eigen::Index>(k));
    MatMap<T> dcol(col, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    dcol.noalias() = wm.transpose() * um;  // reuse col buffer for dcol
  }
  std::memset(grad_in, 0, sizeof(T) * cin * n);
  col2im_3(col, cin, d, h, w, grad_in);
}

}  // namespace detail

/// Zero-padded "same" 3D convolution (cross-correlation orientation).
/// input [c_in,d,h,w] -> output [c_out,d,h,w].
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  detail::check_conv_input(input, kernel);
  const std::size_t cin = input.extent(0), d = input.extent(1), h = input.extent(2),
                    w = input.extent(3);
  const std::size_t cout = kernel.out_channels();
  Tensor<T> out({cout, d, h, w});
  std::vector<T> col(cin * 27 * d * h * w);
  detail::conv3d_forward_into(input.data(), cin, cout, d, h, w, kernel, out.data(),
                              col.data());
  return out;
}

template <typename T>
struct Conv3dGrads {
  Tensor<T> input;    // same shape as the forward input
  Tensor<T> weights;  // same shape as kernel.weights
  Tensor<T> bias;     // same shape as kernel.bias
};

template <typename T>
Conv3dGrads<T> conv3d_backward(const Tensor<T>& input, const ConvKernel<T>& kernel,
                               const Tensor<T>& upstream) {
  detail::check_conv_input(input, kernel);
  const std::size_t cin = input.extent(0), d = input.extent(1), h = input.extent(2),
                    w = input.extent(3);
  const std::size_t cout = kernel.out_channels();
  const Shape expect{cout, d, h, w};
  if (upstream.shape() != expect) {
    throw ShapeError("conv3d upstream gradient " + shape_str(upstream.shape()) +
                     " must match output " + shape_str(expect));
  }
  Conv3dGrads<T> g;
  g.input = Tensor<T>({cin, d, h, w});
  g.weights = Tensor<T>(kernel.weights.shape());
  g.bias = Tensor<T>(kernel.bias.shape());
  std::vector<T> col(cin * 27 * d * h * w);
  detail::conv3d_backward_into(input.data(), upstream.data(), cin, cout, d, h, w,
                               kernel, g.input.data(), g.weights.data(),
                               g.bias.data(), col.data());
  return g;
}

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;                 // [c, d/2, h/2, w/2]
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2x2 max pooling with stride 2, floor semantics (trailing odd slices
/// dropped). Ties go to the lowest linear input index.
template <typename T>
MaxPoolResult<T> maxpool3d(const Tensor<T>& input) {
  if (input.rank() != 4) {
    throw ShapeError("maxpool3d input must be [c,d,h,w], got " +
                     shape_str(input.shape()));
  }
  const std::size_t c = input.extent(0), d = input.extent(1), h = input.extent(2),
                    w = input.extent(3);
  if (d < 2 || h < 2 || w < 2) {
    throw ShapeError("maxpool3d requires spatial extents >= 2, got " +
                     shape_str(input.shape()));
  }
  const std::size_t od = d / 2, oh = h / 2, ow = w / 2;
  MaxPoolResult<T> res;
  res.output = Tensor<T>({c, od, oh, ow});
  res.argmax.resize(c * od * oh * ow);
  const T* in = input.data();
  T* out = res.output.data();
  std::size_t o = 0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const std::size_t cbase = ci * d * h * w;
    for (std::size_t z = 0; z < od; ++z) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_ix = 0;
          for (std::size_t dz = 0; dz < 2; ++dz) {
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t ix =
                    cbase + ((2 * z + dz) * h + (2 * y + dy)) * w + (2 * x + dx);
                if (in[ix] > best) {
                  best = in[ix];
                  best_ix = ix;
                }
              }
            }
          }
          out[o] = best;
          res.argmax[o] = best_ix;
        }
      }
    }
  }
  return res;
}

/// Routes each output gradient to the input voxel that won the max.
template <typename T>
Tensor<T> maxpool3d_backward(const std::vector<std::size_t>& argmax,
                             const Tensor<T>& upstream, const Shape& input_shape) {
  if (upstream.size() != argmax.size()) {
    throw ShapeError("maxpool3d upstream " + shape_str(upstream.shape()) +
                     " does not match pooled output element count");
  }
  Tensor<T> grad(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) grad[argmax[o]] += upstream[o];
  return grad;
}

namespace detail {
template <typename T>
void check_prelu(const Tensor<T>& input, const Tensor<T>& slopes) {
  if (slopes.size() == 0 || input.size() % slopes.size() != 0) {
    throw ShapeError("prelu slopes " + shape_str(slopes.shape()) +
                     " do not tile input " + shape_str(input.shape()));
  }
}
}  // namespace detail

/// Parametric ReLU: out = x if x > 0 else slope * x. The slope tensor covers
/// one sample's feature block and is shared across a leading batch dimension.
template <typename T>
Tensor<T> prelu(const Tensor<T>& input, const Tensor<T>& slopes) {
  detail::check_prelu(input, slopes);
  Tensor<T> out(input.shape());
  const std::size_t f = slopes.size();
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T x = input[i];
    out[i] = x > T(0) ? x : slopes[i % f] * x;
  }
  return out;
}

template <typename T>
struct PreluGrads {
  Tensor<T> input;
  Tensor<T> slopes;
};

template <typename T>
PreluGrads<T> prelu_backward(const Tensor<T>& input, const Tensor<T>& slopes,
                             const Tensor<T>& upstream) {
  detail::check_prelu(input, slopes);
  require_same_shape(input.shape(), upstream.shape(), "prelu_backward");
  PreluGrads<T> g;
  g.input = Tensor<T>(input.shape());
  g.slopes = Tensor<T>(slopes.shape());
  const std::size_t f = slopes.size();
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T x = input[i];
    const std::size_t j = i % f;
    if (x > T(0)) {
      g.input[i] = upstream[i];
    } else {
      g.input[i] = upstream[i] * slopes[j];
      g.slopes[j] += upstream[i] * x;
    }
  }
  return g;
}

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;  // per channel
};

namespace detail {
template <typename T>
void check_batchnorm(const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, const Tensor<T>& mean,
                     const Tensor<T>& var) {
  if (input.rank() < 2) {
    throw ShapeError("batchnorm input must be [n,c,...], got " +
                     shape_str(input.shape()));
  }
  const std::size_t c = input.extent(1);
  for (const Tensor<T>* t : {&gamma, &beta, &mean, &var}) {
    if (t->rank() != 1 || t->extent(0) != c) {
      throw ShapeError("batchnorm parameter " + shape_str(t->shape()) +
                       " must have one entry per channel of " +
                       shape_str(input.shape()));
    }
  }
}
}  // namespace detail

/// Batch normalization over all axes except the channel axis (axis 1).
/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running statistics in place: r <- momentum*r + (1-momentum)*batch.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, const Tensor<T>& gamma,
                            const Tensor<T>& beta, Tensor<T>& running_mean,
                            Tensor<T>& running_var, RunMode mode, T momentum,
                            T epsilon, BatchNormCache<T>* cache = nullptr) {
  detail::check_batchnorm(input, gamma, beta, running_mean, running_var);
  const std::size_t n = input.extent(0);
  const std::size_t c = input.extent(1);
  std::size_t spatial = 1;
  for (std::size_t a = 2; a < input.rank(); ++a) spatial *= input.extent(a);
  Tensor<T> out(input.shape());
  const T* in = input.data();
  T* o = out.data();

  if (mode == RunMode::infer) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T scale = gamma[ci] / std::sqrt(running_var[ci] + epsilon);
        const T shift = beta[ci] - scale * running_mean[ci];
        const std::size_t base = (s * c + ci) * spatial;
        for (std::size_t j = 0; j < spatial; ++j) o[base + j] = in[base + j] * scale + shift;
      }
    }
    return out;
  }

  if (n == 0) throw std::invalid_argument("batchnorm: zero batch size in train mode");
  const T m = static_cast<T>(n * spatial);
  if (cache) {
    cache->xhat = Tensor<T>(input.shape());
    cache->inv_std.assign(c, T(0));
  }
  for (std::size_t ci = 0; ci < c; ++ci) {
    // batch mean/variance over samples and spatial positions, fixed order
    T sum = 0, sumsq = 0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * c + ci) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) {
        const T v = in[base + j];
        sum += v;
        sumsq += v * v;
      }
    }
    const T mean = sum / m;
    T var = sumsq / m - mean * mean;
    if (var < T(0)) var = T(0);
    const T inv_std = T(1) / std::sqrt(var + epsilon);
    const T g = gamma[ci], b = beta[ci];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * c + ci) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) {
        const T xh = (in[base + j] - mean) * inv_std;
        if (cache) cache->xhat[base + j] = xh;
        o[base + j] = g * xh + b;
      }
    }
    if (cache) cache->inv_std[ci] = inv_std;
    running_mean[ci] = momentum * running_mean[ci] + (T(1) - momentum) * mean;
    running_var[ci] = momentum * running_var[ci] + (T(1) - momentum) * var;
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache,
                                     const Tensor<T>& gamma,
                                     const Tensor<T>& upstream) {
  const Tensor<T>& xhat = cache.xhat;
  require_same_shape(xhat.shape(), upstream.shape(), "batchnorm_backward");
  const std::size_t n = xhat.extent(0), c = xhat.extent(1);
  std::size_t spatial = 1;
  for (std::size_t a = 2; a < xhat.rank(); ++a) spatial *= xhat.extent(a);
  const T m = static_cast<T>(n * spatial);
  BatchNormGrads<T> g;
  g.input = Tensor<T>(xhat.shape());
  g.gamma = Tensor<T>(gamma.shape());
  g.beta = Tensor<T>(gamma.shape());
  for (std::size_t ci = 0; ci < c; ++ci) {
    T sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * c + ci) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) {
        sum_dy += upstream[base + j];
        sum_dy_xhat += upstream[base + j] * xhat[base + j];
      }
    }
    g.gamma[ci] = sum_dy_xhat;
    g.beta[ci] = sum_dy;
    const T k = gamma[ci] * cache.inv_std[ci] / m;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * c + ci) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) {
        g.input[base + j] =
            k * (m * upstream[base + j] - sum_dy - xhat[base + j] * sum_dy_xhat);
      }
    }
  }
  return g;
}

namespace detail {
template <typename T>
void check_dense(const Tensor<T>& input, const Tensor<T>& weights,
                 const Tensor<T>& bias) {
  if (weights.rank() != 2) {
    throw ShapeError("dense weights must be [out,in], got " +
                     shape_str(weights.shape()));
  }
  const std::size_t in_dim =
      input.rank() == 1 ? input.extent(0) : input.extent(input.rank() - 1);
  if (input.rank() > 2 || in_dim != weights.extent(1)) {
    throw ShapeError("dense input " + shape_str(input.shape()) +
                     " does not match weights " + shape_str(weights.shape()));
  }
  if (bias.rank() != 1 || bias.extent(0) != weights.extent(0)) {
    throw ShapeError("dense bias " + shape_str(bias.shape()) +
                     " does not match weights " + shape_str(weights.shape()));
  }
}
}  // namespace detail

/// Affine map y = W x + b. Accepts a single vector [in] or a batch [n,in].
/// Fixed-order accumulation: results are bitwise independent of the batch
/// size and of buffer alignment (the dense layers are a negligible share of
/// the network's arithmetic).
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weights,
                        const Tensor<T>& bias) {
  detail::check_dense(input, weights, bias);
  const bool batched = input.rank() == 2;
  const std::size_t n = batched ? input.extent(0) : 1;
  const std::size_t in_dim = weights.extent(1), out_dim = weights.extent(0);
  Tensor<T> out(batched ? Shape{n, out_dim} : Shape{out_dim});
  for (std::size_t s = 0; s < n; ++s) {
    const T* x = input.data() + s * in_dim;
    T* y = out.data() + s * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const T* wrow = weights.data() + o * in_dim;
      T acc = bias[o];
      for (std::size_t i = 0; i < in_dim; ++i) acc += wrow[i] * x[i];
      y[o] = acc;
    }
  }
  return out;
}

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights,
                             const Tensor<T>& upstream) {
  if (weights.rank() != 2) {
    throw ShapeError("dense weights must be [out,in], got " +
                     shape_str(weights.shape()));
  }
  const bool batched = input.rank() == 2;
  const std::size_t n = batched ? input.extent(0) : 1;
  const std::size_t in_dim = weights.extent(1), out_dim = weights.extent(0);
  const Shape expect = batched ? Shape{n, out_dim} : Shape{out_dim};
  if (upstream.shape() != expect ||
      (batched ? input.extent(1) : input.extent(0)) != in_dim) {
    throw ShapeError("dense_backward shape mismatch: input " +
                     shape_str(input.shape()) + ", upstream " +
                     shape_str(upstream.shape()) + ", weights " +
                     shape_str(weights.shape()));
  }
  DenseGrads<T> g;
  g.input = Tensor<T>(input.shape());
  g.weights = Tensor<T>(weights.shape());
  g.bias = Tensor<T>({out_dim});
  // fixed-order loops throughout, matching dense_forward
  for (std::size_t s = 0; s < n; ++s) {
    const T* u = upstream.data() + s * out_dim;
    T* gx = g.input.data() + s * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) {
      T acc = 0;
      for (std::size_t o = 0; o < out_dim; ++o) acc += u[o] * weights.data()[o * in_dim + i];
      gx[i] = acc;
    }
    const T* x = input.data() + s * in_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      T* gw = g.weights.data() + o * in_dim;
      const T uo = u[o];
      for (std::size_t i = 0; i < in_dim; ++i) gw[i] += uo * x[i];
      g.bias[o] += uo;
    }
  }
  return g;
}

/// Row-wise softmax with the max-subtraction trick.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax expects [n,k] logits, got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  Tensor<T> probs(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    T* out = probs.data() + i * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = 0;
    for (std::size_t j = 0; j < k; ++j) {
      out[j] = std::exp(row[j] - mx);
      denom += out[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= denom;
  }
  return probs;
}

template <typename T>
struct SoftmaxCrossEntropy {
  T loss;               // mean over the batch
  Tensor<T> grad;       // d loss / d logits, already divided by batch size
};

/// Two-class softmax + categorical cross-entropy in a numerically stable
/// log-sum-exp form. labels must be one-hot rows.
template <typename T>
SoftmaxCrossEntropy<T> softmax_crossentropy(const Tensor<T>& logits,
                                            const Tensor<T>& labels) {
  if (logits.rank() != 2 || logits.extent(1) != 2) {
    throw ShapeError("softmax_crossentropy expects [n,2] logits, got " +
                     shape_str(logits.shape()));
  }
  require_same_shape(logits.shape(), labels.shape(), "softmax_crossentropy");
  const std::size_t n = logits.extent(0);
  SoftmaxCrossEntropy<T> r;
  r.grad = Tensor<T>(logits.shape());
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T a = logits(i, std::size_t{0}), b = logits(i, std::size_t{1});
    if (!std::isfinite(static_cast<double>(a)) || !std::isfinite(static_cast<double>(b))) {
      throw std::runtime_error("softmax_crossentropy: non-finite logit at row " +
                               std::to_string(i));
    }
    const T mx = std::max(a, b);
    const T lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    const T p0 = std::exp(a - lse), p1 = std::exp(b - lse);
    total += labels(i, std::size_t{0}) * (lse - a) + labels(i, std::size_t{1}) * (lse - b);
    r.grad(i, std::size_t{0}) = (p0 - labels(i, std::size_t{0})) / static_cast<T>(n);
    r.grad(i, std::size_t{1}) = (p1 - labels(i, std::size_t{1})) / static_cast<T>(n);
  }
  r.loss = total / static_cast<T>(n);
  return r;
}

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  std::vector<T> mask;  // per-element scale: 0 or 1/(1-p); empty in infer mode
};

/// Inverted dropout: train mode zeroes each element with probability p and
/// scales survivors by 1/(1-p); infer mode is the identity.
template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double p, RunMode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout probability must lie in [0,1), got " +
                                std::to_string(p));
  }
  DropoutResult<T> r;
  r.output = input;
  if (mode == RunMode::infer || p == 0.0) return r;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  r.mask.resize(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T m = unif(rng) < p ? T(0) : keep_scale;
    r.mask[i] = m;
    r.output[i] = input[i] * m;
  }
  return r;
}

template <typename T>
Tensor<T> dropout_backward(const std::vector<T>& mask, const Tensor<T>& upstream) {
  Tensor<T> grad(upstream.shape());
  if (mask.empty()) return upstream;  // identity pass
  if (mask.size() != upstream.size()) {
    throw ShapeError("dropout mask does not match upstream gradient shape");
  }
  for (std::size_t i = 0; i < upstream.size(); ++i) grad[i] = upstream[i] * mask[i];
  return grad;
}

}  // namespace ops
}  // namespace lesionseg
