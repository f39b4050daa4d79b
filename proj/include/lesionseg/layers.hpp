#pragma once

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "lesionseg/ops.hpp"
#include "lesionseg/tensor.hpp"
#include "lesionseg/threads.hpp"

namespace lesionseg {

enum class LayerKind { conv3d, batchnorm, prelu, maxpool, flatten, dense, dropout, softmax };

/// Retraining granularity of the network: the convolutional stack, the three
/// fully connected layers, and the classification head.
enum class Group { conv, fc1, fc2, fc3, out };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv3d: return "conv3d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::prelu: return "prelu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

inline const char* group_name(Group g) {
  switch (g) {
    case Group::conv: return "CONV";
    case Group::fc1: return "FC1";
    case Group::fc2: return "FC2";
    case Group::fc3: return "FC3";
    case Group::out: return "OUT";
  }
  return "?";
}

/// A named view of one stored parameter tensor. `optimizable` is false for
/// batch-norm running statistics, which are stored state rather than weights.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;  // null for non-optimizable state
  bool optimizable;
};

template <typename T>
class Layer {
 public:
  Layer(LayerKind kind, Group group) : kind_(kind), group_(group) {}
  virtual ~Layer() = default;

  LayerKind kind() const { return kind_; }
  Group group() const { return group_; }
  bool trainable() const { return trainable_; }
  void set_trainable(bool t) { trainable_ = t; }

  /// Batched forward; input/output carry a leading batch axis. `rng` is only
  /// consulted by stochastic layers in train mode.
  virtual Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng* rng) = 0;
  /// Consumes the cached activations of the latest train-mode forward; sets
  /// this layer's parameter gradients and returns the input gradient.
  virtual Tensor<T> backward(const Tensor<T>& upstream) = 0;
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {}
  virtual std::string spec_line() const { return kind_name(kind_); }
  virtual std::unique_ptr<Layer<T>> clone() const = 0;

 protected:
  LayerKind kind_;
  Group group_;
  bool trainable_ = true;
};

template <typename T>
class Conv3dLayer final : public Layer<T> {
 public:
  Conv3dLayer(std::size_t in_channels, std::size_t out_channels, Group group)
      : Layer<T>(LayerKind::conv3d, group),
        kernel_{Tensor<T>({out_channels, in_channels, 3, 3, 3}), Tensor<T>({out_channels})},
        grad_weights_(kernel_.weights.shape()),
        grad_bias_(kernel_.bias.shape()) {}

  ops::ConvKernel<T>& kernel() { return kernel_; }
  const ops::ConvKernel<T>& kernel() const { return kernel_; }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng*) override {
    if (x.rank() != 5 || x.extent(1) != kernel_.in_channels()) {
      throw ShapeError("conv3d layer expects [n," + std::to_string(kernel_.in_channels()) +
                       ",d,h,w], got " + shape_str(x.shape()));
    }
    const std::size_t n = x.extent(0), cin = x.extent(1), d = x.extent(2),
                      h = x.extent(3), w = x.extent(4);
    const std::size_t cout = kernel_.out_channels();
    Tensor<T> out({n, cout, d, h, w});
    const std::size_t in_stride = cin * d * h * w;
    const std::size_t out_stride = cout * d * h * w;
    const std::size_t col_elems = cin * 27 * d * h * w;
    const T* in = x.data();
    T* o = out.data();
    parallel_for(n, [&](std::size_t s) {
      thread_local std::vector<T> col;
      if (col.size() < col_elems) col.resize(col_elems);
      ops::detail::conv3d_forward_into(in + s * in_stride, cin, cout, d, h, w, kernel_,
                                       o + s * out_stride, col.data());
    });
    if (mode == RunMode::train) cached_input_ = x;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& upstream) override {
    const Tensor<T>& x = cached_input_;
    const std::size_t n = x.extent(0), cin = x.extent(1), d = x.extent(2),
                      h = x.extent(3), w = x.extent(4);
    const std::size_t cout = kernel_.out_channels();
    require_same_shape(upstream.shape(), Shape{n, cout, d, h, w}, "conv3d backward");
    Tensor<T> grad_in(x.shape());
    const std::size_t in_stride = cin * d * h * w;
    const std::size_t out_stride = cout * d * h * w;
    const std::size_t col_elems = cin * 27 * d * h * w;
    // per-sample weight gradients, reduced in sample order so that results do
    // not depend on the thread count
    std::vector<std::vector<T>> gw(n), gb(n);
    parallel_for(n, [&](std::size_t s) {
      thread_local std::vector<T> col;
      if (col.size() < col_elems) col.resize(col_elems);
      gw[s].resize(kernel_.weights.size());
      gb[s].resize(cout);
      ops::detail::conv3d_backward_into(x.data() + s * in_stride,
                                        upstream.data() + s * out_stride, cin, cout, d,
                                        h, w, kernel_, grad_in.data() + s * in_stride,
                                        gw[s].data(), gb[s].data(), col.data());
    });
    grad_weights_.fill(T(0));
    grad_bias_.fill(T(0));
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < grad_weights_.size(); ++i) grad_weights_[i] += gw[s][i];
      for (std::size_t i = 0; i < cout; ++i) grad_bias_[i] += gb[s][i];
    }
    return grad_in;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + ".weights", &kernel_.weights, &grad_weights_, true});
    out.push_back({prefix + ".bias", &kernel_.bias, &grad_bias_, true});
  }

  std::string spec_line() const override {
    std::ostringstream os;
    os << "conv3d in=" << kernel_.in_channels() << " out=" << kernel_.out_channels();
    return os.str();
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Conv3dLayer<T>>(*this);
  }

 private:
  ops::ConvKernel<T> kernel_;
  Tensor<T> grad_weights_, grad_bias_;
  Tensor<T> cached_input_;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
 public:
  BatchNormLayer(std::size_t channels, Group group, T momentum = T(0.99),
                 T epsilon = T(1e-3))
      : Layer<T>(LayerKind::batchnorm, group),
        gamma_(Tensor<T>::filled({channels}, T(1))),
        beta_({channels}),
        running_mean_({channels}),
        running_var_(Tensor<T>::filled({channels}, T(1))),
        grad_gamma_({channels}),
        grad_beta_({channels}),
        momentum_(momentum),
        epsilon_(epsilon) {}

  /// Frozen statistics force inference behavior even inside the train loop.
  void set_stats_frozen(bool frozen) { stats_frozen_ = frozen; }
  bool stats_frozen() const { return stats_frozen_; }
  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  T momentum() const { return momentum_; }
  T epsilon() const { return epsilon_; }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng*) override {
    const RunMode effective = stats_frozen_ ? RunMode::infer : mode;
    if (effective == RunMode::infer) {
      return ops::batchnorm_forward<T>(x, gamma_, beta_, running_mean_, running_var_,
                                       RunMode::infer, momentum_, epsilon_);
    }
    return ops::batchnorm_forward<T>(x, gamma_, beta_, running_mean_, running_var_,
                                     RunMode::train, momentum_, epsilon_, &cache_);
  }

  Tensor<T> backward(const Tensor<T>& upstream) override {
    auto g = ops::batchnorm_backward(cache_, gamma_, upstream);
    grad_gamma_ = std::move(g.gamma);
    grad_beta_ = std::move(g.beta);
    return std::move(g.input);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + ".gamma", &gamma_, &grad_gamma_, true});
    out.push_back({prefix + ".beta", &beta_, &grad_beta_, true});
    out.push_back({prefix + ".running_mean", &running_mean_, nullptr, false});
    out.push_back({prefix + ".running_var", &running_var_, nullptr, false});
  }

  std::string spec_line() const override {
    return "batchnorm channels=" + std::to_string(gamma_.extent(0));
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<BatchNormLayer<T>>(*this);
  }

 private:
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> grad_gamma_, grad_beta_;
  ops::BatchNormCache<T> cache_;
  T momentum_, epsilon_;
  bool stats_frozen_ = false;
};

template <typename T>
class PreluLayer final : public Layer<T> {
 public:
  /// `feature_shape` is one sample's activation shape; one learnable slope
  /// per element of that block, shared across the batch.
  PreluLayer(Shape feature_shape, Group group, T initial_slope = T(0.25))
      : Layer<T>(LayerKind::prelu, group),
        slopes_(Tensor<T>::filled(feature_shape, initial_slope)),
        grad_slopes_(feature_shape) {}

  Tensor<T>& slopes() { return slopes_; }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng*) override {
    if (mode == RunMode::train) cached_input_ = x;
    return ops::prelu(x, slopes_);
  }

  Tensor<T> backward(const Tensor<T>& upstream) override {
    auto g = ops::prelu_backward(cached_input_, slopes_, upstream);
    grad_slopes_ = std::move(g.slopes);
    return std::move(g.input);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + ".slopes", &slopes_, &grad_slopes_, true});
  }

  std::string spec_line() const override {
    std::ostringstream os;
    os << "prelu shape=";
    const Shape& s = slopes_.shape();
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    return os.str();
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<PreluLayer<T>>(*this);
  }

 private:
  Tensor<T> slopes_, grad_slopes_;
  Tensor<T> cached_input_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
 public:
  explicit MaxPoolLayer(Group group) : Layer<T>(LayerKind::maxpool, group) {}

  Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng*) override {
    if (x.rank() != 5) {
      throw ShapeError("maxpool layer expects [n,c,d,h,w], got " + shape_str(x.shape()));
    }
    const std::size_t n = x.extent(0), c = x.extent(1), d = x.extent(2),
                      h = x.extent(3), w = x.extent(4);
    if (d < 2 || h < 2 || w < 2) {
      throw ShapeError("maxpool requires spatial extents >= 2, got " +
                       shape_str(x.shape()));
    }
    const std::size_t od = d / 2, oh = h / 2, ow = w / 2;
    Tensor<T> out({n, c, od, oh, ow});
    const std::size_t in_stride = c * d * h * w;
    const std::size_t out_stride = c * od * oh * ow;
    if (mode == RunMode::train) {
      argmax_.assign(n * out_stride, 0);
      input_shape_ = x.shape();
    }
    const bool cache = mode == RunMode::train;
    const T* in = x.data();
    T* o = out.data();
    parallel_for(n, [&](std::size_t s) {
      Tensor<T> sample({c, d, h, w},
                       std::vector<T>(in + s * in_stride, in + (s + 1) * in_stride));
      auto r = ops::maxpool3d(sample);
      std::copy(r.output.data(), r.output.data() + out_stride, o + s * out_stride);
      if (cache) {
        for (std::size_t i = 0; i < out_stride; ++i)
          argmax_[s * out_stride + i] = s * in_stride + r.argmax[i];
      }
    });
    return out;
  }

  Tensor<T> backward(const Tensor<T>& upstream) override {
    Tensor<T> grad(input_shape_);
    for (std::size_t i = 0; i < argmax_.size(); ++i) grad[argmax_[i]] += upstream[i];
    return grad;
  }

  std::string spec_line() const override { return "maxpool window=2 stride=2"; }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<MaxPoolLayer<T>>(*this);
  }

 private:
  std::vector<std::size_t> argmax_;
  Shape input_shape_;
};

template <typename T>
class FlattenLayer final : public Layer<T> {
 public:
  explicit FlattenLayer(Group group) : Layer<T>(LayerKind::flatten, group) {}

  Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng*) override {
    if (mode == RunMode::train) input_shape_ = x.shape();
    std::size_t f = 1;
    for (std::size_t a = 1; a < x.rank(); ++a) f *= x.extent(a);
    return x.reshaped({x.extent(0), f});
  }

  Tensor<T> backward(const Tensor<T>& upstream) override {
    return upstream.reshaped(input_shape_);
  }

  std::string spec_line() const override { return "flatten"; }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<FlattenLayer<T>>(*this);
  }

 private:
  Shape input_shape_;
};

template <typename T>
class DenseLayer final : public Layer<T> {
 public:
  DenseLayer(std::size_t in_dim, std::size_t out_dim, Group group)
      : Layer<T>(LayerKind::dense, group),
        weights_({out_dim, in_dim}),
        bias_({out_dim}),
        grad_weights_({out_dim, in_dim}),
        grad_bias_({out_dim}) {}

  Tensor<T>& weights() { return weights_; }
  Tensor<T>& bias() { return bias_; }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng*) override {
    if (mode == RunMode::train) cached_input_ = x;
    return ops::dense_forward(x, weights_, bias_);
  }

  Tensor<T> backward(const Tensor<T>& upstream) override {
    auto g = ops::dense_backward(cached_input_, weights_, upstream);
    grad_weights_ = std::move(g.weights);
    grad_bias_ = std::move(g.bias);
    return std::move(g.input);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + ".weights", &weights_, &grad_weights_, true});
    out.push_back({prefix + ".bias", &bias_, &grad_bias_, true});
  }

  std::string spec_line() const override {
    std::ostringstream os;
    os << "dense in=" << weights_.extent(1) << " out=" << weights_.extent(0);
    return os.str();
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<DenseLayer<T>>(*this);
  }

 private:
  Tensor<T> weights_, bias_;
  Tensor<T> grad_weights_, grad_bias_;
  Tensor<T> cached_input_;
};

template <typename T>
class DropoutLayer final : public Layer<T> {
 public:
  DropoutLayer(double p, Group group) : Layer<T>(LayerKind::dropout, group), p_(p) {
    if (!(p >= 0.0 && p < 1.0)) {
      throw std::invalid_argument("dropout probability must lie in [0,1)");
    }
  }

  double p() const { return p_; }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode, Rng* rng) override {
    if (mode == RunMode::infer) return x;
    if (rng == nullptr) throw std::logic_error("dropout requires an rng in train mode");
    auto r = ops::dropout(x, p_, mode, *rng);
    mask_ = std::move(r.mask);
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& upstream) override {
    return ops::dropout_backward(mask_, upstream);
  }

  std::string spec_line() const override {
    std::ostringstream os;
    os << "dropout p=" << p_;
    return os.str();
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<DropoutLayer<T>>(*this);
  }

 private:
  double p_;
  std::vector<T> mask_;
};

template <typename T>
class SoftmaxLayer final : public Layer<T> {
 public:
  explicit SoftmaxLayer(Group group) : Layer<T>(LayerKind::softmax, group) {}

  Tensor<T> forward(const Tensor<T>& x, RunMode, Rng*) override {
    return ops::softmax(x);
  }

  Tensor<T> backward(const Tensor<T>&) override {
    // training fuses softmax with the cross-entropy loss; this path is unused
    throw std::logic_error("softmax backward is fused into the loss");
  }

  std::string spec_line() const override { return "softmax"; }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<SoftmaxLayer<T>>(*this);
  }
};

}  // namespace lesionseg
