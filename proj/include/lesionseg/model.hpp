#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lesionseg/layers.hpp"
#include "lesionseg/rng.hpp"

namespace lesionseg {

constexpr std::size_t kPatchEdge = 11;
constexpr std::size_t kInputChannels = 2;  // FLAIR, T1-w

/// Which fully connected groups an adaptation run re-trains. The
/// convolutional stack is frozen in every mode except `none` (full training).
struct FreezeConfig {
  enum class Mode { none, fc1_fc2_fc3, fc2_fc3, fc3 };
  Mode mode = Mode::none;
  /// The classification head is re-trained by default; its 130 parameters are
  /// excluded from the reported per-mode counts either way.
  bool retrain_head = true;
  /// Frozen batch-norm layers keep their running statistics and normalize
  /// with them (inference behavior) while frozen.
  bool freeze_bn_stats = true;
};

inline const char* freeze_mode_name(FreezeConfig::Mode m) {
  switch (m) {
    case FreezeConfig::Mode::none: return "none";
    case FreezeConfig::Mode::fc1_fc2_fc3: return "fc1_fc2_fc3";
    case FreezeConfig::Mode::fc2_fc3: return "fc2_fc3";
    case FreezeConfig::Mode::fc3: return "fc3";
  }
  return "?";
}

inline FreezeConfig::Mode freeze_mode_from_name(const std::string& s) {
  if (s == "none") return FreezeConfig::Mode::none;
  if (s == "fc1_fc2_fc3") return FreezeConfig::Mode::fc1_fc2_fc3;
  if (s == "fc2_fc3") return FreezeConfig::Mode::fc2_fc3;
  if (s == "fc3") return FreezeConfig::Mode::fc3;
  throw std::invalid_argument("unknown freeze mode: " + s);
}

/// The 11-layer patch classifier: four 3x3x3 convolutions (32,32,64,64
/// filters) with batch norm and PReLU, two 2x pools, and dense layers
/// 512->256->128->64->2 with PReLU and dropout, softmax on top.
template <typename T = float>
class ModelT {
 public:
  std::vector<std::unique_ptr<Layer<T>>> layers;
  std::uint64_t seed = 0;

  ModelT() = default;
  ModelT(ModelT&&) noexcept = default;
  ModelT& operator=(ModelT&&) noexcept = default;
  ModelT(const ModelT& other) : seed(other.seed) {
    layers.reserve(other.layers.size());
    for (const auto& l : other.layers) layers.push_back(l->clone());
  }
  ModelT& operator=(const ModelT& other) {
    if (this != &other) *this = ModelT(other);
    return *this;
  }

  /// Forward pass up to (excluding) the softmax layer. Inference-mode calls
  /// leave the layers untouched and are safe from concurrent readers;
  /// train-mode calls cache activations inside the layers.
  Tensor<T> forward_logits(const Tensor<T>& batch, RunMode mode, Rng* rng) const {
    Tensor<T> x = batch;
    for (const auto& l : layers) {
      if (l->kind() == LayerKind::softmax) break;
      x = const_cast<Layer<T>&>(*l).forward(x, mode, rng);
    }
    return x;
  }

  /// Backpropagates a logits gradient down to `stop_layer` (inclusive),
  /// setting parameter gradients along the way.
  void backward_from_logits(const Tensor<T>& grad_logits, std::size_t stop_layer = 0) {
    Tensor<T> g = grad_logits;
    for (std::size_t i = layers.size(); i-- > stop_layer;) {
      if (layers[i]->kind() == LayerKind::softmax) continue;
      g = layers[i]->backward(g);
    }
  }

  /// Index of the deepest trainable layer; backward passes may stop there.
  std::size_t first_trainable_layer() const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i]->trainable()) return i;
    }
    return layers.size();
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      std::string prefix = "layer" + std::to_string(i);
      layers[i]->collect_params(prefix, out);
    }
    return out;
  }

  /// Index of the flatten layer: everything before it is the convolutional
  /// feature extractor.
  std::size_t flatten_index() const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i]->kind() == LayerKind::flatten) return i;
    }
    throw std::logic_error("model has no flatten layer");
  }
};

using Model = ModelT<float>;

namespace detail {

template <typename T>
void he_normal_fill(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
}

}  // namespace detail

/// Builds the canonical architecture with He-style weight initialization,
/// PReLU slopes 0.25, batch-norm gamma=1/beta=0 and running stats (0,1).
template <typename T = float>
ModelT<T> build_model(std::uint64_t seed, double dropout_p = 0.5) {
  ModelT<T> m;
  m.seed = seed;
  Rng rng = make_rng(seed);
  const std::size_t e = kPatchEdge;      // 11
  const std::size_t p1 = e / 2;          // 5 after first pool
  const std::size_t p2 = p1 / 2;         // 2 after second pool

  auto add_conv = [&](std::size_t cin, std::size_t cout) {
    auto l = std::make_unique<Conv3dLayer<T>>(cin, cout, Group::conv);
    detail::he_normal_fill(l->kernel().weights, cin * 27, rng);
    m.layers.push_back(std::move(l));
  };
  auto add_bn = [&](std::size_t c) {
    m.layers.push_back(std::make_unique<BatchNormLayer<T>>(c, Group::conv));
  };
  auto add_conv_prelu = [&](std::size_t c, std::size_t edge) {
    m.layers.push_back(
        std::make_unique<PreluLayer<T>>(Shape{c, edge, edge, edge}, Group::conv));
  };
  auto add_dense = [&](std::size_t in, std::size_t out, Group g) {
    auto l = std::make_unique<DenseLayer<T>>(in, out, g);
    detail::he_normal_fill(l->weights(), in, rng);
    m.layers.push_back(std::move(l));
  };

  add_conv(kInputChannels, 32);
  add_bn(32);
  add_conv_prelu(32, e);
  add_conv(32, 32);
  add_bn(32);
  add_conv_prelu(32, e);
  m.layers.push_back(std::make_unique<MaxPoolLayer<T>>(Group::conv));
  add_conv(32, 64);
  add_bn(64);
  add_conv_prelu(64, p1);
  add_conv(64, 64);
  add_bn(64);
  add_conv_prelu(64, p1);
  m.layers.push_back(std::make_unique<MaxPoolLayer<T>>(Group::conv));
  m.layers.push_back(std::make_unique<FlattenLayer<T>>(Group::conv));

  const std::size_t flat = 64 * p2 * p2 * p2;  // 512
  add_dense(flat, 256, Group::fc1);
  m.layers.push_back(std::make_unique<PreluLayer<T>>(Shape{256}, Group::fc1));
  m.layers.push_back(std::make_unique<DropoutLayer<T>>(dropout_p, Group::fc1));
  add_dense(256, 128, Group::fc2);
  m.layers.push_back(std::make_unique<PreluLayer<T>>(Shape{128}, Group::fc2));
  m.layers.push_back(std::make_unique<DropoutLayer<T>>(dropout_p, Group::fc2));
  add_dense(128, 64, Group::fc3);
  m.layers.push_back(std::make_unique<PreluLayer<T>>(Shape{64}, Group::fc3));
  m.layers.push_back(std::make_unique<DropoutLayer<T>>(dropout_p, Group::fc3));
  add_dense(64, 2, Group::out);
  m.layers.push_back(std::make_unique<SoftmaxLayer<T>>(Group::out));
  return m;
}

/// Applies trainability flags. In every adaptation mode the convolutional
/// stack is frozen and its batch-norm statistics stop updating (switchable
/// via FreezeConfig::freeze_bn_stats).
template <typename T>
void set_trainable(ModelT<T>& model, const FreezeConfig& freeze) {
  const bool adapting = freeze.mode != FreezeConfig::Mode::none;
  auto group_trainable = [&](Group g) {
    if (!adapting) return true;
    switch (g) {
      case Group::conv: return false;
      case Group::fc1: return freeze.mode == FreezeConfig::Mode::fc1_fc2_fc3;
      case Group::fc2:
        return freeze.mode == FreezeConfig::Mode::fc1_fc2_fc3 ||
               freeze.mode == FreezeConfig::Mode::fc2_fc3;
      case Group::fc3: return true;
      case Group::out: return freeze.retrain_head;
    }
    return true;
  };
  for (auto& l : model.layers) {
    const bool t = group_trainable(l->group());
    l->set_trainable(t);
    if (auto* bn = dynamic_cast<BatchNormLayer<T>*>(l.get())) {
      bn->set_stats_frozen(adapting && !t && freeze.freeze_bn_stats);
    }
  }
}

struct ParamCounts {
  std::size_t total;      // every stored parameter incl. batch-norm running stats
  std::size_t trainable;  // per the published convention, see count_params
};

/// Counts parameters. `total` includes batch-norm running statistics (four
/// per channel). The `trainable` figure follows the published table's
/// convention: for an adaptation mode it sums the dense weights/biases and
/// PReLU slopes of the re-trained FC groups only (the 130-parameter softmax
/// head is excluded); with no freeze it equals `total`.
template <typename T>
ParamCounts count_params(ModelT<T>& model, const FreezeConfig* freeze = nullptr) {
  ParamCounts c{0, 0};
  auto in_mode = [&](Group g) {
    if (freeze == nullptr || freeze->mode == FreezeConfig::Mode::none) return false;
    switch (g) {
      case Group::fc1: return freeze->mode == FreezeConfig::Mode::fc1_fc2_fc3;
      case Group::fc2:
        return freeze->mode == FreezeConfig::Mode::fc1_fc2_fc3 ||
               freeze->mode == FreezeConfig::Mode::fc2_fc3;
      case Group::fc3: return true;
      default: return false;
    }
  };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    std::vector<ParamRef<T>> refs;
    model.layers[i]->collect_params("p", refs);
    for (const auto& r : refs) {
      c.total += r.value->size();
      if (in_mode(model.layers[i]->group()) && r.optimizable) {
        c.trainable += r.value->size();
      }
    }
  }
  if (freeze == nullptr || freeze->mode == FreezeConfig::Mode::none) {
    c.trainable = c.total;
  }
  return c;
}

/// Lesion-class probability for a batch of [n,2,11,11,11] patches
/// (inference mode: dropout off, batch norm on running statistics).
template <typename T>
Tensor<T> predict(const ModelT<T>& model, const Tensor<T>& patches) {
  if (patches.rank() != 5 || patches.extent(1) != kInputChannels ||
      patches.extent(2) != kPatchEdge || patches.extent(3) != kPatchEdge ||
      patches.extent(4) != kPatchEdge) {
    throw ShapeError("predict expects [n,2,11,11,11] patches, got " +
                     shape_str(patches.shape()));
  }
  auto logits = model.forward_logits(patches, RunMode::infer, nullptr);
  auto probs = ops::softmax(logits);
  Tensor<T> lesion({patches.extent(0)});
  for (std::size_t i = 0; i < lesion.size(); ++i) lesion[i] = probs(i, std::size_t{1});
  return lesion;
}

}  // namespace lesionseg
