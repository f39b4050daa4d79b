#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "lesionseg/model.hpp"
#include "lesionseg/patches.hpp"

namespace lesionseg {

struct AdadeltaConfig {
  double rho = 0.95;
  double epsilon = 1e-6;
};

struct TrainConfig {
  int max_epochs = 400;
  int patience = 50;
  int batch_size = 128;
  double validation_fraction = 0.25;
  int negative_resample_period = 10;
  AdadeltaConfig adadelta;
  std::uint64_t seed = 0;
  /// When > 0, training also stops once the epoch training loss falls below
  /// this goal (used by convergence smoke checks).
  double train_loss_goal = 0.0;

  void validate() const {
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (patience < 0 || patience > max_epochs) {
      throw std::invalid_argument("patience must lie in [0, max_epochs]");
    }
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw std::invalid_argument("validation_fraction must lie in (0,1)");
    }
  }
};

/// One ADADELTA update:
///   E[g2] <- rho E[g2] + (1-rho) g2
///   dx    = -sqrt(E[dx2]+eps)/sqrt(E[g2]+eps) * g
///   E[dx2]<- rho E[dx2] + (1-rho) dx2
///   param += dx
template <typename T>
void adadelta_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& acc_grad_sq,
                   Tensor<T>& acc_update_sq, T rho, T epsilon,
                   const std::string& name = "param") {
  require_same_shape(param.shape(), grad.shape(), "adadelta_step");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    if (!std::isfinite(static_cast<double>(g))) {
      throw std::runtime_error("adadelta: non-finite gradient in " + name +
                               " at component " + std::to_string(i));
    }
    acc_grad_sq[i] = rho * acc_grad_sq[i] + (T(1) - rho) * g * g;
    const T dx = -std::sqrt(acc_update_sq[i] + epsilon) /
                 std::sqrt(acc_grad_sq[i] + epsilon) * g;
    acc_update_sq[i] = rho * acc_update_sq[i] + (T(1) - rho) * dx * dx;
    param[i] += dx;
  }
}

/// ADADELTA state over the optimizable parameters of a model's trainable
/// layers. Frozen layers never receive updates.
template <typename T>
class AdadeltaOptimizer {
 public:
  AdadeltaOptimizer(ModelT<T>& model, AdadeltaConfig cfg) : cfg_(cfg) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      if (!model.layers[i]->trainable()) continue;
      std::vector<ParamRef<T>> refs;
      model.layers[i]->collect_params("layer" + std::to_string(i), refs);
      for (auto& r : refs) {
        if (!r.optimizable) continue;
        params_.push_back(r);
        acc_grad_sq_.emplace_back(r.value->shape());
        acc_update_sq_.emplace_back(r.value->shape());
      }
    }
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      adadelta_step(*params_[i].value, *params_[i].grad, acc_grad_sq_[i],
                    acc_update_sq_[i], static_cast<T>(cfg_.rho),
                    static_cast<T>(cfg_.epsilon), params_[i].name);
    }
  }

  std::size_t tracked_params() const { return params_.size(); }

 private:
  AdadeltaConfig cfg_;
  std::vector<ParamRef<T>> params_;
  std::vector<Tensor<T>> acc_grad_sq_, acc_update_sq_;
};

struct EpochRecord {
  double train_loss;
  double val_loss;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Called at the start of each epoch; returns true when it changed the
/// dataset (e.g. redrew negatives) so cached features can be refreshed.
using ResampleHook = std::function<bool(int epoch)>;

namespace detail {

template <typename T>
std::vector<std::vector<T>> snapshot_params(std::vector<ParamRef<T>>& refs) {
  std::vector<std::vector<T>> snap;
  snap.reserve(refs.size());
  for (auto& r : refs) snap.push_back(r.value->storage());
  return snap;
}

template <typename T>
void restore_params(std::vector<ParamRef<T>>& refs,
                    const std::vector<std::vector<T>>& snap) {
  for (std::size_t i = 0; i < refs.size(); ++i) refs[i].value->storage() = snap[i];
}

template <typename T>
Tensor<T> gather_batch(const Tensor<float>& patches,
                       const std::vector<std::size_t>& order, std::size_t begin,
                       std::size_t n) {
  const std::size_t elems = patches.size() / patches.extent(0);
  Tensor<T> batch({n, patches.extent(1), patches.extent(2), patches.extent(3),
                   patches.extent(4)});
  for (std::size_t i = 0; i < n; ++i) {
    const float* src = patches.data() + order[begin + i] * elems;
    T* dst = batch.data() + i * elems;
    for (std::size_t j = 0; j < elems; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return batch;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& rows, const std::vector<std::size_t>& order,
                      std::size_t begin, std::size_t n) {
  const std::size_t f = rows.extent(1);
  Tensor<T> out({n, f});
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = rows.data() + order[begin + i] * f;
    std::copy(src, src + f, out.data() + i * f);
  }
  return out;
}

template <typename T>
Tensor<T> one_hot_labels(const std::vector<int>& labels,
                         const std::vector<std::size_t>& order, std::size_t begin,
                         std::size_t n) {
  Tensor<T> y({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    y(i, static_cast<std::size_t>(labels[order[begin + i]] != 0)) = T(1);
  }
  return y;
}

}  // namespace detail

/// Trains with shuffled mini-batches, periodic negative resampling (via the
/// hook), validation-loss early stopping, and best-epoch weight restoration.
/// When the whole convolutional prefix is frozen with static batch-norm
/// statistics, patch features at the flatten boundary are computed once and
/// reused; results are bitwise identical to the unoptimized path.
template <typename T>
TrainHistory train(ModelT<T>& model, PatchDataset& ds, const TrainConfig& cfg,
                   const ResampleHook& resample = {}) {
  cfg.validate();
  if (ds.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (!ds.has_split) split_validation(ds, cfg.validation_fraction, cfg.seed);

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    (ds.is_validation[i] ? val_idx : train_idx).push_back(i);
  }
  if (train_idx.empty() || val_idx.empty()) {
    throw std::invalid_argument("train: empty train or validation split");
  }
  bool has0 = false, has1 = false;
  for (std::size_t i : train_idx) (ds.labels[i] ? has1 : has0) = true;
  if (!has0 || !has1) {
    throw std::invalid_argument("train: training split contains a single class");
  }

  // frozen-prefix fast path: conv features are static when every layer below
  // the flatten is frozen and batch-norm statistics are pinned
  const std::size_t flat_ix = model.flatten_index();
  bool prefix_static = true;
  for (std::size_t i = 0; i <= flat_ix; ++i) {
    if (model.layers[i]->trainable()) prefix_static = false;
    if (auto* bn = dynamic_cast<BatchNormLayer<T>*>(model.layers[i].get())) {
      if (!bn->stats_frozen()) prefix_static = false;
    }
  }

  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t stop_layer = model.first_trainable_layer();
  AdadeltaOptimizer<T> optimizer(model, cfg.adadelta);
  Rng shuffle_rng = make_rng(derive_seed(cfg.seed, 11));
  Rng dropout_rng = make_rng(derive_seed(cfg.seed, 12));

  Tensor<T> features;  // [n, flat] when prefix_static
  auto compute_features = [&]() {
    const std::size_t n = ds.size();
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    Tensor<T> out;
    for (std::size_t b = 0; b < n; b += batch) {
      const std::size_t m = std::min(batch, n - b);
      Tensor<T> x = detail::gather_batch<T>(ds.patches, all, b, m);
      for (std::size_t li = 0; li <= flat_ix; ++li) {
        x = model.layers[li]->forward(x, RunMode::infer, nullptr);
      }
      if (out.empty()) out = Tensor<T>({n, x.extent(1)});
      std::copy(x.data(), x.data() + x.size(), out.data() + b * x.extent(1));
    }
    return out;
  };
  if (prefix_static) features = compute_features();

  auto forward_logits_batch = [&](const std::vector<std::size_t>& order,
                                  std::size_t begin, std::size_t n, RunMode mode,
                                  Rng* rng) {
    if (prefix_static) {
      Tensor<T> x = detail::gather_rows(features, order, begin, n);
      for (std::size_t li = flat_ix + 1; li < model.layers.size(); ++li) {
        if (model.layers[li]->kind() == LayerKind::softmax) break;
        x = model.layers[li]->forward(x, mode, rng);
      }
      return x;
    }
    Tensor<T> x = detail::gather_batch<T>(ds.patches, order, begin, n);
    return model.forward_logits(x, mode, rng);
  };

  auto params = model.params();
  TrainHistory hist;
  std::vector<std::vector<T>> best = detail::snapshot_params(params);
  int no_improve = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (resample && resample(epoch)) {
      if (prefix_static) features = compute_features();
    }
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle_rng);

    double train_loss = 0;
    for (std::size_t b = 0; b < train_idx.size(); b += batch) {
      const std::size_t n = std::min(batch, train_idx.size() - b);
      auto logits = forward_logits_batch(train_idx, b, n, RunMode::train, &dropout_rng);
      auto labels = detail::one_hot_labels<T>(ds.labels, train_idx, b, n);
      auto lr = ops::softmax_crossentropy(logits, labels);
      train_loss += static_cast<double>(lr.loss) * static_cast<double>(n);
      model.backward_from_logits(lr.grad, stop_layer);
      optimizer.step();
    }
    train_loss /= static_cast<double>(train_idx.size());

    double val_loss = 0;
    for (std::size_t b = 0; b < val_idx.size(); b += batch) {
      const std::size_t n = std::min(batch, val_idx.size() - b);
      auto logits = forward_logits_batch(val_idx, b, n, RunMode::infer, nullptr);
      auto labels = detail::one_hot_labels<T>(ds.labels, val_idx, b, n);
      val_loss += static_cast<double>(ops::softmax_crossentropy(logits, labels).loss) *
                  static_cast<double>(n);
    }
    val_loss /= static_cast<double>(val_idx.size());

    hist.epochs.push_back({train_loss, val_loss});
    if (val_loss < hist.best_val_loss) {
      hist.best_val_loss = val_loss;
      hist.best_epoch = epoch;
      best = detail::snapshot_params(params);
      no_improve = 0;
    } else {
      ++no_improve;
    }
    if (no_improve >= cfg.patience) break;
    if (cfg.train_loss_goal > 0.0 && train_loss < cfg.train_loss_goal) break;
  }

  detail::restore_params(params, best);
  return hist;
}

}  // namespace lesionseg
