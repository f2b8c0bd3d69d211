#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "dimlab/data.hpp"
#include "dimlab/errors.hpp"
#include "dimlab/losses.hpp"
#include "dimlab/model.hpp"
#include "dimlab/optim.hpp"
#include "dimlab/rng.hpp"

namespace dimlab {

enum class Method { simclr, vicreg, supervised };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::simclr: return "simclr";
    case Method::vicreg: return "vicreg";
    case Method::supervised: return "supervised";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "simclr") return Method::simclr;
  if (s == "vicreg") return Method::vicreg;
  if (s == "supervised") return Method::supervised;
  throw ConfigError("unknown method '" + s + "' (expected simclr, vicreg or supervised)");
}

inline double default_base_lr(Method m) { return m == Method::vicreg ? 0.02 : 0.05; }

struct TrainConfig {
  Method method = Method::simclr;
  std::size_t epochs = 30;
  double base_lr = 0.05;
  double weight_decay = 1e-6;
  double momentum = 0.9;
  bool cosine_schedule = true;
  std::size_t warmup_epochs = 2;
  SimclrParams simclr;
  VicregParams vicreg;
  SamplerConfig sampler{SamplerConfig::Mode::uniform, 2, 128, 0};
  AugConfig aug;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(base_lr >= 0.0)) throw ConfigError("train: base_lr must be >= 0");
    if (warmup_epochs >= epochs) throw ConfigError("train: warmup_epochs must be < epochs");
    if (!(simclr.temperature > 0.0)) throw ConfigError("train: temperature must be > 0");
    if (sampler.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    aug.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;  // learning rate at the first step of the epoch
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::uint64_t final_checksum = 0;
  std::size_t steps = 0;
  std::size_t max_distinct_labels_per_batch = 0;
};

/// Linear warmup to base_lr over warmup_steps, then a single cosine cycle:
///   lr(t) = base_lr * 0.5 * (1 + cos(pi * (t - W) / (T - W))).
/// Without the cosine schedule the rate is constant after warmup.
inline double learning_rate_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                               double base_lr, bool cosine) {
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (!cosine) return base_lr;
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double t = static_cast<double>(step - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t / span));
}

/// Called with (epoch, step_in_epoch, batch indices) before each step.
using BatchObserver =
    std::function<void(std::size_t, std::size_t, std::span<const std::size_t>)>;

namespace detail {

template <typename Real>
void fill_views(const Dataset& ds, std::span<const std::size_t> idx, const AugConfig& aug,
                Rng& rng, std::size_t count, BasicTensor<Real>& a, BasicTensor<Real>& b) {
  const std::size_t d = ds.input_dim;
  std::vector<Real> va(idx.size() * d), vb(count == 2 ? idx.size() * d : 0);
  std::vector<double> tmp(d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto x = ds.row(idx[r]);
    make_view_into(x, aug, rng, tmp);
    for (std::size_t j = 0; j < d; ++j) va[r * d + j] = static_cast<Real>(tmp[j]);
    if (count == 2) {
      make_view_into(x, aug, rng, tmp);
      for (std::size_t j = 0; j < d; ++j) vb[r * d + j] = static_cast<Real>(tmp[j]);
    }
  }
  a = BasicTensor<Real>({idx.size(), d}, std::move(va));
  if (count == 2) b = BasicTensor<Real>({idx.size(), d}, std::move(vb));
}

template <typename Real>
BasicTensor<Real> embed(Network<Real>& net, const BasicTensor<Real>& x) {
  auto h = backbone_forward(net, x, Mode::train);
  if (net.config.projector.kind == ProjectorSpec::Kind::none) return h;
  return projector_forward(net, h, Mode::train);
}

}  // namespace detail

/// Pretrains `net` in place and returns the per-epoch history.
///
/// Each epoch runs batches_per_epoch() steps. SSL steps draw two augmented
/// views per sample and apply the loss to g(f(view)) (or f(view) without a
/// projector); supervised steps use one view and cross-entropy on the head.
/// Throws NumericError on a non-finite loss or gradient.
template <typename Real>
TrainHistory pretrain(Network<Real>& net, const Dataset& ds, const TrainConfig& cfg,
                      const BatchObserver& observer = {}) {
  cfg.validate();
  if (ds.input_dim != net.config.input_dim) {
    throw DimensionError("pretrain: dataset input_dim " + std::to_string(ds.input_dim) +
                         " differs from network input_dim " +
                         std::to_string(net.config.input_dim));
  }
  if (cfg.method == Method::supervised && !net.head) {
    throw ConfigError("pretrain: supervised method needs a classifier head");
  }
  if (cfg.method == Method::supervised && net.head->weight.shape()[1] != ds.n_classes) {
    throw ConfigError("pretrain: head width differs from dataset n_classes");
  }

  const Rng root = Rng(cfg.seed).stream("train");
  BatchSampler sampler(ds, cfg.sampler, Rng(cfg.sampler.seed).stream("sampler"));
  Rng aug_rng = root.stream("aug");

  auto params = net.trainable_parameters();
  if (cfg.method != Method::supervised && net.head) {
    std::erase_if(params, [](const auto& p) { return p.name.rfind("head.", 0) == 0; });
  }
  std::vector<std::vector<Real>> buffers;

  const std::size_t steps_per_epoch = sampler.batches_per_epoch();
  const std::size_t total = cfg.epochs * steps_per_epoch;
  const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;

  TrainHistory history;
  std::size_t global = 0;
  BasicTensor<Real> va, vb;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = learning_rate_at(global, total, warmup, cfg.base_lr, cfg.cosine_schedule);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global) {
      const auto idx = sampler.next_batch();
      history.max_distinct_labels_per_batch =
          std::max(history.max_distinct_labels_per_batch, distinct_labels(ds, idx));
      if (observer) observer(epoch, s, idx);

      BasicTensor<Real> loss;
      if (cfg.method == Method::supervised) {
        detail::fill_views(ds, idx, cfg.aug, aug_rng, 1, va, vb);
        std::vector<std::int32_t> labels;
        labels.reserve(idx.size());
        for (auto i : idx) labels.push_back(ds.labels[i]);
        loss = cross_entropy(head_forward(net, backbone_forward(net, va, Mode::train)),
                             std::span<const std::int32_t>(labels));
      } else {
        detail::fill_views(ds, idx, cfg.aug, aug_rng, 2, va, vb);
        auto za = detail::embed(net, va);
        auto zb = detail::embed(net, vb);
        loss = cfg.method == Method::simclr ? ntxent_loss(za, zb, cfg.simclr)
                                            : vicreg_loss(za, zb, cfg.vicreg);
      }
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(s));
      }
      for (auto& p : params) p.tensor.clear_grad();
      backward(loss);
      for (const auto& p : params) {
        if (!p.tensor.has_grad()) {
          // Parameters outside the loss graph (e.g. unused head) get zero grads.
          p.tensor.impl()->grad.assign(p.tensor.numel(), Real{0});
        }
        for (Real g : p.tensor.grad()) {
          if (!std::isfinite(static_cast<double>(g))) {
            throw NumericError("pretrain: non-finite gradient in '" + p.name + "' at epoch " +
                               std::to_string(epoch) + ", step " + std::to_string(s));
          }
        }
      }
      const double lr = learning_rate_at(global, total, warmup, cfg.base_lr, cfg.cosine_schedule);
      sgd_momentum_step(params, buffers, lr, cfg.momentum, cfg.weight_decay);
      loss_sum += lv;
    }
    rec.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
  }
  history.steps = global;
  history.final_checksum = parameter_checksum(net);
  return history;
}

}  // namespace dimlab
