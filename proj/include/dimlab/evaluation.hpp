#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "dimlab/data.hpp"
#include "dimlab/errors.hpp"
#include "dimlab/losses.hpp"
#include "dimlab/model.hpp"
#include "dimlab/optim.hpp"
#include "dimlab/rng.hpp"

namespace dimlab {

/// Frozen backbone outputs: N x D, row-major, all entries >= 0.
struct RepresentationMatrix {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> values;
  std::vector<std::int32_t> labels;
  std::string source;

  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return {values.data() + i * d, d};
  }
  [[nodiscard]] double at(std::size_t i, std::size_t j) const { return values[i * d + j]; }

  bool operator==(const RepresentationMatrix& o) const {
    return n == o.n && d == o.d && values == o.values && labels == o.labels;
  }
};

/// backbone_forward in eval mode over the whole dataset; the projector is never applied.
template <typename Real>
RepresentationMatrix extract_representations(const Network<Real>& net, const Dataset& ds,
                                              std::size_t chunk = 512) {
  if (ds.input_dim != net.config.input_dim) {
    throw DimensionError("extract_representations: dataset input_dim " +
                         std::to_string(ds.input_dim) + " differs from network input_dim " +
                         std::to_string(net.config.input_dim));
  }
  RepresentationMatrix rep;
  rep.n = ds.size();
  rep.d = net.config.repr_dim;
  rep.labels = ds.labels;
  rep.values.reserve(rep.n * rep.d);
  // Detached parameters keep the extraction graph-free.
  Network<Real> frozen = net.clone();
  for (auto& p : frozen.parameters()) p.tensor.set_requires_grad(false);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t stop = std::min(ds.size(), start + chunk);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto h = backbone_forward(frozen, gather_rows<Real>(ds, idx), Mode::eval);
    for (Real v : h.values()) rep.values.push_back(static_cast<double>(v));
  }
  return rep;
}

struct ProbeConfig {
  enum class Kind { linear, mlp };
  Kind kind = Kind::linear;
  /// Hidden widths of the MLP probe; empty means [D, D].
  std::vector<std::size_t> mlp_widths;
  double lr = 1e-4;
  double weight_decay = 0.04;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  /// Stop when the epoch training loss improved by a relative amount below
  /// early_stop_tol over the last early_stop_window epochs.
  std::size_t early_stop_window = 5;
  double early_stop_tol = 1e-5;
  /// Label-stratified fraction of the training rows used to fit the probe.
  double train_fraction = 1.0;
  std::uint64_t seed = 0;

  bool operator==(const ProbeConfig&) const = default;
};

inline const char* to_string(ProbeConfig::Kind k) {
  return k == ProbeConfig::Kind::linear ? "linear" : "mlp";
}

struct ProbeResult {
  ProbeConfig::Kind kind = ProbeConfig::Kind::linear;
  std::vector<std::size_t> widths;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  std::size_t epochs = 0;
  bool early_stopped = false;
  std::uint64_t seed = 0;
  double final_train_loss = 0.0;

  bool operator==(const ProbeResult&) const = default;
};

/// argmax with ties broken towards the lowest class index.
inline std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > row[best]) best = k;
  }
  return best;
}

namespace detail {

struct ProbeNet {
  std::vector<Dense<double>> layers;

  [[nodiscard]] std::vector<NamedParameter<double>> params() const {
    std::vector<NamedParameter<double>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.push_back({"probe." + std::to_string(i) + ".weight", layers[i].weight, true, true});
      out.push_back({"probe." + std::to_string(i) + ".bias", layers[i].bias, true, false});
    }
    return out;
  }

  [[nodiscard]] Tensor forward(const Tensor& x) const {
    Tensor z = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      z = affine(z, layers[i].weight, layers[i].bias);
      if (i + 1 < layers.size()) z = relu(z);
    }
    return z;
  }
};

inline Tensor rows_tensor(const RepresentationMatrix& r, std::span<const std::size_t> idx) {
  std::vector<double> v;
  v.reserve(idx.size() * r.d);
  for (auto i : idx) {
    auto row = r.row(i);
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({idx.size(), r.d}, std::move(v));
}

inline double accuracy(const ProbeNet& net, const RepresentationMatrix& r,
                       std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t chunk = 1024;
  for (std::size_t s = 0; s < idx.size(); s += chunk) {
    const auto part = idx.subspan(s, std::min(chunk, idx.size() - s));
    const auto logits = net.forward(rows_tensor(r, part));
    const std::size_t c = logits.shape()[1];
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto pred = argmax_lowest(logits.values().subspan(i * c, c));
      if (static_cast<std::int32_t>(pred) == r.labels[part[i]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

/// Per-class fraction of rows (at least one per present class), in index order.
inline std::vector<std::size_t> stratified_subset(std::span<const std::int32_t> labels,
                                                  double fraction, Rng& rng) {
  std::vector<std::size_t> all(labels.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (fraction >= 1.0) return all;
  std::int32_t max_label = 0;
  for (auto l : labels) max_label = std::max(max_label, l);
  std::vector<std::vector<std::size_t>> by(static_cast<std::size_t>(max_label) + 1);
  for (auto i : all) by[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> out;
  for (auto& cls : by) {
    if (cls.empty()) continue;
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::round(fraction * static_cast<double>(cls.size()))));
    for (std::size_t i = 0; i < keep; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform_index(cls.size() - i));
      std::swap(cls[i], cls[j]);
    }
    out.insert(out.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Fits a linear or MLP classifier on frozen representations with AdamW.
///
/// The number of classes is 1 + the largest label seen in either split.
/// Zero-initialized linear probe. MLP hidden layers are ReLU; a layer whose
/// width equals its input starts as the identity, other widths are
/// He-initialized, and the output layer is zero-initialized.
inline ProbeResult train_probe(const RepresentationMatrix& train, const RepresentationMatrix& eval,
                               const ProbeConfig& cfg) {
  if (train.d != eval.d) {
    throw DimensionError("train_probe: train D " + std::to_string(train.d) + " != eval D " +
                         std::to_string(eval.d));
  }
  if (train.n == 0) throw ContractError("train_probe: empty train set");
  if (cfg.batch_size == 0 || cfg.epochs == 0) {
    throw ConfigError("train_probe: batch_size and epochs must be >= 1");
  }
  std::int32_t max_label = 0;
  for (auto l : train.labels) max_label = std::max(max_label, l);
  for (auto l : eval.labels) max_label = std::max(max_label, l);
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;

  const Rng root = Rng(cfg.seed).stream("probe");
  Rng init_rng = root.stream("init");
  Rng order_rng = root.stream("order");
  Rng subset_rng = root.stream("subset");

  ProbeResult result;
  result.kind = cfg.kind;
  result.seed = cfg.seed;
  detail::ProbeNet net;
  std::size_t in = train.d;
  if (cfg.kind == ProbeConfig::Kind::mlp) {
    result.widths = cfg.mlp_widths.empty() ? std::vector<std::size_t>{train.d, train.d}
                                           : cfg.mlp_widths;
    for (auto w : result.widths) {
      if (w == in) {
        // Representations are non-negative, so an identity layer followed by
        // ReLU passes them through unchanged: the MLP starts as the linear probe.
        auto weight = Tensor::zeros({in, w}, true);
        for (std::size_t j = 0; j < w; ++j) weight.mutable_values()[j * w + j] = 1.0;
        net.layers.push_back({weight, Tensor::zeros({w}, true)});
      } else {
        net.layers.push_back(detail::he_dense<double>(in, w, init_rng));
      }
      in = w;
    }
  }
  net.layers.push_back(
      {Tensor::zeros({in, classes}, true), Tensor::zeros({classes}, true)});

  const auto fit_idx = detail::stratified_subset(train.labels, cfg.train_fraction, subset_rng);
  const std::size_t bs = std::min(cfg.batch_size, fit_idx.size());
  const std::size_t steps = std::max<std::size_t>(1, fit_idx.size() / bs);

  AdamW<double> opt(AdamWOptions{0.9, 0.999, 1e-8, cfg.weight_decay});
  const auto params = net.params();
  std::vector<double> epoch_losses;
  std::vector<std::size_t> order = fit_idx;
  std::vector<std::int32_t> labels(bs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_index(i))]);
    }
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::span<const std::size_t> idx(order.data() + s * bs, bs);
      for (std::size_t i = 0; i < bs; ++i) labels[i] = train.labels[idx[i]];
      for (const auto& p : params) p.tensor.impl()->grad.clear();
      const auto loss = cross_entropy(net.forward(detail::rows_tensor(train, idx)),
                                      std::span<const std::int32_t>(labels));
      backward(loss);
      opt.step(params, cfg.lr);
      loss_sum += loss.item();
    }
    epoch_losses.push_back(loss_sum / static_cast<double>(steps));
    result.epochs = epoch + 1;
    const std::size_t w = cfg.early_stop_window;
    if (w > 0 && epoch_losses.size() > w) {
      const double before = epoch_losses[epoch_losses.size() - 1 - w];
      const double now = epoch_losses.back();
      if ((before - now) / std::max(std::abs(before), 1e-30) < cfg.early_stop_tol) {
        result.early_stopped = true;
        break;
      }
    }
  }
  result.final_train_loss = epoch_losses.back();
  result.train_accuracy = detail::accuracy(net, train, fit_idx);
  std::vector<std::size_t> eval_idx(eval.n);
  std::iota(eval_idx.begin(), eval_idx.end(), std::size_t{0});
  result.eval_accuracy = detail::accuracy(net, eval, eval_idx);
  return result;
}

struct TransferTask {
  std::string name;
  Dataset train;
  Dataset eval;
};

/// Probes the same frozen backbone on each task.
template <typename Real>
std::vector<ProbeResult> transfer_eval(const Network<Real>& net, const std::vector<TransferTask>& tasks,
                                       const ProbeConfig& cfg) {
  std::vector<ProbeResult> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) {
    if (t.train.input_dim != net.config.input_dim || t.eval.input_dim != net.config.input_dim) {
      throw DimensionError("transfer_eval: task '" + t.name + "' input_dim differs from network");
    }
    out.push_back(train_probe(extract_representations(net, t.train),
                              extract_representations(net, t.eval), cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Representation binary format:
//   "DLREPR01" | u64 N | u64 D | f64 values[N * D] | i32 labels[N]
// ---------------------------------------------------------------------------

inline constexpr char kRepresentationMagic[9] = "DLREPR01";

inline void save_representations(const RepresentationMatrix& r, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open representation file for writing: " + path);
  os.write(kRepresentationMagic, 8);
  detail::write_pod<std::uint64_t>(os, r.n);
  detail::write_pod<std::uint64_t>(os, r.d);
  os.write(reinterpret_cast<const char*>(r.values.data()),
           static_cast<std::streamsize>(r.values.size() * sizeof(double)));
  os.write(reinterpret_cast<const char*>(r.labels.data()),
           static_cast<std::streamsize>(r.labels.size() * sizeof(std::int32_t)));
  if (!os) throw Error("failed writing representations: " + path);
}

inline RepresentationMatrix load_representations(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open representation file: " + path);
  if (detail::read_bytes(is, 8, "magic") != std::string(kRepresentationMagic, 8)) {
    throw FormatError("not a dimlab representation file: " + path);
  }
  RepresentationMatrix r;
  r.n = detail::read_pod<std::uint64_t>(is, "N");
  r.d = detail::read_pod<std::uint64_t>(is, "D");
  detail::require_payload(is, r.n * r.d * sizeof(double) + r.n * sizeof(std::int32_t), path);
  r.values.resize(r.n * r.d);
  const auto offset = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(r.values.data()),
               static_cast<std::streamsize>(r.values.size() * sizeof(double)))) {
    throw FormatError("truncated representation values at byte offset " + std::to_string(offset));
  }
  r.labels.resize(r.n);
  const auto loff = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(r.labels.data()),
               static_cast<std::streamsize>(r.labels.size() * sizeof(std::int32_t)))) {
    throw FormatError("truncated representation labels at byte offset " + std::to_string(loff));
  }
  r.source = path;
  return r;
}

}  // namespace dimlab
