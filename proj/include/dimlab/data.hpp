#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dimlab/errors.hpp"
#include "dimlab/model.hpp"
#include "dimlab/rng.hpp"
#include "dimlab/tensor.hpp"

namespace dimlab {

struct Dataset {
  std::size_t input_dim = 0;
  std::size_t n_classes = 0;
  std::vector<double> inputs;  // row-major N x input_dim
  std::vector<std::int32_t> labels;
  std::vector<std::size_t> class_counts;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return {inputs.data() + i * input_dim, input_dim};
  }

  /// Checks labels < n_classes, counts sum to N, and input size.
  void validate() const {
    if (inputs.size() != labels.size() * input_dim) {
      throw FormatError("dataset: inputs hold " + std::to_string(inputs.size()) +
                        " values for " + std::to_string(labels.size()) + " rows of width " +
                        std::to_string(input_dim));
    }
    if (class_counts.size() != n_classes) {
      throw FormatError("dataset: class_counts size differs from n_classes");
    }
    std::vector<std::size_t> counts(n_classes, 0);
    for (auto l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= n_classes) {
        throw FormatError("dataset: label " + std::to_string(l) + " out of range");
      }
      ++counts[static_cast<std::size_t>(l)];
    }
    if (counts != class_counts) {
      throw FormatError("dataset: class_counts disagree with labels");
    }
  }

  bool operator==(const Dataset&) const = default;
};

/// Recomputes class_counts from labels.
inline void recount(Dataset& ds) {
  ds.class_counts.assign(ds.n_classes, 0);
  for (auto l : ds.labels) ++ds.class_counts[static_cast<std::size_t>(l)];
}

/// Subset of rows, in the given order.
inline Dataset select_rows(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset out;
  out.input_dim = ds.input_dim;
  out.n_classes = ds.n_classes;
  out.inputs.reserve(idx.size() * ds.input_dim);
  for (auto i : idx) {
    auto r = ds.row(i);
    out.inputs.insert(out.inputs.end(), r.begin(), r.end());
    out.labels.push_back(ds.labels[i]);
  }
  recount(out);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian-mixture corpus
// ---------------------------------------------------------------------------

/// Class sizes proportional to k^(-zipf_exponent) for k = 1..n_classes,
/// scaled so class 0 has per_class_base samples.
inline std::vector<std::size_t> zipf_class_counts(std::size_t n_classes,
                                                  std::size_t per_class_base,
                                                  double zipf_exponent) {
  if (n_classes == 0 || per_class_base == 0) {
    throw ConfigError("synthetic data: n_classes and per_class_base must be >= 1");
  }
  if (zipf_exponent < 0.0) {
    throw ConfigError("synthetic data: zipf_exponent must be >= 0");
  }
  std::vector<std::size_t> counts(n_classes);
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double w = std::pow(static_cast<double>(k + 1), -zipf_exponent);
    const double c = std::round(static_cast<double>(per_class_base) * w);
    if (c < 1.0) {
      throw ConfigError("synthetic data: per_class_base " + std::to_string(per_class_base) +
                        " too small for zipf tail (class " + std::to_string(k) +
                        " would be empty)");
    }
    counts[k] = static_cast<std::size_t>(c);
  }
  return counts;
}

/// Class means uniform on the sphere of radius class_sep, row-major [n_classes, input_dim].
inline std::vector<double> draw_class_means(std::size_t n_classes, std::size_t input_dim,
                                            double class_sep, Rng& rng) {
  std::vector<double> means(n_classes * input_dim);
  for (std::size_t c = 0; c < n_classes; ++c) {
    double ss = 0.0;
    double* m = means.data() + c * input_dim;
    do {
      ss = 0.0;
      for (std::size_t j = 0; j < input_dim; ++j) {
        m[j] = rng.normal();
        ss += m[j] * m[j];
      }
    } while (ss == 0.0);
    const double s = class_sep / std::sqrt(ss);
    for (std::size_t j = 0; j < input_dim; ++j) m[j] *= s;
  }
  return means;
}

/// Draws class_counts[c] samples around each mean with isotropic noise.
/// Rows are grouped by class in ascending class order.
inline Dataset sample_around_means(const std::vector<double>& means, std::size_t input_dim,
                                   const std::vector<std::size_t>& class_counts,
                                   double within_std, Rng& rng) {
  Dataset ds;
  ds.input_dim = input_dim;
  ds.n_classes = class_counts.size();
  ds.class_counts = class_counts;
  const std::size_t total = std::accumulate(class_counts.begin(), class_counts.end(), std::size_t{0});
  ds.inputs.reserve(total * input_dim);
  ds.labels.reserve(total);
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    const double* m = means.data() + c * input_dim;
    for (std::size_t s = 0; s < class_counts[c]; ++s) {
      for (std::size_t j = 0; j < input_dim; ++j) {
        ds.inputs.push_back(within_std > 0.0 ? m[j] + within_std * rng.normal() : m[j]);
      }
      ds.labels.push_back(static_cast<std::int32_t>(c));
    }
  }
  return ds;
}

/// Gaussian mixture with Zipf class sizes (zipf_exponent = 0 gives balanced classes).
inline Dataset gen_synthetic(std::size_t n_classes, std::size_t per_class_base,
                             std::size_t input_dim, double class_sep, double within_std,
                             double zipf_exponent, Rng& rng) {
  if (input_dim == 0) throw ConfigError("synthetic data: input_dim must be >= 1");
  if (class_sep < 0.0 || within_std < 0.0) {
    throw ConfigError("synthetic data: class_sep and within_std must be >= 0");
  }
  const auto counts = zipf_class_counts(n_classes, per_class_base, zipf_exponent);
  Rng mean_rng = rng.stream("means");
  Rng sample_rng = rng.stream("samples");
  const auto means = draw_class_means(n_classes, input_dim, class_sep, mean_rng);
  return sample_around_means(means, input_dim, counts, within_std, sample_rng);
}

/// Train/eval pair drawn around shared class means.
struct SyntheticSpec {
  std::size_t n_classes = 10;
  std::size_t per_class_base = 200;
  std::size_t eval_per_class = 100;
  std::size_t input_dim = 64;
  double class_sep = 1.0;
  double within_std = 1.0;
  double zipf_exponent = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSpec&) const = default;
};

struct DataSplit {
  Dataset train;
  Dataset eval;
};

/// The eval split is balanced with eval_per_class rows per class.
inline DataSplit gen_synthetic_split(const SyntheticSpec& spec) {
  const Rng root = Rng(spec.seed).stream("data");
  Rng train_rng = root.stream("train");
  Dataset train = gen_synthetic(spec.n_classes, spec.per_class_base, spec.input_dim,
                                spec.class_sep, spec.within_std, spec.zipf_exponent, train_rng);
  // Same means as gen_synthetic drew from the train stream.
  Rng mean_rng = train_rng.stream("means");
  const auto means = draw_class_means(spec.n_classes, spec.input_dim, spec.class_sep, mean_rng);
  Rng eval_rng = root.stream("eval");
  Dataset eval = sample_around_means(means, spec.input_dim,
                                     std::vector<std::size_t>(spec.n_classes, spec.eval_per_class),
                                     spec.within_std, eval_rng);
  return {std::move(train), std::move(eval)};
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugConfig {
  double noise_std = 0.1;
  double mask_prob = 0.2;
  double scale_lo = 0.8;
  double scale_hi = 1.2;

  void validate() const {
    if (noise_std < 0.0) throw ConfigError("aug: noise_std must be >= 0");
    if (mask_prob < 0.0 || mask_prob > 1.0) throw ConfigError("aug: mask_prob must be in [0,1]");
    if (!(scale_lo > 0.0) || scale_lo > scale_hi) {
      throw ConfigError("aug: scale_range must satisfy 0 < lo <= hi");
    }
  }
  bool operator==(const AugConfig&) const = default;
};

/// One stochastic view: x * s + N(0, noise_std), with each coordinate zeroed
/// independently with probability mask_prob.
inline void make_view_into(std::span<const double> x, const AugConfig& cfg, Rng& rng,
                           std::span<double> out) {
  const double s = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo : rng.uniform(cfg.scale_lo, cfg.scale_hi);
  for (std::size_t j = 0; j < x.size(); ++j) {
    double v = x[j] * s;
    if (cfg.noise_std > 0.0) v += cfg.noise_std * rng.normal();
    if (cfg.mask_prob > 0.0 && rng.bernoulli(cfg.mask_prob)) v = 0.0;
    out[j] = v;
  }
}

inline std::pair<std::vector<double>, std::vector<double>> make_views(std::span<const double> x,
                                                                      const AugConfig& cfg,
                                                                      Rng& rng) {
  std::vector<double> a(x.size()), b(x.size());
  make_view_into(x, cfg, rng, a);
  make_view_into(x, cfg, rng, b);
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Minibatch sampling
// ---------------------------------------------------------------------------

struct SamplerConfig {
  enum class Mode { uniform, class_restricted };
  Mode mode = Mode::uniform;
  std::size_t classes_per_batch = 2;  // only used by class_restricted
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;

  bool operator==(const SamplerConfig&) const = default;
};

/// Stateful batch iterator for one run.
///
/// Uniform mode walks a reshuffled permutation each epoch (batches never
/// repeat an index). ClassRestricted(c) draws c distinct non-empty classes
/// per batch and then batch_size distinct indices from their union.
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, SamplerConfig cfg, Rng rng)
      : ds_(&ds), cfg_(cfg), rng_(rng) {
    if (cfg_.batch_size == 0) throw ConfigError("sampler: batch_size must be >= 1");
    by_class_.resize(ds.n_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      by_class_[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
    for (std::size_t c = 0; c < by_class_.size(); ++c) {
      if (!by_class_[c].empty()) nonempty_.push_back(c);
    }
    if (cfg_.mode == SamplerConfig::Mode::class_restricted) {
      if (cfg_.classes_per_batch == 0 || cfg_.classes_per_batch > ds.n_classes) {
        throw ConfigError("sampler: classes_per_batch must be in [1, n_classes]");
      }
      if (nonempty_.size() < cfg_.classes_per_batch) {
        throw SamplingError("sampler: only " + std::to_string(nonempty_.size()) +
                            " non-empty classes, need " + std::to_string(cfg_.classes_per_batch));
      }
    } else if (cfg_.batch_size > ds.size()) {
      throw SamplingError("sampler: batch_size " + std::to_string(cfg_.batch_size) +
                          " exceeds dataset size " + std::to_string(ds.size()));
    }
  }

  /// floor(N / batch_size), at least 1.
  [[nodiscard]] std::size_t batches_per_epoch() const {
    return std::max<std::size_t>(1, ds_->size() / cfg_.batch_size);
  }

  std::vector<std::size_t> next_batch() {
    if (cfg_.mode == SamplerConfig::Mode::uniform) return next_uniform();
    return next_restricted();
  }

 private:
  std::vector<std::size_t> next_uniform() {
    if (cursor_ + cfg_.batch_size > perm_.size()) {
      perm_.resize(ds_->size());
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      shuffle(perm_);
      cursor_ = 0;
    }
    std::vector<std::size_t> out(perm_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 perm_.begin() + static_cast<std::ptrdiff_t>(cursor_ + cfg_.batch_size));
    cursor_ += cfg_.batch_size;
    return out;
  }

  std::vector<std::size_t> next_restricted() {
    std::vector<std::size_t> classes = nonempty_;
    const std::size_t c = cfg_.classes_per_batch;
    for (std::size_t i = 0; i < c; ++i) {
      const auto j = i + static_cast<std::size_t>(rng_.uniform_index(classes.size() - i));
      std::swap(classes[i], classes[j]);
    }
    classes.resize(c);
    std::sort(classes.begin(), classes.end());
    std::vector<std::size_t> pool;
    for (auto cls : classes) pool.insert(pool.end(), by_class_[cls].begin(), by_class_[cls].end());
    if (pool.size() < cfg_.batch_size) {
      throw SamplingError("sampler: batch_size " + std::to_string(cfg_.batch_size) +
                          " exceeds pool of " + std::to_string(pool.size()) +
                          " samples from the chosen classes");
    }
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
      const auto j = i + static_cast<std::size_t>(rng_.uniform_index(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(cfg_.batch_size);
    return pool;
  }

  void shuffle(std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng_.uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  const Dataset* ds_;
  SamplerConfig cfg_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<std::size_t> nonempty_;
  std::vector<std::size_t> perm_;
  std::size_t cursor_ = 0;
};

/// Single-shot convenience wrapper; stateful iteration should use BatchSampler.
inline std::vector<std::size_t> next_batch(const Dataset& ds, const SamplerConfig& cfg, Rng& rng) {
  BatchSampler s(ds, cfg, rng.stream(rng.next_u64()));
  return s.next_batch();
}

inline std::size_t distinct_labels(const Dataset& ds, std::span<const std::size_t> batch) {
  std::set<std::int32_t> seen;
  for (auto i : batch) seen.insert(ds.labels[i]);
  return seen.size();
}

/// Rows of the dataset as a [batch, input_dim] tensor.
template <typename Real>
BasicTensor<Real> gather_rows(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<Real> v;
  v.reserve(idx.size() * ds.input_dim);
  for (auto i : idx) {
    for (double x : ds.row(i)) v.push_back(static_cast<Real>(x));
  }
  return BasicTensor<Real>({idx.size(), ds.input_dim}, std::move(v));
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarPixels = 1024;

/// Parses CIFAR-10 binary records: 1 label byte (0-9) followed by 1024 red,
/// 1024 green and 1024 blue bytes in row-major 32x32 order. Pixels scale to
/// [0, 1]. input_dim 3072 keeps full resolution; otherwise it must equal
/// 3 * (32/f)^2 for a block size f dividing 32, and each channel is
/// average-pooled over f x f blocks (output keeps the channel-planar layout).
inline Dataset load_cifar10_binary(const std::vector<std::string>& paths,
                                   std::size_t input_dim = 3072) {
  std::size_t block = 0;
  for (std::size_t f : {1, 2, 4, 8, 16, 32}) {
    const std::size_t side = 32 / f;
    if (3 * side * side == input_dim) block = f;
  }
  if (block == 0) {
    throw ConfigError("cifar10: input_dim " + std::to_string(input_dim) +
                      " is not 3*(32/f)^2 for a block size f dividing 32");
  }
  const std::size_t side = 32 / block;
  Dataset ds;
  ds.input_dim = input_dim;
  ds.n_classes = 10;
  for (const auto& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cifar10: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecordBytes != 0) {
      const std::size_t offset = bytes.size() - bytes.size() % kCifarRecordBytes;
      throw FormatError("cifar10: " + path + " truncated record at byte offset " +
                        std::to_string(offset) + " (file length " +
                        std::to_string(bytes.size()) + " is not a multiple of 3073)");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
      const unsigned label = bytes[off];
      if (label > 9) {
        throw FormatError("cifar10: " + path + " label byte " + std::to_string(label) +
                          " > 9 at byte offset " + std::to_string(off));
      }
      ds.labels.push_back(static_cast<std::int32_t>(label));
      const unsigned char* px = bytes.data() + off + 1;
      const double denom = 255.0 * static_cast<double>(block * block);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const unsigned char* plane = px + ch * kCifarPixels;
        for (std::size_t by = 0; by < side; ++by)
          for (std::size_t bx = 0; bx < side; ++bx) {
            unsigned acc = 0;
            for (std::size_t y = by * block; y < (by + 1) * block; ++y)
              for (std::size_t x = bx * block; x < (bx + 1) * block; ++x) acc += plane[y * 32 + x];
            ds.inputs.push_back(static_cast<double>(acc) / denom);
          }
      }
    }
  }
  recount(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset binary export:
//   "DLDATA01" | u64 N | u64 input_dim | u64 n_classes | u64 class_counts[n_classes] |
//   f64 inputs[N * input_dim] | i32 labels[N]
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[9] = "DLDATA01";

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open dataset for writing: " + path);
  os.write(kDatasetMagic, 8);
  detail::write_pod<std::uint64_t>(os, ds.size());
  detail::write_pod<std::uint64_t>(os, ds.input_dim);
  detail::write_pod<std::uint64_t>(os, ds.n_classes);
  for (auto c : ds.class_counts) detail::write_pod<std::uint64_t>(os, c);
  os.write(reinterpret_cast<const char*>(ds.inputs.data()),
           static_cast<std::streamsize>(ds.inputs.size() * sizeof(double)));
  os.write(reinterpret_cast<const char*>(ds.labels.data()),
           static_cast<std::streamsize>(ds.labels.size() * sizeof(std::int32_t)));
  if (!os) throw Error("failed writing dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open dataset: " + path);
  if (detail::read_bytes(is, 8, "magic") != std::string(kDatasetMagic, 8)) {
    throw FormatError("not a dimlab dataset: " + path);
  }
  Dataset ds;
  const auto n = detail::read_pod<std::uint64_t>(is, "N");
  ds.input_dim = detail::read_pod<std::uint64_t>(is, "input_dim");
  ds.n_classes = detail::read_pod<std::uint64_t>(is, "n_classes");
  for (std::size_t c = 0; c < ds.n_classes; ++c) {
    ds.class_counts.push_back(detail::read_pod<std::uint64_t>(is, "class count"));
  }
  detail::require_payload(is, n * ds.input_dim * sizeof(double) + n * sizeof(std::int32_t), path);
  ds.inputs.resize(n * ds.input_dim);
  for (auto& v : ds.inputs) v = detail::read_pod<double>(is, "input value");
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = detail::read_pod<std::int32_t>(is, "label");
  ds.validate();
  return ds;
}

}  // namespace dimlab
