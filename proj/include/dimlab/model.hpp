#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dimlab/errors.hpp"
#include "dimlab/rng.hpp"
#include "dimlab/tensor.hpp"

namespace dimlab {

struct ProjectorSpec {
  enum class Kind { none, linear, mlp };
  Kind kind = Kind::none;
  /// Layer output widths. Linear has exactly one entry (K). For Mlp the last
  /// entry is the embedding width and every earlier entry is a hidden layer
  /// followed by [batch-norm] and ReLU.
  std::vector<std::size_t> widths;
  bool batchnorm = true;

  static ProjectorSpec none() { return {}; }
  static ProjectorSpec linear(std::size_t k) { return {Kind::linear, {k}, false}; }
  static ProjectorSpec mlp(std::vector<std::size_t> widths, bool batchnorm = true) {
    return {Kind::mlp, std::move(widths), batchnorm};
  }

  /// First projector width, the K of the D/K ratio. 0 when there is no projector.
  [[nodiscard]] std::size_t first_width() const { return widths.empty() ? 0 : widths.front(); }
  [[nodiscard]] std::size_t output_width() const { return widths.empty() ? 0 : widths.back(); }

  bool operator==(const ProjectorSpec&) const = default;
};

inline const char* to_string(ProjectorSpec::Kind k) {
  switch (k) {
    case ProjectorSpec::Kind::none: return "none";
    case ProjectorSpec::Kind::linear: return "linear";
    case ProjectorSpec::Kind::mlp: return "mlp";
  }
  return "?";
}

struct NetworkConfig {
  std::size_t input_dim = 64;
  std::vector<std::size_t> backbone_hidden;
  std::size_t repr_dim = 64;
  ProjectorSpec projector;
  /// Classifier width for supervised mode (number of classes).
  std::optional<std::size_t> head;
  std::uint64_t init_seed = 0;

  bool operator==(const NetworkConfig&) const = default;

  void validate() const {
    auto positive = [](std::size_t v, const std::string& what) {
      if (v == 0) throw ConfigError("network config: " + what + " must be >= 1");
    };
    positive(input_dim, "input_dim");
    positive(repr_dim, "repr_dim");
    for (auto w : backbone_hidden) positive(w, "backbone_hidden width");
    if (projector.kind == ProjectorSpec::Kind::linear && projector.widths.size() != 1) {
      throw ConfigError("network config: linear projector takes exactly one width");
    }
    if (projector.kind == ProjectorSpec::Kind::mlp && projector.widths.empty()) {
      throw ConfigError("network config: mlp projector widths must be non-empty");
    }
    if (projector.kind == ProjectorSpec::Kind::none && !projector.widths.empty()) {
      throw ConfigError("network config: projector 'none' takes no widths");
    }
    for (auto w : projector.widths) positive(w, "projector width");
    if (head) positive(*head, "head");
  }
};

inline void to_json(nlohmann::json& j, const ProjectorSpec& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)}, {"widths", p.widths}, {"batchnorm", p.batchnorm}};
}

inline void from_json(const nlohmann::json& j, ProjectorSpec& p) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "none") p.kind = ProjectorSpec::Kind::none;
  else if (kind == "linear") p.kind = ProjectorSpec::Kind::linear;
  else if (kind == "mlp") p.kind = ProjectorSpec::Kind::mlp;
  else throw ConfigError("unknown projector kind '" + kind + "'");
  p.widths = j.at("widths").get<std::vector<std::size_t>>();
  p.batchnorm = j.at("batchnorm").get<bool>();
}

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim},
                     {"backbone_hidden", c.backbone_hidden},
                     {"repr_dim", c.repr_dim},
                     {"projector", c.projector},
                     {"head", c.head ? nlohmann::json(*c.head) : nlohmann::json(nullptr)},
                     {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.backbone_hidden = j.at("backbone_hidden").get<std::vector<std::size_t>>();
  c.repr_dim = j.at("repr_dim").get<std::size_t>();
  c.projector = j.at("projector").get<ProjectorSpec>();
  c.head = j.at("head").is_null() ? std::nullopt
                                  : std::optional<std::size_t>(j.at("head").get<std::size_t>());
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
}

template <typename Real>
struct Dense {
  BasicTensor<Real> weight;  // [in, out]
  BasicTensor<Real> bias;    // [out], or empty when the layer feeds batch-norm

  [[nodiscard]] bool has_bias() const { return bias.numel() != 0; }
};

template <typename Real>
struct BatchNormLayer {
  BasicTensor<Real> gamma;
  BasicTensor<Real> beta;
  RunningStats<Real> stats;
};

template <typename Real>
struct NamedParameter {
  std::string name;
  BasicTensor<Real> tensor;
  bool trainable = true;
  /// Weight decay applies only to weight matrices.
  bool decay = true;
};

/// Backbone f (MLP ending in ReLU), optional projector g, optional classifier head.
///
/// Parameters are tensor handles, so copying a Network would alias storage;
/// the type is move-only and clone() makes a deep copy.
template <typename Real>
class Network {
 public:
  Network() = default;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  NetworkConfig config;
  std::vector<Dense<Real>> backbone;
  std::vector<Dense<Real>> projector;
  std::vector<std::optional<BatchNormLayer<Real>>> projector_bn;  // one per hidden projector layer
  std::optional<Dense<Real>> head;

  [[nodiscard]] std::vector<NamedParameter<Real>> parameters() const {
    std::vector<NamedParameter<Real>> out;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      const auto p = "backbone." + std::to_string(i);
      out.push_back({p + ".weight", backbone[i].weight, true, true});
      out.push_back({p + ".bias", backbone[i].bias, true, false});
    }
    for (std::size_t i = 0; i < projector.size(); ++i) {
      const auto p = "projector." + std::to_string(i);
      out.push_back({p + ".weight", projector[i].weight, true, true});
      if (projector[i].has_bias()) out.push_back({p + ".bias", projector[i].bias, true, false});
      if (i < projector_bn.size() && projector_bn[i]) {
        const auto& bn = *projector_bn[i];
        out.push_back({p + ".bn.gamma", bn.gamma, true, false});
        out.push_back({p + ".bn.beta", bn.beta, true, false});
        out.push_back({p + ".bn.running_mean", bn.stats.mean, false, false});
        out.push_back({p + ".bn.running_var", bn.stats.var, false, false});
      }
    }
    if (head) {
      out.push_back({"head.weight", head->weight, true, true});
      out.push_back({"head.bias", head->bias, true, false});
    }
    return out;
  }

  [[nodiscard]] std::vector<NamedParameter<Real>> trainable_parameters() const {
    auto all = parameters();
    std::erase_if(all, [](const auto& p) { return !p.trainable; });
    return all;
  }

  [[nodiscard]] std::vector<NamedParameter<Real>> backbone_parameters() const {
    auto all = parameters();
    std::erase_if(all, [](const auto& p) { return p.name.rfind("backbone.", 0) != 0; });
    return all;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : trainable_parameters()) n += p.tensor.numel();
    return n;
  }

  [[nodiscard]] Network clone() const {
    Network out;
    out.config = config;
    auto copy_dense = [](const Dense<Real>& d) { return Dense<Real>{d.weight.clone(), d.bias.clone()}; };
    for (const auto& d : backbone) out.backbone.push_back(copy_dense(d));
    for (const auto& d : projector) out.projector.push_back(copy_dense(d));
    for (const auto& bn : projector_bn) {
      if (bn) {
        out.projector_bn.push_back(BatchNormLayer<Real>{
            bn->gamma.clone(), bn->beta.clone(), {bn->stats.mean.clone(), bn->stats.var.clone()}});
      } else {
        out.projector_bn.push_back(std::nullopt);
      }
    }
    if (head) out.head = copy_dense(*head);
    return out;
  }
};

/// Number of trainable scalars implied by a config, without building the network.
inline std::size_t parameter_count(const NetworkConfig& cfg) {
  std::size_t n = 0;
  std::size_t in = cfg.input_dim;
  for (auto w : cfg.backbone_hidden) {
    n += in * w + w;
    in = w;
  }
  n += in * cfg.repr_dim + cfg.repr_dim;
  in = cfg.repr_dim;
  for (std::size_t i = 0; i < cfg.projector.widths.size(); ++i) {
    const auto w = cfg.projector.widths[i];
    const bool hidden = i + 1 < cfg.projector.widths.size();
    if (hidden && cfg.projector.kind == ProjectorSpec::Kind::mlp && cfg.projector.batchnorm) {
      n += in * w + 2 * w;
    } else {
      n += in * w + w;
    }
    in = w;
  }
  if (cfg.head) n += cfg.repr_dim * *cfg.head + *cfg.head;
  return n;
}

namespace detail {

template <typename Real>
Dense<Real> he_dense(std::size_t in, std::size_t out, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(in));
  std::vector<Real> w(in * out);
  for (auto& v : w) v = static_cast<Real>(rng.normal() * std);
  return {BasicTensor<Real>({in, out}, std::move(w), true),
          BasicTensor<Real>::zeros({out}, true)};
}

}  // namespace detail

/// He-initialized weights (std = sqrt(2 / fan_in)), zero biases, unit gamma,
/// zero beta. Projector layers followed by batch-norm carry no bias.
/// Deterministic in config.init_seed; each layer draws from its own named stream.
template <typename Real = double>
Network<Real> init_network(const NetworkConfig& config) {
  config.validate();
  const Rng root = Rng(config.init_seed).stream("init");
  Network<Real> net;
  net.config = config;
  std::size_t in = config.input_dim;
  std::size_t layer = 0;
  for (auto w : config.backbone_hidden) {
    Rng r = root.stream("backbone." + std::to_string(layer++));
    net.backbone.push_back(detail::he_dense<Real>(in, w, r));
    in = w;
  }
  {
    Rng r = root.stream("backbone." + std::to_string(layer));
    net.backbone.push_back(detail::he_dense<Real>(in, config.repr_dim, r));
  }
  in = config.repr_dim;
  const auto& proj = config.projector;
  for (std::size_t i = 0; i < proj.widths.size(); ++i) {
    const auto w = proj.widths[i];
    Rng r = root.stream("projector." + std::to_string(i));
    net.projector.push_back(detail::he_dense<Real>(in, w, r));
    const bool hidden = i + 1 < proj.widths.size();
    if (hidden && proj.kind == ProjectorSpec::Kind::mlp && proj.batchnorm) {
      // Batch-norm subtracts the batch mean, so a bias here would be inert.
      net.projector.back().bias = BasicTensor<Real>();
      net.projector_bn.push_back(BatchNormLayer<Real>{
          BasicTensor<Real>::filled({w}, Real{1}, true), BasicTensor<Real>::zeros({w}, true),
          {BasicTensor<Real>::zeros({w}), BasicTensor<Real>::filled({w}, Real{1})}});
    } else if (hidden) {
      net.projector_bn.push_back(std::nullopt);
    }
    in = w;
  }
  if (config.head) {
    Rng r = root.stream("head");
    net.head = detail::he_dense<Real>(config.repr_dim, *config.head, r);
  }
  return net;
}

/// f(x): hidden affine+ReLU layers, then the representation layer and a final ReLU.
/// Mode is accepted for symmetry; the backbone has no mode-dependent layers.
template <typename Real>
BasicTensor<Real> backbone_forward(const Network<Real>& net, const BasicTensor<Real>& x,
                                   Mode = Mode::train) {
  if (x.dim() != 2 || x.shape()[1] != net.config.input_dim) {
    throw DimensionError("backbone_forward: input shape " + shape_str(x.shape()) +
                         " does not match input_dim " + std::to_string(net.config.input_dim));
  }
  BasicTensor<Real> h = x;
  for (const auto& layer : net.backbone) {
    h = relu(affine(h, layer.weight, layer.bias));
  }
  return h;
}

/// g(h). Hidden Mlp layers are affine -> [batch-norm] -> ReLU; the last layer is affine only.
template <typename Real>
BasicTensor<Real> projector_forward(Network<Real>& net, const BasicTensor<Real>& h, Mode mode) {
  if (net.config.projector.kind == ProjectorSpec::Kind::none) {
    throw ContractError(
        "projector_forward: network has no projector; use the backbone output directly");
  }
  if (h.dim() != 2 || h.shape()[1] != net.config.repr_dim) {
    throw DimensionError("projector_forward: input shape " + shape_str(h.shape()) +
                         " does not match repr_dim " + std::to_string(net.config.repr_dim));
  }
  BasicTensor<Real> z = h;
  const std::size_t layers = net.projector.size();
  for (std::size_t i = 0; i < layers; ++i) {
    const auto& layer = net.projector[i];
    z = layer.has_bias() ? affine(z, layer.weight, layer.bias) : matmul(z, layer.weight);
    if (i + 1 < layers) {
      if (auto& bn = net.projector_bn[i]) {
        z = batch_norm(z, bn->gamma, bn->beta, mode, bn->stats);
      }
      z = relu(z);
    }
  }
  return z;
}

/// Supervised classifier logits on the representation.
template <typename Real>
BasicTensor<Real> head_forward(const Network<Real>& net, const BasicTensor<Real>& h) {
  if (!net.head) {
    throw ContractError("head_forward: network has no classifier head");
  }
  return affine(h, net.head->weight, net.head->bias);
}

/// FNV-1a over the raw bytes of every parameter (including running stats).
template <typename Real>
std::uint64_t parameter_checksum(const std::vector<NamedParameter<Real>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    const auto v = p.tensor.values();
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size() * sizeof(Real); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <typename Real>
std::uint64_t parameter_checksum(const Network<Real>& net) {
  return parameter_checksum(net.parameters());
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   "DLCKPT01" | u64 json_len | json NetworkConfig | u64 n_params |
//   per param: u64 name_len | name | u64 ndim | u64 dims[ndim] | f64 values[]
// Values are always stored as 64-bit floats.
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  const auto offset = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw FormatError("truncated " + what + " at byte offset " + std::to_string(offset));
  }
  return v;
}

inline std::string read_bytes(std::istream& is, std::size_t n, const std::string& what) {
  std::string s(n, '\0');
  const auto offset = static_cast<long long>(is.tellg());
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError("truncated " + what + " at byte offset " + std::to_string(offset));
  }
  return s;
}

/// Rejects a header whose declared payload differs from the bytes left in the stream.
inline void require_payload(std::istream& is, std::uint64_t bytes, const std::string& path) {
  const auto here = is.tellg();
  is.seekg(0, std::ios::end);
  const auto end = is.tellg();
  is.seekg(here);
  if (here < 0 || end < here || static_cast<std::uint64_t>(end - here) != bytes) {
    throw FormatError(path + ": header declares " + std::to_string(bytes) +
                      " payload bytes, file has " + std::to_string(end - here) +
                      " after byte offset " + std::to_string(here));
  }
}

inline constexpr char kCheckpointMagic[9] = "DLCKPT01";

}  // namespace detail

template <typename Real>
void save_checkpoint(const Network<Real>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  os.write(detail::kCheckpointMagic, 8);
  const std::string cfg = nlohmann::json(net.config).dump();
  detail::write_pod<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto params = net.parameters();
  detail::write_pod<std::uint64_t>(os, params.size());
  for (const auto& p : params) {
    detail::write_pod<std::uint64_t>(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_pod<std::uint64_t>(os, p.tensor.shape().size());
    for (auto d : p.tensor.shape()) detail::write_pod<std::uint64_t>(os, d);
    for (Real v : p.tensor.values()) detail::write_pod<double>(os, static_cast<double>(v));
  }
  if (!os) throw Error("failed writing checkpoint: " + path);
}

template <typename Real = double>
Network<Real> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path);
  if (detail::read_bytes(is, 8, "magic") != std::string(detail::kCheckpointMagic, 8)) {
    throw FormatError("not a dimlab checkpoint: " + path);
  }
  const auto cfg_len = detail::read_pod<std::uint64_t>(is, "config length");
  if (cfg_len > (1u << 20)) throw FormatError("checkpoint config length is implausible: " + path);
  NetworkConfig cfg;
  try {
    cfg = nlohmann::json::parse(detail::read_bytes(is, cfg_len, "config")).get<NetworkConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  auto net = init_network<Real>(cfg);
  auto params = net.parameters();
  const auto count = detail::read_pod<std::uint64_t>(is, "parameter count");
  if (count != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " parameters, config implies " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto name_len = detail::read_pod<std::uint64_t>(is, "name length");
    const auto name = detail::read_bytes(is, name_len, "name");
    if (name != p.name) {
      throw FormatError("checkpoint parameter '" + name + "' where '" + p.name + "' expected");
    }
    const auto ndim = detail::read_pod<std::uint64_t>(is, "ndim");
    Shape shape;
    for (std::uint64_t i = 0; i < ndim; ++i) shape.push_back(detail::read_pod<std::uint64_t>(is, "dim"));
    if (shape != p.tensor.shape()) {
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(shape));
    }
    auto v = p.tensor.mutable_values();
    for (auto& x : v) x = static_cast<Real>(detail::read_pod<double>(is, "value"));
  }
  return net;
}

}  // namespace dimlab
