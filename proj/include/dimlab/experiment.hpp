#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dimlab/analysis.hpp"
#include "dimlab/data.hpp"
#include "dimlab/errors.hpp"
#include "dimlab/evaluation.hpp"
#include "dimlab/model.hpp"
#include "dimlab/training.hpp"

namespace dimlab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DatasetConfig {
  enum class Kind { synthetic, cifar10 };
  Kind kind = Kind::synthetic;
  SyntheticSpec synthetic{10, 200, 500, 64, 6.0, 1.0, 0.0, 1000};
  std::vector<std::string> cifar_train_files;
  std::vector<std::string> cifar_eval_files;
  std::size_t cifar_input_dim = 192;

  bool operator==(const DatasetConfig&) const = default;
};

/// A downstream task drawn from the synthetic generator with its own seed,
/// class count and noise level. Shares input_dim with the pretraining data.
struct TransferTaskConfig {
  std::string name;
  std::size_t n_classes = 10;
  std::size_t per_class_base = 100;
  std::size_t eval_per_class = 100;
  double class_sep = 6.0;
  double within_std = 1.0;
  std::uint64_t seed = 0;

  bool operator==(const TransferTaskConfig&) const = default;
};

struct AnalysisConfig {
  bool mlp_probe = true;
  bool binarized_probe = true;
  bool sparsity = true;
  bool jacobian = true;
  std::size_t jacobian_samples = 64;
  bool transfer = true;
  bool save_checkpoint = true;
  bool save_representations = true;

  bool operator==(const AnalysisConfig&) const = default;
};

struct SweepConfig {
  std::vector<std::size_t> repr_dims{16, 64, 256};
  /// Overrides the projector's first width (K); empty keeps the template's.
  std::vector<std::size_t> projector_widths;
  /// SimCLR temperatures; empty keeps train.simclr.temperature.
  std::vector<double> temperatures;

  bool operator==(const SweepConfig&) const = default;
};

/// Experiments default to class-restricted batches (2 classes per batch).
inline TrainConfig experiment_train_defaults() {
  TrainConfig t;
  t.sampler.mode = SamplerConfig::Mode::class_restricted;
  t.sampler.classes_per_batch = 2;
  return t;
}

struct ExperimentConfig {
  std::string name = "experiment";
  std::string output_dir;
  std::vector<std::uint64_t> seeds{0};
  DatasetConfig dataset;
  NetworkConfig network{64, {128}, 64, ProjectorSpec::mlp({64, 64, 64}), std::nullopt, 0};
  SweepConfig sweep;
  TrainConfig train = experiment_train_defaults();
  ProbeConfig probe;
  AnalysisConfig analysis;
  std::vector<TransferTaskConfig> transfer_tasks{
      {"redrawn", 10, 100, 100, 6.0, 1.0, 7001},
      {"five_class", 5, 100, 100, 6.0, 1.0, 7002},
      {"noisier", 10, 100, 100, 6.0, 1.5, 7003},
  };

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const {
    if (sweep.repr_dims.empty()) throw ConfigError("config: sweep.repr_dims must be non-empty");
    if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
    const std::size_t in = dataset.kind == DatasetConfig::Kind::synthetic
                               ? dataset.synthetic.input_dim
                               : dataset.cifar_input_dim;
    if (in != network.input_dim) {
      throw ConfigError("config: network.input_dim " + std::to_string(network.input_dim) +
                        " differs from the dataset input_dim " + std::to_string(in));
    }
    if (!sweep.projector_widths.empty() &&
        network.projector.kind == ProjectorSpec::Kind::none) {
      throw ConfigError("config: sweep.projector_widths needs a projector in network.projector");
    }
    for (double t : sweep.temperatures) {
      if (!(t > 0.0)) throw ConfigError("config: sweep.temperatures must be > 0");
    }
    train.validate();
    std::vector<std::string> names;
    for (const auto& t : transfer_tasks) {
      if (std::find(names.begin(), names.end(), t.name) != names.end() || t.name.empty()) {
        throw ConfigError("config: transfer task names must be unique and non-empty");
      }
      names.push_back(t.name);
    }
  }
};

namespace detail {

/// Strict reader over one JSON object: every key must be consumed, and type
/// errors name the path of the offending value.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError("config: " + display() + " must be an object");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: " + at(key) + ": wrong type (" + type_name(*it) + "): " +
                        e.what());
    }
  }

  /// Reader for a nested object; a missing key yields an empty object so
  /// every field keeps its default.
  ObjectReader child(const char* key) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return ObjectReader(empty(), at(key));
    return ObjectReader(*it, at(key));
  }

  void consume(const char* key) { seen_.emplace_back(key); }
  [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }
  [[nodiscard]] const json& raw(const char* key) const { return j_.at(key); }
  [[nodiscard]] std::string at(const char* key) const {
    return path_.empty() ? std::string(key) : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ConfigError("config: unknown key '" + at(k.c_str()) + "'");
      }
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  static std::string type_name(const json& v) { return v.type_name(); }
  [[nodiscard]] std::string display() const { return path_.empty() ? "document" : path_; }

  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline std::string enum_string(const ObjectReader& r, const char* key, const std::string& value,
                               std::initializer_list<const char*> allowed) {
  for (const char* a : allowed) {
    if (value == a) return value;
  }
  std::string list;
  for (const char* a : allowed) list += std::string(list.empty() ? "" : ", ") + a;
  throw ConfigError("config: " + r.at(key) + ": '" + value + "' is not one of " + list);
}

inline void read_projector(ObjectReader r, ProjectorSpec& p) {
  std::string kind = to_string(p.kind);
  r.get("kind", kind);
  kind = enum_string(r, "kind", kind, {"none", "linear", "mlp"});
  p.kind = kind == "none" ? ProjectorSpec::Kind::none
           : kind == "linear" ? ProjectorSpec::Kind::linear
                              : ProjectorSpec::Kind::mlp;
  r.get("widths", p.widths);
  r.get("batchnorm", p.batchnorm);
  r.finish();
}

inline void read_network(ObjectReader r, NetworkConfig& n) {
  r.get("input_dim", n.input_dim);
  r.get("backbone_hidden", n.backbone_hidden);
  read_projector(r.child("projector"), n.projector);
  r.finish();
}

inline void read_train(ObjectReader r, TrainConfig& t) {
  std::string method = to_string(t.method);
  r.get("method", method);
  t.method = method_from_string(enum_string(r, "method", method, {"simclr", "vicreg", "supervised"}));
  t.base_lr = default_base_lr(t.method);
  r.get("epochs", t.epochs);
  r.get("base_lr", t.base_lr);
  r.get("weight_decay", t.weight_decay);
  r.get("momentum", t.momentum);
  r.get("cosine_schedule", t.cosine_schedule);
  r.get("warmup_epochs", t.warmup_epochs);
  {
    auto s = r.child("simclr");
    s.get("temperature", t.simclr.temperature);
    s.finish();
  }
  {
    auto v = r.child("vicreg");
    v.get("sim_coeff", t.vicreg.sim_coeff);
    v.get("std_coeff", t.vicreg.std_coeff);
    v.get("cov_coeff", t.vicreg.cov_coeff);
    v.get("std_epsilon", t.vicreg.std_epsilon);
    v.get("std_target", t.vicreg.std_target);
    v.finish();
  }
  {
    auto s = r.child("sampler");
    std::string mode = t.sampler.mode == SamplerConfig::Mode::uniform ? "uniform" : "class_restricted";
    s.get("mode", mode);
    mode = enum_string(s, "mode", mode, {"uniform", "class_restricted"});
    t.sampler.mode = mode == "uniform" ? SamplerConfig::Mode::uniform
                                       : SamplerConfig::Mode::class_restricted;
    s.get("classes_per_batch", t.sampler.classes_per_batch);
    s.get("batch_size", t.sampler.batch_size);
    s.finish();
  }
  {
    auto a = r.child("aug");
    a.get("noise_std", t.aug.noise_std);
    a.get("mask_prob", t.aug.mask_prob);
    a.get("scale_lo", t.aug.scale_lo);
    a.get("scale_hi", t.aug.scale_hi);
    a.finish();
  }
  r.finish();
}

inline void read_probe(ObjectReader r, ProbeConfig& p) {
  r.get("mlp_widths", p.mlp_widths);
  r.get("lr", p.lr);
  r.get("weight_decay", p.weight_decay);
  r.get("epochs", p.epochs);
  r.get("batch_size", p.batch_size);
  r.get("early_stop_window", p.early_stop_window);
  r.get("early_stop_tol", p.early_stop_tol);
  r.get("train_fraction", p.train_fraction);
  r.finish();
}

}  // namespace detail

/// Parses a config document. Unknown keys and type mismatches are errors
/// naming the offending path; absent keys take their defaults.
inline ExperimentConfig parse_config_json(const json& doc) {
  ExperimentConfig c;
  detail::ObjectReader r(doc, "");
  r.get("name", c.name);
  r.get("output_dir", c.output_dir);
  r.get("seeds", c.seeds);
  {
    auto d = r.child("dataset");
    std::string kind = c.dataset.kind == DatasetConfig::Kind::synthetic ? "synthetic" : "cifar10";
    d.get("kind", kind);
    kind = detail::enum_string(d, "kind", kind, {"synthetic", "cifar10"});
    c.dataset.kind = kind == "synthetic" ? DatasetConfig::Kind::synthetic
                                         : DatasetConfig::Kind::cifar10;
    auto s = d.child("synthetic");
    auto& ss = c.dataset.synthetic;
    s.get("n_classes", ss.n_classes);
    s.get("per_class_base", ss.per_class_base);
    s.get("eval_per_class", ss.eval_per_class);
    s.get("input_dim", ss.input_dim);
    s.get("class_sep", ss.class_sep);
    s.get("within_std", ss.within_std);
    s.get("zipf_exponent", ss.zipf_exponent);
    s.get("seed", ss.seed);
    s.finish();
    auto cf = d.child("cifar10");
    cf.get("train_files", c.dataset.cifar_train_files);
    cf.get("eval_files", c.dataset.cifar_eval_files);
    cf.get("input_dim", c.dataset.cifar_input_dim);
    cf.finish();
    d.finish();
  }
  detail::read_network(r.child("network"), c.network);
  {
    auto s = r.child("sweep");
    s.get("repr_dims", c.sweep.repr_dims);
    s.get("projector_widths", c.sweep.projector_widths);
    s.get("temperatures", c.sweep.temperatures);
    s.finish();
  }
  detail::read_train(r.child("train"), c.train);
  detail::read_probe(r.child("probe"), c.probe);
  {
    auto a = r.child("analysis");
    a.get("mlp_probe", c.analysis.mlp_probe);
    a.get("binarized_probe", c.analysis.binarized_probe);
    a.get("sparsity", c.analysis.sparsity);
    a.get("jacobian", c.analysis.jacobian);
    a.get("jacobian_samples", c.analysis.jacobian_samples);
    a.get("transfer", c.analysis.transfer);
    a.get("save_checkpoint", c.analysis.save_checkpoint);
    a.get("save_representations", c.analysis.save_representations);
    a.finish();
  }
  if (r.has("transfer_tasks")) {
    const auto& arr = r.raw("transfer_tasks");
    if (!arr.is_array()) throw ConfigError("config: transfer_tasks must be an array");
    c.transfer_tasks.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::ObjectReader t(arr[i], "transfer_tasks[" + std::to_string(i) + "]");
      TransferTaskConfig task;
      t.get("name", task.name);
      t.get("n_classes", task.n_classes);
      t.get("per_class_base", task.per_class_base);
      t.get("eval_per_class", task.eval_per_class);
      t.get("class_sep", task.class_sep);
      t.get("within_std", task.within_std);
      t.get("seed", task.seed);
      t.finish();
      c.transfer_tasks.push_back(task);
    }
  }
  r.consume("transfer_tasks");
  r.finish();
  c.validate();
  return c;
}

/// The fully resolved document: every field present, parseable by parse_config_json.
inline json to_json_document(const ExperimentConfig& c) {
  const auto& ss = c.dataset.synthetic;
  const auto& t = c.train;
  json tasks = json::array();
  for (const auto& task : c.transfer_tasks) {
    tasks.push_back({{"name", task.name},
                     {"n_classes", task.n_classes},
                     {"per_class_base", task.per_class_base},
                     {"eval_per_class", task.eval_per_class},
                     {"class_sep", task.class_sep},
                     {"within_std", task.within_std},
                     {"seed", task.seed}});
  }
  return json{
      {"name", c.name},
      {"output_dir", c.output_dir},
      {"seeds", c.seeds},
      {"dataset",
       {{"kind", c.dataset.kind == DatasetConfig::Kind::synthetic ? "synthetic" : "cifar10"},
        {"synthetic",
         {{"n_classes", ss.n_classes},
          {"per_class_base", ss.per_class_base},
          {"eval_per_class", ss.eval_per_class},
          {"input_dim", ss.input_dim},
          {"class_sep", ss.class_sep},
          {"within_std", ss.within_std},
          {"zipf_exponent", ss.zipf_exponent},
          {"seed", ss.seed}}},
        {"cifar10",
         {{"train_files", c.dataset.cifar_train_files},
          {"eval_files", c.dataset.cifar_eval_files},
          {"input_dim", c.dataset.cifar_input_dim}}}}},
      {"network",
       {{"input_dim", c.network.input_dim},
        {"backbone_hidden", c.network.backbone_hidden},
        {"projector", c.network.projector}}},
      {"sweep",
       {{"repr_dims", c.sweep.repr_dims},
        {"projector_widths", c.sweep.projector_widths},
        {"temperatures", c.sweep.temperatures}}},
      {"train",
       {{"method", to_string(t.method)},
        {"epochs", t.epochs},
        {"base_lr", t.base_lr},
        {"weight_decay", t.weight_decay},
        {"momentum", t.momentum},
        {"cosine_schedule", t.cosine_schedule},
        {"warmup_epochs", t.warmup_epochs},
        {"simclr", {{"temperature", t.simclr.temperature}}},
        {"vicreg",
         {{"sim_coeff", t.vicreg.sim_coeff},
          {"std_coeff", t.vicreg.std_coeff},
          {"cov_coeff", t.vicreg.cov_coeff},
          {"std_epsilon", t.vicreg.std_epsilon},
          {"std_target", t.vicreg.std_target}}},
        {"sampler",
         {{"mode", t.sampler.mode == SamplerConfig::Mode::uniform ? "uniform" : "class_restricted"},
          {"classes_per_batch", t.sampler.classes_per_batch},
          {"batch_size", t.sampler.batch_size}}},
        {"aug",
         {{"noise_std", t.aug.noise_std},
          {"mask_prob", t.aug.mask_prob},
          {"scale_lo", t.aug.scale_lo},
          {"scale_hi", t.aug.scale_hi}}}}},
      {"probe",
       {{"mlp_widths", c.probe.mlp_widths},
        {"lr", c.probe.lr},
        {"weight_decay", c.probe.weight_decay},
        {"epochs", c.probe.epochs},
        {"batch_size", c.probe.batch_size},
        {"early_stop_window", c.probe.early_stop_window},
        {"early_stop_tol", c.probe.early_stop_tol},
        {"train_fraction", c.probe.train_fraction}}},
      {"analysis",
       {{"mlp_probe", c.analysis.mlp_probe},
        {"binarized_probe", c.analysis.binarized_probe},
        {"sparsity", c.analysis.sparsity},
        {"jacobian", c.analysis.jacobian},
        {"jacobian_samples", c.analysis.jacobian_samples},
        {"transfer", c.analysis.transfer},
        {"save_checkpoint", c.analysis.save_checkpoint},
        {"save_representations", c.analysis.save_representations}}},
      {"transfer_tasks", tasks}};
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  return parse_config_json(doc);
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_string(ss.str());
}

inline std::string emit_config(const ExperimentConfig& c) { return to_json_document(c).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Sweep records
// ---------------------------------------------------------------------------

struct RecordKey {
  Method method = Method::simclr;
  std::size_t repr_dim = 0;
  std::size_t projector_width = 0;  // first projector width, 0 without a projector
  double temperature = 0.0;
  std::uint64_t seed = 0;

  [[nodiscard]] std::string id() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s_D%zu_K%zu_t%g_s%llu", to_string(method), repr_dim,
                  projector_width, temperature, static_cast<unsigned long long>(seed));
    return buf;
  }
};

/// Keys in sweep order: repr_dims, then projector widths, temperatures, seeds.
inline std::vector<RecordKey> record_keys(const ExperimentConfig& c) {
  const std::vector<std::size_t> ks =
      c.sweep.projector_widths.empty()
          ? std::vector<std::size_t>{c.network.projector.first_width()}
          : c.sweep.projector_widths;
  const std::vector<double> temps = c.sweep.temperatures.empty()
                                        ? std::vector<double>{c.train.simclr.temperature}
                                        : c.sweep.temperatures;
  std::vector<RecordKey> out;
  for (auto d : c.sweep.repr_dims)
    for (auto k : ks)
      for (auto t : temps)
        for (auto s : c.seeds) out.push_back({c.train.method, d, k, t, s});
  return out;
}

/// Single-point config that reproduces exactly one record.
inline ExperimentConfig record_config(const ExperimentConfig& c, const RecordKey& key) {
  ExperimentConfig r = c;
  r.seeds = {key.seed};
  r.sweep.repr_dims = {key.repr_dim};
  r.sweep.projector_widths = c.sweep.projector_widths.empty()
                                 ? std::vector<std::size_t>{}
                                 : std::vector<std::size_t>{key.projector_width};
  r.sweep.temperatures =
      c.sweep.temperatures.empty() ? std::vector<double>{} : std::vector<double>{key.temperature};
  return r;
}

inline NetworkConfig network_for(const ExperimentConfig& c, const RecordKey& key,
                                 std::size_t n_classes) {
  NetworkConfig n = c.network;
  n.repr_dim = key.repr_dim;
  if (!c.sweep.projector_widths.empty()) n.projector.widths.front() = key.projector_width;
  if (key.method == Method::supervised) n.head = n_classes;
  n.init_seed = key.seed;
  return n;
}

inline TrainConfig train_for(const ExperimentConfig& c, const RecordKey& key) {
  TrainConfig t = c.train;
  t.simclr.temperature = key.temperature;
  t.seed = key.seed;
  t.sampler.seed = key.seed;
  return t;
}

inline ProbeConfig probe_for(const ExperimentConfig& c, const RecordKey& key, ProbeConfig::Kind k) {
  ProbeConfig p = c.probe;
  p.kind = k;
  p.seed = key.seed;
  return p;
}

struct ExperimentData {
  DataSplit split;
  std::vector<TransferTask> transfer;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (c.dataset.kind == DatasetConfig::Kind::synthetic) {
    d.split = gen_synthetic_split(c.dataset.synthetic);
  } else {
    d.split.train = load_cifar10_binary(c.dataset.cifar_train_files, c.dataset.cifar_input_dim);
    d.split.eval = load_cifar10_binary(c.dataset.cifar_eval_files, c.dataset.cifar_input_dim);
  }
  if (c.analysis.transfer) {
    for (const auto& t : c.transfer_tasks) {
      SyntheticSpec s;
      s.n_classes = t.n_classes;
      s.per_class_base = t.per_class_base;
      s.eval_per_class = t.eval_per_class;
      s.input_dim = c.network.input_dim;
      s.class_sep = t.class_sep;
      s.within_std = t.within_std;
      s.seed = t.seed;
      auto split = gen_synthetic_split(s);
      d.transfer.push_back({t.name, std::move(split.train), std::move(split.eval)});
    }
  }
  return d;
}

namespace detail {

inline json probe_json(const ProbeResult& p) {
  return json{{"kind", to_string(p.kind)},        {"widths", p.widths},
              {"train_accuracy", p.train_accuracy}, {"eval_accuracy", p.eval_accuracy},
              {"epochs", p.epochs},                 {"early_stopped", p.early_stopped},
              {"seed", p.seed},                     {"final_train_loss", p.final_train_loss}};
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t values_checksum(const std::vector<double>& v) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)));
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot write " + tmp);
    os << text;
    if (!os) throw Error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Runs one record end to end and returns its result document. Artifacts
/// land in `dir`.
inline json run_record(const ExperimentConfig& c, const ExperimentData& data, const RecordKey& key,
                       const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto t_start = std::chrono::steady_clock::now();
  json out;
  out["key"] = key.id();
  out["config"] = to_json_document(record_config(c, key));

  const auto ncfg = network_for(c, key, data.split.train.n_classes);
  auto net = init_network<double>(ncfg);
  const auto history = pretrain(net, data.split.train, train_for(c, key));
  const double t_pretrain = detail::seconds_since(t_start);
  json epochs = json::array();
  for (const auto& e : history.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"lr", e.lr},
                      {"wall_seconds", e.wall_seconds}});
  }
  out["train"] = {{"epochs", epochs},
                  {"steps", history.steps},
                  {"final_checksum", detail::hex64(history.final_checksum)},
                  {"max_distinct_labels_per_batch", history.max_distinct_labels_per_batch}};

  const auto t_probe = std::chrono::steady_clock::now();
  auto reps_train = extract_representations(net, data.split.train);
  auto reps_eval = extract_representations(net, data.split.eval);
  reps_train.source = key.id() + "/train";
  reps_eval.source = key.id() + "/eval";
  json probes;
  probes["linear"] =
      detail::probe_json(train_probe(reps_train, reps_eval, probe_for(c, key, ProbeConfig::Kind::linear)));
  if (c.analysis.mlp_probe) {
    probes["mlp"] =
        detail::probe_json(train_probe(reps_train, reps_eval, probe_for(c, key, ProbeConfig::Kind::mlp)));
  }
  if (c.analysis.binarized_probe) {
    probes["binarized"] = detail::probe_json(train_probe(
        binarize(reps_train), binarize(reps_eval), probe_for(c, key, ProbeConfig::Kind::linear)));
  }
  if (c.analysis.transfer) {
    json tr = json::array();
    const auto results =
        transfer_eval(net, data.transfer, probe_for(c, key, ProbeConfig::Kind::linear));
    for (std::size_t i = 0; i < results.size(); ++i) {
      auto j = detail::probe_json(results[i]);
      j["task"] = data.transfer[i].name;
      tr.push_back(j);
    }
    probes["transfer"] = tr;
  }
  out["probes"] = probes;
  const double t_probes = detail::seconds_since(t_probe);

  const auto t_analysis = std::chrono::steady_clock::now();
  if (c.analysis.sparsity) {
    const auto sp = sparsity_profile(reps_eval);
    out["sparsity"] = {{"median", sp.summary.median},
                       {"mean", sp.summary.mean},
                       {"frac_at_least_half", sp.summary.frac_at_least_half}};
    write_sparsity_examples_csv(sp, reps_eval, (dir / "sparsity_examples.csv").string());
    write_sparsity_dimensions_csv(sp, reps_eval.n, (dir / "sparsity_dimensions.csv").string());
  }
  if (c.analysis.jacobian) {
    const std::size_t m = std::min(c.analysis.jacobian_samples, data.split.eval.size());
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto jn = jacobian_dim_norms(net, gather_rows<double>(data.split.eval, idx));
    out["jacobian"] = {{"mean", jn.mean}, {"samples", m}, {"per_dimension", jn.per_dimension}};
  }
  const double t_an = detail::seconds_since(t_analysis);

  json artifacts;
  artifacts["parameter_checksum"] = detail::hex64(parameter_checksum(net));
  artifacts["reps_eval_checksum"] = detail::hex64(detail::values_checksum(reps_eval.values));
  if (c.analysis.save_checkpoint) {
    save_checkpoint(net, (dir / "checkpoint.bin").string());
    artifacts["checkpoint"] = "checkpoint.bin";
  }
  if (c.analysis.save_representations) {
    save_representations(reps_train, (dir / "reps_train.bin").string());
    save_representations(reps_eval, (dir / "reps_eval.bin").string());
    artifacts["reps_train"] = "reps_train.bin";
    artifacts["reps_eval"] = "reps_eval.bin";
  }
  out["artifacts"] = artifacts;
  out["wall_seconds"] = {{"pretrain", t_pretrain},
                         {"probes", t_probes},
                         {"analysis", t_an},
                         {"total", detail::seconds_since(t_start)}};
  out["status"] = "ok";
  return out;
}

// ---------------------------------------------------------------------------
// Summary tables
// ---------------------------------------------------------------------------

inline constexpr const char* kSummaryHeader = "# dimlab summary v1";
inline constexpr const char* kAggregateHeader = "# dimlab aggregate v1";

namespace detail {

inline std::string num(const json& j, const char* a, const char* b = nullptr) {
  const json* v = &j;
  if (!v->contains(a)) return "";
  v = &(*v)[a];
  if (b) {
    if (!v->contains(b)) return "";
    v = &(*v)[b];
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v->get<double>());
  return buf;
}

inline std::string fmt10(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

/// One row per successful record in sweep order. Contains no wall-times,
/// so identical configs and seeds give byte-identical files.
inline std::string summary_csv(const ExperimentConfig& c, const std::vector<RecordKey>& keys,
                               const std::vector<std::optional<json>>& results) {
  std::ostringstream os;
  os << kSummaryHeader << "\n";
  os << "method,D,K,temperature,seed,linear_acc,mlp_acc,binarized_acc,median_zero_fraction,"
        "mean_jacobian_norm";
  const bool transfer = c.analysis.transfer;
  if (transfer) {
    for (const auto& t : c.transfer_tasks) os << ",transfer_acc_" << t.name;
  }
  os << "\n";
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!results[i] || results[i]->value("status", "") != "ok") continue;
    const auto& r = *results[i];
    const auto& k = keys[i];
    os << to_string(k.method) << ',' << k.repr_dim << ',' << k.projector_width << ','
       << detail::fmt10(k.temperature) << ',' << k.seed << ','
       << detail::num(r["probes"], "linear", "eval_accuracy") << ','
       << detail::num(r["probes"], "mlp", "eval_accuracy") << ','
       << detail::num(r["probes"], "binarized", "eval_accuracy") << ','
       << detail::num(r, "sparsity", "median") << ',' << detail::num(r, "jacobian", "mean");
    if (transfer) {
      const auto& tr = r["probes"].contains("transfer") ? r["probes"]["transfer"] : json::array();
      for (std::size_t t = 0; t < c.transfer_tasks.size(); ++t) {
        os << ',' << (t < tr.size() ? detail::num(tr[t], "eval_accuracy") : "");
      }
    }
    os << "\n";
  }
  return os.str();
}

/// Mean and sample standard deviation over seeds for each sweep point.
inline std::string aggregate_csv(const std::vector<RecordKey>& keys,
                                 const std::vector<std::optional<json>>& results) {
  struct Acc {
    RecordKey key;
    std::map<std::string, std::vector<double>> cols;
  };
  const char* metrics[] = {"linear_acc", "mlp_acc", "binarized_acc", "median_zero_fraction",
                           "mean_jacobian_norm"};
  std::vector<Acc> groups;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!results[i] || results[i]->value("status", "") != "ok") continue;
    const auto& k = keys[i];
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Acc& a) {
      return a.key.repr_dim == k.repr_dim && a.key.projector_width == k.projector_width &&
             a.key.temperature == k.temperature;
    });
    if (it == groups.end()) {
      groups.push_back({k, {}});
      it = groups.end() - 1;
    }
    const auto& r = *results[i];
    auto add = [&](const char* name, const json& parent, const char* a, const char* b) {
      if (parent.contains(a) && parent[a].contains(b)) it->cols[name].push_back(parent[a][b].get<double>());
    };
    add("linear_acc", r["probes"], "linear", "eval_accuracy");
    add("mlp_acc", r["probes"], "mlp", "eval_accuracy");
    add("binarized_acc", r["probes"], "binarized", "eval_accuracy");
    add("median_zero_fraction", r, "sparsity", "median");
    add("mean_jacobian_norm", r, "jacobian", "mean");
  }
  std::ostringstream os;
  os << kAggregateHeader << "\n" << "method,D,K,temperature,n_seeds";
  for (const char* m : metrics) os << ',' << m << "_mean," << m << "_std";
  os << "\n";
  for (const auto& g : groups) {
    const auto n = g.cols.count("linear_acc") ? g.cols.at("linear_acc").size() : 0;
    os << to_string(g.key.method) << ',' << g.key.repr_dim << ',' << g.key.projector_width << ','
       << detail::fmt10(g.key.temperature) << ',' << n;
    for (const char* m : metrics) {
      const auto it = g.cols.find(m);
      if (it == g.cols.end() || it->second.empty()) {
        os << ",,";
        continue;
      }
      const auto& v = it->second;
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
      os << ',' << detail::fmt10(mean) << ',' << detail::fmt10(sd);
    }
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Sweep orchestration
// ---------------------------------------------------------------------------

/// Output root: explicit value, else the config's output_dir, else
/// $DIMLAB_OUT_ROOT/<name>, else ./dimlab_runs/<name>.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& c,
                                                const std::string& explicit_out = "") {
  if (!explicit_out.empty()) return explicit_out;
  if (!c.output_dir.empty()) return c.output_dir;
  if (const char* root = std::getenv("DIMLAB_OUT_ROOT"); root && *root) {
    return std::filesystem::path(root) / c.name;
  }
  return std::filesystem::path("dimlab_runs") / c.name;
}

struct SweepOptions {
  std::filesystem::path out_dir;
  std::size_t workers = 1;
  bool resume = false;
  std::ostream* log = &std::cerr;
};

struct SweepOutcome {
  std::vector<RecordKey> keys;
  std::vector<std::optional<json>> results;
  std::size_t computed = 0;
  std::size_t reused = 0;
  std::size_t failed = 0;
};

inline std::optional<json> read_result(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) return std::nullopt;
  try {
    return json::parse(is);
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

/// Re-aggregates summary.csv and aggregate.csv from the record directories.
inline SweepOutcome write_report(const std::filesystem::path& out_dir) {
  const auto cfg_path = out_dir / "config.resolved.json";
  if (!std::filesystem::exists(cfg_path)) {
    throw ConfigError("report: " + cfg_path.string() + " not found; not a sweep directory");
  }
  const auto cfg = parse_config(cfg_path.string());
  SweepOutcome o;
  o.keys = record_keys(cfg);
  for (const auto& k : o.keys) {
    auto r = read_result(out_dir / "records" / k.id() / "result.json");
    if (!r || r->value("status", "") != "ok") ++o.failed;
    o.results.push_back(std::move(r));
  }
  detail::write_text_atomic(out_dir / "summary.csv", summary_csv(cfg, o.keys, o.results));
  detail::write_text_atomic(out_dir / "aggregate.csv", aggregate_csv(o.keys, o.results));
  return o;
}

/// Executes every (sweep point, seed) record, flushing each result as it
/// completes. With resume, records whose result.json reports success are
/// reused as-is. Failures are recorded per record and do not stop the sweep.
inline SweepOutcome run_sweep(const ExperimentConfig& cfg, const SweepOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate();
  const fs::path out = opt.out_dir;
  const auto resolved = emit_config(cfg);
  const auto cfg_path = out / "config.resolved.json";
  if (fs::exists(cfg_path)) {
    if (!opt.resume) {
      throw ConfigError("sweep: " + out.string() +
                        " already holds a sweep; pass --resume or choose another --out");
    }
    if (!(parse_config(cfg_path.string()) == cfg)) {
      throw ConfigError("sweep: --resume with a config that differs from " + cfg_path.string());
    }
  }
  fs::create_directories(out / "records");
  detail::write_text_atomic(cfg_path, resolved);

  SweepOutcome o;
  o.keys = record_keys(cfg);
  o.results.assign(o.keys.size(), std::nullopt);
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < o.keys.size(); ++i) {
    auto r = read_result(out / "records" / o.keys[i].id() / "result.json");
    if (opt.resume && r && r->value("status", "") == "ok") {
      o.results[i] = std::move(r);
      ++o.reused;
    } else {
      todo.push_back(i);
    }
  }

  const ExperimentData data = load_experiment_data(cfg);
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::size_t done = 0;
  auto worker = [&] {
    for (;;) {
      const std::size_t t = next.fetch_add(1);
      if (t >= todo.size()) return;
      const std::size_t i = todo[t];
      const auto& key = o.keys[i];
      const auto dir = out / "records" / key.id();
      const auto t0 = std::chrono::steady_clock::now();
      json result;
      try {
        result = run_record(cfg, data, key, dir);
      } catch (const std::exception& e) {
        result = json{{"key", key.id()},
                      {"status", "failed"},
                      {"error", e.what()},
                      {"config", to_json_document(record_config(cfg, key))}};
      }
      fs::create_directories(dir);
      detail::write_text_atomic(dir / "result.json", result.dump(2) + "\n");
      std::lock_guard lock(mu);
      const bool ok = result["status"] == "ok";
      if (!ok) ++o.failed;
      ++o.computed;
      ++done;
      if (opt.log) {
        *opt.log << "[" << done << "/" << todo.size() << "] " << key.id() << ' '
                 << (ok ? "ok" : "FAILED: " + result["error"].get<std::string>()) << " ("
                 << detail::fmt10(std::round(detail::seconds_since(t0) * 10) / 10) << "s)\n";
      }
      o.results[i] = std::move(result);
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(opt.workers, todo.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  detail::write_text_atomic(out / "summary.csv", summary_csv(cfg, o.keys, o.results));
  detail::write_text_atomic(out / "aggregate.csv", aggregate_csv(o.keys, o.results));
  return o;
}

}  // namespace dimlab
