#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dimlab/dimlab.hpp"

namespace fs = std::filesystem;
using namespace dimlab;

namespace {

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  auto cfg = path.empty() ? parse_config_string("{}") : parse_config(path);
  if (seed_override) cfg.seeds = {*seed_override};
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

int cmd_sweep(const std::string& config, const std::string& out, std::size_t workers,
              std::optional<std::uint64_t> seed, bool resume) {
  const auto cfg = load_config(config, seed);
  SweepOptions opt;
  opt.out_dir = resolve_output_dir(cfg, out);
  opt.workers = workers;
  opt.resume = resume;
  const auto o = run_sweep(cfg, opt);
  std::cout << "records: " << o.keys.size() << " (computed " << o.computed << ", reused "
            << o.reused << ", failed " << o.failed << ")\n"
            << "summary: " << (opt.out_dir / "summary.csv").string() << "\n";
  return o.failed == 0 ? 0 : 1;
}

int cmd_pretrain(const std::string& config, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  const auto cfg = load_config(config, seed);
  const auto key = record_keys(cfg).front();
  const fs::path dir = resolve_output_dir(cfg, out);
  fs::create_directories(dir);
  const auto data = load_experiment_data(cfg);
  auto net = init_network<double>(network_for(cfg, key, data.split.train.n_classes));
  const auto history = pretrain(net, data.split.train, train_for(cfg, key));
  save_checkpoint(net, (dir / "checkpoint.bin").string());
  save_representations(extract_representations(net, data.split.train),
                       (dir / "reps_train.bin").string());
  save_representations(extract_representations(net, data.split.eval),
                       (dir / "reps_eval.bin").string());
  json epochs = json::array();
  for (const auto& e : history.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"lr", e.lr},
                      {"wall_seconds", e.wall_seconds}});
  }
  write_json(dir / "history.json",
             {{"key", key.id()},
              {"epochs", epochs},
              {"final_checksum", detail::hex64(history.final_checksum)}});
  std::ofstream(dir / "config.resolved.json") << emit_config(record_config(cfg, key));
  std::cout << key.id() << ": final loss " << history.epochs.back().mean_loss << ", wrote "
            << dir.string() << "\n";
  return 0;
}

int cmd_probe(const std::string& config, const std::string& train_path,
              const std::string& eval_path, const std::string& kind, bool binarized,
              const std::string& out, std::optional<std::uint64_t> seed) {
  const auto cfg = load_config(config, seed);
  ProbeConfig pc = cfg.probe;
  pc.kind = kind == "mlp" ? ProbeConfig::Kind::mlp : ProbeConfig::Kind::linear;
  pc.seed = cfg.seeds.front();
  auto train = load_representations(train_path);
  auto eval = load_representations(eval_path);
  if (binarized) {
    train = binarize(train);
    eval = binarize(eval);
  }
  auto j = detail::probe_json(train_probe(train, eval, pc));
  j["binarized"] = binarized;
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(out, j);
  }
  return 0;
}

int cmd_analyze(const std::string& reps_path, const std::string& out,
                const std::vector<std::size_t>& collision_ks, std::size_t pairs,
                const std::string& checkpoint, const std::string& config,
                std::size_t jacobian_samples) {
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  fs::create_directories(dir);
  json summary;
  if (!reps_path.empty()) {
    const auto reps = load_representations(reps_path);
    const auto sp = sparsity_profile(reps);
    write_sparsity_examples_csv(sp, reps, (dir / "sparsity_examples.csv").string());
    write_sparsity_dimensions_csv(sp, reps.n, (dir / "sparsity_dimensions.csv").string());
    const auto bin = binarize(reps);
    summary["sparsity"] = {{"median", sp.summary.median},
                           {"mean", sp.summary.mean},
                           {"frac_at_least_half", sp.summary.frac_at_least_half}};
    summary["binarization"] = {{"distinct_rows", count_distinct_rows(reps)},
                               {"distinct_binarized_rows", count_distinct_rows(bin)}};
  }
  if (!collision_ks.empty()) {
    std::ofstream os(dir / "collisions.csv");
    os << "K,n_pairs,empirical_rate,analytic_rate,std_error\n";
    Rng root(0);
    for (auto k : collision_ks) {
      Rng rng = root.stream(k);
      const auto e = collision_probability_mc(k, pairs, rng);
      os << e.k << ',' << e.n_pairs << ',' << detail::fmt10(e.empirical_rate) << ','
         << detail::fmt10(e.analytic_rate) << ',' << detail::fmt10(e.std_error) << "\n";
    }
  }
  if (!checkpoint.empty()) {
    const auto cfg = load_config(config, std::nullopt);
    const auto net = load_checkpoint<double>(checkpoint);
    const auto data = load_experiment_data(cfg);
    const std::size_t m = std::min(jacobian_samples, data.split.eval.size());
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto jn = jacobian_dim_norms(net, gather_rows<double>(data.split.eval, idx));
    std::ofstream os(dir / "jacobian.csv");
    os << "dim,mean_norm\n";
    for (std::size_t j = 0; j < jn.per_dimension.size(); ++j) {
      os << j << ',' << detail::fmt10(jn.per_dimension[j]) << "\n";
    }
    summary["jacobian_mean"] = jn.mean;
  }
  write_json(dir / "analysis.json", summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_verify(bool quick) {
  verify::Options opt;
  if (quick) opt.collision_pairs = 200'000;
  bool all = true;
  for (const auto& r : verify::run_all(opt)) {
    std::printf("%-4s %-13s %s (%.1fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.c_str(), r.seconds);
    all = all && r.passed;
  }
  return all ? 0 : 1;
}

int cmd_report(const std::string& out) {
  const auto o = write_report(out);
  std::cout << "records: " << o.keys.size() << " (missing or failed " << o.failed << ")\n";
  return o.failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dimlab: backbone width vs projector width experiments"};
  app.require_subcommand(1);

  std::string config, out;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
  bool resume = false;

  auto* sweep = app.add_subcommand("sweep", "run every (sweep point, seed) record");
  sweep->add_option("--config", config, "experiment config (JSON)")->required();
  sweep->add_option("--out", out, "output directory");
  sweep->add_option("--workers", workers, "records run concurrently")->check(CLI::PositiveNumber);
  sweep->add_option("--seed-override", seed, "replace the seeds list with one seed");
  sweep->add_flag("--resume", resume, "reuse completed records in --out");

  auto* pre = app.add_subcommand("pretrain", "pretrain the first sweep point");
  pre->add_option("--config", config, "experiment config (JSON)");
  pre->add_option("--out", out, "output directory");
  pre->add_option("--seed-override", seed, "seed to use");

  std::string train_reps, eval_reps, kind = "linear";
  bool binarized = false;
  auto* probe = app.add_subcommand("probe", "fit a probe on saved representations");
  probe->add_option("--train", train_reps, "training representations")->required();
  probe->add_option("--eval", eval_reps, "evaluation representations")->required();
  probe->add_option("--config", config, "experiment config supplying probe settings");
  probe->add_option("--kind", kind, "linear or mlp")->check(CLI::IsMember({"linear", "mlp"}));
  probe->add_flag("--binarize", binarized, "binarize both splits first");
  probe->add_option("--out", out, "write the result JSON here instead of stdout");
  probe->add_option("--seed-override", seed, "probe seed");

  std::string reps, checkpoint;
  std::vector<std::size_t> collision_ks;
  std::size_t pairs = 1'000'000, jac_samples = 64;
  auto* analyze = app.add_subcommand("analyze", "sparsity, binarization, collisions, Jacobians");
  analyze->add_option("--reps", reps, "representation matrix");
  analyze->add_option("--out", out, "output directory");
  analyze->add_option("--collisions", collision_ks, "K values for the collision Monte-Carlo");
  analyze->add_option("--pairs", pairs, "Monte-Carlo pairs per K");
  analyze->add_option("--checkpoint", checkpoint, "network for per-dimension Jacobian norms");
  analyze->add_option("--config", config, "config supplying the dataset for Jacobians");
  analyze->add_option("--jacobian-samples", jac_samples, "eval rows used for Jacobians");

  bool quick = false;
  auto* ver = app.add_subcommand("verify", "run the built-in correctness checks");
  ver->add_flag("--quick", quick, "fewer Monte-Carlo pairs");

  auto* rep = app.add_subcommand("report", "re-aggregate CSVs from a sweep directory");
  rep->add_option("--out", out, "sweep directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*sweep) return cmd_sweep(config, out, workers, seed, resume);
    if (*pre) return cmd_pretrain(config, out, seed);
    if (*probe) return cmd_probe(config, train_reps, eval_reps, kind, binarized, out, seed);
    if (*analyze) return cmd_analyze(reps, out, collision_ks, pairs, checkpoint, config, jac_samples);
    if (*ver) return cmd_verify(quick);
    if (*rep) return cmd_report(out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
