// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Set DIMLAB_ACCEPT_DIR to keep the sweep directories for inspection.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dimlab/experiment.hpp"
#include "dimlab/verify.hpp"

using namespace dimlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s criterion %d (%s): %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(double v, int prec = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

void report_check(int id, const verify::CheckResult& r, double budget_seconds) {
  const bool in_time = r.seconds < budget_seconds;
  report(id, r.name, r.passed && in_time,
         r.detail + " [" + fmt(r.seconds, 1) + "s, budget " + fmt(budget_seconds, 0) + "s]");
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Metrics of one (method, D, K, seed) record.
struct Rec {
  double linear = NAN, mlp = NAN, binarized = NAN, zero = NAN;
  std::size_t max_labels = 0;
  bool ok = false;
};

using Table = std::map<std::tuple<Method, std::size_t, std::size_t, std::uint64_t>, Rec>;

void collect(const SweepOutcome& o, Table& t) {
  for (std::size_t i = 0; i < o.keys.size(); ++i) {
    const auto& k = o.keys[i];
    Rec r;
    if (o.results[i] && (*o.results[i])["status"] == "ok") {
      const auto& j = *o.results[i];
      r.ok = true;
      r.linear = j["probes"]["linear"]["eval_accuracy"];
      r.mlp = j["probes"]["mlp"]["eval_accuracy"];
      r.binarized = j["probes"]["binarized"]["eval_accuracy"];
      r.zero = j["sparsity"]["median"];
      r.max_labels = j["train"]["max_distinct_labels_per_batch"];
    }
    t[{k.method, k.repr_dim, k.projector_width, k.seed}] = r;
  }
}

ExperimentConfig trend_config(Method m) {
  ExperimentConfig c;  // defaults: 10 classes, input_dim 64, ClassRestricted(2), Mlp([64,64,64])
  c.name = std::string("accept_") + to_string(m);
  c.seeds = {0, 1, 2};
  c.sweep.repr_dims = {16, 64, 256};
  c.train.method = m;
  c.train.base_lr = default_base_lr(m);
  c.analysis.jacobian = false;
  c.analysis.transfer = false;
  c.analysis.save_checkpoint = false;
  c.analysis.save_representations = false;
  return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main() {
  const char* keep = std::getenv("DIMLAB_ACCEPT_DIR");
  const fs::path root = keep && *keep ? fs::path(keep)
                                      : fs::temp_directory_path() /
                                            ("dimlab_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);

  verify::Options vopt;
  vopt.scratch_dir = root;
  report_check(1, verify::check_gradients(vopt), 120);
  report_check(2, verify::check_loss_oracles(vopt), 60);
  report_check(3, verify::check_confinement(vopt), 60);
  report_check(4, verify::check_collisions(vopt), 120);

  const Method methods[] = {Method::simclr, Method::vicreg};
  Table trend;
  std::size_t failed_records = 0;
  auto t5 = std::chrono::steady_clock::now();
  for (Method m : methods) {
    const auto cfg = trend_config(m);
    SweepOptions o;
    o.out_dir = root / cfg.name;
    o.log = &std::cout;
    const auto out = run_sweep(cfg, o);
    failed_records += out.failed;
    collect(out, trend);
  }
  const double t5s = seconds_since(t5);

  auto rec = [&](Method m, std::size_t d, std::uint64_t s) -> const Rec& {
    return trend.at({m, d, 64, s});
  };
  auto mean_over_seeds = [&](Method m, std::size_t d, auto field) {
    double acc = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) acc += field(rec(m, d, s));
    return acc / 3.0;
  };
  const auto linear = [](const Rec& r) { return r.linear; };

  // 5: width helps SSL.
  {
    bool ok = failed_records == 0 && t5s < 30 * 60;
    std::string detail;
    for (Method m : methods) {
      const double a16 = mean_over_seeds(m, 16, linear);
      const double a64 = mean_over_seeds(m, 64, linear);
      const double a256 = mean_over_seeds(m, 256, linear);
      ok = ok && a256 - a16 >= 0.02 && a64 >= a16 - 0.01 && a256 >= a64 - 0.01;
      detail += std::string(to_string(m)) + " mean linear D16/64/256 = " + fmt(a16) + "/" +
                fmt(a64) + "/" + fmt(a256) + "; ";
    }
    detail += std::to_string(failed_records) + " failed records [" + fmt(t5s, 0) + "s, budget 1800s]";
    report(5, "width_helps_ssl", ok, detail);
  }

  // 6: sparsity emergence, D=256/K=32 against D=32/K=256.
  {
    const auto t6 = std::chrono::steady_clock::now();
    Table sp;
    bool ok = true;
    for (Method m : methods) {
      for (auto [d, k] : {std::pair<std::size_t, std::size_t>{256, 32}, {32, 256}}) {
        auto cfg = trend_config(m);
        cfg.name += "_sparsity_D" + std::to_string(d);
        cfg.sweep.repr_dims = {d};
        cfg.sweep.projector_widths = {k};
        cfg.analysis.mlp_probe = false;
        cfg.analysis.binarized_probe = false;
        SweepOptions o;
        o.out_dir = root / cfg.name;
        o.log = &std::cout;
        const auto out = run_sweep(cfg, o);
        ok = ok && out.failed == 0;
        for (std::size_t i = 0; i < out.keys.size(); ++i) {
          const auto& key = out.keys[i];
          Rec r;
          if (out.results[i] && (*out.results[i])["status"] == "ok") {
            r.ok = true;
            r.zero = (*out.results[i])["sparsity"]["median"];
          }
          sp[{m, d, k, key.seed}] = r;
        }
      }
    }
    std::string detail;
    for (Method m : methods) {
      detail += std::string(to_string(m)) + " median zero fraction wide/narrow:";
      for (std::uint64_t s = 0; s < 3; ++s) {
        const auto& w = sp[{m, 256, 32, s}];
        const auto& n = sp[{m, 32, 256, s}];
        ok = ok && w.ok && n.ok && w.zero > n.zero;
        detail += " " + fmt(w.zero, 3) + "/" + fmt(n.zero, 3);
      }
      detail += "; ";
    }
    const double secs = seconds_since(t6);
    ok = ok && secs < 15 * 60;
    report(6, "sparsity_emergence", ok, detail + "[" + fmt(secs, 0) + "s, budget 900s]");
  }

  // 7: binarization gap shrinks with width and is small at D=256.
  {
    bool ok = failed_records == 0;
    std::string detail;
    for (Method m : methods) {
      int narrower = 0;
      double worst256 = 0.0;
      for (std::uint64_t s = 0; s < 3; ++s) {
        const double g16 = std::abs(rec(m, 16, s).binarized - rec(m, 16, s).linear);
        const double g256 = std::abs(rec(m, 256, s).binarized - rec(m, 256, s).linear);
        narrower += g256 <= g16;
        worst256 = std::max(worst256, g256);
      }
      ok = ok && narrower >= 2 && worst256 <= 0.03;
      detail += std::string(to_string(m)) + " gap(256) <= gap(16) in " + std::to_string(narrower) +
                "/3 seeds, max gap(256) " + fmt(worst256) + "; ";
    }
    report(7, "binarization_gap", ok, detail);
  }

  // 8: MLP-minus-linear probe gap does not grow with width; MLP never trails by > 1 point.
  {
    bool ok = failed_records == 0;
    std::string detail;
    double worst = 1.0;
    for (Method m : methods) {
      const auto gap = [](const Rec& r) { return r.mlp - r.linear; };
      const double g16 = mean_over_seeds(m, 16, gap);
      const double g256 = mean_over_seeds(m, 256, gap);
      ok = ok && g256 <= g16 + 0.01;
      for (std::size_t d : {16, 64, 256})
        for (std::uint64_t s = 0; s < 3; ++s) worst = std::min(worst, gap(rec(m, d, s)));
      detail += std::string(to_string(m)) + " mean gap D16 " + fmt(g16) + ", D256 " + fmt(g256) + "; ";
    }
    ok = ok && worst >= -0.01;
    report(8, "probe_gap", ok, detail + "min mlp-linear " + fmt(worst));
  }

  // 9: class-restricted batches never mix more than two labels.
  {
    std::size_t worst = 0;
    bool all = failed_records == 0;
    for (const auto& [k, r] : trend) {
      all = all && r.ok;
      worst = std::max(worst, r.max_labels);
    }
    report(9, "sampler_contract", all && worst <= 2 && worst >= 1,
           "max distinct labels per batch " + std::to_string(worst) + " over " +
               std::to_string(trend.size()) + " training runs");
  }

  // 10: determinism and formats.
  {
    ExperimentConfig c;
    c.name = "accept_determinism";
    c.seeds = {0, 1};
    c.dataset.synthetic.per_class_base = 40;
    c.dataset.synthetic.eval_per_class = 40;
    c.sweep.repr_dims = {16, 32};
    c.train.epochs = 3;
    c.train.sampler.batch_size = 32;
    c.probe.epochs = 10;
    c.analysis.jacobian_samples = 16;
    for (auto& t : c.transfer_tasks) t.per_class_base = t.eval_per_class = 20;
    SweepOptions a, b;
    a.out_dir = root / "det_a";
    b.out_dir = root / "det_b";
    a.log = b.log = nullptr;
    const auto oa = run_sweep(c, a);
    const auto ob = run_sweep(c, b);
    const auto sa = slurp(a.out_dir / "summary.csv");
    const auto sb = slurp(b.out_dir / "summary.csv");
    const std::size_t failed = oa.failed + ob.failed;
    const bool same =
        sa == sb && slurp(a.out_dir / "aggregate.csv") == slurp(b.out_dir / "aggregate.csv");
    const auto formats = verify::check_formats(vopt);
    report(10, "determinism_and_formats", failed == 0 && same && formats.passed,
           std::to_string(oa.keys.size()) + " records x 2 runs, " + std::to_string(failed) +
               " failed; summary.csv " + (same ? "byte-identical" : "differs") + "; " +
               formats.detail);
  }

  if (!(keep && *keep)) fs::remove_all(root);
  std::printf("%s: %d criterion(s) failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
