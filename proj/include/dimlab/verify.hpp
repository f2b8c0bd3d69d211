#pragma once

// Self-contained correctness checks shared by `dimlab verify` and the
// acceptance suite. Every check is deterministic (fixed seeds).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dimlab/analysis.hpp"
#include "dimlab/data.hpp"
#include "dimlab/evaluation.hpp"
#include "dimlab/gradcheck.hpp"
#include "dimlab/losses.hpp"
#include "dimlab/model.hpp"
#include "dimlab/oracles.hpp"
#include "dimlab/tensor.hpp"

namespace dimlab::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

using NtxentFn = std::function<Tensor(const Tensor&, const Tensor&, const SimclrParams&)>;

struct Options {
  /// NT-Xent under test; replaceable so a deliberately broken loss can be
  /// shown to be caught.
  NtxentFn ntxent = [](const Tensor& a, const Tensor& b, const SimclrParams& p) {
    return ntxent_loss(a, b, p);
  };
  std::size_t oracle_batches = 100;
  std::size_t confinement_instances = 20;
  std::size_t confinement_steps = 100;
  std::size_t collision_pairs = 1'000'000;
  double gradcheck_tol = 1e-5;
  double oracle_tol = 1e-10;
  double confinement_tol = 1e-10;
  std::filesystem::path scratch_dir = std::filesystem::temp_directory_path();
};

namespace detail {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor(shape, std::move(v), grad);
}

/// Values bounded away from zero so ReLU kinks are never straddled.
inline Tensor away_from_zero(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double m = 0.1 + rng.uniform();
    x = rng.bernoulli(0.5) ? m : -m;
  }
  return Tensor(shape, std::move(v), true);
}

inline oracle::Mat to_mat(const Tensor& t) {
  return {t.shape()[0], t.shape()[1], std::vector<double>(t.values().begin(), t.values().end())};
}

template <typename F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace detail

/// Finite-difference agreement for every primitive op and for the three
/// losses composed with a D=16 network.
inline CheckResult check_gradients(const Options& opt = {}) {
  return detail::timed("gradients", [&](CheckResult& r) {
    Rng rng(11);
    using detail::random_tensor;
    struct Case {
      std::string name;
      std::function<Tensor()> f;
      std::vector<Tensor> params;
    };
    std::vector<Case> cases;
    // Non-scalar ops are reduced with a fixed random weighting.
    auto reduce = [](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };
    {
      auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
      auto w = random_tensor({3, 4}, rng, 1.0, false);
      cases.push_back({"add", [=] { return reduce(add(a, b), w); }, {a, b}});
      cases.push_back({"sub", [=] { return reduce(sub(a, b), w); }, {a, b}});
      cases.push_back({"mul", [=] { return reduce(mul(a, b), w); }, {a, b}});
      cases.push_back({"scale", [=] { return reduce(scale(a, 2.5), w); }, {a}});
      cases.push_back({"square", [=] { return reduce(square(a), w); }, {a}});
      cases.push_back({"sum", [=] { return sum(mul(a, b)); }, {a, b}});
      cases.push_back({"mean", [=] { return mean(mul(a, b)); }, {a, b}});
      auto x = detail::away_from_zero({3, 4}, rng);
      cases.push_back({"relu", [=] { return reduce(relu(x), w); }, {x}});
      auto nrm = random_tensor({3, 4}, rng);
      cases.push_back({"l2_normalize", [=] { return reduce(l2_normalize(nrm), w); }, {nrm}});
    }
    {
      auto a = random_tensor({3, 5}, rng), b = random_tensor({5, 2}, rng);
      auto w = random_tensor({3, 2}, rng, 1.0, false);
      auto wt = random_tensor({5, 3}, rng, 1.0, false);
      auto bias = random_tensor({2}, rng);
      cases.push_back({"matmul", [=] { return reduce(matmul(a, b), w); }, {a, b}});
      cases.push_back({"transpose", [=] { return reduce(transpose(a), wt); }, {a}});
      cases.push_back({"add_bias", [=] { return reduce(add_bias(matmul(a, b), bias), w); },
                       {a, b, bias}});
      cases.push_back({"affine", [=] { return reduce(affine(a, b, bias), w); }, {a, b, bias}});
      auto c = random_tensor({2, 5}, rng);
      auto wc = random_tensor({5, 5}, rng, 1.0, false);
      cases.push_back({"concat_rows", [=] { return reduce(concat_rows(a, c), wc); }, {a, c}});
    }
    {
      auto x = random_tensor({6, 3}, rng);
      auto g = random_tensor({3}, rng), b = random_tensor({3}, rng);
      auto w = random_tensor({6, 3}, rng, 1.0, false);
      auto stats = std::make_shared<RunningStats<double>>(
          RunningStats<double>{Tensor::zeros({3}), Tensor::filled({3}, 1.0)});
      cases.push_back({"batch_norm",
                       [=] { return reduce(batch_norm(x, g, b, Mode::train, *stats), w); },
                       {x, g, b}});
    }
    {
      auto za = random_tensor({5, 4}, rng), zb = random_tensor({5, 4}, rng);
      cases.push_back({"ntxent", [=] { return opt.ntxent(za, zb, SimclrParams{0.5}); }, {za, zb}});
      cases.push_back({"vicreg", [=] { return vicreg_loss(za, zb, VicregParams{}); }, {za, zb}});
      auto logits = random_tensor({5, 3}, rng);
      const std::vector<std::int32_t> labels{0, 2, 1, 1, 0};
      cases.push_back({"cross_entropy",
                       [=] { return cross_entropy(logits, std::span<const std::int32_t>(labels)); },
                       {logits}});
    }
    // Composed losses through a D=16 network with a batch-normed MLP projector.
    // Two bias tensors are left out because their true gradients are exactly
    // zero by invariance, which a relative error cannot score: the
    // representation bias (units active on every row are shifted uniformly
    // and batch-norm removes the shift) and, for VICReg, the output bias
    // (every VICReg term is translation invariant).
    NetworkConfig nc;
    nc.input_dim = 6;
    nc.backbone_hidden = {10};
    nc.repr_dim = 16;
    nc.projector = ProjectorSpec::mlp({16, 8});
    nc.head = 3;
    nc.init_seed = 5;
    auto net = std::make_shared<Network<double>>(init_network<double>(nc));
    auto xa = random_tensor({8, 6}, rng, 1.0, false), xb = random_tensor({8, 6}, rng, 1.0, false);
    std::vector<Tensor> ntxent_params, vicreg_params, sup_params;
    for (const auto& p : net->trainable_parameters()) {
      const bool backbone = p.name.rfind("backbone.", 0) == 0;
      if (p.name.rfind("head.", 0) == 0 || backbone) sup_params.push_back(p.tensor);
      if (p.name.rfind("head.", 0) == 0 || p.name == "backbone.1.bias") continue;
      ntxent_params.push_back(p.tensor);
      if (p.name != "projector.1.bias") vicreg_params.push_back(p.tensor);
    }
    auto embed = [net](const Tensor& x) {
      return projector_forward(*net, backbone_forward(*net, x, Mode::train), Mode::train);
    };
    cases.push_back({"network+ntxent",
                     [=] { return opt.ntxent(embed(xa), embed(xb), SimclrParams{}); },
                     ntxent_params});
    cases.push_back({"network+vicreg",
                     [=] { return vicreg_loss(embed(xa), embed(xb), VicregParams{}); },
                     vicreg_params});
    const std::vector<std::int32_t> sup_labels{0, 1, 2, 0, 1, 2, 0, 1};
    cases.push_back({"network+cross_entropy",
                     [=] {
                       return cross_entropy(
                           head_forward(*net, backbone_forward(*net, xa, Mode::train)),
                           std::span<const std::int32_t>(sup_labels));
                     },
                     sup_params});

    double worst = 0.0;
    std::string worst_name, failures;
    for (auto& c : cases) {
      const auto rep = finite_difference_report<double>(c.f, c.params, GradCheckOptions{});
      const double e = rep.max_relative_error;
      if (e > worst) {
        worst = e;
        worst_name = c.name;
      }
      if (!(e < opt.gradcheck_tol)) {
        failures += " " + c.name + "=" + detail::fmt(e) + " (param " +
                    std::to_string(rep.worst_param) + "[" + std::to_string(rep.worst_index) +
                    "] analytic " + detail::fmt(rep.worst_analytic) + " numeric " +
                    detail::fmt(rep.worst_numeric) + ")";
      }
    }
    r.passed = failures.empty();
    r.detail = std::to_string(cases.size()) + " cases, worst " + worst_name + " " +
               detail::fmt(worst) + (failures.empty() ? "" : "; failing:" + failures);
  });
}

/// Library losses against the scalar-loop oracles on random small batches.
inline CheckResult check_loss_oracles(const Options& opt = {}) {
  return detail::timed("loss_oracles", [&](CheckResult& r) {
    Rng rng(23);
    double worst_nt = 0.0, worst_vic = 0.0, worst_ce = 0.0;
    for (std::size_t b = 0; b < opt.oracle_batches; ++b) {
      const std::size_t n = 2 + rng.uniform_index(7);  // 2..8
      const std::size_t d = 1 + rng.uniform_index(16);
      const double scale = 0.2 + 3.0 * rng.uniform();
      auto za = detail::random_tensor({n, d}, rng, scale, false);
      auto zb = detail::random_tensor({n, d}, rng, scale, false);
      const double tau = 0.05 + rng.uniform();
      const double nt = opt.ntxent(za, zb, SimclrParams{tau}).item();
      worst_nt = std::max(worst_nt, std::abs(nt - oracle::ntxent(detail::to_mat(za),
                                                                  detail::to_mat(zb), tau)));
      VicregParams vp;
      const double vic = vicreg_loss(za, zb, vp).item();
      const auto ref = oracle::vicreg(detail::to_mat(za), detail::to_mat(zb), vp.sim_coeff,
                                      vp.std_coeff, vp.cov_coeff, vp.std_epsilon, vp.std_target);
      worst_vic = std::max(worst_vic, std::abs(vic - ref.total));
      std::vector<std::int32_t> labels(n);
      for (auto& l : labels) l = static_cast<std::int32_t>(rng.uniform_index(d));
      const double ce = cross_entropy(za, std::span<const std::int32_t>(labels)).item();
      worst_ce = std::max(worst_ce, std::abs(ce - oracle::cross_entropy(
                                                      detail::to_mat(za),
                                                      std::span<const std::int32_t>(labels))));
    }
    r.passed = worst_nt < opt.oracle_tol && worst_vic < opt.oracle_tol && worst_ce < opt.oracle_tol;
    r.detail = std::to_string(opt.oracle_batches) + " batches, max |diff| ntxent " +
               detail::fmt(worst_nt) + ", vicreg " + detail::fmt(worst_vic) + ", xent " +
               detail::fmt(worst_ce);
  });
}

/// Backbone gradients under a frozen linear projector stay in span(W^T), and
/// training V alone leaves its complement component at the initial value.
inline CheckResult check_confinement(const Options& opt = {}) {
  return detail::timed("confinement", [&](CheckResult& r) {
    Rng rng(37);
    const std::size_t ks[] = {2, 4, 8};
    const std::size_t ds[] = {16, 32};
    const std::size_t d_in = 12, n = 8;
    double worst_residual = 0.0, worst_drift = 0.0;
    for (std::size_t i = 0; i < opt.confinement_instances; ++i) {
      const std::size_t k = ks[i % 3];
      const std::size_t dd = ds[(i / 3) % 2];
      const bool use_vicreg = i % 2 == 1;
      EmbeddingLoss<double> loss = [&](const std::vector<Tensor>& z) {
        return use_vicreg ? vicreg_loss(z[0], z[1], VicregParams{})
                          : opt.ntxent(z[0], z[1], SimclrParams{});
      };
      auto v = detail::random_tensor({dd, d_in}, rng, 1.0 / std::sqrt(double(d_in)), false);
      auto w = detail::random_tensor({k, dd}, rng, 1.0 / std::sqrt(double(dd)), false);
      std::vector<Tensor> views{detail::random_tensor({n, d_in}, rng, 1.0, false),
                                detail::random_tensor({n, d_in}, rng, 1.0, false)};
      worst_residual = std::max(worst_residual, gradient_confinement_check(v, w, views, loss));

      if (i < 6) {
        // Drift after plain gradient steps on V with W frozen.
        auto v0 = v.clone();
        auto vv = v.clone();
        vv.set_requires_grad(true);
        for (std::size_t s = 0; s < opt.confinement_steps; ++s) {
          vv.clear_grad();
          backward(linear_embedding_loss(vv, w, views, loss));
          auto vals = vv.mutable_values();
          const auto g = vv.grad();
          for (std::size_t j = 0; j < vals.size(); ++j) vals[j] -= 0.05 * g[j];
        }
        worst_drift = std::max(worst_drift, confinement_drift(v0, vv, w));
      }
    }
    r.passed = worst_residual < opt.confinement_tol && worst_drift < opt.confinement_tol;
    r.detail = "max residual " + detail::fmt(worst_residual) + ", max complement drift " +
               detail::fmt(worst_drift) + " after " + std::to_string(opt.confinement_steps) +
               " steps";
  });
}

/// Monte-Carlo sign-collision rate against 0.5^K within 4 standard errors.
inline CheckResult check_collisions(const Options& opt = {}) {
  return detail::timed("collisions", [&](CheckResult& r) {
    Rng rng(41);
    r.passed = true;
    for (std::size_t k : {2, 4, 8, 16}) {
      Rng s = rng.stream(k);
      const auto e = collision_probability_mc(k, opt.collision_pairs, s);
      const double z = std::abs(e.empirical_rate - e.analytic_rate) / e.std_error;
      if (!(z < 4.0)) r.passed = false;
      r.detail += "K=" + std::to_string(k) + " z=" + detail::fmt(z) + " ";
    }
  });
}

/// Binary formats round-trip bit-exactly; the CIFAR parser handles a
/// synthesized three-record fixture and rejects malformed files.
inline CheckResult check_formats(const Options& opt = {}) {
  return detail::timed("formats", [&](CheckResult& r) {
    namespace fs = std::filesystem;
    const fs::path dir = opt.scratch_dir / ("dimlab_verify_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    std::vector<std::string> bad;

    Rng rng(53);
    RepresentationMatrix reps;
    reps.n = 7;
    reps.d = 5;
    reps.source = "verify";
    for (std::size_t i = 0; i < reps.n * reps.d; ++i) {
      reps.values.push_back(rng.bernoulli(0.4) ? 0.0 : rng.uniform() * 3.0);
    }
    for (std::size_t i = 0; i < reps.n; ++i) reps.labels.push_back(static_cast<std::int32_t>(i % 3));
    save_representations(reps, (dir / "reps.bin").string());
    const auto reps2 = load_representations((dir / "reps.bin").string());
    if (!(reps2.n == reps.n && reps2.d == reps.d && reps2.values == reps.values &&
          reps2.labels == reps.labels)) {
      bad.push_back("representations");
    }

    NetworkConfig nc;
    nc.input_dim = 6;
    nc.backbone_hidden = {9};
    nc.repr_dim = 8;
    nc.projector = ProjectorSpec::mlp({4, 3});
    nc.head = 3;
    nc.init_seed = 3;
    const auto net = init_network<double>(nc);
    save_checkpoint(net, (dir / "net.ckpt").string());
    const auto net2 = load_checkpoint<double>((dir / "net.ckpt").string());
    bool same = net2.config == net.config;
    const auto pa = net.parameters(), pb = net2.parameters();
    same = same && pa.size() == pb.size();
    for (std::size_t i = 0; same && i < pa.size(); ++i) {
      same = pa[i].name == pb[i].name &&
             std::vector<double>(pa[i].tensor.values().begin(), pa[i].tensor.values().end()) ==
                 std::vector<double>(pb[i].tensor.values().begin(), pb[i].tensor.values().end());
    }
    if (!same) bad.push_back("checkpoint");

    Rng data_rng(59);
    const auto ds = gen_synthetic(3, 4, 5, 1.0, 1.0, 0.0, data_rng);
    save_dataset(ds, (dir / "data.bin").string());
    if (!(load_dataset((dir / "data.bin").string()) == ds)) bad.push_back("dataset");

    // Three CIFAR records: labels 3, 0, 9; pixel bytes from a fixed pattern.
    std::vector<unsigned char> bytes;
    const unsigned char labels[3] = {3, 0, 9};
    for (int rec = 0; rec < 3; ++rec) {
      bytes.push_back(labels[rec]);
      for (int p = 0; p < 3072; ++p) bytes.push_back(static_cast<unsigned char>((p * 7 + rec * 31) % 256));
    }
    auto write = [&](const fs::path& p, std::size_t len) {
      std::ofstream os(p, std::ios::binary);
      os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(len));
    };
    write(dir / "cifar.bin", bytes.size());
    const auto cifar = load_cifar10_binary({(dir / "cifar.bin").string()});
    bool cifar_ok = cifar.size() == 3 && cifar.labels == std::vector<std::int32_t>{3, 0, 9} &&
                    cifar.input_dim == 3072;
    for (int rec = 0; cifar_ok && rec < 3; ++rec) {
      for (int p = 0; p < 3072; ++p) {
        const double want = static_cast<double>((p * 7 + rec * 31) % 256) / 255.0;
        if (cifar.inputs[static_cast<std::size_t>(rec) * 3072 + static_cast<std::size_t>(p)] != want) {
          cifar_ok = false;
          break;
        }
      }
    }
    write(dir / "cifar_trunc.bin", bytes.size() - 100);
    try {
      load_cifar10_binary({(dir / "cifar_trunc.bin").string()});
      cifar_ok = false;
    } catch (const FormatError&) {
    }
    bytes[3073] = 10;
    write(dir / "cifar_label.bin", bytes.size());
    try {
      load_cifar10_binary({(dir / "cifar_label.bin").string()});
      cifar_ok = false;
    } catch (const FormatError&) {
    }
    if (!cifar_ok) bad.push_back("cifar10");
    fs::remove_all(dir);

    r.passed = bad.empty();
    if (bad.empty()) {
      r.detail = "representations, checkpoint, dataset, cifar10 ok";
    } else {
      for (const auto& b : bad) r.detail += b + " ";
      r.detail += "failed";
    }
  });
}

inline std::vector<CheckResult> run_all(const Options& opt = {}) {
  return {check_gradients(opt), check_loss_oracles(opt), check_confinement(opt),
          check_collisions(opt), check_formats(opt)};
}

}  // namespace dimlab::verify
