// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Experiment drivers: the component ladder (baseline → PL → SIPL iterations →
// GT-guided upper bound) over several seeds, and the held-out composite
// study that tracks PSNR across self-guided iterations.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "siplkit/corpus.hpp"
#include "siplkit/degrade.hpp"
#include "siplkit/evalkit.hpp"
#include "siplkit/restore.hpp"
#include "siplkit/train.hpp"

namespace siplkit {

/// Worker cap from SIPL_KIT_THREADS (default 1).
inline int thread_cap() {
  const char* env = std::getenv("SIPL_KIT_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("SIPL_KIT_THREADS must be a positive integer");
  return static_cast<int>(std::min<long>(v, 64));
}

/// Runs fn(0..n-1) on up to `threads` workers. Results must not depend on order.
template <typename Fn>
void parallel_for(int n, int threads, Fn fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::jthread> pool;
  for (int t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) fn(i);
    });
  }
}

struct Rung {
  std::string label;
  Regime regime;
  PiMode pi_mode;
  int iters;
};

/// The ordered ladder: baseline, +PL, SIPL with 0..3 self iterations, GT-guided.
inline std::vector<Rung> ladder_rungs() {
  return {{"baseline", Regime::baseline, PiMode::none, 0}, {"pl", Regime::pl, PiMode::none, 0},
          {"sipl-iter0", Regime::sipl, PiMode::self, 0},   {"sipl-iter1", Regime::sipl, PiMode::self, 1},
          {"sipl-iter2", Regime::sipl, PiMode::self, 2},   {"sipl-iter3", Regime::sipl, PiMode::self, 3},
          {"sipl-gt", Regime::sipl, PiMode::gt, 1}};
}

struct AblationPlan {
  std::string name = "fig8";
  std::vector<Rung> rungs = ladder_rungs();
  std::vector<std::uint64_t> seeds{0, 1, 2};
  TrainConfig train;            // regime and seed are set per run
  std::string eval_split = "test";
  double tolerance_db = 0.05;   // slack on the gated orderings
  int eval_batch = 8;
};

inline AblationPlan make_plan(const std::string& name, int n_seeds, const TrainConfig& train) {
  if (name != "fig8" && name != "ladder") throw ConfigError("unknown ablation plan '" + name + "' (expected fig8)");
  if (n_seeds < 1) throw ConfigError("--seeds must be positive");
  AblationPlan p;
  p.train = train;
  p.seeds.clear();
  for (int i = 0; i < n_seeds; ++i) p.seeds.push_back(train.seed + static_cast<std::uint64_t>(i));
  return p;
}

struct RungResult {
  std::string rung;
  std::uint64_t seed = 0;
  double psnr = std::numeric_limits<double>::quiet_NaN();
  double ssim = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // non-empty when this rung's training failed
};

struct RungSummary {
  std::string rung;
  double psnr_mean = 0.0, psnr_std = 0.0, ssim_mean = 0.0, ssim_std = 0.0;
  int n = 0;
};

struct OrderingCheck {
  std::string name;
  double lhs = 0.0, rhs = 0.0, tolerance = 0.0;
  bool passed = false;
};

struct AblationReport {
  std::vector<RungResult> rows;         // rung-major, then seed
  std::vector<RungResult> iter0_self;   // I_d used as its own PI at iteration 0
  std::vector<RungSummary> summary;     // in rung order
  std::vector<OrderingCheck> checks;    // gated orderings
  bool strict_ladder = false;           // baseline < pl < iter0 < iter1 < gt, reported only
  std::string config_hash, corpus_hash, version;
  std::map<std::uint64_t, Checkpoint> sipl_checkpoints;  // final sipl state per seed

  const RungSummary* find(const std::string& rung) const {
    for (const auto& s : summary) {
      if (s.rung == rung) return &s;
    }
    return nullptr;
  }

  std::string csv() const {
    std::vector<std::vector<std::string>> r;
    for (const auto& row : rows) r.push_back({row.rung, std::to_string(row.seed), fmt(row.psnr), fmt(row.ssim), row.error});
    return render_csv({"rung", "seed", "psnr", "ssim", "error"}, r);
  }

  std::string summary_csv() const {
    std::vector<std::vector<std::string>> r;
    for (const auto& s : summary) {
      r.push_back({s.rung, std::to_string(s.n), fmt(s.psnr_mean), fmt(s.psnr_std), fmt(s.ssim_mean), fmt(s.ssim_std)});
    }
    return render_csv({"rung", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"}, r);
  }

  std::string table() const {
    std::vector<std::vector<std::string>> r;
    double prev = std::numeric_limits<double>::quiet_NaN();
    const RungSummary* upper = find("sipl-gt");
    for (const auto& s : summary) {
      r.push_back({s.rung, fmt(s.psnr_mean, 3) + " ± " + fmt(s.psnr_std, 3), fmt(s.ssim_mean, 4) + " ± " + fmt(s.ssim_std, 4),
                   std::isnan(prev) ? "" : fmt(s.psnr_mean - prev, 3), upper ? fmt(upper->psnr_mean, 3) : "nan"});
      prev = s.psnr_mean;
    }
    std::string out = render_table({"rung", "psnr", "ssim", "delta", "upper_bound"}, r);
    for (const auto& c : checks) {
      out += (c.passed ? "PASS " : "FAIL ") + c.name + ": " + fmt(c.lhs, 3) + " vs " + fmt(c.rhs, 3) + " (tolerance " +
             fmt(c.tolerance, 2) + " dB)\n";
    }
    out += std::string("strict ladder ") + (strict_ladder ? "holds" : "does not hold") + "\n";
    if (!iter0_self.empty()) {
      double s = 0.0;
      for (const auto& r0 : iter0_self) s += r0.psnr;
      out += "sipl-iter0 with I_d as PI: " + fmt(s / static_cast<double>(iter0_self.size()), 3) + " dB\n";
    }
    out += "config " + config_hash + "\ncorpus " + corpus_hash + "\nversion " + version + "\n";
    return out;
  }

  std::string svg() const {
    Series s{"mean PSNR", {}, {}};
    std::string labels;
    for (std::size_t i = 0; i < summary.size(); ++i) {
      s.x.push_back(static_cast<double>(i));
      s.y.push_back(summary[i].psnr_mean);
      labels += (i ? ", " : "") + std::to_string(i) + "=" + summary[i].rung;
    }
    return render_svg_plot("Component ladder", "rung (" + labels + ")", "PSNR (dB)", {s});
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& r : rows) j["rows"].push_back({{"rung", r.rung}, {"seed", r.seed}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"error", r.error}});
    for (const auto& s : summary) {
      j["summary"].push_back({{"rung", s.rung}, {"n", s.n}, {"psnr_mean", s.psnr_mean}, {"psnr_std", s.psnr_std},
                              {"ssim_mean", s.ssim_mean}, {"ssim_std", s.ssim_std}});
    }
    for (const auto& c : checks) {
      j["checks"].push_back({{"name", c.name}, {"lhs", c.lhs}, {"rhs", c.rhs}, {"tolerance", c.tolerance}, {"passed", c.passed}});
    }
    j["strict_ladder"] = strict_ladder;
    j["config_hash"] = config_hash;
    j["corpus_hash"] = corpus_hash;
    j["version"] = version;
    return j;
  }

  void write(const std::filesystem::path& dir) const {
    write_text(dir / "ablation.csv", csv());
    write_text(dir / "ablation_summary.csv", summary_csv());
    write_text(dir / "ablation.txt", table());
    write_text(dir / "ablation.svg", svg());
    std::string lines;
    for (const auto& r : rows) {
      lines += nlohmann::json{{"rung", r.rung}, {"seed", r.seed}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"error", r.error},
                              {"config_hash", config_hash}, {"corpus_hash", corpus_hash}, {"version", version}}
                   .dump() +
               "\n";
    }
    write_text(dir / "ablation.jsonl", lines);
  }
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace detail

/// Trains each regime the plan needs once per seed, then evaluates every
/// rung. A failed training marks its rungs with the error and the plan goes on.
inline AblationReport run_ablation(const AblationPlan& plan, const CorpusManifest& corpus,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                   std::function<void(const std::string&)> log = {}) {
  plan.train.validate();
  const Dataset train = load_dataset(corpus, "train");
  const Dataset val = load_dataset(corpus, "val");
  const Dataset test = load_dataset(corpus, plan.eval_split);
  if (test.pairs.empty()) throw ConfigError("ablation: evaluation split '" + plan.eval_split + "' is empty");

  std::vector<Regime> regimes;
  for (const auto& r : plan.rungs) {
    if (std::find(regimes.begin(), regimes.end(), r.regime) == regimes.end()) regimes.push_back(r.regime);
  }

  AblationReport rep;
  rep.version = version_string();
  rep.corpus_hash = corpus.hash();
  {
    nlohmann::json cfg = to_json(plan.train);
    cfg["plan"] = {{"name", plan.name}, {"seeds", plan.seeds}, {"eval_split", plan.eval_split}};
    rep.config_hash = sha256_hex(cfg.dump());
  }

  struct Job {
    Regime regime;
    std::uint64_t seed;
    std::optional<Checkpoint> ckpt;
    std::string error;
  };
  std::vector<Job> jobs;
  for (auto seed : plan.seeds) {
    for (auto r : regimes) jobs.push_back(Job{r, seed, std::nullopt, {}});
  }
  std::mutex log_mu;
  parallel_for(static_cast<int>(jobs.size()), thread_cap(), [&](int i) {
    Job& job = jobs[static_cast<std::size_t>(i)];
    TrainConfig cfg = plan.train;
    cfg.regime = job.regime;
    cfg.seed = job.seed;
    FitOptions fo;
    if (out_dir) fo.out_dir = *out_dir / (regime_name(job.regime) + "_seed" + std::to_string(job.seed));
    try {
      job.ckpt = fit(cfg, train, val, fo).final_checkpoint;
    } catch (const Error& ex) {
      job.error = ex.what();
    }
    if (log) {
      std::lock_guard lock(log_mu);
      log("trained " + regime_name(job.regime) + " seed " + std::to_string(job.seed) + (job.error.empty() ? "" : ": " + job.error));
    }
  });

  auto find_job = [&](Regime r, std::uint64_t seed) -> const Job& {
    for (const auto& j : jobs) {
      if (j.regime == r && j.seed == seed) return j;
    }
    throw Error("internal: missing training job");
  };

  EvalOptions eo;
  eo.batch_size = plan.eval_batch;
  for (const auto& rung : plan.rungs) {
    for (auto seed : plan.seeds) {
      const Job& job = find_job(rung.regime, seed);
      RungResult row;
      row.rung = rung.label;
      row.seed = seed;
      if (!job.ckpt) {
        row.error = job.error;
      } else {
        const auto model = model_from_checkpoint(*job.ckpt);
        eo.inference = InferenceConfig{rung.iters, rung.pi_mode, true, false};
        const auto reports = evaluate(*model, test, eo);
        row.psnr = reports.back().mean_psnr;
        row.ssim = reports.back().mean_ssim;
      }
      rep.rows.push_back(row);
    }
  }
  for (auto seed : plan.seeds) {
    const Job* job = nullptr;
    for (const auto& j : jobs) {
      if (j.regime == Regime::sipl && j.seed == seed) job = &j;
    }
    if (!job || !job->ckpt) continue;
    rep.sipl_checkpoints.emplace(seed, *job->ckpt);
    const auto model = model_from_checkpoint(*job->ckpt);
    eo.inference = InferenceConfig{0, PiMode::self, true, true};
    const auto r0 = evaluate(*model, test, eo);
    rep.iter0_self.push_back(RungResult{"sipl-iter0-self-pi", seed, r0[0].mean_psnr, r0[0].mean_ssim, ""});
  }

  for (const auto& rung : plan.rungs) {
    std::vector<double> ps, ss;
    for (const auto& row : rep.rows) {
      if (row.rung == rung.label && row.error.empty()) {
        ps.push_back(row.psnr);
        ss.push_back(row.ssim);
      }
    }
    RungSummary s{rung.label};
    std::tie(s.psnr_mean, s.psnr_std) = detail::mean_std(ps);
    std::tie(s.ssim_mean, s.ssim_std) = detail::mean_std(ss);
    s.n = static_cast<int>(ps.size());
    rep.summary.push_back(s);
  }

  auto mean_of = [&](const std::string& rung) {
    const auto* s = rep.find(rung);
    return s ? s->psnr_mean : std::numeric_limits<double>::quiet_NaN();
  };
  auto check = [&](const std::string& name, const std::string& hi, const std::string& lo) {
    const double a = mean_of(hi), b = mean_of(lo);
    if (rep.find(hi) && rep.find(lo)) rep.checks.push_back({name, a, b, plan.tolerance_db, a >= b - plan.tolerance_db});
  };
  check("pl >= baseline", "pl", "baseline");
  check("sipl-iter1 >= sipl-iter0", "sipl-iter1", "sipl-iter0");
  check("sipl-gt >= sipl-iter1", "sipl-gt", "sipl-iter1");
  const std::vector<std::string> strict{"baseline", "pl", "sipl-iter0", "sipl-iter1", "sipl-gt"};
  rep.strict_ladder = true;
  for (std::size_t i = 0; i + 1 < strict.size(); ++i) {
    if (!(mean_of(strict[i]) < mean_of(strict[i + 1]))) rep.strict_ladder = false;
  }
  if (out_dir) rep.write(*out_dir);
  return rep;
}

// ---------------------------------------------------------------------------
// Held-out composite study

struct OodCurve {
  std::string spec;                 // e.g. "rain+noise25"
  std::vector<double> self_psnr;    // per iteration, pi_mode=self
  std::vector<double> none_psnr;    // per iteration, pi_mode=none control
};

struct OodReport {
  std::vector<OodCurve> curves;
  std::vector<double> mean_self;    // averaged over curves
  std::vector<double> mean_none;
  std::string config_hash, corpus_hash, version;

  std::vector<double> deltas() const {
    std::vector<double> d;
    for (double v : mean_self) d.push_back(v - mean_self.front());
    return d;
  }

  double control_spread() const {
    double s = 0.0;
    for (const auto& c : curves) {
      const auto [lo, hi] = std::minmax_element(c.none_psnr.begin(), c.none_psnr.end());
      if (lo != c.none_psnr.end()) s = std::max(s, *hi - *lo);
    }
    return s;
  }

  std::string csv() const {
    std::vector<std::vector<std::string>> r;
    for (const auto& c : curves) {
      for (std::size_t t = 0; t < c.self_psnr.size(); ++t) {
        r.push_back({c.spec, std::to_string(t), fmt(c.self_psnr[t]), fmt(c.none_psnr[t]), fmt(c.self_psnr[t] - c.self_psnr[0])});
      }
    }
    return render_csv({"spec", "iteration", "psnr_self", "psnr_none", "delta_self"}, r);
  }

  std::string table() const {
    std::vector<std::vector<std::string>> r;
    const auto d = deltas();
    for (std::size_t t = 0; t < mean_self.size(); ++t) {
      r.push_back({std::to_string(t), fmt(mean_self[t], 3), fmt(d[t], 3), fmt(mean_none[t], 3)});
    }
    return render_table({"iteration", "psnr_self", "delta", "psnr_none"}, r) + "control spread " + fmt(control_spread(), 9) +
           " dB\nconfig " + config_hash + "\ncorpus " + corpus_hash + "\nversion " + version + "\n";
  }

  std::string svg() const {
    std::vector<Series> s;
    for (const auto& c : curves) {
      Series a{c.spec + " self", {}, c.self_psnr};
      for (std::size_t t = 0; t < c.self_psnr.size(); ++t) a.x.push_back(static_cast<double>(t));
      s.push_back(a);
    }
    Series n{"mean none", {}, mean_none};
    for (std::size_t t = 0; t < mean_none.size(); ++t) n.x.push_back(static_cast<double>(t));
    s.push_back(n);
    return render_svg_plot("Held-out composite", "iteration", "PSNR (dB)", s);
  }

  void write(const std::filesystem::path& dir) const {
    write_text(dir / "ood.csv", csv());
    write_text(dir / "ood.txt", table());
    write_text(dir / "ood.svg", svg());
  }
};

struct OodOptions {
  int t_max = 2;
  int n_images = 24;
  std::uint64_t seed = 1234;
  std::int64_t height = 64, width = 64;
  int batch_size = 8;
};

inline std::vector<DegradationSpec> default_ood_specs() {
  std::vector<DegradationSpec> out;
  for (const char* s : {"rain+noise15", "rain+noise25", "rain+noise50"}) out.push_back(parse_task(s));
  return out;
}

/// Throws SpecNotHeldOut when a training task uses the same set of kinds.
inline void require_held_out(const DegradationSpec& spec, const CorpusManifest& training) {
  std::set<Kind> want(spec.kinds.begin(), spec.kinds.end());
  for (const auto& e : training.entries) {
    if (std::set<Kind>(e.spec.kinds.begin(), e.spec.kinds.end()) == want) {
      throw SpecNotHeldOut("composite " + spec.name() + " appears in the training corpus as task " + e.task);
    }
  }
}

/// Fresh pairs for one held-out recipe, quantized to 8 bits like the corpus.
inline Dataset make_ood_set(const DegradationSpec& spec, const OodOptions& opt) {
  Dataset d;
  d.task_names = {spec.name()};
  auto q8 = [](Image img) {
    for (auto& v : img.values()) v = static_cast<float>(to_u8(v)) / 255.0f;
    return img;
  };
  for (int i = 0; i < opt.n_images; ++i) {
    DegradationSpec s = spec;
    s.seed = derive_seed(opt.seed, "ood", static_cast<std::uint64_t>(i));
    const Image clean = q8(gen_clean(derive_seed(opt.seed, "ood.clean", static_cast<std::uint64_t>(i)), opt.height, opt.width));
    d.pairs.push_back(SamplePair{clean, q8(apply_degradation(clean, s)), s, 0});
  }
  return d;
}

inline OodReport run_ood_study(const std::vector<const Checkpoint*>& trained, const std::vector<DegradationSpec>& held_out,
                               const CorpusManifest& training, const OodOptions& opt = {}) {
  if (trained.empty()) throw ConfigError("ood study needs at least one checkpoint");
  if (opt.t_max < 0) throw ConfigError("t_max must be non-negative");
  for (const auto& s : held_out) require_held_out(s, training);
  OodReport rep;
  rep.version = version_string();
  rep.corpus_hash = training.hash();
  nlohmann::json cfg{{"t_max", opt.t_max}, {"n_images", opt.n_images}, {"seed", opt.seed}};
  for (const auto* c : trained) cfg["checkpoints"].push_back(c->hash());
  for (const auto& s : held_out) cfg["specs"].push_back(s.name());
  rep.config_hash = sha256_hex(cfg.dump());
  rep.mean_self.assign(opt.t_max + 1, 0.0);
  rep.mean_none.assign(opt.t_max + 1, 0.0);

  for (const auto& spec : held_out) {
    const Dataset data = make_ood_set(spec, opt);
    OodCurve curve{spec.name(), std::vector<double>(opt.t_max + 1, 0.0), std::vector<double>(opt.t_max + 1, 0.0)};
    for (const auto* ckpt : trained) {
      const auto model = model_from_checkpoint(*ckpt);
      EvalOptions eo;
      eo.batch_size = opt.batch_size;
      eo.with_ssim = false;
      eo.inference = InferenceConfig{opt.t_max, PiMode::self, true, false};
      const auto self = evaluate(*model, data, eo);
      eo.inference.pi_mode = PiMode::none;
      const auto none = evaluate(*model, data, eo);
      for (int t = 0; t <= opt.t_max; ++t) {
        curve.self_psnr[t] += self[t].mean_psnr / static_cast<double>(trained.size());
        curve.none_psnr[t] += none[t].mean_psnr / static_cast<double>(trained.size());
      }
    }
    for (int t = 0; t <= opt.t_max; ++t) {
      rep.mean_self[t] += curve.self_psnr[t] / static_cast<double>(held_out.size());
      rep.mean_none[t] += curve.none_psnr[t] / static_cast<double>(held_out.size());
    }
    rep.curves.push_back(std::move(curve));
  }
  return rep;
}

inline OodReport run_ood_study(const Checkpoint& trained, const DegradationSpec& held_out, int t_max,
                               const CorpusManifest& training, OodOptions opt = {}) {
  opt.t_max = t_max;
  return run_ood_study({&trained}, {held_out}, training, opt);
}

}  // namespace siplkit
