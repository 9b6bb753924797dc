// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// sipl-kit: corpus generation, training, evaluation, iterative inference,
// ablation and report rendering behind one entry point.

#include <CLI11.hpp>

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "siplkit/siplkit.hpp"

namespace fs = std::filesystem;
using namespace siplkit;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

/// Config resolution shared by every subcommand: defaults, then --config, then
/// per-field --section.key overrides, then the subcommand's shorthand flags.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> fields;  // "section.key" -> text; empty = unset
  std::deque<std::string> shorthand_values;  // stable addresses for CLI11
  std::vector<std::pair<std::string, std::string*>> shorthands;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config_path, "JSON run config; unknown keys are an error")->check(CLI::ExistingFile);
    const json defaults = RunConfig{}.to_json();
    for (const auto& [key, def] : config_fields(defaults)) {
      fields[key];
      cmd.add_option("--" + key, fields[key], "override " + key + " (default " + def + ")")->group("Config fields");
    }
  }

  void shorthand(CLI::App& cmd, const std::string& flag, const std::string& key, const std::string& help) {
    std::string* slot = &shorthand_values.emplace_back();
    cmd.add_option(flag, *slot, help + " (same as --" + key + ")");
    shorthands.emplace_back(key, slot);
  }

  RunConfig resolve() const {
    json cfg = RunConfig{}.to_json();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      json file;
      try {
        file = json::parse(in);
      } catch (const json::exception& ex) {
        throw ConfigError("cannot parse " + config_path + ": " + ex.what());
      }
      cfg = RunConfig::from_json(file).to_json();
    }
    for (const auto& [key, text] : fields) {
      if (!text.empty()) apply_override(cfg, key, text);
    }
    for (const auto& [key, slot] : shorthands) {
      if (!slot->empty()) apply_override(cfg, key, *slot);
    }
    RunConfig rc = RunConfig::from_json(cfg);
    rc.train.validate();
    rc.inference.validate();
    return rc;
  }
};

void echo_config(const fs::path& dir, const RunConfig& rc) {
  write_text(dir / "effective_config.json", rc.to_json().dump(2) + "\n");
}

/// Keeps the caller's corpus/inference sections and takes the model and
/// training sections from the checkpoint.
RunConfig with_checkpoint(RunConfig rc, const Checkpoint& ck) {
  rc.train = ck.config;
  return rc;
}

Image load_image(const fs::path& p) { return read_png(p); }

int cmd_gen_data(const ConfigFlags& flags, const fs::path& out) {
  const RunConfig rc = flags.resolve();
  CorpusOptions opt;
  opt.out_dir = out;
  opt.height = rc.corpus.height;
  opt.width = rc.corpus.width;
  opt.val_fraction = rc.corpus.val_fraction;
  opt.test_fraction = rc.corpus.test_fraction;
  const CorpusManifest m = build_corpus(parse_task_list(rc.corpus.tasks), rc.corpus.n_per_task, rc.corpus.seed, opt);
  echo_config(out, rc);
  std::cout << "manifest " << m.manifest_path().string() << "\n";
  std::cout << "pairs " << m.entries.size() << "\n";
  std::cout << "corpus_hash " << m.hash() << "\n";
  return kOk;
}

int cmd_train(const ConfigFlags& flags, const fs::path& data, const fs::path& out, const std::string& resume) {
  const RunConfig rc = flags.resolve();
  const CorpusManifest m = load_manifest(data);
  echo_config(out, rc);
  std::optional<Checkpoint> from;
  FitOptions opt;
  opt.out_dir = out;
  if (!resume.empty()) {
    from = Checkpoint::load(resume);
    opt.resume = &*from;
  }
  opt.on_epoch = [](const ValidationReport& v) {
    std::cerr << "epoch " << v.epoch << " val_psnr " << fmt(v.mean_psnr, 3) << "\n";
  };
  const FitResult r = fit(rc.train, m, opt);
  std::cout << "final " << (out / "final.ckpt").string() << " sha256 " << r.final_checkpoint.hash() << "\n";
  if (r.best_checkpoint) std::cout << "best " << (out / "best.ckpt").string() << " epoch " << r.best_checkpoint->epoch << "\n";
  return kOk;
}

int cmd_eval(const ConfigFlags& flags, const fs::path& ckpt_path, const fs::path& data, const std::string& split,
             const fs::path& out) {
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  const RunConfig rc = with_checkpoint(flags.resolve(), ck);
  const auto model = model_from_checkpoint(ck);
  const Dataset ds = load_dataset(load_manifest(data), split);
  if (ds.pairs.empty()) throw IoError("split '" + split + "' of " + data.string() + " is empty");
  EvalOptions eo;
  eo.inference = rc.inference;
  const auto reports = evaluate(*model, ds, eo);
  std::string lines;
  for (const auto& r : reports) lines += r.to_json().dump() + "\n";
  const CostReport cost = cost_report(*model, height(ds.pairs[0].degraded), width(ds.pairs[0].degraded));
  echo_config(out, rc);
  write_text(out / "metrics.jsonl", lines);
  write_text(out / "metrics.csv", render_csv(metrics_header(), metrics_rows(reports)));
  const std::string table = render_table(metrics_header(), metrics_rows(reports)) + "degraded input psnr " +
                            fmt(degraded_psnr(ds), 4) + "\n";
  write_text(out / "metrics.txt", table);
  write_text(out / "cost.json", cost.to_json().dump(2) + "\n");
  std::cout << table;
  return kOk;
}

int cmd_infer(const ConfigFlags& flags, const fs::path& ckpt_path, const fs::path& input, const std::string& gt_path,
              const fs::path& out) {
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  const RunConfig rc = with_checkpoint(flags.resolve(), ck);
  const auto model = model_from_checkpoint(ck);
  const Image degraded = load_image(input);
  std::optional<Image> gt;
  if (!gt_path.empty()) gt = load_image(gt_path);
  const RestorationTrace trace = infer_iterative(*model, degraded, rc.inference, gt ? &*gt : nullptr);
  echo_config(out, rc);
  json meta{{"input", input.string()}, {"iters", rc.inference.iters}, {"pi_mode", pi_mode_name(rc.inference.pi_mode)}};
  for (std::size_t t = 0; t < trace.outputs.size(); ++t) {
    const std::string name = "iter_" + std::to_string(t) + ".png";
    write_png(out / name, clip01(trace.outputs[t]));
    meta["outputs"].push_back(name);
  }
  if (!trace.per_iter_psnr.empty()) meta["per_iter_psnr"] = trace.per_iter_psnr;
  write_text(out / "trace.json", meta.dump(2) + "\n");
  std::cout << "wrote " << trace.outputs.size() << " iterates to " << out.string() << "\n";
  for (std::size_t t = 0; t < trace.per_iter_psnr.size(); ++t) {
    std::cout << "iter " << t << " psnr " << fmt(trace.per_iter_psnr[t], 4) << "\n";
  }
  return kOk;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& plan_name, int seeds, const std::string& data,
               const fs::path& out, bool ood, int ood_iters) {
  const RunConfig rc = flags.resolve();
  CorpusManifest m;
  if (!data.empty()) {
    m = load_manifest(data);
  } else {
    CorpusOptions opt;
    opt.out_dir = out / "data";
    opt.height = rc.corpus.height;
    opt.width = rc.corpus.width;
    opt.val_fraction = rc.corpus.val_fraction;
    opt.test_fraction = rc.corpus.test_fraction;
    m = build_corpus(parse_task_list(rc.corpus.tasks), rc.corpus.n_per_task, rc.corpus.seed, opt);
  }
  echo_config(out, rc);
  const AblationPlan plan = make_plan(plan_name, seeds, rc.train);
  const AblationReport rep = run_ablation(plan, m, out, [](const std::string& s) { std::cerr << s << "\n"; });
  std::cout << rep.table();
  if (ood) {
    std::vector<const Checkpoint*> cks;
    for (const auto& [_, c] : rep.sipl_checkpoints) cks.push_back(&c);
    OodOptions oo;
    oo.t_max = ood_iters;
    oo.height = rc.corpus.height;
    oo.width = rc.corpus.width;
    const OodReport o = run_ood_study(cks, default_ood_specs(), m, oo);
    o.write(out);
    std::cout << o.table();
  }
  return kOk;
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& ex) {
      throw IoError("malformed line in " + p.string() + ": " + ex.what());
    }
  }
  return out;
}

/// Renders plots and tables from stored logs and reports under `in`.
int cmd_report(const fs::path& in, const fs::path& out) {
  if (!fs::is_directory(in)) throw IoError("report input " + in.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  int rendered = 0;

  // PSNR vs epoch, averaged over runs of the same regime.
  std::map<std::string, std::map<int, std::pair<double, int>>> by_regime;
  for (const auto& f : files) {
    if (f.filename() != "val_log.jsonl") continue;
    for (const auto& j : read_jsonl(f)) {
      auto& cell = by_regime[j.at("regime").get<std::string>()][j.at("epoch").get<int>()];
      cell.first += j.at("mean_psnr").get<double>();
      ++cell.second;
    }
  }
  if (!by_regime.empty()) {
    std::vector<Series> series;
    for (const auto& [regime, epochs] : by_regime) {
      Series s{regime, {}, {}};
      for (const auto& [e, acc] : epochs) {
        s.x.push_back(e);
        s.y.push_back(acc.first / acc.second);
      }
      series.push_back(s);
    }
    write_text(out / "psnr_vs_epoch.svg", render_svg_plot("Validation PSNR", "epoch", "PSNR (dB)", series));
    ++rendered;
  }

  // PSNR vs iteration from eval outputs.
  std::vector<Series> iter_series;
  for (const auto& f : files) {
    if (f.filename() != "metrics.jsonl") continue;
    Series s{fs::relative(f.parent_path(), in).string(), {}, {}};
    for (const auto& j : read_jsonl(f)) {
      s.x.push_back(j.at("iteration").get<int>());
      s.y.push_back(j.at("mean_psnr").get<double>());
    }
    if (s.label == ".") s.label = "eval";
    iter_series.push_back(s);
  }
  if (!iter_series.empty()) {
    write_text(out / "psnr_vs_iteration.svg", render_svg_plot("PSNR across iterations", "iteration", "PSNR (dB)", iter_series));
    ++rendered;
  }

  // Ladder table re-rendered from the per-seed CSV.
  const fs::path ladder = in / "ablation.csv";
  if (fs::exists(ladder)) {
    std::ifstream csv(ladder);
    std::string line;
    std::getline(csv, line);
    std::vector<std::string> order;
    std::map<std::string, std::vector<double>> psnr;
    while (std::getline(csv, line)) {
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells.size() < 3) continue;
      if (!psnr.count(cells[0])) order.push_back(cells[0]);
      psnr[cells[0]].push_back(cells[2] == "nan" ? std::nan("") : std::stod(cells[2]));
    }
    std::vector<std::vector<std::string>> rows;
    Series s{"mean PSNR", {}, {}};
    for (const auto& r : order) {
      double m = 0.0;
      for (double v : psnr[r]) m += v;
      m /= static_cast<double>(psnr[r].size());
      rows.push_back({r, std::to_string(psnr[r].size()), fmt(m, 3)});
      s.x.push_back(static_cast<double>(s.x.size()));
      s.y.push_back(m);
    }
    write_text(out / "ladder_report.txt", render_table({"rung", "seeds", "psnr_mean"}, rows));
    write_text(out / "ladder_report.svg", render_svg_plot("Component ladder", "rung index", "PSNR (dB)", {s}));
    rendered += 2;
  }
  if (rendered == 0) throw IoError("no val_log.jsonl, metrics.jsonl or ablation.csv under " + in.string());
  std::cout << "rendered " << rendered << " artifacts into " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sipl-kit: privileged-information restoration toolkit (version " + version_string() + ")", "sipl-kit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  ConfigFlags gen_flags, train_flags, eval_flags, infer_flags, ablate_flags;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic paired corpus");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen_flags.attach(*gen);
  gen_flags.shorthand(*gen, "--tasks", "corpus.tasks", "Comma-separated tasks, or cdd11");
  gen_flags.shorthand(*gen, "--n", "corpus.n_per_task", "Pairs per task");
  gen_flags.shorthand(*gen, "--seed", "corpus.seed", "Corpus seed");

  auto* train = app.add_subcommand("train", "Train one model");
  std::string train_data, train_out, train_resume;
  train->add_option("--data", train_data, "Corpus directory or manifest")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--resume", train_resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train_flags.attach(*train);
  train_flags.shorthand(*train, "--seed", "train.seed", "Training seed");
  train_flags.shorthand(*train, "--regime", "train.regime", "baseline, pl or sipl");
  train_flags.shorthand(*train, "--epochs", "train.epochs", "Epochs");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_out;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Corpus directory or manifest")->required();
  eval->add_option("--split", eval_split, "Split to evaluate")->capture_default_str();
  eval->add_option("--out", eval_out, "Output directory")->required();
  eval_flags.attach(*eval);
  eval_flags.shorthand(*eval, "--iters", "inference.iters", "Refinement iterations");
  eval_flags.shorthand(*eval, "--pi-mode", "inference.pi_mode", "none, self or gt");

  auto* infer = app.add_subcommand("infer", "Iteratively restore one image");
  std::string infer_ckpt, infer_input, infer_gt, infer_out;
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--input", infer_input, "Degraded PNG")->required()->check(CLI::ExistingFile);
  infer->add_option("--gt", infer_gt, "Ground-truth PNG (needed for --pi-mode gt)")->check(CLI::ExistingFile);
  infer->add_option("--out", infer_out, "Output directory")->required();
  infer_flags.attach(*infer);
  infer_flags.shorthand(*infer, "--iters", "inference.iters", "Refinement iterations");
  infer_flags.shorthand(*infer, "--pi-mode", "inference.pi_mode", "none, self or gt");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation plan over several seeds");
  std::string plan = "fig8", ablate_data, ablate_out;
  int seeds = 3, ood_iters = 2;
  bool ood = false;
  ablate->add_option("--plan", plan, "Ablation plan")->capture_default_str();
  ablate->add_option("--seeds", seeds, "Number of seeds, counted up from train.seed")->capture_default_str();
  ablate->add_option("--data", ablate_data, "Existing corpus (generated from the corpus section when omitted)");
  ablate->add_option("--out", ablate_out, "Output directory")->required();
  ablate->add_flag("--ood", ood, "Also run the held-out rain+noise study on the sipl checkpoints");
  ablate->add_option("--ood-iters", ood_iters, "Iterations for the held-out study")->capture_default_str();
  ablate_flags.attach(*ablate);

  auto* report = app.add_subcommand("report", "Render tables and SVG plots from stored logs and reports");
  std::string report_in, report_out;
  report->add_option("--in", report_in, "Directory with logs/reports")->required();
  report->add_option("--out", report_out, "Output directory (defaults to --in)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_flags, gen_out);
    if (*train) return cmd_train(train_flags, train_data, train_out, train_resume);
    if (*eval) return cmd_eval(eval_flags, eval_ckpt, eval_data, eval_split, eval_out);
    if (*infer) return cmd_infer(infer_flags, infer_ckpt, infer_input, infer_gt, infer_out);
    if (*ablate) return cmd_ablate(ablate_flags, plan, seeds, ablate_data, ablate_out, ood, ood_iters);
    if (*report) return cmd_report(report_in, report_out.empty() ? report_in : report_out);
  } catch (const ConfigError& e) {
    std::cerr << "sipl-kit: config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "sipl-kit: numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const NonFiniteGradient& e) {
    std::cerr << "sipl-kit: numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "sipl-kit: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "sipl-kit: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
