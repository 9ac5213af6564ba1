// fewshot: command-line entry point for data generation, both training
// stages, evaluation, ablation matrices, reports and overlays.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "fewshot/checkpoint.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/log.hpp"
#include "fewshot/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fewshot;

namespace {

enum Exit { kOk = 0, kUsage = 2, kAudit = 3, kRuntime = 4 };

const std::map<std::string, std::string>& key_help() {
  static const std::map<std::string, std::string> help = {
      {"seed", "master seed; every random stream derives from it"},
      {"dataset.path", "existing dataset directory (empty: synthetic data under --out)"},
      {"dataset.seed", "synthetic data seed (default: --seed)"},
      {"dataset.synthetic.name", "synthetic dataset name"},
      {"dataset.synthetic.image_size", "image side in pixels (multiple of 8)"},
      {"dataset.synthetic.num_categories", "category count (multiple of 4)"},
      {"dataset.synthetic.train_per_group", "train images per category block"},
      {"dataset.synthetic.test_per_group", "test images per category block"},
      {"dataset.synthetic.clutter", "maximum unlabelled clutter patches per image"},
      {"dataset.synthetic.max_instances", "maximum labelled objects per image"},
      {"split_rule", "fold rule: synthetic, pascal or coco"},
      {"folds", "comma-separated fold indices"},
      {"shots", "K support images per evaluation episode"},
      {"objectness.enabled", "feed the objectness map to the comparison head"},
      {"objectness.preset", "objectness capacity: small, medium or large"},
      {"extractor.preset", "feature extractor: tinyA, tinyB or tinyC"},
      {"extractor.feature_dims", "projected feature dimension"},
      {"extractor.fine_tune", "train the extractor during stage 2"},
      {"head.variant", "multi-scale module: aspp or fem"},
      {"head.width", "comparison head channel width"},
      {"head.train_shots", "K support images per training episode"},
      {"head.episodes_per_epoch", "training episodes per stage-2 epoch"},
      {"joint_training", "train objectness together with the head instead of in stage 1"},
      {"evaluation.episodes", "seeded test episodes per fold"},
  };
  return help;
}

std::string describe(const std::string& key) {
  if (const auto it = key_help().find(key); it != key_help().end()) return it->second;
  const auto dot = key.rfind('.');
  const std::string section = key.substr(0, dot), leaf = key.substr(dot + 1);
  return section + " stage " + leaf;
}

/// Options shared by every subcommand: artifact root, config file and one flag per config key.
struct CommonOptions {
  std::string out = "artifacts";
  std::string config_file;
  bool force = false;
  bool verbose = false;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App& app) {
    app.add_option("--out", out, "artifact root directory")->capture_default_str();
    app.add_option("--config", config_file, "JSON config file; flags override its values");
    app.add_flag("--force", force, "recompute outputs that already exist");
    app.add_flag("-v,--verbose", verbose, "progress messages on standard error");
    for (const auto& key : pipeline::config_keys()) {
      app.add_option_function<std::string>(
          "--" + pipeline::flag_name(key), [this, key](const std::string& v) { overrides[key] = v; },
          describe(key));
    }
  }

  pipeline::ExperimentConfig config() const {
    json j = json::object();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw ConfigError("cannot read config file " + config_file);
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("config file " + config_file + " is not valid JSON: " + e.what());
      }
    }
    json full = pipeline::ExperimentConfig{}.to_json();
    full.merge_patch(j);
    if (!full["dataset"].contains("seed")) full["dataset"]["seed"] = nullptr;
    for (const auto& [key, value] : overrides) pipeline::apply_override(full, key, value);
    // Unknown keys in the file are caught here, after the flag overrides.
    pipeline::ExperimentConfig::from_json(j);
    return pipeline::ExperimentConfig::from_json(full);
  }

  pipeline::Workspace workspace() const { return {out, force}; }
};

void print_stages(const std::vector<pipeline::StageResult>& results) {
  for (const auto& r : results) {
    std::string what = r.stage + " fold " + std::to_string(r.fold) + ": ";
    if (r.skipped)
      what += "skipped (" + r.note + ")";
    else
      what += (r.reused ? "reused " : "trained ") + r.checkpoint.string() + " digest " + r.digest;
    log::info(what);
  }
}

int run_gen_data(const CommonOptions& o) {
  auto c = o.config();
  const auto ws = o.workspace();
  const fs::path dir = ws.data_dir(c);
  if (fs::exists(dir / "manifest.json") && !o.force) {
    log::info("dataset already present at " + dir.string() + " (use --force to regenerate)");
  } else {
    if (o.force && fs::exists(dir / "manifest.json")) fs::remove_all(dir);
    log::info("generating synthetic dataset into " + dir.string());
    write_dataset(generate_synthetic_dataset(c.synthetic, c.resolved_dataset_seed()), dir);
  }
  const std::string digest = checkpoint::digest_hex(dataset_digest(dir));
  std::ofstream(dir / "digest.txt") << digest << "\n";
  log::info("dataset digest " + digest);
  return kOk;
}

template <typename Stage>
int run_stage(const CommonOptions& o, Stage stage) {
  const auto c = o.config();
  const auto ws = o.workspace();
  std::vector<pipeline::StageResult> results;
  for (int fold : c.folds) results.push_back(stage(c, ws, fold));
  print_stages(results);
  return kOk;
}

int run_evaluate(const CommonOptions& o, const std::string& label) {
  const auto c = o.config();
  const auto ws = o.workspace();
  const auto report = pipeline::evaluate(c, ws, label);
  std::cout << render_table({report});
  log::info("report written to " + (ws.run_dir(c) / "report.json").string());
  return kOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text, std::uint64_t fallback) {
  std::vector<std::uint64_t> seeds;
  if (text.empty()) return {fallback};
  std::stringstream ss(text);
  std::string part;
  try {
    while (std::getline(ss, part, ',')) seeds.push_back(std::stoull(part));
  } catch (const std::logic_error&) {
    throw ConfigError("--seeds expects comma-separated integers, got '" + text + "'");
  }
  return seeds;
}

int run_matrix(const CommonOptions& o, const std::string& preset, const std::string& seeds, int jobs) {
  const auto c = o.config();
  const auto spec = pipeline::matrix_preset(preset, c, parse_seeds(seeds, c.seed));
  const auto result = pipeline::run_matrix(spec, o.workspace(), jobs);
  std::cout << result.table;
  log::info("matrix summary written to " + (o.workspace().root / "matrix" / preset / "summary.json").string());
  return kOk;
}

int run_report(const std::vector<std::string>& inputs, const std::string& output) {
  if (inputs.empty()) throw ArgumentError("report needs at least one report.json, run directory or summary.json");
  std::vector<MetricsReport> rows;
  for (const auto& in : inputs) {
    fs::path p = in;
    if (fs::is_directory(p)) p = fs::exists(p / "summary.json") ? p / "summary.json" : p / "report.json";
    std::ifstream f(p);
    if (!f) throw IoError("cannot read " + p.string());
    const json j = json::parse(f);
    if (j.contains("groups")) {
      for (const auto& g : j.at("groups")) rows.push_back(MetricsReport::from_json(g));
    } else {
      rows.push_back(MetricsReport::from_json(j));
    }
  }
  const std::string table = render_table(rows);
  if (!output.empty()) {
    std::ofstream(output) << table;
    log::info("table written to " + output);
  }
  std::cout << table;
  return kOk;
}

int run_overlays(const CommonOptions& o, int fold, int count, const std::string& dir) {
  const auto c = o.config();
  const fs::path target = dir.empty() ? o.workspace().root / "overlays" / c.fingerprint() : fs::path(dir);
  const auto files = pipeline::render_overlays(c, o.workspace(), fold, count, target);
  log::info("wrote " + std::to_string(files.size()) + " overlay strips to " + target.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Objectness-aware few-shot semantic segmentation"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string label, preset = "paper-ablation", seeds, report_output, overlay_dir;
  std::vector<std::string> report_inputs;
  int jobs = 1, overlay_fold = 1, overlay_count = 8;

  auto* gen = app.add_subcommand("gen-data", "render the synthetic benchmark");
  auto* pre = app.add_subcommand("pretrain-extractor", "pretrain the feature extractor on train-fold categories");
  auto* obj = app.add_subcommand("train-objectness", "stage 1: train the class-agnostic objectness module");
  auto* cmp = app.add_subcommand("train-comparison", "stage 2: train the comparison head on episodes");
  auto* eva = app.add_subcommand("evaluate", "score seeded test episodes and write the run record");
  auto* mat = app.add_subcommand("matrix", "run or resume an ablation matrix");
  auto* rep = app.add_subcommand("report", "render reports as a fold table");
  auto* ovl = app.add_subcommand("render-overlays", "write 5-panel episode strips");

  for (auto* sub : {gen, pre, obj, cmp, eva, mat, ovl}) common.attach(*sub);
  eva->add_option("--label", label, "row label in the report");
  mat->add_option("--preset", preset, "matrix preset")
      ->check(CLI::IsMember(pipeline::matrix_preset_names()))
      ->capture_default_str();
  mat->add_option("--seeds", seeds, "comma-separated seeds (default: --seed)");
  mat->add_option("--jobs", jobs, "rows run concurrently")->check(CLI::PositiveNumber)->capture_default_str();
  rep->add_option("inputs", report_inputs, "report.json, run directory or matrix directory")->required();
  rep->add_option("--output", report_output, "also write the table to this file");
  rep->add_flag("-v,--verbose", common.verbose, "progress messages on standard error");
  ovl->add_option("--fold", overlay_fold, "fold to sample episodes from")->capture_default_str();
  ovl->add_option("--count", overlay_count, "number of strips")->check(CLI::PositiveNumber)->capture_default_str();
  ovl->add_option("--dir", overlay_dir, "output directory (default: <out>/overlays/<fingerprint>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  log::set_verbose(common.verbose);

  try {
    if (*gen) return run_gen_data(common);
    if (*pre) return run_stage(common, pipeline::run_extractor_pretraining);
    if (*obj) return run_stage(common, pipeline::run_stage1_objectness);
    if (*cmp) return run_stage(common, pipeline::run_stage2_comparison);
    if (*eva) return run_evaluate(common, label);
    if (*mat) return run_matrix(common, preset, seeds, jobs);
    if (*rep) return run_report(report_inputs, report_output);
    if (*ovl) return run_overlays(common, overlay_fold, overlay_count, overlay_dir);
  } catch (const AuditError& e) {
    std::cerr << "audit failure: " << e.what() << "\n";
    return kAudit;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
