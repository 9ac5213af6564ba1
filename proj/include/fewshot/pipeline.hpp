#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewshot/comparison.hpp"
#include "fewshot/data.hpp"
#include "fewshot/features.hpp"
#include "fewshot/metrics.hpp"
#include "fewshot/nn.hpp"
#include "fewshot/objectness.hpp"

namespace fewshot::pipeline {

enum class SplitRule { synthetic, pascal, coco };

SplitRule parse_split_rule(const std::string& name);
std::string to_string(SplitRule r);

struct StageSchedule {
  int epochs = 1;
  int batch_size = 1;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;

  nn::Schedule to_schedule() const;
};

/// Fully resolved experiment description. Serialises to nested JSON; every
/// leaf key is also a kebab-case CLI flag (objectness.preset -> --objectness-preset).
struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::string dataset_path;                 // empty: synthetic data under <out>/data
  std::optional<std::uint64_t> dataset_seed;  // defaults to seed
  SyntheticConfig synthetic;

  SplitRule split_rule = SplitRule::synthetic;
  std::vector<int> folds{1, 2, 3, 4};
  int shots = 1;  // K at evaluation

  bool use_objectness = true;
  std::string objectness_preset = "small";
  StageSchedule objectness_schedule{20, 16, 0.1, 0.9, 0.0};

  std::string extractor_preset = "tinyA";
  int feature_dims = 256;
  bool fine_tune_extractor = false;
  StageSchedule extractor_schedule{40, 16, 0.05, 0.9, 0.0};

  HeadVariant head_variant = HeadVariant::aspp;
  int head_width = 64;  // reduce/branch/fuse2 channels; fuse1 is twice this
  int train_shots = 1;
  int episodes_per_epoch = 200;
  StageSchedule head_schedule{30, 4, 0.01, 0.9, 0.0};

  bool joint_training = false;
  int eval_episodes = 1000;

  std::uint64_t resolved_dataset_seed() const { return dataset_seed.value_or(seed); }
  HeadArch head_arch() const;

  nlohmann::json to_json() const;
  /// Rejects unknown keys and wrong types with ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// Throws ConfigError for unknown presets, K < 1, empty episode counts etc.
  void validate() const;
  /// 16 hex digits, FNV-1a over the canonical JSON of the resolved config.
  std::string fingerprint() const;
};

/// Dotted leaf keys of the config JSON, e.g. "objectness.preset".
std::vector<std::string> config_keys();
/// Sets one dotted key from its text form, parsed according to the key's type.
void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value);
std::string flag_name(const std::string& dotted_key);

FoldSplit fold_split(SplitRule rule, int fold, int num_categories);

/// Root of all artifacts (--out) plus the --force policy.
struct Workspace {
  std::filesystem::path root;
  bool force = false;

  std::filesystem::path data_dir(const ExperimentConfig& c) const;
  std::filesystem::path extractor_dir(const ExperimentConfig& c, int fold) const;
  std::filesystem::path objectness_dir(const ExperimentConfig& c, int fold) const;
  std::filesystem::path head_dir(const ExperimentConfig& c, int fold) const;
  std::filesystem::path run_dir(const ExperimentConfig& c) const;
};

/// Content keys of each stage. Runs that agree on a stage's inputs share its
/// artifacts, so with/without-objectness pairs reuse one extractor.
std::string data_key(const ExperimentConfig& c);
std::string extractor_key(const ExperimentConfig& c, int fold);
std::string objectness_key(const ExperimentConfig& c, int fold);
std::string head_key(const ExperimentConfig& c, int fold);

/// Generates (or loads) the configured dataset; cached per process.
std::shared_ptr<const Dataset> prepare_dataset(const ExperimentConfig& c, const Workspace& ws);

struct StageResult {
  std::string stage;
  int fold = 0;
  std::filesystem::path checkpoint;  // empty when the stage is a no-op
  std::string digest;
  nn::LossCurve curve;
  bool reused = false;
  bool skipped = false;
  std::string note;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

StageResult run_extractor_pretraining(const ExperimentConfig& c, const Workspace& ws, int fold);
/// No-op (recorded) when objectness is disabled or trained jointly.
StageResult run_stage1_objectness(const ExperimentConfig& c, const Workspace& ws, int fold);
/// Needs the extractor and (when objectness is on) stage-1 checkpoints;
/// throws ConfigError naming the missing file otherwise.
StageResult run_stage2_comparison(const ExperimentConfig& c, const Workspace& ws, int fold);

/// Frozen models of one fold, loaded from the stage checkpoints.
struct FoldModels {
  FeatureExtractor<float> extractor;
  std::optional<ObjectnessNet<float>> objectness;
  ComparisonHead<float> head;
};
FoldModels load_fold_models(const ExperimentConfig& c, const Workspace& ws, int fold);

/// Scores eval_episodes seeded test-fold episodes. Throws ProtocolError if
/// a test category has no eligible sample.
FoldMetrics evaluate_fold(const ExperimentConfig& c, const Workspace& ws, int fold);
/// Evaluates every configured fold and writes the run record.
MetricsReport evaluate(const ExperimentConfig& c, const Workspace& ws, const std::string& label = "");

/// All stages for every fold followed by evaluation. A finished run is reused
/// unless ws.force is set.
MetricsReport run_experiment(const ExperimentConfig& c, const Workspace& ws, const std::string& label = "");

struct MatrixRow {
  std::string label;
  std::string group;  // rows sharing a group are averaged in the summary
  ExperimentConfig config;
};

struct MatrixSpec {
  std::string name;
  std::vector<MatrixRow> rows;
};

/// Known presets: paper-ablation, capacity, shots, joint, backbones.
MatrixSpec matrix_preset(const std::string& name, const ExperimentConfig& base,
                         const std::vector<std::uint64_t>& seeds);
const std::vector<std::string>& matrix_preset_names();

struct MatrixResult {
  std::vector<MetricsReport> rows;
  std::vector<MetricsReport> groups;  // per-group means over seeds
  std::string table;
};

/// Runs or resumes each row (up to `jobs` at a time) and writes
/// <out>/matrix/<name>/{summary.json,table.txt}. A label whose recorded
/// fingerprint differs from the new one aborts with ProtocolError.
MatrixResult run_matrix(const MatrixSpec& spec, const Workspace& ws, int jobs = 1);

/// Mean of reports over seeds; folds are matched by index.
MetricsReport average_reports(const std::vector<MetricsReport>& reports, const std::string& label);

/// Writes 5-panel strips (support+mask, query+gt, no-objectness prediction,
/// objectness map, full prediction) for `count` test episodes of one fold.
/// Returns the written files.
std::vector<std::filesystem::path> render_overlays(const ExperimentConfig& c, const Workspace& ws, int fold,
                                                   int count, const std::filesystem::path& out_dir);

}  // namespace fewshot::pipeline
