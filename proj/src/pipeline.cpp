#include "fewshot/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "fewshot/checkpoint.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/image_io.hpp"
#include "fewshot/kernels.hpp"
#include "fewshot/log.hpp"

namespace fewshot::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration -----------------------------------------------------------

SplitRule parse_split_rule(const std::string& name) {
  if (name == "synthetic") return SplitRule::synthetic;
  if (name == "pascal") return SplitRule::pascal;
  if (name == "coco") return SplitRule::coco;
  throw ConfigError("unknown split rule '" + name + "' (expected synthetic, pascal or coco)");
}

std::string to_string(SplitRule r) {
  switch (r) {
    case SplitRule::synthetic:
      return "synthetic";
    case SplitRule::pascal:
      return "pascal";
    case SplitRule::coco:
      return "coco";
  }
  return "unknown";
}

nn::Schedule StageSchedule::to_schedule() const {
  nn::Schedule s;
  s.epochs = epochs;
  s.batch_size = batch_size;
  s.sgd = {learning_rate, momentum, weight_decay};
  return s;
}

namespace {

json schedule_json(const StageSchedule& s) {
  return {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay}};
}

StageSchedule schedule_from(const json& j) {
  StageSchedule s;
  s.epochs = j.at("epochs").get<int>();
  s.batch_size = j.at("batch_size").get<int>();
  s.learning_rate = j.at("learning_rate").get<double>();
  s.momentum = j.at("momentum").get<double>();
  s.weight_decay = j.at("weight_decay").get<double>();
  return s;
}

void check_keys(const json& given, const json& reference, const std::string& prefix) {
  if (!given.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [k, v] : given.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (!reference.contains(k)) throw ConfigError("unknown config key '" + key + "'");
    if (reference.at(k).is_object()) check_keys(v, reference.at(k), key);
  }
}

std::string hex_key(const json& j) { return checkpoint::digest_hex(fnv1a64(j.dump())); }

void collect_keys(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      collect_keys(v, key, out);
    else
      out.push_back(key);
  }
}

json::json_pointer pointer_of(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

}  // namespace

HeadArch ExperimentConfig::head_arch() const {
  HeadArch a;
  a.variant = head_variant;
  a.feature_dims = feature_dims;
  a.use_objectness = use_objectness;
  a.reduce = a.branch = a.fuse2 = head_width;
  a.fuse1 = 2 * head_width;
  return a;
}

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["dataset"] = {{"path", dataset_path},
                  {"seed", dataset_seed ? json(*dataset_seed) : json(nullptr)},
                  {"synthetic", synthetic.to_json()}};
  j["split_rule"] = to_string(split_rule);
  j["folds"] = folds;
  j["shots"] = shots;
  j["objectness"] = schedule_json(objectness_schedule);
  j["objectness"]["enabled"] = use_objectness;
  j["objectness"]["preset"] = objectness_preset;
  j["extractor"] = schedule_json(extractor_schedule);
  j["extractor"]["preset"] = extractor_preset;
  j["extractor"]["feature_dims"] = feature_dims;
  j["extractor"]["fine_tune"] = fine_tune_extractor;
  j["head"] = schedule_json(head_schedule);
  j["head"]["variant"] = to_string(head_variant);
  j["head"]["width"] = head_width;
  j["head"]["train_shots"] = train_shots;
  j["head"]["episodes_per_epoch"] = episodes_per_epoch;
  j["joint_training"] = joint_training;
  j["evaluation"] = {{"episodes", eval_episodes}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& given) {
  const json reference = ExperimentConfig{}.to_json();
  check_keys(given, reference, "");
  json j = reference;
  j.merge_patch(given);
  // merge_patch drops keys set to null; restore the optional dataset seed.
  if (!j["dataset"].contains("seed")) j["dataset"]["seed"] = nullptr;
  ExperimentConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& d = j.at("dataset");
    c.dataset_path = d.at("path").get<std::string>();
    if (!d.at("seed").is_null()) c.dataset_seed = d.at("seed").get<std::uint64_t>();
    c.synthetic = SyntheticConfig::from_json(d.at("synthetic"));
    c.split_rule = parse_split_rule(j.at("split_rule").get<std::string>());
    c.folds = j.at("folds").get<std::vector<int>>();
    c.shots = j.at("shots").get<int>();
    const auto& o = j.at("objectness");
    c.use_objectness = o.at("enabled").get<bool>();
    c.objectness_preset = o.at("preset").get<std::string>();
    c.objectness_schedule = schedule_from(o);
    const auto& e = j.at("extractor");
    c.extractor_preset = e.at("preset").get<std::string>();
    c.feature_dims = e.at("feature_dims").get<int>();
    c.fine_tune_extractor = e.at("fine_tune").get<bool>();
    c.extractor_schedule = schedule_from(e);
    const auto& h = j.at("head");
    c.head_variant = parse_head_variant(h.at("variant").get<std::string>());
    c.head_width = h.at("width").get<int>();
    c.train_shots = h.at("train_shots").get<int>();
    c.episodes_per_epoch = h.at("episodes_per_epoch").get<int>();
    c.head_schedule = schedule_from(h);
    c.joint_training = j.at("joint_training").get<bool>();
    c.eval_episodes = j.at("evaluation").at("episodes").get<int>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("invalid config: ") + ex.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  ObjectnessArch::from_preset(objectness_preset);
  ExtractorArch::from_preset(extractor_preset, feature_dims);
  if (shots < 1 || train_shots < 1) throw ConfigError("K (shots, head.train_shots) must be at least 1");
  if (eval_episodes < 1) throw ConfigError("evaluation.episodes must be at least 1");
  if (episodes_per_epoch < 1) throw ConfigError("head.episodes_per_epoch must be at least 1");
  if (head_width < 1) throw ConfigError("head.width must be positive");
  for (const auto* s : {&objectness_schedule, &extractor_schedule, &head_schedule})
    if (s->epochs < 0 || s->batch_size < 1 || s->learning_rate < 0 || s->momentum < 0)
      throw ConfigError("stage schedules need epochs >= 0, batch_size >= 1 and non-negative rates");
  if (folds.empty()) throw ConfigError("at least one fold is required");
  const bool coco = split_rule == SplitRule::coco;
  std::set<int> seen;
  for (int f : folds) {
    if (coco ? (f < 0 || f > 3) : (f < 1 || f > 4))
      throw ConfigError("fold " + std::to_string(f) + " is out of range for the " + to_string(split_rule) +
                        " split rule (" + (coco ? "0..3" : "1..4") + ")");
    if (!seen.insert(f).second) throw ConfigError("fold " + std::to_string(f) + " listed twice");
  }
  if (dataset_path.empty()) {
    const int n = synthetic.num_categories;
    if (split_rule == SplitRule::pascal && n != 20)
      throw ConfigError("pascal split rule needs 20 categories, synthetic config has " + std::to_string(n));
    if (split_rule == SplitRule::coco && n != 80)
      throw ConfigError("coco split rule needs 80 categories, synthetic config has " + std::to_string(n));
    if (n < 4 || n % 4 != 0) throw ConfigError("synthetic category count must be a positive multiple of 4");
    if (synthetic.image_size % 8 != 0) throw ConfigError("synthetic image size must be divisible by 8");
  }
  if (joint_training && !use_objectness) throw ConfigError("joint training needs objectness enabled");
}

std::string ExperimentConfig::fingerprint() const {
  ExperimentConfig resolved = *this;
  resolved.dataset_seed = resolved_dataset_seed();
  return hex_key(resolved.to_json());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  collect_keys(ExperimentConfig{}.to_json(), "", keys);
  return keys;
}

std::string flag_name(const std::string& dotted_key) {
  std::string f = dotted_key;
  std::replace(f.begin(), f.end(), '.', '-');
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

void apply_override(json& config, const std::string& dotted_key, const std::string& value) {
  const json reference = ExperimentConfig{}.to_json();
  const auto ptr = pointer_of(dotted_key);
  if (!reference.contains(ptr)) throw ConfigError("unknown config key '" + dotted_key + "'");
  const json& ref = reference.at(ptr);
  try {
    if (ref.is_boolean()) {
      if (value == "true" || value == "1" || value == "on")
        config[ptr] = true;
      else if (value == "false" || value == "0" || value == "off")
        config[ptr] = false;
      else
        throw ConfigError("expected true/false for " + dotted_key + ", got '" + value + "'");
    } else if (ref.is_array()) {
      std::vector<int> items;
      std::stringstream ss(value);
      std::string part;
      while (std::getline(ss, part, ',')) items.push_back(std::stoi(part));
      config[ptr] = items;
    } else if (ref.is_number_float()) {
      config[ptr] = std::stod(value);
    } else if (ref.is_number_unsigned() || ref.is_null()) {
      if (!value.empty() && value[0] == '-') throw ConfigError(dotted_key + " must be non-negative");
      config[ptr] = static_cast<std::uint64_t>(std::stoull(value));
    } else if (ref.is_number_integer()) {
      config[ptr] = std::stoi(value);
    } else {
      config[ptr] = value;
    }
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse '" + value + "' for " + dotted_key);
  }
}

FoldSplit fold_split(SplitRule rule, int fold, int num_categories) {
  switch (rule) {
    case SplitRule::pascal:
      return pascal_fold_split(fold);
    case SplitRule::coco:
      return coco_fold_split(fold);
    case SplitRule::synthetic:
      break;
  }
  return block_fold_split(num_categories, fold);
}

// ---- stage keys and paths ---------------------------------------------------

std::string data_key(const ExperimentConfig& c) {
  if (!c.dataset_path.empty()) return hex_key(json{{"path", fs::absolute(c.dataset_path).string()}});
  return hex_key(json{{"synthetic", c.synthetic.to_json()},
                      {"renderer", kSyntheticRendererVersion},
                      {"seed", c.resolved_dataset_seed()}});
}

std::string extractor_key(const ExperimentConfig& c, int fold) {
  return hex_key(json{{"data", data_key(c)},
                      {"split_rule", to_string(c.split_rule)},
                      {"fold", fold},
                      {"preset", c.extractor_preset},
                      {"feature_dims", c.feature_dims},
                      {"schedule", schedule_json(c.extractor_schedule)},
                      {"seed", c.seed}});
}

std::string objectness_key(const ExperimentConfig& c, int fold) {
  return hex_key(json{{"data", data_key(c)},
                      {"split_rule", to_string(c.split_rule)},
                      {"fold", fold},
                      {"preset", c.objectness_preset},
                      {"schedule", schedule_json(c.objectness_schedule)},
                      {"seed", c.seed}});
}

std::string head_key(const ExperimentConfig& c, int fold) {
  json obj = nullptr;
  if (c.use_objectness && c.joint_training)
    obj = {{"joint", c.objectness_preset}, {"schedule", schedule_json(c.objectness_schedule)}};
  else if (c.use_objectness)
    obj = objectness_key(c, fold);
  return hex_key(json{{"extractor", extractor_key(c, fold)},
                      {"objectness", obj},
                      {"variant", to_string(c.head_variant)},
                      {"width", c.head_width},
                      {"fine_tune", c.fine_tune_extractor},
                      {"train_shots", c.train_shots},
                      {"episodes_per_epoch", c.episodes_per_epoch},
                      {"schedule", schedule_json(c.head_schedule)},
                      {"seed", c.seed}});
}

fs::path Workspace::data_dir(const ExperimentConfig& c) const {
  return c.dataset_path.empty() ? root / "data" / data_key(c) : fs::path(c.dataset_path);
}
fs::path Workspace::extractor_dir(const ExperimentConfig& c, int fold) const {
  return root / "stages" / "extractor" / extractor_key(c, fold);
}
fs::path Workspace::objectness_dir(const ExperimentConfig& c, int fold) const {
  return root / "stages" / "objectness" / objectness_key(c, fold);
}
fs::path Workspace::head_dir(const ExperimentConfig& c, int fold) const {
  return root / "stages" / "comparison" / head_key(c, fold);
}
fs::path Workspace::run_dir(const ExperimentConfig& c) const { return root / "runs" / c.fingerprint(); }

// ---- shared process state -----------------------------------------------------

namespace {

std::mutex& lock_for(const fs::path& dir) {
  static std::mutex guard;
  static std::map<std::string, std::unique_ptr<std::mutex>> locks;
  const std::lock_guard<std::mutex> g(guard);
  auto& m = locks[fs::absolute(dir).lexically_normal().string()];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

// Artifacts produced by this process; --force rebuilds each of them once.
std::set<std::string>& produced_set() {
  static std::set<std::string> done;
  return done;
}
std::mutex& produced_mutex() {
  static std::mutex m;
  return m;
}

bool reusable(const fs::path& file, const Workspace& ws) {
  if (!fs::exists(file)) return false;
  if (!ws.force) return true;
  const std::lock_guard<std::mutex> g(produced_mutex());
  return produced_set().contains(fs::absolute(file).lexically_normal().string());
}

void remember(const fs::path& file) {
  const std::lock_guard<std::mutex> g(produced_mutex());
  produced_set().insert(fs::absolute(file).lexically_normal().string());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fold_tag(int fold) { return "fold " + std::to_string(fold); }

}  // namespace

std::shared_ptr<const Dataset> prepare_dataset(const ExperimentConfig& c, const Workspace& ws) {
  static std::mutex guard;
  static std::map<std::string, std::shared_ptr<const Dataset>> loaded;
  const fs::path dir = ws.data_dir(c);
  const std::string key = fs::absolute(dir).lexically_normal().string();
  const std::lock_guard<std::mutex> g(guard);
  if (auto it = loaded.find(key); it != loaded.end()) return it->second;
  if (!fs::exists(dir / "manifest.json")) {
    if (!c.dataset_path.empty()) throw ConfigError("dataset not found: " + dir.string() + "/manifest.json");
    log::info("generating synthetic dataset (seed " + std::to_string(c.resolved_dataset_seed()) + ") into " +
              dir.string());
    write_dataset(generate_synthetic_dataset(c.synthetic, c.resolved_dataset_seed()), dir);
  }
  auto ds = std::make_shared<const Dataset>(load_dataset(dir));
  loaded[key] = ds;
  return ds;
}

json StageResult::to_json() const {
  return {{"stage", stage},     {"fold", fold},       {"checkpoint", checkpoint.string()},
          {"digest", digest},   {"curve", curve},     {"reused", reused},
          {"skipped", skipped}, {"note", note},       {"seconds", seconds}};
}

namespace {

StageResult from_existing(const std::string& stage, int fold, const fs::path& file, checkpoint::Kind kind) {
  const auto ck = checkpoint::read(file, kind);
  StageResult r;
  r.stage = stage;
  r.fold = fold;
  r.checkpoint = file;
  r.digest = checkpoint::digest_hex(ck.parameter_digest());
  r.curve = ck.meta.value("curve", nn::LossCurve{});
  r.reused = true;
  return r;
}

void save_stage(const fs::path& file, checkpoint::Checkpoint ck, const nn::LossCurve& curve, Rng& rng) {
  ck.rng_state = serialize_rng(rng);
  ck.meta["curve"] = curve;
  checkpoint::write(file, ck);
  write_text(file.parent_path() / (file.stem().string() + "_loss.csv"), nn::loss_curve_csv(curve));
  remember(file);
}

fs::path extractor_checkpoint(const ExperimentConfig& c, const Workspace& ws, int fold) {
  return c.fine_tune_extractor ? ws.head_dir(c, fold) / "extractor.ckpt"
                               : ws.extractor_dir(c, fold) / "extractor.ckpt";
}

fs::path objectness_checkpoint(const ExperimentConfig& c, const Workspace& ws, int fold) {
  return c.joint_training ? ws.head_dir(c, fold) / "objectness.ckpt"
                          : ws.objectness_dir(c, fold) / "objectness.ckpt";
}

FeatureExtractor<float> load_extractor(const ExperimentConfig& c, const fs::path& file) {
  Rng unused(0);
  FeatureExtractor<float> fx(ExtractorArch::from_preset(c.extractor_preset, c.feature_dims), unused);
  checkpoint::restore(checkpoint::read(file, checkpoint::Kind::extractor), fx.parameters());
  return fx;
}

ObjectnessNet<float> load_objectness(const ExperimentConfig& c, const fs::path& file) {
  Rng unused(0);
  ObjectnessNet<float> net(ObjectnessArch::from_preset(c.objectness_preset), unused);
  checkpoint::restore(checkpoint::read(file, checkpoint::Kind::objectness), net.parameters());
  return net;
}

}  // namespace

StageResult run_extractor_pretraining(const ExperimentConfig& c, const Workspace& ws, int fold) {
  c.validate();
  const fs::path dir = ws.extractor_dir(c, fold);
  const fs::path file = dir / "extractor.ckpt";
  const std::lock_guard<std::mutex> g(lock_for(dir));
  if (reusable(file, ws)) return from_existing("extractor", fold, file, checkpoint::Kind::extractor);

  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = prepare_dataset(c, ws);
  const FoldSplit split = fold_split(c.split_rule, fold, ds->num_categories());
  const auto pool = ds->train_pool(split);
  log::info("pretraining extractor " + c.extractor_preset + " for " + fold_tag(fold) + " on " +
            std::to_string(pool.size()) + " samples");
  Rng rng = make_rng(c.seed, "extractor", static_cast<std::uint64_t>(fold));
  FeatureExtractor<float> fx(ExtractorArch::from_preset(c.extractor_preset, c.feature_dims), rng);
  const PretrainResult res =
      pretrain_extractor(fx, *ds, pool, split.train_categories, c.extractor_schedule.to_schedule(), rng);

  auto ck = checkpoint::capture(checkpoint::Kind::extractor, c.extractor_preset, fx.parameters());
  ck.epoch = c.extractor_schedule.epochs;
  ck.meta = {{"key", extractor_key(c, fold)},
             {"fold", fold},
             {"feature_dims", c.feature_dims},
             {"final_object_cell_accuracy", res.final_accuracy}};
  save_stage(file, ck, res.curve, rng);

  StageResult r;
  r.stage = "extractor";
  r.fold = fold;
  r.checkpoint = file;
  r.digest = checkpoint::digest_hex(ck.parameter_digest());
  r.curve = res.curve;
  r.seconds = seconds_since(t0);
  return r;
}

StageResult run_stage1_objectness(const ExperimentConfig& c, const Workspace& ws, int fold) {
  c.validate();
  StageResult r;
  r.stage = "objectness";
  r.fold = fold;
  if (!c.use_objectness || c.joint_training) {
    r.skipped = true;
    r.note = c.use_objectness ? "objectness is trained jointly with the comparison head"
                              : "objectness disabled";
    return r;
  }
  const fs::path dir = ws.objectness_dir(c, fold);
  const fs::path file = dir / "objectness.ckpt";
  const std::lock_guard<std::mutex> g(lock_for(dir));
  if (reusable(file, ws)) return from_existing("objectness", fold, file, checkpoint::Kind::objectness);

  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = prepare_dataset(c, ws);
  const FoldSplit split = fold_split(c.split_rule, fold, ds->num_categories());
  // The feed audits class-disjointness before any training happens.
  const ClassAgnosticFeed feed(*ds, ds->train_pool(split), split.test_categories);
  log::info("training objectness " + c.objectness_preset + " for " + fold_tag(fold) + " on " +
            std::to_string(feed.size()) + " samples");
  Rng rng = make_rng(c.seed, "objectness", static_cast<std::uint64_t>(fold));
  ObjectnessNet<float> net(ObjectnessArch::from_preset(c.objectness_preset), rng);
  const ObjectnessTraining tr = train_objectness(net, feed, c.objectness_schedule.to_schedule(), rng);

  auto ck = checkpoint::capture(checkpoint::Kind::objectness, c.objectness_preset, net.parameters());
  ck.epoch = tr.epochs_completed;
  ck.meta = {{"key", objectness_key(c, fold)},
             {"fold", fold},
             {"held_out", std::vector<int>(split.test_categories.begin(), split.test_categories.end())}};
  save_stage(file, ck, tr.curve, rng);

  r.checkpoint = file;
  r.digest = checkpoint::digest_hex(ck.parameter_digest());
  r.curve = tr.curve;
  r.seconds = seconds_since(t0);
  return r;
}

// ---- stage 2 -----------------------------------------------------------------

namespace {

/// Support masks must keep a cell on the feature grid; pooling an empty mask
/// is an error, so such samples never enter an episode.
Eligibility episode_eligibility(const Dataset& ds) {
  const int grid = ds.manifest().image_size / ExtractorArch::kStride;
  return {kMinTargetPixels, grid, grid};
}

const SemanticSample& oriented(const Dataset& ds, std::size_t idx, bool flip, SemanticSample& scratch) {
  if (!flip) return ds.sample(idx);
  scratch = flip_horizontal(ds.sample(idx));
  return scratch;
}

/// Outputs of frozen networks, computed on first use for each (sample, flip).
class FrozenOutputs {
 public:
  explicit FrozenOutputs(std::size_t n) : features_(2 * n), maps_(2 * n) {}

  const FeatureMap<float>& features(const FeatureExtractor<float>& fx, const SemanticSample& s, std::size_t idx,
                                    bool flip) {
    auto& slot = features_[2 * idx + flip];
    if (slot.empty()) slot = extract_features(fx, s.image);
    return slot;
  }
  const ObjectnessMap& objectness(const ObjectnessNet<float>& net, const SemanticSample& s, std::size_t idx,
                                  bool flip) {
    auto& slot = maps_[2 * idx + flip];
    if (!slot) slot = predict_objectness(net, s.image);
    return *slot;
  }

 private:
  std::vector<FeatureMap<float>> features_;
  std::vector<std::optional<ObjectnessMap>> maps_;
};

/// Same digest a checkpoint of these parameters would carry.
std::uint64_t file_digest(const nn::ParamRefs<float>& params) {
  return checkpoint::capture(checkpoint::Kind::extractor, "", params).parameter_digest();
}

void assert_no_gradient(const nn::ParamRefs<float>& params, const std::string& what) {
  for (const auto* p : params)
    for (float g : p->grad)
      if (g != 0.0f) throw AuditError(what + " parameter " + p->name + " received a gradient during stage 2");
}

}  // namespace

StageResult run_stage2_comparison(const ExperimentConfig& c, const Workspace& ws, int fold) {
  c.validate();
  const fs::path dir = ws.head_dir(c, fold);
  const fs::path file = dir / "head.ckpt";
  const std::lock_guard<std::mutex> g(lock_for(dir));
  if (reusable(file, ws)) return from_existing("comparison", fold, file, checkpoint::Kind::comparison);

  const fs::path fx_file = ws.extractor_dir(c, fold) / "extractor.ckpt";
  if (!fs::exists(fx_file))
    throw ConfigError("missing extractor checkpoint " + fx_file.string() + " for " + fold_tag(fold) +
                      "; run `fewshot pretrain-extractor` with the same config first");
  std::optional<ObjectnessNet<float>> obj;
  const bool joint = c.use_objectness && c.joint_training;
  if (c.use_objectness && !joint) {
    const fs::path obj_file = ws.objectness_dir(c, fold) / "objectness.ckpt";
    if (!fs::exists(obj_file))
      throw ConfigError("missing stage-1 objectness checkpoint " + obj_file.string() + " for " + fold_tag(fold) +
                        "; run `fewshot train-objectness` with the same config first");
    obj = load_objectness(c, obj_file);
  } else if (joint) {
    Rng init = make_rng(c.seed, "objectness-joint", static_cast<std::uint64_t>(fold));
    obj.emplace(ObjectnessArch::from_preset(c.objectness_preset), init);
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = prepare_dataset(c, ws);
  const FoldSplit split = fold_split(c.split_rule, fold, ds->num_categories());
  const auto pool = ds->train_pool(split);
  const EpisodeSampler sampler(*ds, pool, split.train_categories, episode_eligibility(*ds));

  FeatureExtractor<float> fx = load_extractor(c, fx_file);
  fx.backbone_frozen = fx.projection_frozen = !c.fine_tune_extractor;
  ComparisonHead<float> head(c.head_arch(), derive_seed(c.seed, "head", static_cast<std::uint64_t>(fold)));

  auto fx_params = fx.parameters();
  nn::ParamRefs<float> obj_params = obj ? obj->parameters() : nn::ParamRefs<float>{};
  const std::uint64_t fx_before = file_digest(fx_params);
  const std::uint64_t obj_before = obj ? file_digest(obj_params) : 0;

  nn::ParamRefs<float> trainable = head.parameters();
  if (c.fine_tune_extractor) {
    for (auto* p : fx.trainable_parameters()) trainable.push_back(p);
  }
  if (joint) trainable.insert(trainable.end(), obj_params.begin(), obj_params.end());
  nn::zero_grad(trainable);
  nn::zero_grad(fx_params);
  nn::zero_grad(obj_params);
  const nn::Sgd<float> sgd({c.head_schedule.learning_rate, c.head_schedule.momentum, c.head_schedule.weight_decay});
  const double flip_p = c.head_schedule.to_schedule().flip_probability;

  log::info("training comparison head (" + to_string(c.head_variant) + ", objectness " +
            (c.use_objectness ? (joint ? "joint" : "frozen") : "off") + ") for " + fold_tag(fold) + " on " +
            std::to_string(pool.size()) + " samples");

  FrozenOutputs frozen(ds->size());
  Rng rng = make_rng(c.seed, "stage2-episodes", static_cast<std::uint64_t>(fold));
  nn::LossCurve curve;
  const int batch = c.head_schedule.batch_size;
  const std::size_t batches_per_epoch = static_cast<std::size_t>((c.episodes_per_epoch + batch - 1) / batch);
  const std::size_t total_steps = batches_per_epoch * static_cast<std::size_t>(c.head_schedule.epochs);
  std::size_t step = 0;
  for (int epoch = 1; epoch <= c.head_schedule.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int batch_index = 0;
    for (int start = 0; start < c.episodes_per_epoch; start += batch, ++batch_index) {
      const int end = std::min(c.episodes_per_epoch, start + batch);
      double batch_loss = 0.0;
      for (int e = start; e < end; ++e) {
        // Identical draws for every variant: the stream depends only on data and seed.
        const EpisodeDraw d = sampler.draw(c.train_shots, rng);
        const bool flip_q = uniform01(rng) < flip_p;
        std::vector<bool> flip_s(d.supports.size());
        for (std::size_t k = 0; k < flip_s.size(); ++k) flip_s[k] = uniform01(rng) < flip_p;

        SemanticSample q_scratch;
        const SemanticSample& q = oriented(*ds, d.query, flip_q, q_scratch);
        std::vector<SemanticSample> s_scratch(d.supports.size());
        std::vector<const SemanticSample*> supports;
        for (std::size_t k = 0; k < d.supports.size(); ++k)
          supports.push_back(&oriented(*ds, d.supports[k], flip_s[k], s_scratch[k]));

        std::optional<FeatureExtractor<float>::Trace> q_trace;
        std::vector<FeatureExtractor<float>::Trace> s_traces;
        FeatureMap<float> qf;
        std::vector<FeatureMap<float>> sfs;
        if (c.fine_tune_extractor) {
          q_trace = fx.forward(q.image);
          qf = q_trace->features;
          for (const auto* s : supports) {
            s_traces.push_back(fx.forward(s->image));
            sfs.push_back(s_traces.back().features);
          }
        } else {
          qf = frozen.features(fx, q, d.query, flip_q);
          for (std::size_t k = 0; k < supports.size(); ++k)
            sfs.push_back(frozen.features(fx, *supports[k], d.supports[k], flip_s[k]));
        }
        std::vector<BinaryMask> masks;
        for (const auto* s : supports)
          masks.push_back(category_mask(*s, d.category));
        const SupportVector<float> v = masked_average_pooling(sfs, masks);

        std::optional<ObjectnessNet<float>::Trace> o_trace;
        std::optional<ProbabilityMap<float>> omap;
        if (joint) {
          o_trace = obj->forward(q.image);
          omap = ProbabilityMap<float>{o_trace->probs};
        } else if (obj) {
          omap = frozen.objectness(*obj, q, d.query, flip_q);
        }

        const Tensor<float> x = assemble_input(qf, v, omap);
        const auto trace = head.forward(x);
        Tensor<float> gscores;
        double loss = segmentation_loss(trace.scores, category_mask(q, d.category), &gscores);
        const Tensor<float> gx = head.backward(trace, gscores);

        if (joint || c.fine_tune_extractor) {
          const int dd = c.feature_dims;
          auto parts = nn::split_channels(gx, joint ? std::vector<int>{dd, dd, 1} : std::vector<int>{dd, dd});
          if (joint) {
            const BinaryMask olabels = derive_objectness_labels(q);
            loss += objectness_loss(*omap, olabels);
            Tensor<float> gp = kernels::resize_bilinear_backward(parts[2], q.height(), q.width());
            Tensor<float> glogits = objectness_loss_grad(o_trace->probs, olabels);
            for (std::size_t i = 0; i < gp.size(); ++i) {
              const float p = o_trace->probs.data()[i];
              glogits.data()[i] += gp.data()[i] * p * (1.0f - p);
            }
            obj->backward(*o_trace, glogits);
          }
          if (c.fine_tune_extractor) {
            fx.backward(*q_trace, parts[0]);
            const auto gsf = masked_average_pooling_backward(sfs, masks, tile_support_backward(parts[1]));
            for (std::size_t k = 0; k < gsf.size(); ++k) fx.backward(s_traces[k], gsf[k]);
          }
        }
        batch_loss += loss;
      }
      if (!std::isfinite(batch_loss))
        throw NumericError("stage-2 training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch_index) + ", learning rate " +
                           std::to_string(c.head_schedule.learning_rate));
      if (!c.fine_tune_extractor) assert_no_gradient(fx_params, "extractor");
      if (obj && !joint) assert_no_gradient(obj_params, "objectness");
      sgd.step(trainable, 1.0 / static_cast<double>(end - start), nn::poly_lr_scale(step++, total_steps));
      epoch_loss += batch_loss;
    }
    curve.push_back(epoch_loss / static_cast<double>(c.episodes_per_epoch));
    log::info("comparison " + fold_tag(fold) + " epoch " + std::to_string(epoch) + "/" +
              std::to_string(c.head_schedule.epochs) + " loss " + std::to_string(curve.back()));
  }

  const std::uint64_t fx_after = file_digest(fx_params);
  const std::uint64_t obj_after = obj ? file_digest(obj_params) : 0;
  if (!c.fine_tune_extractor && fx_after != fx_before)
    throw AuditError("extractor parameters changed during stage 2 (" + checkpoint::digest_hex(fx_before) +
                     " -> " + checkpoint::digest_hex(fx_after) + ")");
  if (obj && !joint && obj_after != obj_before)
    throw AuditError("objectness parameters changed during stage 2 (" + checkpoint::digest_hex(obj_before) +
                     " -> " + checkpoint::digest_hex(obj_after) + ")");

  auto ck = checkpoint::capture(checkpoint::Kind::comparison, to_string(c.head_variant), head.parameters());
  ck.epoch = c.head_schedule.epochs;
  ck.meta = {{"key", head_key(c, fold)},
             {"fold", fold},
             {"use_objectness", c.use_objectness},
             {"joint_training", joint},
             {"fine_tune_extractor", c.fine_tune_extractor},
             {"extractor_digest_before", checkpoint::digest_hex(fx_before)},
             {"extractor_digest_after", checkpoint::digest_hex(fx_after)},
             {"objectness_digest_before", checkpoint::digest_hex(obj_before)},
             {"objectness_digest_after", checkpoint::digest_hex(obj_after)}};
  if (c.fine_tune_extractor) {
    auto fck = checkpoint::capture(checkpoint::Kind::extractor, c.extractor_preset, fx_params);
    fck.meta = {{"key", head_key(c, fold)}, {"fine_tuned", true}};
    checkpoint::write(dir / "extractor.ckpt", fck);
  }
  if (joint) {
    auto ock = checkpoint::capture(checkpoint::Kind::objectness, c.objectness_preset, obj_params);
    ock.meta = {{"key", head_key(c, fold)}, {"joint", true}};
    checkpoint::write(dir / "objectness.ckpt", ock);
  }
  save_stage(file, ck, curve, rng);

  StageResult r;
  r.stage = "comparison";
  r.fold = fold;
  r.checkpoint = file;
  r.digest = checkpoint::digest_hex(ck.parameter_digest());
  r.curve = curve;
  r.seconds = seconds_since(t0);
  return r;
}

// ---- evaluation -----------------------------------------------------------------

FoldModels load_fold_models(const ExperimentConfig& c, const Workspace& ws, int fold) {
  const fs::path head_file = ws.head_dir(c, fold) / "head.ckpt";
  if (!fs::exists(head_file))
    throw ConfigError("no trained comparison head for " + fold_tag(fold) + " (expected " + head_file.string() +
                      "); run `fewshot train-comparison` or `fewshot matrix` with the same config first");
  FoldModels m;
  m.extractor = load_extractor(c, extractor_checkpoint(c, ws, fold));
  if (c.use_objectness) m.objectness = load_objectness(c, objectness_checkpoint(c, ws, fold));
  m.head = ComparisonHead<float>(c.head_arch(), 0);
  checkpoint::restore(checkpoint::read(head_file, checkpoint::Kind::comparison), m.head.parameters());
  return m;
}

namespace {

struct FoldInputs {
  std::vector<std::size_t> pool;
  std::map<std::size_t, FeatureMap<float>> features;
  std::map<std::size_t, ObjectnessMap> maps;
};

FoldInputs precompute(const Dataset& ds, const std::vector<std::size_t>& pool, const FoldModels& m) {
  FoldInputs in;
  in.pool = pool;
  std::vector<FeatureMap<float>> feats(pool.size());
  std::vector<ObjectnessMap> maps(pool.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < pool.size(); ++i) {
    feats[i] = extract_features(m.extractor, ds.sample(pool[i]).image);
    if (m.objectness) maps[i] = predict_objectness(*m.objectness, ds.sample(pool[i]).image);
  }
  for (std::size_t i = 0; i < pool.size(); ++i) {
    in.features.emplace(pool[i], std::move(feats[i]));
    if (m.objectness) in.maps.emplace(pool[i], std::move(maps[i]));
  }
  return in;
}

SegmentationPrediction predict_episode(const Dataset& ds, const FoldModels& m, const FoldInputs& in,
                                       const EpisodeDraw& d) {
  const FeatureMap<float>& qf = in.features.at(d.query);
  std::vector<FeatureMap<float>> sfs;
  std::vector<BinaryMask> masks;
  for (std::size_t idx : d.supports) {
    sfs.push_back(in.features.at(idx));
    masks.push_back(category_mask(ds.sample(idx), d.category));
  }
  const SupportVector<float> v = masked_average_pooling(sfs, masks);
  std::optional<ProbabilityMap<float>> omap;
  if (m.objectness) omap = in.maps.at(d.query);
  const SemanticSample& q = ds.sample(d.query);
  return predict_segmentation(m.head, assemble_input(qf, v, omap), q.height(), q.width());
}

EpisodeSampler checked_sampler(const Dataset& ds, const std::vector<std::size_t>& pool, const FoldSplit& split,
                               int shots) {
  EpisodeSampler sampler(ds, pool, split.test_categories, episode_eligibility(ds));
  for (CategoryId cat : split.test_categories) {
    const auto n = sampler.eligible_samples(cat).size();
    if (n < static_cast<std::size_t>(shots) + 1)
      throw ProtocolError("test category " + std::to_string(cat) + " of " + fold_tag(split.fold_index) +
                          " has " + std::to_string(n) + " eligible test samples; a " + std::to_string(shots) +
                          "-shot episode needs " + std::to_string(shots + 1));
  }
  return sampler;
}

}  // namespace

FoldMetrics evaluate_fold(const ExperimentConfig& c, const Workspace& ws, int fold) {
  c.validate();
  const FoldModels models = load_fold_models(c, ws, fold);
  const auto ds = prepare_dataset(c, ws);
  const FoldSplit split = fold_split(c.split_rule, fold, ds->num_categories());
  const auto pool = ds->test_pool(split);
  const EpisodeSampler sampler = checked_sampler(*ds, pool, split, c.shots);

  Rng rng = make_rng(c.seed, "eval-episodes", static_cast<std::uint64_t>(fold));
  std::vector<EpisodeDraw> draws;
  draws.reserve(c.eval_episodes);
  for (int i = 0; i < c.eval_episodes; ++i) draws.push_back(sampler.draw(c.shots, rng));

  const FoldInputs inputs = precompute(*ds, pool, models);
  std::vector<EpisodeResult> results(draws.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < draws.size(); ++i) {
    const auto pred = predict_episode(*ds, models, inputs, draws[i]);
    results[i] = {draws[i].category,
                  confusion(pred.binary, category_mask(ds->sample(draws[i].query), draws[i].category))};
  }
  FoldMetrics m = FoldMetrics::from_results(fold, results, split.test_categories);
  log::info("evaluated " + fold_tag(fold) + ": mIoU " + std::to_string(100.0 * m.miou) + ", FB-IoU " +
            std::to_string(100.0 * m.fbiou) + " over " + std::to_string(m.episodes) + " episodes");
  return m;
}

namespace {

json stage_record(const ExperimentConfig& c, const Workspace& ws) {
  json stages = json::array();
  for (int fold : c.folds) {
    json s = {{"fold", fold},
              {"extractor", {{"key", extractor_key(c, fold)}, {"checkpoint", extractor_checkpoint(c, ws, fold).string()}}},
              {"comparison", {{"key", head_key(c, fold)}, {"checkpoint", (ws.head_dir(c, fold) / "head.ckpt").string()}}}};
    if (c.use_objectness)
      s["objectness"] = {{"key", c.joint_training ? head_key(c, fold) : objectness_key(c, fold)},
                         {"checkpoint", objectness_checkpoint(c, ws, fold).string()}};
    for (const char* part : {"extractor", "objectness", "comparison"}) {
      if (!s.contains(part)) continue;
      const fs::path f = s[part]["checkpoint"].get<std::string>();
      if (fs::exists(f)) {
        const auto ck = checkpoint::read(f);
        s[part]["digest"] = checkpoint::digest_hex(ck.parameter_digest());
        s[part]["curve"] = ck.meta.value("curve", nn::LossCurve{});
      }
    }
    stages.push_back(s);
  }
  return stages;
}

}  // namespace

MetricsReport evaluate(const ExperimentConfig& c, const Workspace& ws, const std::string& label) {
  c.validate();
  const fs::path dir = ws.run_dir(c);
  const fs::path report_file = dir / "report.json";
  const std::lock_guard<std::mutex> g(lock_for(dir));
  if (reusable(report_file, ws)) {
    MetricsReport r = MetricsReport::from_json(json::parse(read_text(report_file)));
    if (!label.empty()) r.label = label;
    return r;
  }
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport report;
  report.label = label.empty() ? (c.use_objectness ? "Ours" : "Ours-noObj") : label;
  report.fingerprint = c.fingerprint();
  report.seed = c.seed;
  report.shots = c.shots;
  json timings = json::object();
  for (int fold : c.folds) {
    const auto tf = std::chrono::steady_clock::now();
    report.folds.push_back(evaluate_fold(c, ws, fold));
    timings["evaluate_fold_" + std::to_string(fold)] = seconds_since(tf);
  }
  ExperimentConfig resolved = c;
  resolved.dataset_seed = c.resolved_dataset_seed();
  write_text(dir / "config.json", resolved.to_json().dump(2) + "\n");
  write_text(report_file, report.to_text());
  write_text(dir / "report.txt", render_table({report}));
  json record = {{"fingerprint", report.fingerprint},
                 {"config", resolved.to_json()},
                 {"data", {{"key", data_key(c)}, {"path", ws.data_dir(c).string()}}},
                 {"stages", stage_record(c, ws)},
                 {"report", report_file.string()},
                 {"timings", timings}};
  record["timings"]["evaluate_total"] = seconds_since(t0);
  write_text(dir / "record.json", record.dump(2) + "\n");
  remember(report_file);
  return report;
}

MetricsReport run_experiment(const ExperimentConfig& c, const Workspace& ws, const std::string& label) {
  c.validate();
  const fs::path report_file = ws.run_dir(c) / "report.json";
  if (!reusable(report_file, ws)) {
    for (int fold : c.folds) {
      run_extractor_pretraining(c, ws, fold);
      run_stage1_objectness(c, ws, fold);
      run_stage2_comparison(c, ws, fold);
    }
  }
  return evaluate(c, ws, label);
}

// ---- matrices ---------------------------------------------------------------------

const std::vector<std::string>& matrix_preset_names() {
  static const std::vector<std::string> names = {"paper-ablation", "capacity", "shots", "joint", "backbones"};
  return names;
}

MatrixSpec matrix_preset(const std::string& name, const ExperimentConfig& base,
                         const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("matrix needs at least one seed");
  std::vector<std::pair<std::string, ExperimentConfig>> variants;
  auto with = [&](const std::string& label, auto&& edit) {
    ExperimentConfig c = base;
    edit(c);
    variants.emplace_back(label, c);
  };
  if (name == "paper-ablation") {
    with("Ours", [](ExperimentConfig& c) { c.use_objectness = true; });
    with("Ours-noObj", [](ExperimentConfig& c) {
      c.use_objectness = false;
      c.joint_training = false;
    });
  } else if (name == "capacity") {
    for (const auto& p : ObjectnessArch::preset_names())
      with("Obj-" + p, [&](ExperimentConfig& c) {
        c.use_objectness = true;
        c.objectness_preset = p;
      });
  } else if (name == "shots") {
    with("1-shot", [](ExperimentConfig& c) { c.shots = 1; });
    with("5-shot", [](ExperimentConfig& c) { c.shots = 5; });
  } else if (name == "joint") {
    with("Independent", [](ExperimentConfig& c) {
      c.use_objectness = true;
      c.joint_training = false;
    });
    with("Joint", [](ExperimentConfig& c) {
      c.use_objectness = true;
      c.joint_training = true;
    });
  } else if (name == "backbones") {
    for (const auto& p : ExtractorArch::preset_names())
      with("Extractor-" + p, [&](ExperimentConfig& c) { c.extractor_preset = p; });
  } else {
    throw ConfigError("unknown matrix preset '" + name + "'");
  }
  MatrixSpec spec;
  spec.name = name;
  for (std::uint64_t seed : seeds)
    for (const auto& [label, cfg] : variants) {
      MatrixRow row{label + " [seed " + std::to_string(seed) + "]", label, cfg};
      row.config.seed = seed;
      row.config.validate();
      spec.rows.push_back(std::move(row));
    }
  return spec;
}

MetricsReport average_reports(const std::vector<MetricsReport>& reports, const std::string& label) {
  if (reports.empty()) throw ArgumentError("average_reports: nothing to average");
  MetricsReport out;
  out.label = label;
  out.shots = reports.front().shots;
  out.seed = reports.front().seed;
  for (const auto& r : reports) out.fingerprint += (out.fingerprint.empty() ? "" : ",") + r.fingerprint;
  const double n = static_cast<double>(reports.size());
  for (const auto& f0 : reports.front().folds) {
    FoldMetrics m;
    m.fold = f0.fold;
    for (const auto& r : reports) {
      const auto it = std::find_if(r.folds.begin(), r.folds.end(), [&](const FoldMetrics& f) { return f.fold == f0.fold; });
      if (it == r.folds.end()) throw ArgumentError("average_reports: fold " + std::to_string(f0.fold) + " missing");
      m.episodes += it->episodes;
      m.miou += it->miou / n;
      m.fbiou += it->fbiou / n;
      m.fbiou_dataset += it->fbiou_dataset / n;
      for (const auto& [cat, v] : it->category_iou) m.category_iou[cat] += v / n;
    }
    out.folds.push_back(std::move(m));
  }
  return out;
}

MatrixResult run_matrix(const MatrixSpec& spec, const Workspace& ws, int jobs) {
  if (spec.rows.empty()) throw ConfigError("matrix '" + spec.name + "' has no rows");
  const fs::path dir = ws.root / "matrix" / spec.name;
  const fs::path summary_file = dir / "summary.json";

  std::map<std::string, std::string> slots;
  for (const auto& row : spec.rows) {
    const std::string fp = row.config.fingerprint();
    if (auto [it, fresh] = slots.emplace(row.label, fp); !fresh && it->second != fp)
      throw ProtocolError("matrix '" + spec.name + "': two rows labelled '" + row.label + "' resolve to " +
                          it->second + " and " + fp);
  }
  if (fs::exists(summary_file) && !ws.force) {
    const json old = json::parse(read_text(summary_file));
    for (const auto& r : old.at("rows")) {
      const auto label = r.at("label").get<std::string>();
      const auto it = slots.find(label);
      if (it != slots.end() && it->second != r.at("fingerprint").get<std::string>())
        throw ProtocolError("matrix '" + spec.name + "' slot '" + label + "' already holds run " +
                            r.at("fingerprint").get<std::string>() + " but the new config resolves to " +
                            it->second + "; pass --force to replace it");
    }
  }

  MatrixResult result;
  result.rows.resize(spec.rows.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_guard;
  auto worker = [&] {
    for (std::size_t i = next++; i < spec.rows.size(); i = next++) {
      try {
        log::info("matrix '" + spec.name + "': " + spec.rows[i].label);
        result.rows[i] = run_experiment(spec.rows[i].config, ws, spec.rows[i].label);
      } catch (...) {
        const std::lock_guard<std::mutex> g(failure_guard);
        if (!failure) failure = std::current_exception();
        next = spec.rows.size();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(spec.rows.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<std::string> groups;
  for (const auto& row : spec.rows)
    if (std::find(groups.begin(), groups.end(), row.group) == groups.end()) groups.push_back(row.group);
  for (const auto& g : groups) {
    std::vector<MetricsReport> members;
    for (std::size_t i = 0; i < spec.rows.size(); ++i)
      if (spec.rows[i].group == g) members.push_back(result.rows[i]);
    result.groups.push_back(average_reports(members, g));
  }
  result.table = render_table(result.groups, "Matrix '" + spec.name + "': mIoU (%) per fold, mean over " +
                                                 std::to_string(spec.rows.size() / groups.size()) + " seed(s)") +
                 "\n" + render_table(result.rows, "Individual runs");

  json summary = {{"name", spec.name}, {"rows", json::array()}, {"groups", json::array()}};
  for (std::size_t i = 0; i < spec.rows.size(); ++i)
    summary["rows"].push_back({{"label", spec.rows[i].label},
                               {"group", spec.rows[i].group},
                               {"fingerprint", result.rows[i].fingerprint},
                               {"run_dir", ws.run_dir(spec.rows[i].config).string()},
                               {"mean_miou", result.rows[i].mean_miou()},
                               {"mean_fbiou", result.rows[i].mean_fbiou()}});
  for (const auto& g : result.groups) summary["groups"].push_back(g.to_json());
  write_text(summary_file, summary.dump(2) + "\n");
  write_text(dir / "table.txt", result.table);
  return result;
}

// ---- overlays -----------------------------------------------------------------------

namespace {

Tensor<float> tinted(const Image& image, const BinaryMask& mask, std::array<float, 3> colour) {
  Tensor<float> out = image;
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      if (mask.get(y, x))
        for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = 0.45f * out.at(ch, y, x) + 0.55f * colour[ch];
  return out;
}

Tensor<float> gray_to_rgb(const Tensor<float>& p) {
  Tensor<float> out(3, p.height(), p.width());
  for (int ch = 0; ch < 3; ++ch) std::copy(p.channel(0), p.channel(0) + p.plane(), out.channel(ch));
  return out;
}

Tensor<float> hstack(const std::vector<Tensor<float>>& panels, int gap) {
  const int h = panels.front().height();
  int w = -gap;
  for (const auto& p : panels) w += p.width() + gap;
  Tensor<float> out(3, h, w);
  out.fill(1.0f);
  int x0 = 0;
  for (const auto& p : panels) {
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < p.width(); ++x) out.at(ch, y, x0 + x) = p.at(ch, y, x);
    x0 += p.width() + gap;
  }
  return out;
}

}  // namespace

std::vector<fs::path> render_overlays(const ExperimentConfig& c, const Workspace& ws, int fold, int count,
                                      const fs::path& out_dir) {
  if (count < 1) throw ArgumentError("render_overlays: count must be at least 1");
  ExperimentConfig with_obj = c, without_obj = c;
  with_obj.use_objectness = true;
  without_obj.use_objectness = false;
  without_obj.joint_training = false;
  const FoldModels full = load_fold_models(with_obj, ws, fold);
  const FoldModels plain = load_fold_models(without_obj, ws, fold);

  const auto ds = prepare_dataset(c, ws);
  const FoldSplit split = fold_split(c.split_rule, fold, ds->num_categories());
  const auto pool = ds->test_pool(split);
  const EpisodeSampler sampler = checked_sampler(*ds, pool, split, c.shots);
  const FoldInputs full_in = precompute(*ds, pool, full);
  const FoldInputs plain_in = precompute(*ds, pool, plain);

  Rng rng = make_rng(c.seed, "overlay-episodes", static_cast<std::uint64_t>(fold));
  std::vector<fs::path> written;
  const std::array<float, 3> red{0.9f, 0.1f, 0.1f}, green{0.1f, 0.8f, 0.2f}, blue{0.1f, 0.3f, 0.95f};
  for (int i = 0; i < count; ++i) {
    const EpisodeDraw d = sampler.draw(c.shots, rng);
    const SemanticSample& q = ds->sample(d.query);
    const SemanticSample& s = ds->sample(d.supports.front());
    const auto p_full = predict_episode(*ds, full, full_in, d);
    const auto p_plain = predict_episode(*ds, plain, plain_in, d);
    const Tensor<float> strip = hstack({tinted(s.image, category_mask(s, d.category), red),
                                        tinted(q.image, category_mask(q, d.category), green),
                                        tinted(q.image, p_plain.binary, blue),
                                        gray_to_rgb(full_in.maps.at(d.query).probs),
                                        tinted(q.image, p_full.binary, blue)},
                                       2);
    const fs::path file = out_dir / ("fold" + std::to_string(fold) + "_episode" + std::to_string(i) + "_cat" +
                                     std::to_string(d.category) + ".ppm");
    fs::create_directories(out_dir);
    io::write_ppm(file, io::to_bytes(strip));
    written.push_back(file);
  }
  return written;
}

}  // namespace fewshot::pipeline
