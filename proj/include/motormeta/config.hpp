#pragma once
// Pipeline configuration as one JSON document. Every field has a default; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "motormeta/episodes.hpp"
#include "motormeta/error.hpp"
#include "motormeta/evaluation.hpp"
#include "motormeta/metalearn.hpp"
#include "motormeta/signalgen.hpp"

namespace motormeta {

struct DataConfig {
  int n = 64;
  std::size_t stride = 4096;
  std::size_t samples_per_task = 3000;
  double harmonic_fraction = 0.5;
};

struct EvalConfig {
  std::string task = "T4";
  Protocol protocol;
  HeadConfig head;
  std::vector<std::pair<std::string, std::string>> sweep = {{"clean", "T4"}, {"2dB", "T6"}, {"4dB", "T7"}, {"6dB", "T8"}};
  int curve_max_steps = 20;
  double curve_lr = 0.5;
  std::size_t dump_count = 300;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  MotorConfig motor;
  BearingGeometry bearing;
  SignatureLevels levels;
  DataConfig data;
  MetaSplit split{{"T0", "T1", "T2", "T3", "T5"}, {"T4", "T6", "T7", "T8"}};
  std::vector<std::string> morphology;
  MetaConfig train;
  EvalConfig eval;

  MorphChain chain() const {
    MorphChain c = MorphChain::identity();
    for (const auto& s : morphology) c.steps.push_back(parse_morph_step(s));
    return c;
  }

  /// Training config with the shared seed, image side and morphology filled in.
  MetaConfig meta() const {
    MetaConfig m = train;
    m.seed = seed;
    m.chain = chain();
    m.backbone.input_side = data.n;
    return m;
  }

  BuildOptions build_options() const {
    BuildOptions b;
    b.n = data.n;
    b.stride = data.stride;
    b.sample_rate_hz = motor.sample_rate_hz;
    b.supply_freq_hz = motor.supply_freq_hz;
    b.harmonic_fraction = data.harmonic_fraction;
    b.seed = seed;
    return b;
  }

  void validate() const {
    motor.validate();
    bearing.validate();
    require(data.n >= 2, "config: data.n must be >= 2");
    require(data.stride >= 1, "config: data.stride must be >= 1");
    require(data.samples_per_task >= 1, "config: data.samples_per_task must be >= 1");
    require(data.harmonic_fraction >= 0.0 && data.harmonic_fraction <= 1.0, "config: data.harmonic_fraction must lie in [0, 1]");
    (void)chain();
    meta().validate();
    eval.protocol.validate();
    eval.head.validate();
    require(eval.curve_max_steps >= 0, "config: eval.curve_max_steps must be >= 0");
    require(!split.train_tasks.empty() && !split.test_tasks.empty(), "config: split lists must be nonempty");
  }
};

// ---------------------------------------------------------------------------

namespace detail {

/// Reads fields of one JSON object and remembers which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), "config: " + path_ + " must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config: " + where(key) + " has the wrong type (" + j_.at(key).dump() + ")");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  ObjectReader sub(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return ObjectReader(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ValidationError("config: unknown key " + where(it.key()));
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::vector<std::string> class_names(const std::vector<FaultClass>& cs) {
  std::vector<std::string> out;
  for (auto c : cs) out.emplace_back(to_string(c));
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const PipelineConfig& c) {
  using nlohmann::json;
  json sweep = json::array();
  for (const auto& [label, task] : c.eval.sweep) sweep.push_back({{"label", label}, {"task", task}});
  const auto& t = c.train;
  return {
      {"seed", c.seed},
      {"motor",
       {{"supply_freq_hz", c.motor.supply_freq_hz},
        {"pole_pairs", c.motor.pole_pairs},
        {"rotor_bars", c.motor.rotor_bars},
        {"rated_speed_rpm", c.motor.rated_speed_rpm},
        {"sample_rate_hz", c.motor.sample_rate_hz},
        {"fundamental_amp", c.motor.fundamental_amp}}},
      {"bearing",
       {{"ball_diameter_mm", c.bearing.ball_diameter_mm},
        {"cage_diameter_mm", c.bearing.cage_diameter_mm},
        {"n_balls", c.bearing.n_balls},
        {"contact_angle_deg", c.bearing.contact_angle_deg}}},
      {"signatures",
       {{"supply_h3", c.levels.supply_h3},
        {"supply_h5", c.levels.supply_h5},
        {"supply_h7", c.levels.supply_h7},
        {"brb_sideband", c.levels.brb_sideband},
        {"brb_sideband2", c.levels.brb_sideband2},
        {"brb_speed_ripple", c.levels.brb_speed_ripple},
        {"brb_bar_growth", c.levels.brb_bar_growth},
        {"ecc_static", c.levels.ecc_static},
        {"ecc_dynamic", c.levels.ecc_dynamic},
        {"ecc_dynamic_2fr", c.levels.ecc_dynamic_2fr},
        {"bearing_m1", c.levels.bearing_m1},
        {"bearing_m2", c.levels.bearing_m2},
        {"noise_floor", c.levels.noise_floor}}},
      {"data",
       {{"n", c.data.n},
        {"stride", c.data.stride},
        {"samples_per_task", c.data.samples_per_task},
        {"harmonic_fraction", c.data.harmonic_fraction}}},
      {"split", {{"train", c.split.train_tasks}, {"test", c.split.test_tasks}}},
      {"morphology", c.morphology},
      {"backbone", {{"channels", t.backbone.channels}, {"blocks", t.backbone.blocks}}},
      {"optimizer",
       {{"lr_start", t.lr_start},
        {"lr_end", t.lr_end},
        {"clip_norm", t.clip_norm},
        {"rmsprop_decay", t.rms_decay},
        {"rmsprop_epsilon", t.rms_epsilon},
        {"batch_size", t.batch_size}}},
      {"pretrain", {{"epochs", t.pretrain_epochs}, {"batches_per_epoch", t.batches_per_epoch}}},
      {"distill",
       {{"epochs", t.distill_epochs}, {"alpha", t.alpha}, {"beta", t.beta}, {"from_teacher", t.distill_from_teacher}}},
      {"meta",
       {{"epochs", t.epochs},
        {"episodes_per_epoch", t.episodes_per_epoch},
        {"meta_batch_tasks", t.meta_batch_tasks},
        {"n_way", t.n_way},
        {"k_shot", t.k_shot},
        {"q_per_class", t.q_per_class},
        {"inner_steps", t.inner_steps},
        {"inner_lr", t.inner_lr},
        {"full_maml", t.full_maml}}},
      {"exclude_classes", detail::class_names(t.exclude_classes)},
      {"eval",
       {{"task", c.eval.task},
        {"n_way", c.eval.protocol.n_way},
        {"k_shot", c.eval.protocol.k_shot},
        {"q_per_class", c.eval.protocol.q_per_class},
        {"episodes", c.eval.protocol.episodes},
        {"head", std::string(to_string(c.eval.head.kind))},
        {"lambda", c.eval.head.linear.lambda},
        {"head_max_steps", c.eval.head.linear.max_steps},
        {"head_tolerance", c.eval.head.linear.tolerance},
        {"l2_normalize", c.eval.head.l2_normalize},
        {"temperature", c.eval.head.metric.temperature},
        {"sgd_steps", c.eval.head.sgd_steps},
        {"sgd_lr", c.eval.head.sgd_lr},
        {"sweep", sweep},
        {"curve_max_steps", c.eval.curve_max_steps},
        {"curve_lr", c.eval.curve_lr},
        {"dump_count", c.eval.dump_count}}},
  };
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  detail::ObjectReader r(j, "");
  r.get("seed", c.seed);
  {
    auto m = r.sub("motor");
    m.get("supply_freq_hz", c.motor.supply_freq_hz);
    m.get("pole_pairs", c.motor.pole_pairs);
    m.get("rotor_bars", c.motor.rotor_bars);
    m.get("rated_speed_rpm", c.motor.rated_speed_rpm);
    m.get("sample_rate_hz", c.motor.sample_rate_hz);
    m.get("fundamental_amp", c.motor.fundamental_amp);
    m.finish();
  }
  {
    auto b = r.sub("bearing");
    b.get("ball_diameter_mm", c.bearing.ball_diameter_mm);
    b.get("cage_diameter_mm", c.bearing.cage_diameter_mm);
    b.get("n_balls", c.bearing.n_balls);
    b.get("contact_angle_deg", c.bearing.contact_angle_deg);
    b.finish();
  }
  {
    auto s = r.sub("signatures");
    s.get("supply_h3", c.levels.supply_h3);
    s.get("supply_h5", c.levels.supply_h5);
    s.get("supply_h7", c.levels.supply_h7);
    s.get("brb_sideband", c.levels.brb_sideband);
    s.get("brb_sideband2", c.levels.brb_sideband2);
    s.get("brb_speed_ripple", c.levels.brb_speed_ripple);
    s.get("brb_bar_growth", c.levels.brb_bar_growth);
    s.get("ecc_static", c.levels.ecc_static);
    s.get("ecc_dynamic", c.levels.ecc_dynamic);
    s.get("ecc_dynamic_2fr", c.levels.ecc_dynamic_2fr);
    s.get("bearing_m1", c.levels.bearing_m1);
    s.get("bearing_m2", c.levels.bearing_m2);
    s.get("noise_floor", c.levels.noise_floor);
    s.finish();
  }
  {
    auto d = r.sub("data");
    d.get("n", c.data.n);
    d.get("stride", c.data.stride);
    d.get("samples_per_task", c.data.samples_per_task);
    d.get("harmonic_fraction", c.data.harmonic_fraction);
    d.finish();
  }
  {
    auto s = r.sub("split");
    s.get("train", c.split.train_tasks);
    s.get("test", c.split.test_tasks);
    s.finish();
  }
  r.get("morphology", c.morphology);
  auto& t = c.train;
  {
    auto b = r.sub("backbone");
    b.get("channels", t.backbone.channels);
    b.get("blocks", t.backbone.blocks);
    b.finish();
  }
  {
    auto o = r.sub("optimizer");
    o.get("lr_start", t.lr_start);
    o.get("lr_end", t.lr_end);
    o.get("clip_norm", t.clip_norm);
    o.get("rmsprop_decay", t.rms_decay);
    o.get("rmsprop_epsilon", t.rms_epsilon);
    o.get("batch_size", t.batch_size);
    o.finish();
  }
  {
    auto p = r.sub("pretrain");
    p.get("epochs", t.pretrain_epochs);
    p.get("batches_per_epoch", t.batches_per_epoch);
    p.finish();
  }
  {
    auto d = r.sub("distill");
    d.get("epochs", t.distill_epochs);
    d.get("alpha", t.alpha);
    d.get("beta", t.beta);
    d.get("from_teacher", t.distill_from_teacher);
    d.finish();
  }
  {
    auto m = r.sub("meta");
    m.get("epochs", t.epochs);
    m.get("episodes_per_epoch", t.episodes_per_epoch);
    m.get("meta_batch_tasks", t.meta_batch_tasks);
    m.get("n_way", t.n_way);
    m.get("k_shot", t.k_shot);
    m.get("q_per_class", t.q_per_class);
    m.get("inner_steps", t.inner_steps);
    m.get("inner_lr", t.inner_lr);
    m.get("full_maml", t.full_maml);
    m.finish();
  }
  {
    std::vector<std::string> names;
    r.get("exclude_classes", names);
    for (const auto& n : names) t.exclude_classes.push_back(parse_fault_class(n));
  }
  {
    auto e = r.sub("eval");
    e.get("task", c.eval.task);
    e.get("n_way", c.eval.protocol.n_way);
    e.get("k_shot", c.eval.protocol.k_shot);
    e.get("q_per_class", c.eval.protocol.q_per_class);
    e.get("episodes", c.eval.protocol.episodes);
    std::string head = std::string(to_string(c.eval.head.kind));
    e.get("head", head);
    c.eval.head.kind = parse_head_kind(head);
    e.get("lambda", c.eval.head.linear.lambda);
    e.get("head_max_steps", c.eval.head.linear.max_steps);
    e.get("head_tolerance", c.eval.head.linear.tolerance);
    e.get("l2_normalize", c.eval.head.l2_normalize);
    e.get("temperature", c.eval.head.metric.temperature);
    e.get("sgd_steps", c.eval.head.sgd_steps);
    e.get("sgd_lr", c.eval.head.sgd_lr);
    if (e.has("sweep")) {
      c.eval.sweep.clear();
      for (const auto& row : e.raw("sweep")) {
        require(row.is_object() && row.contains("label") && row.contains("task"),
                "config: eval.sweep entries need \"label\" and \"task\"");
        c.eval.sweep.emplace_back(row["label"].get<std::string>(), row["task"].get<std::string>());
      }
    }
    e.get("curve_max_steps", c.eval.curve_max_steps);
    e.get("curve_lr", c.eval.curve_lr);
    e.get("dump_count", c.eval.dump_count);
    e.finish();
  }
  r.finish();
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace motormeta
