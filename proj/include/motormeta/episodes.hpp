#pragma once
// Task datasets built from a corpus of recordings, meta-train/meta-test split and N-way K-shot episodes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "motormeta/error.hpp"
#include "motormeta/imaging.hpp"
#include "motormeta/rng.hpp"
#include "motormeta/signalgen.hpp"

namespace motormeta {

inline constexpr int kNumLoads = static_cast<int>(kLoadSpeedTable.size());

/// One task's sample pool. Segments are stored as float to keep 9 x 3000 x 4096 samples in memory.
struct TaskDataset {
  std::string id;
  int n = 64;
  std::optional<double> snr_db;
  std::vector<float> values;  // size() * n*n
  std::vector<FaultClass> labels;
  std::vector<int> loads;     // index into kLoadSpeedTable

  std::size_t segment_length() const { return static_cast<std::size_t>(n) * static_cast<std::size_t>(n); }
  std::size_t size() const { return labels.size(); }

  std::span<const float> segment_values(std::size_t i) const {
    return std::span<const float>(values).subspan(i * segment_length(), segment_length());
  }

  std::vector<double> segment_doubles(std::size_t i) const {
    auto s = segment_values(i);
    return {s.begin(), s.end()};
  }

  SignalSegment segment(std::size_t i) const {
    return SignalSegment{segment_doubles(i), HealthState{labels[i], labels[i] == FaultClass::healthy ? 0.0 : 1.0},
                         kLoadSpeedTable[static_cast<std::size_t>(loads[i])], snr_db};
  }

  GrayImage image(std::size_t i, const MorphChain& chain) const {
    const auto v = segment_doubles(i);
    return preprocess(std::span<const double>(v), chain);
  }

  void push_back(std::span<const double> seg, FaultClass label, int load) {
    require(seg.size() == segment_length(), "task " + id + ": segment length mismatch");
    for (double v : seg) values.push_back(static_cast<float>(v));
    labels.push_back(label);
    loads.push_back(load);
  }

  std::vector<FaultClass> classes() const {
    std::set<FaultClass> s(labels.begin(), labels.end());
    return {s.begin(), s.end()};
  }

  std::vector<std::size_t> indices_of(FaultClass c) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) out.push_back(i);
    return out;
  }

  std::size_t count_of(FaultClass c) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), c));
  }
};

/// Union of the sample pools of several tasks, in argument order.
inline TaskDataset merge_tasks(std::span<const TaskDataset* const> tasks) {
  require(!tasks.empty(), "merge_tasks: nothing to merge");
  TaskDataset out;
  out.n = tasks.front()->n;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = *tasks[t];
    require(task.n == out.n, "merge_tasks: tasks have different segment sizes");
    out.id += (t ? "+" : "") + task.id;
    out.values.insert(out.values.end(), task.values.begin(), task.values.end());
    out.labels.insert(out.labels.end(), task.labels.begin(), task.labels.end());
    out.loads.insert(out.loads.end(), task.loads.begin(), task.loads.end());
  }
  return out;
}

/// Returns a copy of `task` without the listed classes.
inline TaskDataset without_classes(const TaskDataset& task, const std::vector<FaultClass>& drop) {
  TaskDataset out;
  out.id = task.id;
  out.n = task.n;
  out.snr_db = task.snr_db;
  for (std::size_t i = 0; i < task.size(); ++i) {
    if (std::find(drop.begin(), drop.end(), task.labels[i]) != drop.end()) continue;
    auto s = task.segment_values(i);
    out.values.insert(out.values.end(), s.begin(), s.end());
    out.labels.push_back(task.labels[i]);
    out.loads.push_back(task.loads[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

/// Recordings keyed by (health class, load index). Entries are either stored signals or lazy
/// sources that synthesize a recording of at least the requested length.
class Corpus {
 public:
  using Source = std::function<RawSignal(std::size_t min_samples)>;

  void add(RawSignal recording) {
    recording.validate();
    const auto key = std::make_pair(recording.label.cls, load_index(recording.op.load_fraction));
    stored_[key].push_back(std::move(recording));
  }

  void add_source(FaultClass cls, int load, Source source) { sources_[{cls, load}] = std::move(source); }

  bool covers(FaultClass cls, int load) const {
    return stored_.count({cls, load}) > 0 || sources_.count({cls, load}) > 0;
  }

  std::vector<RawSignal> recordings(FaultClass cls, int load, std::size_t min_samples) const {
    if (auto it = sources_.find({cls, load}); it != sources_.end()) return {it->second(min_samples)};
    if (auto it = stored_.find({cls, load}); it != stored_.end()) return it->second;
    return {};
  }

 private:
  std::map<std::pair<FaultClass, int>, std::vector<RawSignal>> stored_;
  std::map<std::pair<FaultClass, int>, Corpus::Source> sources_;
};

/// Lazily synthesized corpus covering all nine classes at all five load levels.
inline Corpus synthetic_corpus(const MotorConfig& motor, const BearingGeometry& bearing, std::uint64_t seed,
                               const SignatureLevels& levels = {}) {
  Corpus corpus;
  for (int c = 0; c < kNumFaultClasses; ++c)
    for (int l = 0; l < kNumLoads; ++l) {
      const auto cls = static_cast<FaultClass>(c);
      corpus.add_source(cls, l, [=](std::size_t min_samples) {
        const HealthState hs{cls, cls == FaultClass::healthy ? 0.0 : 1.0};
        const double duration = static_cast<double>(std::max<std::size_t>(min_samples, 1)) / motor.sample_rate_hz;
        return generate_signal(motor, bearing, hs, kLoadSpeedTable[static_cast<std::size_t>(l)], duration,
                               derive_seed(seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(l)}),
                               min_samples, levels);
      });
    }
  return corpus;
}

// ---------------------------------------------------------------------------
// Task construction

struct TaskSpec {
  std::string id;
  std::size_t samples = 3000;
  std::optional<int> emphasis_load;  // this load index is oversampled 3:1
  std::optional<double> snr_db;      // noisy tasks
  std::string noise_base;            // noisy tasks copy this clean task's segments before adding noise
  std::vector<FaultClass> classes;   // empty = all nine
};

struct BuildOptions {
  int n = 64;
  std::size_t stride = 4096;
  double sample_rate_hz = 10000.0;
  double supply_freq_hz = 50.0;
  double harmonic_fraction = 0.5;  // share of injected noise power in 5th/7th harmonics
  std::uint64_t seed = 0;
};

/// T0..T5 clean (each oversampling one load level), T6/T7/T8 = T4's segments at 2/4/6 dB.
inline std::vector<TaskSpec> default_task_specs(std::size_t samples = 3000) {
  std::vector<TaskSpec> specs;
  for (int t = 0; t < 6; ++t) specs.push_back({"T" + std::to_string(t), samples, t % kNumLoads, std::nullopt, "", {}});
  const double snrs[] = {2.0, 4.0, 6.0};
  for (int t = 0; t < 3; ++t) specs.push_back({"T" + std::to_string(6 + t), samples, std::nullopt, snrs[t], "T4", {}});
  return specs;
}

/// Splits `total` into parts proportional to `weights` using largest remainders (ties -> lower index).
inline std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  require(wsum > 0.0, "apportion: weights sum to zero");
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / wsum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    used += out[i];
    rem.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[rem[k % rem.size()].second];
  return out;
}

namespace detail {

inline std::vector<FaultClass> spec_classes(const TaskSpec& s) {
  if (!s.classes.empty()) return s.classes;
  std::vector<FaultClass> all;
  for (int c = 0; c < kNumFaultClasses; ++c) all.push_back(static_cast<FaultClass>(c));
  return all;
}

inline std::uint64_t id_hash(const std::string& id) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : id) h = (h ^ ch) * 0x100000001B3ULL;
  return h;
}

}  // namespace detail

/// Number of segments each clean task takes from each (class, load) cell.
inline std::map<std::pair<FaultClass, int>, std::size_t> cell_counts(const TaskSpec& spec) {
  std::map<std::pair<FaultClass, int>, std::size_t> out;
  const auto classes = detail::spec_classes(spec);
  const auto per_class = apportion(spec.samples, std::vector<double>(classes.size(), 1.0));
  std::vector<double> w(kNumLoads, 1.0);
  if (spec.emphasis_load) {
    require(*spec.emphasis_load >= 0 && *spec.emphasis_load < kNumLoads, "task " + spec.id + ": bad emphasis load");
    w[static_cast<std::size_t>(*spec.emphasis_load)] = 3.0;
  }
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto per_load = apportion(per_class[c], w);
    for (int l = 0; l < kNumLoads; ++l) out[{classes[c], l}] = per_load[static_cast<std::size_t>(l)];
  }
  return out;
}

/// Builds every task in `specs`. Clean tasks draw disjoint windows from the corpus in spec order;
/// noisy tasks re-use the segments of their base task with calibrated drive noise added.
inline std::vector<TaskDataset> build_tasks(const Corpus& corpus, const std::vector<TaskSpec>& specs,
                                            const BuildOptions& opt) {
  require(!specs.empty(), "build_tasks: no task specs");
  require(opt.n >= 2 && opt.stride >= 1, "build_tasks: bad segment geometry");
  std::set<std::string> ids;
  for (const auto& s : specs) {
    require(!s.id.empty() && ids.insert(s.id).second, "build_tasks: duplicate or empty task id '" + s.id + "'");
    require(s.samples >= 1, "task " + s.id + ": sample size must be positive");
  }

  std::vector<TaskDataset> tasks(specs.size());
  std::map<std::pair<FaultClass, int>, std::size_t> need;
  std::vector<std::map<std::pair<FaultClass, int>, std::size_t>> per_task(specs.size());
  for (std::size_t t = 0; t < specs.size(); ++t) {
    tasks[t].id = specs[t].id;
    tasks[t].n = opt.n;
    tasks[t].snr_db = specs[t].snr_db;
    if (!specs[t].noise_base.empty()) continue;
    per_task[t] = cell_counts(specs[t]);
    for (const auto& [cell, k] : per_task[t]) need[cell] += k;
  }
  for (const auto& [cell, k] : need)
    if (k > 0 && !corpus.covers(cell.first, cell.second))
      throw ValidationError("corpus has no recording for " + std::string(to_string(cell.first)) + " at " +
                            std::to_string(static_cast<int>(kLoadSpeedTable[static_cast<std::size_t>(cell.second)]
                                                                .load_fraction * 100)) +
                            "% load");

  const std::size_t window = static_cast<std::size_t>(opt.n) * static_cast<std::size_t>(opt.n);
  for (std::size_t t = 0; t < specs.size(); ++t)
    if (specs[t].noise_base.empty()) tasks[t].values.reserve(specs[t].samples * window);
  // `need` iterates cells in (class, load) order, so every task ends up grouped by class.
  for (const auto& [cell, total] : need) {
    if (total == 0) continue;
    const std::size_t min_samples = (total - 1) * opt.stride + window;
    std::vector<std::vector<double>> windows;
    for (const auto& rec : corpus.recordings(cell.first, cell.second, min_samples)) {
      if (rec.samples.size() < window) continue;
      for (auto& s : segment(rec, opt.n, opt.stride)) {
        if (windows.size() == total) break;
        windows.push_back(std::move(s.values));
      }
      if (windows.size() == total) break;
    }
    if (windows.size() < total)
      throw ValidationError("corpus has only " + std::to_string(windows.size()) + " windows for " +
                            std::string(to_string(cell.first)) + " at load index " + std::to_string(cell.second) +
                            ", tasks need " + std::to_string(total));
    std::size_t cursor = 0;
    for (std::size_t t = 0; t < specs.size(); ++t) {
      auto it = per_task[t].find(cell);
      if (it == per_task[t].end()) continue;
      for (std::size_t k = 0; k < it->second; ++k) tasks[t].push_back(windows[cursor++], cell.first, cell.second);
    }
  }

  for (std::size_t t = 0; t < specs.size(); ++t) {
    const auto& spec = specs[t];
    if (spec.noise_base.empty()) continue;
    require(spec.snr_db.has_value(), "task " + spec.id + ": noise-derived task needs snr_db");
    auto base = std::find_if(specs.begin(), specs.end(), [&](const TaskSpec& s) { return s.id == spec.noise_base; });
    require(base != specs.end() && base->noise_base.empty(),
            "task " + spec.id + ": noise base '" + spec.noise_base + "' is not a clean task");
    const auto& src = tasks[static_cast<std::size_t>(base - specs.begin())];
    auto& dst = tasks[t];
    dst.values.reserve(src.values.size());
    const std::uint64_t task_seed = derive_seed(opt.seed, {detail::id_hash(spec.id)});
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto clean = src.segment_doubles(i);
      const auto noisy = inject_drive_noise(clean, *spec.snr_db, derive_seed(task_seed, {i}), opt.supply_freq_hz,
                                            opt.sample_rate_hz, opt.harmonic_fraction);
      dst.push_back(noisy, src.labels[i], src.loads[i]);
    }
  }
  return tasks;
}

inline const TaskDataset& find_task(const std::vector<TaskDataset>& tasks, const std::string& id) {
  for (const auto& t : tasks)
    if (t.id == id) return t;
  throw ValidationError("no task named '" + id + "'");
}

// ---------------------------------------------------------------------------
// Meta split

struct MetaSplit {
  std::vector<std::string> train_tasks;
  std::vector<std::string> test_tasks;
};

inline MetaSplit meta_split(const std::vector<TaskDataset>& tasks, std::optional<MetaSplit> override_split = {}) {
  require(tasks.size() >= 2, "meta_split: need at least two tasks");
  std::set<std::string> known;
  for (const auto& t : tasks) known.insert(t.id);
  MetaSplit split;
  if (override_split) {
    split = *override_split;
  } else {
    MetaSplit def{{"T0", "T1", "T2", "T3", "T5"}, {"T4", "T6", "T7", "T8"}};
    const bool all_known = std::all_of(def.train_tasks.begin(), def.train_tasks.end(), [&](auto& s) { return known.count(s); }) &&
                           std::all_of(def.test_tasks.begin(), def.test_tasks.end(), [&](auto& s) { return known.count(s); });
    if (all_known) {
      split = def;
    } else {
      for (std::size_t i = 0; i + 1 < tasks.size(); ++i) split.train_tasks.push_back(tasks[i].id);
      split.test_tasks.push_back(tasks.back().id);
    }
  }
  require(!split.train_tasks.empty() && !split.test_tasks.empty(), "meta_split: train and test must both be nonempty");
  for (const auto& s : split.train_tasks) require(known.count(s), "meta_split: unknown task '" + s + "'");
  for (const auto& s : split.test_tasks) {
    require(known.count(s), "meta_split: unknown task '" + s + "'");
    require(std::find(split.train_tasks.begin(), split.train_tasks.end(), s) == split.train_tasks.end(),
            "meta_split: task '" + s + "' is in both train and test");
  }
  return split;
}

// ---------------------------------------------------------------------------
// Episodes

struct Episode {
  std::string task_id;
  int n_way = 0;
  int k_shot = 0;
  int q_per_class = 0;
  std::vector<FaultClass> class_map;  // local label -> health state
  std::vector<std::size_t> support;   // sample indices into the task
  std::vector<int> support_labels;
  std::vector<std::size_t> query;
  std::vector<int> query_labels;

  friend bool operator==(const Episode&, const Episode&) = default;
};

/// Uniform classes without replacement, then uniform samples without replacement within each
/// class; the first k_shot go to the support set, the next q_per_class to the query set.
/// Classes in `required` are always part of the episode.
inline Episode sample_episode(const TaskDataset& task, int n_way, int k_shot, int q_per_class, Rng& rng,
                              const std::vector<FaultClass>& required = {}) {
  require(n_way >= 1 && k_shot >= 0 && q_per_class >= 0, "sample_episode: bad protocol");
  const auto classes = task.classes();
  require(static_cast<std::size_t>(n_way) <= classes.size(),
          "sample_episode: " + std::to_string(n_way) + "-way episode but task " + task.id + " has only " +
              std::to_string(classes.size()) + " classes");
  require(required.size() <= static_cast<std::size_t>(n_way), "sample_episode: more required classes than ways");

  std::vector<FaultClass> chosen;
  std::vector<FaultClass> rest;
  for (auto c : required) {
    require(std::find(classes.begin(), classes.end(), c) != classes.end(),
            "sample_episode: required class " + std::string(to_string(c)) + " absent from task " + task.id);
    chosen.push_back(c);
  }
  for (auto c : classes)
    if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) rest.push_back(c);
  for (auto i : pick_without_replacement(rng, rest.size(), static_cast<std::size_t>(n_way) - chosen.size()))
    chosen.push_back(rest[i]);

  Episode ep;
  ep.task_id = task.id;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_per_class = q_per_class;
  ep.class_map = chosen;
  const auto need = static_cast<std::size_t>(k_shot + q_per_class);
  std::vector<std::vector<std::size_t>> picks;
  for (int local = 0; local < n_way; ++local) {
    const auto pool = task.indices_of(chosen[static_cast<std::size_t>(local)]);
    require(pool.size() >= need, "sample_episode: class " + std::string(to_string(chosen[static_cast<std::size_t>(local)])) +
                                     " has " + std::to_string(pool.size()) + " samples, episode needs " +
                                     std::to_string(need));
    std::vector<std::size_t> p;
    for (auto j : pick_without_replacement(rng, pool.size(), need)) p.push_back(pool[j]);
    picks.push_back(std::move(p));
  }
  for (int local = 0; local < n_way; ++local)
    for (int j = 0; j < k_shot; ++j) {
      ep.support.push_back(picks[static_cast<std::size_t>(local)][static_cast<std::size_t>(j)]);
      ep.support_labels.push_back(local);
    }
  for (int local = 0; local < n_way; ++local)
    for (int j = 0; j < q_per_class; ++j) {
      ep.query.push_back(picks[static_cast<std::size_t>(local)][static_cast<std::size_t>(k_shot + j)]);
      ep.query_labels.push_back(local);
    }
  return ep;
}

inline nlohmann::json episode_to_json(const Episode& ep) {
  nlohmann::json classes = nlohmann::json::array();
  for (auto c : ep.class_map) classes.push_back(std::string(to_string(c)));
  return {{"task", ep.task_id},          {"n_way", ep.n_way},       {"k_shot", ep.k_shot},
          {"q_per_class", ep.q_per_class}, {"classes", classes},      {"support", ep.support},
          {"support_labels", ep.support_labels}, {"query", ep.query}, {"query_labels", ep.query_labels}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  ep.task_id = j.at("task").get<std::string>();
  ep.n_way = j.at("n_way").get<int>();
  ep.k_shot = j.at("k_shot").get<int>();
  ep.q_per_class = j.at("q_per_class").get<int>();
  for (const auto& c : j.at("classes")) ep.class_map.push_back(parse_fault_class(c.get<std::string>()));
  ep.support = j.at("support").get<std::vector<std::size_t>>();
  ep.support_labels = j.at("support_labels").get<std::vector<int>>();
  ep.query = j.at("query").get<std::vector<std::size_t>>();
  ep.query_labels = j.at("query_labels").get<std::vector<int>>();
  return ep;
}

}  // namespace motormeta
