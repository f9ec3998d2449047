#pragma once
// Episodic evaluation on frozen embeddings: reports with confidence intervals and confusion
// counts, paired noise sweeps, adaptation curves and embedding dumps.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "motormeta/adapt.hpp"
#include "motormeta/episodes.hpp"
#include "motormeta/net/backbone.hpp"

namespace motormeta {

struct Protocol {
  int n_way = 6;
  int k_shot = 5;
  int q_per_class = 15;
  int episodes = 600;

  void validate() const {
    require(n_way >= 1, "protocol: n_way must be >= 1");
    require(k_shot >= 1, "protocol: k_shot must be >= 1");
    require(q_per_class >= 1, "protocol: q_per_class must be >= 1");
    require(episodes >= 1, "protocol: episodes must be >= 1");
  }
};

/// Every sample of a task pushed through the backbone once.
struct EmbeddedTask {
  const TaskDataset* task = nullptr;
  MatrixRd emb;  // size() x d
};

inline net::MatrixR<float> embed_indices(const net::EmbeddingParams<float>& params, const TaskDataset& task,
                                         std::span<const std::size_t> idx, const MorphChain& chain) {
  require(task.n == params.spec.input_side, "task " + task.id + " has " + std::to_string(task.n) + "x" +
                                                std::to_string(task.n) + " images, backbone expects side " +
                                                std::to_string(params.spec.input_side));
  std::vector<GrayImage> imgs;
  imgs.reserve(idx.size());
  for (auto i : idx) imgs.push_back(task.image(i, chain));
  return net::embed(params, net::to_batch<float>(imgs));
}

inline EmbeddedTask embed_task(const net::EmbeddingParams<float>& params, const TaskDataset& task,
                               const MorphChain& chain, std::size_t batch = 64) {
  EmbeddedTask et{&task, MatrixRd(static_cast<Eigen::Index>(task.size()), params.spec.embedding_dim())};
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < task.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(task.size(), start + batch); ++i) idx.push_back(i);
    const auto e = embed_indices(params, task, idx, chain);
    et.emb.middleRows(static_cast<Eigen::Index>(start), e.rows()) = e.cast<double>();
  }
  return et;
}

struct EpisodeView {
  const Episode& ep;
  MatrixRd support;
  MatrixRd query;
};

inline MatrixRd gather_rows(const MatrixRd& m, std::span<const std::size_t> idx) {
  MatrixRd out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

/// Maps an episode to predicted episode-local labels, one per query row.
using Classifier = std::function<std::vector<int>(const EpisodeView&)>;

enum class HeadKind { linear, metric, sgd };

inline std::string_view to_string(HeadKind k) {
  switch (k) {
    case HeadKind::linear: return "linear";
    case HeadKind::metric: return "metric";
    case HeadKind::sgd: return "sgd";
  }
  return "?";
}

inline HeadKind parse_head_kind(std::string_view s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "metric") return HeadKind::metric;
  if (s == "sgd") return HeadKind::sgd;
  throw ValidationError("unknown head '" + std::string(s) + "' (expected linear, metric or sgd)");
}

struct HeadConfig {
  HeadKind kind = HeadKind::linear;
  HeadFitOptions linear;
  bool l2_normalize = true;  // applies to the linear and sgd heads
  MetricConfig metric;
  int sgd_steps = 5;
  double sgd_lr = 0.5;

  void validate() const {
    require(linear.lambda >= 0.0, "head: lambda must be non-negative");
    require(linear.max_steps >= 0, "head: max_steps must be non-negative");
    metric.validate();
    require(sgd_steps >= 0, "head: sgd_steps must be non-negative");
    require(sgd_lr >= 0.0, "head: sgd_lr must be non-negative");
  }
};

inline Classifier make_classifier(const HeadConfig& hc) {
  hc.validate();
  switch (hc.kind) {
    case HeadKind::linear:
      return [hc](const EpisodeView& v) {
        const MatrixRd s = hc.l2_normalize ? l2_normalize_rows(v.support) : v.support;
        const MatrixRd q = hc.l2_normalize ? l2_normalize_rows(v.query) : v.query;
        return predict_linear(fit_linear_head(s, v.ep.support_labels, v.ep.n_way, hc.linear), q).labels;
      };
    case HeadKind::metric:
      return [hc](const EpisodeView& v) {
        return predict_metric(v.query, v.support, v.ep.support_labels, v.ep.n_way, hc.metric).labels;
      };
    case HeadKind::sgd:
      return [hc](const EpisodeView& v) {
        const MatrixRd s = hc.l2_normalize ? l2_normalize_rows(v.support) : v.support;
        const MatrixRd q = hc.l2_normalize ? l2_normalize_rows(v.query) : v.query;
        auto head = net::Dense<double>::zeros(v.ep.n_way, static_cast<int>(s.cols()));
        for (int i = 0; i < hc.sgd_steps; ++i) sgd_head_step(head, s, v.ep.support_labels, hc.sgd_lr);
        return predict_dense(head, q).labels;
      };
  }
  throw ValidationError("unknown head kind");
}

// ---------------------------------------------------------------------------

struct EvalReport {
  std::string task_id;
  std::string head;
  Protocol protocol;
  std::uint64_t seed = 0;
  std::optional<double> snr_db;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;  // 1.96 standard errors
  std::vector<double> episode_accuracy;
  std::vector<FaultClass> classes;               // confusion axes
  std::vector<std::vector<long>> confusion;      // [true][predicted]
  std::vector<Episode> episodes;

  long total_queries() const {
    long t = 0;
    for (const auto& r : confusion)
      for (long v : r) t += v;
    return t;
  }
  long correct_queries() const {
    long t = 0;
    for (std::size_t i = 0; i < confusion.size(); ++i) t += confusion[i][i];
    return t;
  }
};

struct MeanCi {
  double mean = 0.0;
  double ci95 = 0.0;
};

inline MeanCi mean_ci(const std::vector<double>& xs) {
  MeanCi r;
  if (xs.empty()) return r;
  double s = 0.0;
  for (double x : xs) s += x;
  r.mean = s / static_cast<double>(xs.size());
  if (xs.size() < 2 || std::all_of(xs.begin(), xs.end(), [&](double x) { return x == xs.front(); })) return r;
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  r.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(xs.size()));
  return r;
}

/// Episode schedule shared by every evaluation with the same seed and protocol. Tasks with the
/// same label layout therefore see the same sample indices.
inline Rng episode_rng(std::uint64_t seed) { return make_rng(seed, {0xE9150DE5ULL}); }

inline EvalReport evaluate(const EmbeddedTask& et, const Protocol& proto, const Classifier& classify, std::uint64_t seed,
                           std::string head_name = "custom", const std::vector<FaultClass>& required = {}) {
  proto.validate();
  require(et.task != nullptr, "evaluate: no task");
  const TaskDataset& task = *et.task;
  EvalReport rep;
  rep.task_id = task.id;
  rep.head = std::move(head_name);
  rep.protocol = proto;
  rep.seed = seed;
  rep.snr_db = task.snr_db;
  rep.classes = task.classes();
  std::map<FaultClass, std::size_t> axis;
  for (std::size_t i = 0; i < rep.classes.size(); ++i) axis[rep.classes[i]] = i;
  rep.confusion.assign(rep.classes.size(), std::vector<long>(rep.classes.size(), 0));

  auto rng = episode_rng(seed);
  for (int e = 0; e < proto.episodes; ++e) {
    Episode ep = sample_episode(task, proto.n_way, proto.k_shot, proto.q_per_class, rng, required);
    EpisodeView view{ep, gather_rows(et.emb, ep.support), gather_rows(et.emb, ep.query)};
    const auto pred = classify(view);
    require(pred.size() == ep.query.size(), "evaluate: classifier returned wrong number of predictions");
    long correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      require(pred[i] >= 0 && pred[i] < ep.n_way, "evaluate: classifier predicted a label outside the episode");
      const auto t = axis.at(ep.class_map[static_cast<std::size_t>(ep.query_labels[i])]);
      const auto p = axis.at(ep.class_map[static_cast<std::size_t>(pred[i])]);
      ++rep.confusion[t][p];
      correct += pred[i] == ep.query_labels[i];
    }
    rep.episode_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(pred.size()));
    rep.episodes.push_back(std::move(ep));
  }
  const auto mc = mean_ci(rep.episode_accuracy);
  rep.mean_accuracy = mc.mean;
  rep.ci95 = mc.ci95;
  return rep;
}

inline EvalReport evaluate(const net::EmbeddingParams<float>& params, const TaskDataset& task, const MorphChain& chain,
                           const Protocol& proto, const HeadConfig& head, std::uint64_t seed) {
  const auto et = embed_task(params, task, chain);
  return evaluate(et, proto, make_classifier(head), seed, std::string(to_string(head.kind)));
}

// ---------------------------------------------------------------------------

struct SweepRow {
  std::string label;
  EvalReport report;
};

/// Evaluates each task on the same episode schedule. The tasks must share their label layout
/// (noisy tasks derived from the same clean task do), otherwise episodes would not be paired.
inline std::vector<SweepRow> noise_sweep(const net::EmbeddingParams<float>& params,
                                         const std::vector<std::pair<std::string, const TaskDataset*>>& rows,
                                         const MorphChain& chain, const Protocol& proto, const HeadConfig& head,
                                         std::uint64_t seed) {
  require(!rows.empty(), "noise_sweep: no tasks");
  for (const auto& [label, t] : rows) {
    require(t != nullptr, "noise_sweep: missing task for row " + label);
    require(t->labels == rows.front().second->labels,
            "noise_sweep: task " + t->id + " does not share the label layout of " + rows.front().second->id +
                ", episodes cannot be paired");
  }
  std::vector<SweepRow> out;
  for (const auto& [label, t] : rows) out.push_back({label, evaluate(params, *t, chain, proto, head, seed)});
  return out;
}

struct CurvePoint {
  int steps = 0;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;
};

/// Query accuracy after 0..max_steps SGD steps of a zero-initialized head, on fixed episodes.
inline std::vector<CurvePoint> adaptation_curve(const EmbeddedTask& et, const Protocol& proto, int max_steps, double lr,
                                                std::uint64_t seed, bool l2_normalize = true) {
  proto.validate();
  require(max_steps >= 0, "adaptation_curve: max_steps must be non-negative");
  require(lr >= 0.0, "adaptation_curve: lr must be non-negative");
  std::vector<std::vector<double>> acc(static_cast<std::size_t>(max_steps) + 1);
  auto rng = episode_rng(seed);
  for (int e = 0; e < proto.episodes; ++e) {
    const Episode ep = sample_episode(*et.task, proto.n_way, proto.k_shot, proto.q_per_class, rng);
    MatrixRd s = gather_rows(et.emb, ep.support);
    MatrixRd q = gather_rows(et.emb, ep.query);
    if (l2_normalize) {
      s = l2_normalize_rows(s);
      q = l2_normalize_rows(q);
    }
    auto head = net::Dense<double>::zeros(ep.n_way, static_cast<int>(s.cols()));
    for (int step = 0; step <= max_steps; ++step) {
      if (step > 0) sgd_head_step(head, s, ep.support_labels, lr);
      const auto pred = predict_dense(head, q).labels;
      long correct = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query_labels[i];
      acc[static_cast<std::size_t>(step)].push_back(static_cast<double>(correct) / static_cast<double>(pred.size()));
    }
  }
  std::vector<CurvePoint> out;
  for (int step = 0; step <= max_steps; ++step) {
    const auto mc = mean_ci(acc[static_cast<std::size_t>(step)]);
    out.push_back({step, mc.mean, mc.ci95});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_float(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// CSV with columns e0..e{d-1},label; rows are `count` samples spread evenly over the task.
inline void dump_embeddings(const net::EmbeddingParams<float>& params, const TaskDataset& task, const MorphChain& chain,
                            std::size_t count, std::ostream& os) {
  require(count <= task.size(), "dump: task " + task.id + " has only " + std::to_string(task.size()) + " samples");
  const int d = params.spec.embedding_dim();
  for (int j = 0; j < d; ++j) os << 'e' << j << ',';
  os << "label\n";
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < count; ++i) idx.push_back(i * task.size() / count);
  for (std::size_t start = 0; start < idx.size(); start += 64) {
    const auto end = std::min(idx.size(), start + 64);
    const auto e = embed_indices(params, task, std::span<const std::size_t>(idx).subspan(start, end - start), chain);
    for (Eigen::Index r = 0; r < e.rows(); ++r) {
      for (Eigen::Index c = 0; c < e.cols(); ++c) os << format_float(e(r, c)) << ',';
      os << to_string(task.labels[idx[start + static_cast<std::size_t>(r)]]) << '\n';
    }
  }
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (auto c : r.classes) classes.push_back(std::string(to_string(c)));
  nlohmann::json j = {{"task", r.task_id},
                      {"head", r.head},
                      {"protocol",
                       {{"n_way", r.protocol.n_way},
                        {"k_shot", r.protocol.k_shot},
                        {"q_per_class", r.protocol.q_per_class},
                        {"episodes", r.protocol.episodes}}},
                      {"seed", r.seed},
                      {"mean_accuracy", r.mean_accuracy},
                      {"ci95", r.ci95},
                      {"classes", classes},
                      {"confusion", r.confusion}};
  j["snr_db"] = r.snr_db ? nlohmann::json(*r.snr_db) : nlohmann::json(nullptr);
  return j;
}

inline void write_confusion_csv(const EvalReport& r, std::ostream& os) {
  os << "true\\pred";
  for (auto c : r.classes) os << ',' << to_string(c);
  os << '\n';
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    os << to_string(r.classes[i]);
    for (long v : r.confusion[i]) os << ',' << v;
    os << '\n';
  }
}

inline void print_report(const EvalReport& r, std::ostream& os) {
  os << r.task_id << "  " << r.protocol.n_way << "-way " << r.protocol.k_shot << "-shot  head=" << r.head
     << "  episodes=" << r.protocol.episodes << "\n"
     << "  accuracy " << std::fixed << std::setprecision(2) << 100.0 * r.mean_accuracy << "% +/- " << 100.0 * r.ci95
     << "%\n";
  os.unsetf(std::ios::floatfield);
}

}  // namespace motormeta
