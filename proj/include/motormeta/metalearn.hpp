#pragma once
// Training procedures: supervised embedding pretraining with a temporary global head,
// self-distillation against a frozen teacher, and first-order MAML over episodes.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "motormeta/adapt.hpp"
#include "motormeta/episodes.hpp"
#include "motormeta/evaluation.hpp"
#include "motormeta/net/backbone.hpp"
#include "motormeta/net/checkpoint.hpp"
#include "motormeta/net/loss.hpp"
#include "motormeta/net/optim.hpp"

namespace motormeta {

struct MetaConfig {
  net::BackboneSpec backbone;
  MorphChain chain;

  // outer optimizer (RMSprop) shared by every phase; the ramp spans each phase's epochs
  double lr_start = 1e-6;
  double lr_end = 5e-5;
  double clip_norm = net::kDefaultClipNorm;
  double rms_decay = 0.9;
  double rms_epsilon = 1e-8;
  int batch_size = 32;

  int pretrain_epochs = 200;
  int distill_epochs = 100;
  int batches_per_epoch = 40;
  double alpha = 1.0;
  double beta = 0.02;
  bool distill_from_teacher = false;

  int epochs = 500;  // episodic phase
  int episodes_per_epoch = 4;
  int meta_batch_tasks = 4;
  int n_way = 6;
  int k_shot = 5;
  int q_per_class = 15;
  int inner_steps = 5;
  double inner_lr = 0.005;
  bool full_maml = false;

  std::vector<FaultClass> exclude_classes;  // never seen during training
  std::uint64_t seed = 0;

  void validate() const {
    backbone.validate();
    require(lr_start >= 0.0 && lr_start <= lr_end, "config: need 0 <= lr_start <= lr_end");
    require(clip_norm > 0.0, "config: clip_norm must be positive");
    require(rms_decay >= 0.0 && rms_decay < 1.0, "config: rmsprop decay must lie in [0, 1)");
    require(rms_epsilon > 0.0, "config: rmsprop epsilon must be positive");
    require(batch_size >= 1, "config: batch_size must be >= 1");
    require(pretrain_epochs >= 0 && distill_epochs >= 0 && epochs >= 0, "config: epochs must be non-negative");
    require(batches_per_epoch >= 0, "config: batches_per_epoch must be non-negative");
    require(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0, "config: need alpha >= 0, beta >= 0, alpha + beta > 0");
    require(episodes_per_epoch >= 0, "config: episodes_per_epoch must be non-negative");
    require(meta_batch_tasks >= 1, "config: meta_batch_tasks must be >= 1");
    require(n_way >= 1 && k_shot >= 1 && q_per_class >= 1, "config: bad episode protocol");
    require(inner_steps >= 0, "config: inner_steps must be >= 0");
    require(inner_lr >= 0.0, "config: inner_lr must be non-negative");
  }

  net::OptimizerState optimizer() const {
    net::OptimizerState o;
    o.kind = net::OptimizerKind::rmsprop;
    o.decay = rms_decay;
    o.epsilon = rms_epsilon;
    o.clip_norm = clip_norm;
    return o;
  }

  net::LrSchedule schedule(int phase_epochs) const { return {lr_start, lr_end, std::max(1, phase_epochs)}; }
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  std::vector<double> episode_loss;  // episodic phase only
};

struct StepRecord {
  int epoch = 0;
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
};

struct TrainLog {
  std::string phase;
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;

  void write_csv(std::ostream& os) const {
    os << "epoch,loss,acc,lr\n";
    os.precision(17);
    for (const auto& r : epochs) os << r.epoch << ',' << r.loss << ',' << r.accuracy << ',' << r.lr << '\n';
  }

  nlohmann::json summary() const {
    nlohmann::json j = {{"phase", phase}, {"epochs", epochs.size()}, {"steps", steps.size()}};
    std::size_t clipped = 0;
    for (const auto& s : steps) clipped += s.clipped;
    j["clipped_steps"] = clipped;
    if (!epochs.empty()) {
      j["final_loss"] = epochs.back().loss;
      j["final_accuracy"] = epochs.back().accuracy;
      j["final_lr"] = epochs.back().lr;
    }
    return j;
  }
};

/// Raised when the loss or a gradient turns non-finite; carries the parameters from before the bad step.
class DivergenceError : public RuntimeFailure {
 public:
  DivergenceError(const std::string& what, net::Checkpoint last_good)
      : RuntimeFailure(what), last_good_(std::move(last_good)) {}
  const net::Checkpoint& last_good() const { return last_good_; }

 private:
  net::Checkpoint last_good_;
};

// ---------------------------------------------------------------------------
// Pooled supervised training

/// Every (task, sample) pair of the training tasks, labelled by its position in `classes`.
struct TrainPool {
  std::vector<const TaskDataset*> tasks;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> items;
  std::vector<int> labels;
  std::vector<FaultClass> classes;

  std::size_t size() const { return items.size(); }
};

inline TrainPool make_pool(const std::vector<const TaskDataset*>& tasks, const std::vector<FaultClass>& exclude = {}) {
  require(!tasks.empty(), "training: no tasks");
  TrainPool pool;
  pool.tasks = tasks;
  std::set<FaultClass> present;
  for (const auto* t : tasks)
    for (auto c : t->classes())
      if (std::find(exclude.begin(), exclude.end(), c) == exclude.end()) present.insert(c);
  pool.classes.assign(present.begin(), present.end());
  require(pool.classes.size() >= 2, "training: need at least two classes");
  const int n = tasks.front()->n;
  for (std::uint32_t t = 0; t < tasks.size(); ++t) {
    require(tasks[t]->n == n, "training: tasks mix image sizes");
    for (std::uint32_t i = 0; i < tasks[t]->size(); ++i) {
      const auto c = tasks[t]->labels[i];
      const auto it = std::find(pool.classes.begin(), pool.classes.end(), c);
      if (it == pool.classes.end()) continue;
      pool.items.emplace_back(t, i);
      pool.labels.push_back(static_cast<int>(it - pool.classes.begin()));
    }
  }
  return pool;
}

inline net::Dense<float> init_head(int classes, int dim, std::uint64_t seed) {
  auto h = net::Dense<float>::zeros(classes, dim);
  Rng rng = make_rng(seed, {0x4EADu});
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& w : h.weight.data) w = static_cast<float>(u(rng));
  return h;
}

inline std::uint64_t backbone_seed(const MetaConfig& cfg) { return derive_seed(cfg.seed, {1}); }
inline std::uint64_t head_seed(const MetaConfig& cfg) { return derive_seed(cfg.seed, {2}); }

inline net::MatrixR<float> pool_batch(const TrainPool& pool, std::span<const std::size_t> picks, const MorphChain& chain,
                                      std::vector<int>& labels) {
  std::vector<GrayImage> imgs;
  labels.clear();
  for (auto p : picks) {
    const auto [t, i] = pool.items[p];
    imgs.push_back(pool.tasks[t]->image(i, chain));
    labels.push_back(pool.labels[p]);
  }
  return net::to_batch<float>(imgs);
}

inline std::vector<std::span<float>> trainable(net::EmbeddingParams<float>& p, net::Dense<float>& h) {
  auto v = p.tensors();
  for (auto t : h.tensors()) v.push_back(t);
  return v;
}

inline std::vector<std::span<const float>> gradients(const net::EmbeddingParams<float>& gp, const net::Dense<float>& gh) {
  auto v = gp.tensors();
  v.push_back(gh.weight.span());
  v.push_back(gh.bias.span());
  return v;
}

inline double batch_accuracy(const net::MatrixR<float>& logits, std::span<const int> labels) {
  long ok = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) ok += net::argmax_row(logits, r) == labels[static_cast<std::size_t>(r)];
  return static_cast<double>(ok) / static_cast<double>(logits.rows());
}

struct PretrainResult {
  net::EmbeddingParams<float> params;
  net::Dense<float> head;
  std::vector<FaultClass> head_classes;
  TrainLog log;

  net::Checkpoint checkpoint() const {
    nlohmann::json classes = nlohmann::json::array();
    for (auto c : head_classes) classes.push_back(std::string(to_string(c)));
    return {params, head, {{"phase", log.phase}, {"head_classes", classes}}};
  }
};

struct Teacher {
  const net::EmbeddingParams<float>& params;
  const net::Dense<float>& head;
};

/// Minibatch training of backbone + global head on alpha * CE + beta * KL(teacher || student).
inline PretrainResult train_supervised(const TrainPool& pool, const MetaConfig& cfg, int epochs, double alpha,
                                       double beta, const Teacher* teacher, net::EmbeddingParams<float> params,
                                       net::Dense<float> head, std::string phase) {
  cfg.validate();
  require(beta == 0.0 || teacher != nullptr, "training: beta > 0 needs a teacher");
  require(head.classes() == static_cast<int>(pool.classes.size()), "training: head size does not match class count");
  PretrainResult res{std::move(params), std::move(head), pool.classes, TrainLog{std::move(phase), {}, {}}};
  auto opt = cfg.optimizer();
  const auto sched = cfg.schedule(epochs);
  Rng rng = make_rng(cfg.seed, {0xBA7C4E5ULL});
  std::vector<int> labels;
  std::vector<std::size_t> picks(static_cast<std::size_t>(cfg.batch_size));
  auto last_good = res.checkpoint();  // newest parameters whose loss was finite
  net::ForwardCache<float> spare;

  for (int e = 0; e < epochs; ++e) {
    opt.learning_rate = net::lr_at(sched, e);
    double loss_sum = 0.0, acc_sum = 0.0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      for (auto& p : picks) p = static_cast<std::size_t>(uniform_index(rng, pool.size()));
      const auto X = pool_batch(pool, picks, cfg.chain, labels);
      auto fwd = net::forward(res.params, X, true, std::move(spare));
      const auto logits = res.head.logits(fwd.embeddings);

      double loss = 0.0;
      net::MatrixR<float> dlogits = net::MatrixR<float>::Zero(logits.rows(), logits.cols());
      if (alpha > 0.0) {
        const auto ce = net::softmax_cross_entropy<float>(logits, labels);
        loss += alpha * ce.loss;
        dlogits += static_cast<float>(alpha) * ce.grad;
      }
      if (beta > 0.0) {
        const auto tlogits = teacher->head.logits(net::embed(teacher->params, X));
        const auto kl = net::kl_divergence<float>(logits, tlogits);
        loss += beta * kl.loss;
        dlogits += static_cast<float>(beta) * kl.grad;
      }
      if (!std::isfinite(loss))
        throw DivergenceError(res.log.phase + ": loss became non-finite at epoch " + std::to_string(e), last_good);
      last_good = res.checkpoint();

      net::MatrixR<float> demb;
      const auto gh = res.head.backward(fwd.embeddings, dlogits, &demb);
      const auto gp = net::backward(res.params, fwd.cache, demb);
      spare = std::move(fwd.cache);
      net::StepInfo info;
      try {
        info = net::clip_and_step(opt, trainable(res.params, res.head), gradients(gp, gh));
      } catch (const RuntimeFailure& ex) {
        throw DivergenceError(res.log.phase + ": " + ex.what() + " at epoch " + std::to_string(e), last_good);
      }
      res.log.steps.push_back({e, info.grad_norm, info.clipped});
      loss_sum += loss;
      acc_sum += batch_accuracy(logits, labels);
    }
    if (cfg.batches_per_epoch > 0)
      res.log.epochs.push_back(
          {e, loss_sum / cfg.batches_per_epoch, acc_sum / cfg.batches_per_epoch, opt.learning_rate, {}});
  }
  return res;
}

/// Cross-entropy pretraining of a freshly initialized backbone with a temporary global head.
inline PretrainResult pretrain_embedding(const std::vector<const TaskDataset*>& train_tasks, const MetaConfig& cfg) {
  cfg.validate();
  const auto pool = make_pool(train_tasks, cfg.exclude_classes);
  require(pool.tasks.front()->n == cfg.backbone.input_side, "pretrain: image side does not match the backbone");
  return train_supervised(pool, cfg, cfg.pretrain_epochs, 1.0, 0.0, nullptr,
                          net::EmbeddingParams<float>::init(cfg.backbone, backbone_seed(cfg)),
                          init_head(static_cast<int>(pool.classes.size()), cfg.backbone.embedding_dim(), head_seed(cfg)),
                          "pretrain");
}

/// Trains a same-architecture student on alpha * CE + beta * KL against the frozen teacher.
inline PretrainResult self_distill(const PretrainResult& teacher, const std::vector<const TaskDataset*>& train_tasks,
                                   const MetaConfig& cfg) {
  cfg.validate();
  const auto pool = make_pool(train_tasks, cfg.exclude_classes);
  require(pool.classes == teacher.head_classes, "distill: teacher was trained on a different class set");
  require(teacher.params.spec == cfg.backbone, "distill: teacher backbone does not match the configuration");
  const Teacher t{teacher.params, teacher.head};
  auto params = cfg.distill_from_teacher ? teacher.params : net::EmbeddingParams<float>::init(cfg.backbone, backbone_seed(cfg));
  auto head = cfg.distill_from_teacher
                  ? teacher.head
                  : init_head(static_cast<int>(pool.classes.size()), cfg.backbone.embedding_dim(), head_seed(cfg));
  return train_supervised(pool, cfg, cfg.distill_epochs, cfg.alpha, cfg.beta, &t, std::move(params), std::move(head),
                          "distill");
}

// ---------------------------------------------------------------------------
// Episodic training

struct Adapted {
  net::Dense<float> head;
  std::optional<net::EmbeddingParams<float>> backbone;  // full mode only
  std::vector<double> support_loss;                     // before each step, plus the final loss
};

/// `steps` SGD updates on support cross-entropy, applied to copies of the head (and of the
/// backbone in full mode).
inline Adapted inner_adapt(const net::Dense<float>& head, const net::EmbeddingParams<float>& backbone,
                           const net::MatrixR<float>& support, std::span<const int> labels, int steps, double lr,
                           bool full = false) {
  require(support.rows() > 0, "inner_adapt: empty support set");
  require(steps >= 0, "inner_adapt: steps must be non-negative");
  Adapted a{head, std::nullopt, {}};
  if (!full) {
    const auto emb = net::embed(backbone, support);
    for (int s = 0; s < steps; ++s) a.support_loss.push_back(sgd_head_step(a.head, emb, labels, lr));
    a.support_loss.push_back(net::softmax_cross_entropy<float>(a.head.logits(emb), labels).loss);
    return a;
  }
  a.backbone = backbone;
  net::OptimizerState sgd;
  sgd.kind = net::OptimizerKind::sgd;
  sgd.learning_rate = lr;
  sgd.clip_norm = std::numeric_limits<double>::infinity();
  for (int s = 0; s < steps; ++s) {
    auto fwd = net::forward(*a.backbone, support);
    const auto logits = a.head.logits(fwd.embeddings);
    const auto ce = net::softmax_cross_entropy<float>(logits, labels);
    a.support_loss.push_back(ce.loss);
    net::MatrixR<float> demb;
    const auto gh = a.head.backward(fwd.embeddings, ce.grad, &demb);
    const auto gp = net::backward(*a.backbone, fwd.cache, demb);
    net::clip_and_step(sgd, trainable(*a.backbone, a.head), gradients(gp, gh));
  }
  a.support_loss.push_back(
      net::softmax_cross_entropy<float>(a.head.logits(net::embed(*a.backbone, support)), labels).loss);
  return a;
}

struct MetaResult {
  net::EmbeddingParams<float> params;
  net::Dense<float> head;  // shared initialization theta_0 of the episode head
  TrainLog log;

  net::Checkpoint checkpoint() const { return {params, head, {{"phase", log.phase}}}; }
};

inline net::MatrixR<float> episode_images(const TaskDataset& task, std::span<const std::size_t> idx,
                                          const MorphChain& chain) {
  std::vector<GrayImage> imgs;
  for (auto i : idx) imgs.push_back(task.image(i, chain));
  return net::to_batch<float>(imgs);
}

/// First-order MAML: per episode, adapt a copy on the support set, then take the query-loss
/// gradient at the adapted parameters; the mean over a meta-batch drives one clipped outer step.
inline MetaResult meta_train(const std::vector<const TaskDataset*>& train_tasks, const MetaConfig& cfg,
                             std::optional<net::EmbeddingParams<float>> init = std::nullopt) {
  cfg.validate();
  require(!train_tasks.empty(), "meta_train: empty training split");
  std::vector<TaskDataset> filtered;
  std::vector<const TaskDataset*> tasks = train_tasks;
  if (!cfg.exclude_classes.empty()) {
    for (const auto* t : train_tasks) filtered.push_back(without_classes(*t, cfg.exclude_classes));
    tasks.clear();
    for (const auto& t : filtered) tasks.push_back(&t);
  }
  for (const auto* t : tasks) require(t->n == cfg.backbone.input_side, "meta_train: image side does not match the backbone");

  MetaResult res{init ? *init : net::EmbeddingParams<float>::init(cfg.backbone, backbone_seed(cfg)),
                 init_head(cfg.n_way, cfg.backbone.embedding_dim(), head_seed(cfg)), TrainLog{"metatrain", {}, {}}};
  require(res.params.spec == cfg.backbone, "meta_train: initial backbone does not match the configuration");
  auto opt = cfg.optimizer();
  const auto sched = cfg.schedule(cfg.epochs);
  Rng rng = make_rng(cfg.seed, {0xE915u});
  auto last_good = res.checkpoint();

  for (int e = 0; e < cfg.epochs; ++e) {
    opt.learning_rate = net::lr_at(sched, e);
    EpochRecord rec{e, 0.0, 0.0, opt.learning_rate, {}};
    double acc_sum = 0.0;
    for (int done = 0; done < cfg.episodes_per_epoch;) {
      const int m = std::min(cfg.meta_batch_tasks, cfg.episodes_per_epoch - done);
      auto gp_sum = net::EmbeddingParams<float>::zeros(cfg.backbone);
      auto gh_sum = net::Dense<float>::zeros(res.head.classes(), res.head.dim());
      for (int i = 0; i < m; ++i) {
        const TaskDataset& task = *tasks[uniform_index(rng, tasks.size())];
        const Episode ep = sample_episode(task, cfg.n_way, cfg.k_shot, cfg.q_per_class, rng);
        const auto S = episode_images(task, ep.support, cfg.chain);
        const auto Q = episode_images(task, ep.query, cfg.chain);
        const auto adapted =
            inner_adapt(res.head, res.params, S, ep.support_labels, cfg.inner_steps, cfg.inner_lr, cfg.full_maml);
        const auto& phi = adapted.backbone ? *adapted.backbone : res.params;
        auto fwd = net::forward(phi, Q);
        const auto logits = adapted.head.logits(fwd.embeddings);
        const auto ce = net::softmax_cross_entropy<float>(logits, ep.query_labels);
        if (!std::isfinite(ce.loss))
          throw DivergenceError("metatrain: query loss became non-finite at epoch " + std::to_string(e), last_good);
        net::MatrixR<float> demb;
        const auto gh = adapted.head.backward(fwd.embeddings, ce.grad, &demb);
        const auto gp = net::backward(phi, fwd.cache, demb);
        const float w = 1.0f / static_cast<float>(m);
        auto acc_p = gp_sum.tensors();
        const auto src_p = gp.tensors();
        for (std::size_t t = 0; t < acc_p.size(); ++t)
          for (std::size_t k = 0; k < acc_p[t].size(); ++k) acc_p[t][k] += w * src_p[t][k];
        for (std::size_t k = 0; k < gh.weight.data.size(); ++k) gh_sum.weight.data[k] += w * gh.weight.data[k];
        for (std::size_t k = 0; k < gh.bias.data.size(); ++k) gh_sum.bias.data[k] += w * gh.bias.data[k];
        rec.episode_loss.push_back(ce.loss);
        acc_sum += batch_accuracy(logits, ep.query_labels);
      }
      last_good = res.checkpoint();
      net::StepInfo info;
      try {
        info = net::clip_and_step(opt, trainable(res.params, res.head), gradients(gp_sum, gh_sum));
      } catch (const RuntimeFailure& ex) {
        throw DivergenceError(std::string("metatrain: ") + ex.what() + " at epoch " + std::to_string(e), last_good);
      }
      res.log.steps.push_back({e, info.grad_norm, info.clipped});
      done += m;
    }
    if (!rec.episode_loss.empty()) {
      double s = 0.0;
      for (double l : rec.episode_loss) s += l;
      rec.loss = s / static_cast<double>(rec.episode_loss.size());
      rec.accuracy = acc_sum / static_cast<double>(rec.episode_loss.size());
      res.log.epochs.push_back(std::move(rec));
    }
  }
  return res;
}

/// Frozen backbone, fresh per-episode head on an unseen task; reports query accuracy.
inline EvalReport adapt_to_unseen(const net::EmbeddingParams<float>& backbone, const TaskDataset& unseen,
                                  const MorphChain& chain, const Protocol& proto, const HeadConfig& head,
                                  std::uint64_t seed, const std::vector<FaultClass>& required = {}) {
  const auto et = embed_task(backbone, unseen, chain);
  return evaluate(et, proto, make_classifier(head), seed, std::string(to_string(head.kind)), required);
}

}  // namespace motormeta
