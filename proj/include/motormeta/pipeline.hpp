#pragma once
// End-to-end helpers: synthetic data -> pretrain -> distill -> evaluate.

#include <string>
#include <vector>

#include "motormeta/config.hpp"
#include "motormeta/episodes.hpp"
#include "motormeta/evaluation.hpp"
#include "motormeta/metalearn.hpp"

namespace motormeta {

inline std::vector<TaskDataset> build_synthetic_tasks(const PipelineConfig& cfg) {
  cfg.validate();
  const auto corpus = synthetic_corpus(cfg.motor, cfg.bearing, cfg.seed, cfg.levels);
  return build_tasks(corpus, default_task_specs(cfg.data.samples_per_task), cfg.build_options());
}

inline std::vector<const TaskDataset*> select_tasks(const std::vector<TaskDataset>& tasks,
                                                    const std::vector<std::string>& ids) {
  std::vector<const TaskDataset*> out;
  for (const auto& id : ids) out.push_back(&find_task(tasks, id));
  return out;
}

inline std::vector<const TaskDataset*> train_tasks_of(const std::vector<TaskDataset>& tasks, const PipelineConfig& cfg) {
  return select_tasks(tasks, meta_split(tasks, cfg.split).train_tasks);
}

struct PipelineResult {
  PretrainResult teacher;
  PretrainResult student;
  std::vector<EvalReport> reports;  // one per requested shot count
};

/// Pretrain, distill, then evaluate the distilled backbone on cfg.eval.task for each shot count.
inline PipelineResult run_pipeline(const std::vector<TaskDataset>& tasks, const PipelineConfig& cfg,
                                   const std::vector<int>& shots) {
  const auto train = train_tasks_of(tasks, cfg);
  const auto mc = cfg.meta();
  PipelineResult r{pretrain_embedding(train, mc), {}, {}};
  r.student = self_distill(r.teacher, train, mc);
  const auto et = embed_task(r.student.params, find_task(tasks, cfg.eval.task), mc.chain);
  for (int k : shots) {
    Protocol p = cfg.eval.protocol;
    p.k_shot = k;
    r.reports.push_back(evaluate(et, p, make_classifier(cfg.eval.head), cfg.seed, std::string(to_string(cfg.eval.head.kind))));
  }
  return r;
}

}  // namespace motormeta
