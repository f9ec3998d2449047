// motormeta command-line interface.
//
// Exit codes: 0 success, 1 invalid input (bad flag, bad config, missing checkpoint), 2 runtime failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "motormeta/motormeta.hpp"

namespace fs = std::filesystem;
using namespace motormeta;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

PipelineConfig load(const Globals& g) {
  PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Globals& g) {
  fs::create_directories(g.out);
  return fs::path(g.out);
}

fs::path data_dir(const Globals& g, const std::string& data) { return data.empty() ? fs::path(g.out) / "dataset" : fs::path(data); }

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  if (!os) throw RuntimeFailure("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

void write_manifest(const fs::path& dir, const std::string& command, const PipelineConfig& cfg, nlohmann::json extra) {
  extra["command"] = command;
  extra["seed"] = cfg.seed;
  extra["config"] = to_json(cfg);
  write_json(dir / ("run_" + command + ".json"), extra);
}

void write_log(const fs::path& dir, const TrainLog& log) {
  std::ofstream os(dir / (log.phase + "_log.csv"));
  if (!os) throw RuntimeFailure("cannot write training log");
  log.write_csv(os);
  write_json(dir / (log.phase + "_summary.json"), log.summary());
}

void save_divergence(const fs::path& dir, const DivergenceError& e) {
  const auto p = dir / "last_good.ckpt";
  net::save_checkpoint(e.last_good(), p.string());
  std::cerr << "last good parameters saved to " << p.string() << "\n";
}

/// A task id, or several joined with '+', which evaluates on the union of their sample pools.
TaskDataset resolve_task(const std::vector<TaskDataset>& tasks, const std::string& spec) {
  std::vector<const TaskDataset*> parts;
  std::size_t start = 0;
  while (true) {
    const auto plus = spec.find('+', start);
    parts.push_back(&find_task(tasks, spec.substr(start, plus == std::string::npos ? std::string::npos : plus - start)));
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  if (parts.size() == 1) return *parts.front();
  return merge_tasks(parts);
}

net::Checkpoint require_checkpoint(const std::string& path) {
  require(!path.empty(), "a checkpoint is required (--checkpoint PATH)");
  return net::load_checkpoint(path);
}

std::string now_seconds(std::chrono::steady_clock::time_point t0) {
  const auto s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return std::to_string(static_cast<long>(s)) + " s";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"motormeta: few-shot fault diagnosis from motor current signals"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "pipeline configuration (JSON)");
  auto* seed_opt = app.add_option("--seed", seed_value, "override the configuration seed");
  app.add_option("--out", g.out, "output directory")->capture_default_str();

  std::string data, ckpt, task, head, teacher, init;
  int epochs = -1, shots = -1, episodes = -1, ways = -1, max_steps = -1;
  long samples = -1, count = -1;
  double beta = -1.0;

  auto* gen = app.add_subcommand("gen", "synthesize the corpus and write tasks T0..T8");
  gen->add_option("--samples", samples, "samples per task");

  auto* pre = app.add_subcommand("pretrain", "cross-entropy pretraining of the embedding network");
  pre->add_option("--data", data, "dataset directory (default <out>/dataset)");
  pre->add_option("--epochs", epochs, "override pretrain epochs");

  auto* dis = app.add_subcommand("distill", "self-distillation of a pretrained embedding");
  dis->add_option("--data", data, "dataset directory (default <out>/dataset)");
  dis->add_option("--teacher", teacher, "teacher checkpoint (default <out>/pretrain.ckpt)");
  dis->add_option("--epochs", epochs, "override distill epochs");
  dis->add_option("--beta", beta, "override the KL weight");

  auto* meta = app.add_subcommand("metatrain", "first-order MAML over episodes");
  meta->add_option("--data", data, "dataset directory (default <out>/dataset)");
  meta->add_option("--init", init, "initial backbone checkpoint");
  meta->add_option("--epochs", epochs, "override meta-training epochs");

  auto* ev = app.add_subcommand("eval", "episodic evaluation with a frozen backbone");
  auto* sw = app.add_subcommand("sweep", "paired evaluation across noise levels");
  auto* cu = app.add_subcommand("curve", "query accuracy versus adaptation steps");
  auto* du = app.add_subcommand("dump", "write embeddings and labels as CSV");
  for (auto* sc : {ev, sw, cu, du}) {
    sc->add_option("--checkpoint", ckpt, "model checkpoint");
    sc->add_option("--data", data, "dataset directory (default <out>/dataset)");
  }
  for (auto* sc : {ev, cu, du}) sc->add_option("--task", task, "task id, or ids joined with '+'");
  for (auto* sc : {ev, sw, cu}) {
    sc->add_option("--shots", shots, "support examples per class");
    sc->add_option("--episodes", episodes, "number of episodes");
    sc->add_option("--ways", ways, "classes per episode");
  }
  for (auto* sc : {ev, sw}) sc->add_option("--head", head, "linear, metric or sgd");
  cu->add_option("--max-steps", max_steps, "largest number of adaptation steps");
  du->add_option("--count", count, "number of rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  if (seed_opt->count()) g.seed = seed_value;

  const auto t0 = std::chrono::steady_clock::now();
  try {
    auto cfg = load(g);
    const auto out = out_dir(g);
    auto protocol = [&](int default_shots) {
      Protocol p = cfg.eval.protocol;
      if (default_shots > 0) p.k_shot = default_shots;
      if (shots > 0) p.k_shot = shots;
      if (episodes > 0) p.episodes = episodes;
      if (ways > 0) p.n_way = ways;
      p.validate();
      return p;
    };
    auto head_cfg = [&] {
      HeadConfig h = cfg.eval.head;
      if (!head.empty()) h.kind = parse_head_kind(head);
      return h;
    };

    if (*gen) {
      if (samples > 0) cfg.data.samples_per_task = static_cast<std::size_t>(samples);
      const auto tasks = build_synthetic_tasks(cfg);
      const auto dir = data_dir(g, "");
      write_dataset(tasks, dir, {{"config", to_json(cfg)}});
      write_manifest(out, "gen", cfg, {{"dataset", dir.string()}});
      std::cout << "wrote " << tasks.size() << " tasks to " << dir.string() << " (" << now_seconds(t0) << ")\n";
    } else if (*pre) {
      auto mc = cfg.meta();
      if (epochs >= 0) mc.pretrain_epochs = epochs;
      const auto tasks = read_dataset(data_dir(g, data));
      try {
        const auto r = pretrain_embedding(train_tasks_of(tasks, cfg), mc);
        net::save_checkpoint(r.checkpoint(), (out / "pretrain.ckpt").string());
        write_log(out, r.log);
        write_manifest(out, "pretrain", cfg, {{"checkpoint", (out / "pretrain.ckpt").string()}, {"epochs", mc.pretrain_epochs}});
        std::cout << "pretrain done: " << r.log.summary().dump() << " (" << now_seconds(t0) << ")\n";
      } catch (const DivergenceError& e) {
        save_divergence(out, e);
        throw;
      }
    } else if (*dis) {
      auto mc = cfg.meta();
      if (epochs >= 0) mc.distill_epochs = epochs;
      if (beta >= 0.0) mc.beta = beta;
      mc.validate();
      const auto tck = net::load_checkpoint(teacher.empty() ? (out / "pretrain.ckpt").string() : teacher);
      require(tck.head.has_value(), "teacher checkpoint has no classifier head");
      PretrainResult t{tck.backbone, *tck.head, {}, {}};
      for (const auto& c : tck.meta.value("head_classes", nlohmann::json::array()))
        t.head_classes.push_back(parse_fault_class(c.get<std::string>()));
      const auto tasks = read_dataset(data_dir(g, data));
      try {
        const auto r = self_distill(t, train_tasks_of(tasks, cfg), mc);
        net::save_checkpoint(r.checkpoint(), (out / "distill.ckpt").string());
        write_log(out, r.log);
        write_manifest(out, "distill", cfg, {{"checkpoint", (out / "distill.ckpt").string()}, {"epochs", mc.distill_epochs}});
        std::cout << "distill done: " << r.log.summary().dump() << " (" << now_seconds(t0) << ")\n";
      } catch (const DivergenceError& e) {
        save_divergence(out, e);
        throw;
      }
    } else if (*meta) {
      auto mc = cfg.meta();
      if (epochs >= 0) mc.epochs = epochs;
      std::optional<net::EmbeddingParams<float>> start;
      if (!init.empty()) start = net::load_checkpoint(init).backbone;
      const auto tasks = read_dataset(data_dir(g, data));
      try {
        const auto r = meta_train(train_tasks_of(tasks, cfg), mc, start);
        net::save_checkpoint(r.checkpoint(), (out / "metatrain.ckpt").string());
        write_log(out, r.log);
        write_manifest(out, "metatrain", cfg, {{"checkpoint", (out / "metatrain.ckpt").string()}, {"epochs", mc.epochs}});
        std::cout << "metatrain done: " << r.log.summary().dump() << " (" << now_seconds(t0) << ")\n";
      } catch (const DivergenceError& e) {
        save_divergence(out, e);
        throw;
      }
    } else if (*ev) {
      const auto ck = require_checkpoint(ckpt);
      const auto tasks = read_dataset(data_dir(g, data));
      const auto t = resolve_task(tasks, task.empty() ? cfg.eval.task : task);
      const auto p = protocol(0);
      const auto h = head_cfg();
      const auto rep = evaluate(ck.backbone, t, cfg.chain(), p, h, cfg.seed);
      const std::string stem = "eval_" + t.id + "_" + std::to_string(p.k_shot) + "shot_" + std::string(to_string(h.kind));
      write_json(out / (stem + ".json"), to_json(rep));
      std::ofstream cm(out / (stem + "_confusion.csv"));
      write_confusion_csv(rep, cm);
      print_report(rep, std::cout);
      write_confusion_csv(rep, std::cout);
    } else if (*sw) {
      const auto ck = require_checkpoint(ckpt);
      const auto tasks = read_dataset(data_dir(g, data));
      std::vector<std::pair<std::string, const TaskDataset*>> rows;
      for (const auto& [label, id] : cfg.eval.sweep) rows.emplace_back(label, &find_task(tasks, id));
      const auto p = protocol(10);
      const auto res = noise_sweep(ck.backbone, rows, cfg.chain(), p, head_cfg(), cfg.seed);
      nlohmann::json j = nlohmann::json::array();
      std::cout << "level   task  accuracy\n";
      for (const auto& r : res) {
        auto rj = to_json(r.report);
        rj["label"] = r.label;
        j.push_back(rj);
        std::cout << std::left << std::setw(8) << r.label << std::setw(6) << r.report.task_id << std::fixed
                  << std::setprecision(2) << 100.0 * r.report.mean_accuracy << "% +/- " << 100.0 * r.report.ci95 << "%\n";
      }
      write_json(out / "sweep.json", j);
    } else if (*cu) {
      const auto ck = require_checkpoint(ckpt);
      const auto tasks = read_dataset(data_dir(g, data));
      const auto t = resolve_task(tasks, task.empty() ? cfg.eval.task : task);
      const auto p = protocol(0);
      const int steps = max_steps >= 0 ? max_steps : cfg.eval.curve_max_steps;
      const auto et = embed_task(ck.backbone, t, cfg.chain());
      const auto curve = adaptation_curve(et, p, steps, cfg.eval.curve_lr, cfg.seed, cfg.eval.head.l2_normalize);
      std::ofstream os(out / "curve.csv");
      os << "steps,accuracy,ci95\n";
      std::cout << "steps,accuracy,ci95\n";
      for (const auto& c : curve) {
        os << c.steps << ',' << c.mean_accuracy << ',' << c.ci95 << '\n';
        std::cout << c.steps << ',' << c.mean_accuracy << ',' << c.ci95 << '\n';
      }
    } else if (*du) {
      const auto ck = require_checkpoint(ckpt);
      const auto tasks = read_dataset(data_dir(g, data));
      const auto t = resolve_task(tasks, task.empty() ? cfg.eval.task : task);
      const auto n = count >= 0 ? static_cast<std::size_t>(count) : cfg.eval.dump_count;
      const auto p = out / ("embeddings_" + t.id + ".csv");
      std::ofstream os(p);
      if (!os) throw RuntimeFailure("cannot write " + p.string());
      dump_embeddings(ck.backbone, t, cfg.chain(), n, os);
      std::cout << "wrote " << n << " embeddings to " << p.string() << "\n";
    }
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}
