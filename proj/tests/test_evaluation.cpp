#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "motormeta/evaluation.hpp"
#include "motormeta/signalgen.hpp"
#include "support/toy_tasks.hpp"

using namespace motormeta;

namespace {

const net::BackboneSpec kSpec{16, 32, 4};

const TaskDataset& six_class_task() {
  static const auto t = oracle::toy_sine_task("clean", 16, oracle::first_classes(6), 40, 3, 0.1);
  return t;
}

TaskDataset noisy_copy(const TaskDataset& clean, double snr_db, const std::string& id) {
  TaskDataset t = clean;
  t.id = id;
  t.snr_db = snr_db;
  t.values.clear();
  for (std::size_t i = 0; i < clean.size(); ++i)
    for (double v : inject_noise(clean.segment_doubles(i), snr_db, 1000 + i)) t.values.push_back(static_cast<float>(v));
  return t;
}

const net::EmbeddingParams<float>& backbone() {
  static const auto p = net::EmbeddingParams<float>::init(kSpec, 4);
  return p;
}

const EmbeddedTask& embedded() {
  static const auto et = embed_task(backbone(), six_class_task(), MorphChain::identity());
  return et;
}

EmbeddedTask fake_embedding(const TaskDataset& t) {
  EmbeddedTask et{&t, MatrixRd::Zero(static_cast<Eigen::Index>(t.size()), 4)};
  return et;
}

const Classifier kOracle = [](const EpisodeView& v) { return v.ep.query_labels; };
const Classifier kMajority = [](const EpisodeView& v) { return std::vector<int>(v.ep.query.size(), 0); };

}  // namespace

TEST(Evaluate, OracleStubIsPerfectWithDiagonalConfusion) {
  const auto et = fake_embedding(six_class_task());
  const auto r = evaluate(et, Protocol{6, 5, 15, 50}, kOracle, 1);
  EXPECT_EQ(r.mean_accuracy, 1.0);
  EXPECT_EQ(r.ci95, 0.0);
  for (std::size_t i = 0; i < r.classes.size(); ++i)
    for (std::size_t j = 0; j < r.classes.size(); ++j) EXPECT_EQ(r.confusion[i][j] != 0, i == j && r.confusion[i][i] > 0);
  EXPECT_EQ(r.correct_queries(), r.total_queries());
  EXPECT_EQ(r.total_queries(), 50L * 6 * 15);
}

TEST(Evaluate, RandomStubSitsAtChance) {
  const auto et = fake_embedding(six_class_task());
  std::mt19937_64 g(5);
  const Classifier random = [&g](const EpisodeView& v) {
    std::uniform_int_distribution<int> u(0, v.ep.n_way - 1);
    std::vector<int> out(v.ep.query.size());
    for (auto& p : out) p = u(g);
    return out;
  };
  const auto r = evaluate(et, Protocol{6, 5, 15, 500}, random, 2);
  EXPECT_GT(r.ci95, 0.0);
  EXPECT_NEAR(r.mean_accuracy, 1.0 / 6.0, r.ci95);
}

TEST(Evaluate, MajorityStubIsExactlyOneOverN) {
  const auto et = fake_embedding(six_class_task());
  for (int way : {2, 3, 6}) {
    const auto r = evaluate(et, Protocol{way, 1, 4, 40}, kMajority, 3);
    for (double a : r.episode_accuracy) EXPECT_EQ(a, 1.0 / way);
    EXPECT_EQ(r.ci95, 0.0);
  }
}

TEST(Evaluate, ConfusionRowsSumToQueryCountsAndTraceGivesAccuracy) {
  const HeadConfig hc;
  const auto r = evaluate(embedded(), Protocol{4, 2, 5, 80}, make_classifier(hc), 4, "linear");
  std::map<FaultClass, long> shown;
  for (const auto& ep : r.episodes)
    for (auto c : ep.class_map) shown[c] += ep.q_per_class;
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    long row = 0;
    for (long v : r.confusion[i]) row += v;
    EXPECT_EQ(row, shown[r.classes[i]]);
  }
  EXPECT_NEAR(static_cast<double>(r.correct_queries()) / static_cast<double>(r.total_queries()), r.mean_accuracy, 1e-12);
  EXPECT_GE(r.mean_accuracy, 0.0);
  EXPECT_LE(r.mean_accuracy, 1.0);
  EXPECT_GE(r.ci95, 0.0);
}

TEST(Evaluate, CiIsNormalApproximation) {
  const auto m = mean_ci({0.5, 1.0, 0.75, 1.0});
  const double mean = 0.8125;
  const double sd = std::sqrt(((0.5 - mean) * (0.5 - mean) + 2 * (1 - mean) * (1 - mean) + (0.75 - mean) * (0.75 - mean)) / 3);
  EXPECT_DOUBLE_EQ(m.mean, mean);
  EXPECT_DOUBLE_EQ(m.ci95, 1.96 * sd / 2.0);
}

TEST(Evaluate, DeterministicGivenSeed) {
  for (auto kind : {HeadKind::linear, HeadKind::metric, HeadKind::sgd}) {
    HeadConfig hc;
    hc.kind = kind;
    const auto a = evaluate(backbone(), six_class_task(), MorphChain::identity(), Protocol{6, 5, 15, 30}, hc, 7);
    const auto b = evaluate(backbone(), six_class_task(), MorphChain::identity(), Protocol{6, 5, 15, 30}, hc, 7);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(a.episodes, b.episodes);
  }
}

TEST(Evaluate, InfeasibleProtocolRejected) {
  const auto et = fake_embedding(six_class_task());
  EXPECT_THROW(evaluate(et, Protocol{7, 1, 1, 1}, kOracle, 1), ValidationError);
  EXPECT_THROW(evaluate(et, Protocol{6, 30, 11, 1}, kOracle, 1), ValidationError);
  EXPECT_THROW(evaluate(et, Protocol{6, 5, 15, 0}, kOracle, 1), ValidationError);
}

TEST(Evaluate, MergedTaskCombination) {
  const auto noisy = noisy_copy(six_class_task(), 4.0, "noisy");
  const TaskDataset* parts[] = {&six_class_task(), &noisy};
  const auto combo = merge_tasks(parts);
  EXPECT_EQ(combo.id, "clean+noisy");
  const auto r = evaluate(backbone(), combo, MorphChain::identity(), Protocol{6, 5, 15, 20}, HeadConfig{}, 3);
  EXPECT_EQ(r.total_queries(), 20L * 90);
  EXPECT_GT(r.mean_accuracy, 1.0 / 6.0);
}

TEST(Evaluate, ReportJsonAndConfusionCsv) {
  const auto r = evaluate(fake_embedding(six_class_task()), Protocol{6, 1, 2, 3}, kOracle, 9, "oracle");
  const auto j = to_json(r);
  EXPECT_EQ(j["task"], "clean");
  EXPECT_EQ(j["head"], "oracle");
  EXPECT_EQ(j["protocol"]["n_way"], 6);
  EXPECT_EQ(j["mean_accuracy"], 1.0);
  EXPECT_TRUE(j["snr_db"].is_null());
  EXPECT_EQ(j["confusion"].size(), 6u);
  std::ostringstream os;
  write_confusion_csv(r, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "true\\pred,healthy,brb1,brb2,brb3,ecc_static,ecc_dynamic");
  std::getline(is, line);
  EXPECT_EQ(line, "healthy,6,0,0,0,0,0");
}

TEST(Sweep, PairedEpisodesAcrossRows) {
  const auto n2 = noisy_copy(six_class_task(), 2.0, "n2");
  const auto n6 = noisy_copy(six_class_task(), 6.0, "n6");
  const std::vector<std::pair<std::string, const TaskDataset*>> rows = {
      {"clean", &six_class_task()}, {"clean-again", &six_class_task()}, {"2dB", &n2}, {"6dB", &n6}};
  const auto sweep = noise_sweep(backbone(), rows, MorphChain::identity(), Protocol{6, 10, 5, 40}, HeadConfig{}, 11);
  ASSERT_EQ(sweep.size(), 4u);
  EXPECT_EQ(sweep[0].report.mean_accuracy, sweep[1].report.mean_accuracy);
  for (const auto& row : sweep) {
    ASSERT_EQ(row.report.episodes.size(), 40u);
    for (std::size_t e = 0; e < 40; ++e) {
      EXPECT_EQ(row.report.episodes[e].support, sweep[0].report.episodes[e].support);
      EXPECT_EQ(row.report.episodes[e].query, sweep[0].report.episodes[e].query);
    }
  }
  EXPECT_EQ(sweep[2].report.snr_db, std::optional<double>(2.0));
}

TEST(Sweep, OracleIsPerfectAtEverySnr) {
  for (double snr : {2.0, 4.0, 6.0}) {
    const auto t = noisy_copy(six_class_task(), snr, "n");
    EXPECT_EQ(evaluate(fake_embedding(t), Protocol{6, 10, 5, 20}, kOracle, 1).mean_accuracy, 1.0);
  }
}

TEST(Sweep, MismatchedLayoutRejected) {
  const auto other = oracle::toy_sine_task("other", 16, oracle::first_classes(6), 40, 99);
  auto shuffled = other;
  std::swap(shuffled.labels[0], shuffled.labels[1]);
  const std::vector<std::pair<std::string, const TaskDataset*>> rows = {{"clean", &other}, {"bad", &shuffled}};
  EXPECT_THROW(noise_sweep(backbone(), rows, MorphChain::identity(), Protocol{6, 1, 1, 1}, HeadConfig{}, 1),
               ValidationError);
  const std::vector<std::pair<std::string, const TaskDataset*>> missing = {{"clean", &other}, {"2dB", nullptr}};
  EXPECT_THROW(noise_sweep(backbone(), missing, MorphChain::identity(), Protocol{6, 1, 1, 1}, HeadConfig{}, 1),
               ValidationError);
}

TEST(Curve, LengthChanceAtZeroAndMonotoneWithinCi) {
  const Protocol p{6, 5, 15, 60};
  const auto curve = adaptation_curve(embedded(), p, 20, 0.5, 13);
  ASSERT_EQ(curve.size(), 21u);
  EXPECT_EQ(curve[0].steps, 0);
  EXPECT_DOUBLE_EQ(curve[0].mean_accuracy, 1.0 / 6.0);
  for (std::size_t s = 1; s < curve.size(); ++s)
    EXPECT_GE(curve[s].mean_accuracy + curve[s].ci95, curve[s - 1].mean_accuracy) << "step " << s;
  EXPECT_GT(curve.back().mean_accuracy, 0.5);
  EXPECT_EQ(adaptation_curve(embedded(), p, 0, 0.5, 13).size(), 1u);
  EXPECT_THROW(adaptation_curve(embedded(), p, -1, 0.5, 13), ValidationError);
}

TEST(Dump, HeaderOnlyForZeroCount) {
  std::ostringstream os;
  dump_embeddings(backbone(), six_class_task(), MorphChain::identity(), 0, os);
  std::string expected;
  for (int j = 0; j < kSpec.embedding_dim(); ++j) expected += "e" + std::to_string(j) + ",";
  EXPECT_EQ(os.str(), expected + "label\n");
}

TEST(Dump, RowsMatchDirectForwardBitwise) {
  const std::size_t count = 100;
  std::ostringstream os;
  dump_embeddings(backbone(), six_class_task(), MorphChain::identity(), count, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    const std::size_t idx = rows * six_class_task().size() / count;
    const std::vector<std::size_t> one{idx};
    const auto e = embed_indices(backbone(), six_class_task(), one, MorphChain::identity());
    std::istringstream ls(line);
    std::string cell;
    int col = 0;
    while (std::getline(ls, cell, ',')) {
      if (col < kSpec.embedding_dim()) {
        float v = 0;
        std::from_chars(cell.data(), cell.data() + cell.size(), v);
        ASSERT_EQ(std::bit_cast<std::uint32_t>(v), std::bit_cast<std::uint32_t>(e(0, col))) << "row " << rows;
      } else {
        EXPECT_EQ(cell, to_string(six_class_task().labels[idx]));
      }
      ++col;
    }
    EXPECT_EQ(col, kSpec.embedding_dim() + 1);
    ++rows;
  }
  EXPECT_EQ(rows, count);
  std::ostringstream too_many;
  EXPECT_THROW(dump_embeddings(backbone(), six_class_task(), MorphChain::identity(), 10000, too_many), ValidationError);
}

TEST(HeadKindTest, Parse) {
  EXPECT_EQ(parse_head_kind("metric"), HeadKind::metric);
  EXPECT_EQ(to_string(parse_head_kind("sgd")), "sgd");
  EXPECT_THROW(parse_head_kind("lstm"), ValidationError);
}
