#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>

#include "motormeta/net/backbone.hpp"
#include "motormeta/net/checkpoint.hpp"
#include "motormeta/net/loss.hpp"
#include "motormeta/net/optim.hpp"
#include "support/gradcheck.hpp"

using namespace motormeta;
using namespace motormeta::net;

namespace {

const BackboneSpec kSmall{16, 32, 4};

MatrixR<double> row_logits(std::initializer_list<double> v) {
  MatrixR<double> m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

template <typename Scalar>
MatrixR<Scalar> random_batch(int batch, int side, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MatrixR<Scalar> x(batch, side * side);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<Scalar>(u(g));
  return x;
}

MatrixR<double> random_logits(int rows, int cols, std::mt19937_64& g, double scale = 3.0) {
  std::normal_distribution<double> nd(0.0, scale);
  MatrixR<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(g);
  return m;
}

}  // namespace

TEST(Backbone, ShapesAndEmbeddingDim) {
  const BackboneSpec def;
  EXPECT_EQ(def.embedding_dim(), 512);
  EXPECT_EQ(kSmall.embedding_dim(), 32);
  const auto p = EmbeddingParams<float>::init(def, 1);
  EXPECT_EQ(p.conv[0].shape, (Shape{32, 1, 3, 3}));
  EXPECT_EQ(p.conv[3].shape, (Shape{32, 32, 3, 3}));
  EXPECT_EQ(p.gamma[2].shape, Shape{32});
  for (const auto& t : p.conv) EXPECT_EQ(shape_size(t.shape), t.data.size());
  EXPECT_TRUE(p.all_finite());
  BackboneSpec bad = def;
  bad.input_side = 40;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Backbone, ZeroWeightsGiveZeroEmbeddings) {
  const auto p = EmbeddingParams<double>::zeros(kSmall);
  const auto e = embed(p, random_batch<double>(3, 16, 1));
  EXPECT_EQ(e.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backbone, BatchIndependence) {
  const auto p = EmbeddingParams<float>::init(kSmall, 2);
  const auto x2 = random_batch<float>(2, 16, 2);
  const MatrixR<float> x1 = x2.topRows(1);
  EXPECT_EQ(MatrixR<float>(embed(p, x1)), MatrixR<float>(embed(p, x2).topRows(1)));
}

TEST(Backbone, PermutationEquivariance) {
  const auto p = EmbeddingParams<float>::init(kSmall, 3);
  const auto x = random_batch<float>(5, 16, 3);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  MatrixR<float> xp(x.rows(), x.cols());
  for (int i = 0; i < 5; ++i) xp.row(i) = x.row(perm[i]);
  const auto e = embed(p, x);
  const auto ep = embed(p, xp);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(MatrixR<float>(ep.row(i)), MatrixR<float>(e.row(perm[i])));
}

TEST(Backbone, ShapeMismatchRejected) {
  const auto p = EmbeddingParams<float>::init(kSmall, 1);
  EXPECT_THROW(embed(p, random_batch<float>(2, 8, 1)), ValidationError);
}

TEST(Backbone, EmbeddingHashIsStable) {
  const auto p = EmbeddingParams<float>::init(BackboneSpec{}, 42);
  const auto x = random_batch<float>(1, 64, 42);
  const auto e = embed(p, x);
  const auto h = hash_values<float>(kFnvOffset, std::span<const float>(e.data(), static_cast<std::size_t>(e.size())));
  EXPECT_EQ(h, 3216022893992250852ULL) << h;
  EXPECT_EQ(p.hash(), 17132162394477263457ULL) << p.hash();
}

TEST(Backward, FiniteDifferences64Bit) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = oracle::finite_difference_check<double>(kSmall, 2, 11, 1e-6, 60);
  ASSERT_EQ(checks.size(), 12u);
  for (const auto& c : checks) EXPECT_LT(c.rel_error, 1e-3) << c.name;
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 60.0);
}

TEST(Backward, FiniteDifferences32Bit) {
  for (const auto& c : oracle::finite_difference_check<float>(kSmall, 2, 12, 1e-2, 40))
    EXPECT_LT(c.rel_error, 5e-2) << c.name;
}

TEST(Backward, SquaredNormDirectionalDerivative) {
  auto p = EmbeddingParams<double>::init(kSmall, 5);
  const auto x = random_batch<double>(3, 16, 5);
  auto fr = forward(p, x);
  const auto g = backward(p, fr.cache, MatrixR<double>(2.0 * fr.embeddings));

  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto dir = EmbeddingParams<double>::zeros(kSmall);
  for (auto t : dir.tensors())
    for (auto& v : t) v = nd(rng);
  double analytic = 0.0;
  const auto gs = g.tensors();
  const auto ds = std::as_const(dir).tensors();
  for (std::size_t t = 0; t < gs.size(); ++t)
    for (std::size_t i = 0; i < gs[t].size(); ++i) analytic += gs[t][i] * ds[t][i];

  const double h = 1e-6;
  auto shifted = [&](double s) {
    auto q = p;
    auto qs = q.tensors();
    for (std::size_t t = 0; t < qs.size(); ++t)
      for (std::size_t i = 0; i < qs[t].size(); ++i) qs[t][i] += s * ds[t][i];
    return embed(q, x).squaredNorm();
  };
  const double fd = (shifted(h) - shifted(-h)) / (2 * h);
  EXPECT_NEAR(analytic, fd, 1e-4 * std::abs(fd));
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
  const auto p = EmbeddingParams<double>::init(kSmall, 7);
  auto fr = forward(p, random_batch<double>(2, 16, 7));
  const auto g = backward(p, fr.cache, MatrixR<double>(MatrixR<double>::Zero(2, kSmall.embedding_dim())));
  for (auto t : g.tensors())
    for (double v : t) ASSERT_EQ(v, 0.0);
}

TEST(Backward, StaleCacheRejected) {
  auto p = EmbeddingParams<double>::init(kSmall, 8);
  auto fr = forward(p, random_batch<double>(2, 16, 8));
  p.conv[1].data[0] += 0.5;
  EXPECT_THROW(backward(p, fr.cache, MatrixR<double>(MatrixR<double>::Ones(2, kSmall.embedding_dim()))), ValidationError);
  const auto fresh = EmbeddingParams<double>::init(kSmall, 8);
  EXPECT_THROW(backward(fresh, fr.cache, MatrixR<double>(MatrixR<double>::Ones(3, kSmall.embedding_dim()))), ValidationError);
}

TEST(CrossEntropy, Examples) {
  const std::vector<int> y0{0};
  MatrixR<double> uniform = MatrixR<double>::Zero(1, 6);
  EXPECT_NEAR(softmax_cross_entropy(uniform, y0).loss, std::log(6.0), 1e-12);
  EXPECT_NEAR(softmax_cross_entropy(row_logits({0.0, std::log(3.0)}), y0).loss, std::log(4.0), 1e-12);
  EXPECT_EQ(softmax_cross_entropy(row_logits({std::numeric_limits<double>::infinity(), 0.0}), y0).loss, 0.0);
  EXPECT_NEAR(softmax_cross_entropy(row_logits({1e4, 0.0}), y0).loss, 0.0, 1e-12);
  const std::vector<int> bad{2};
  EXPECT_THROW(softmax_cross_entropy(row_logits({0.0, 1.0}), bad), ValidationError);
  const std::vector<int> neg{-1};
  EXPECT_THROW(softmax_cross_entropy(row_logits({0.0, 1.0}), neg), ValidationError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverB) {
  std::mt19937_64 g(1);
  const auto z = random_logits(4, 5, g);
  const std::vector<int> y{0, 3, 4, 1};
  const auto r = softmax_cross_entropy(z, y);
  const auto p = softmax(z);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 5; ++c) EXPECT_NEAR(r.grad(i, c), (p(i, c) - (c == y[i])) / 4.0, 1e-15);
}

TEST(KlDivergence, Examples) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_NEAR(kl_divergence(row_logits({0.0, 0.0}), row_logits({inf, -inf})).loss, std::log(2.0), 1e-12);
  std::mt19937_64 g(2);
  const auto z = random_logits(3, 6, g);
  EXPECT_NEAR(kl_divergence(z, z).loss, 0.0, 1e-12);
  EXPECT_THROW(kl_divergence(z, random_logits(3, 5, g)), ValidationError);
}

TEST(KlDivergence, GradientMatchesFiniteDifference) {
  std::mt19937_64 g(3);
  const auto s = random_logits(2, 4, g);
  const auto t = random_logits(2, 4, g);
  const auto r = kl_divergence(s, t);
  const double h = 1e-6;
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c) {
      auto sp = s, sm = s;
      sp(i, c) += h;
      sm(i, c) -= h;
      EXPECT_NEAR(r.grad(i, c), (kl_divergence(sp, t).loss - kl_divergence(sm, t).loss) / (2 * h), 1e-8);
    }
}

TEST(LossProperties, SoftmaxRowsCeAndKlNonNegative) {
  std::mt19937_64 g(4);
  std::uniform_int_distribution<int> lab(0, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_logits(3, 7, g, 10.0);
    const auto b = random_logits(3, 7, g, 10.0);
    const auto p = softmax(a);
    for (int r = 0; r < 3; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
    const std::vector<int> y{lab(g), lab(g), lab(g)};
    EXPECT_GE(softmax_cross_entropy(a, y).loss, 0.0);
    EXPECT_GT(kl_divergence(a, b).loss, 0.0);
    MatrixR<double> shifted = a;
    for (int r = 0; r < 3; ++r) shifted.row(r).array() += 7.5 * (r + 1);
    EXPECT_NEAR(kl_divergence(shifted, a).loss, 0.0, 1e-12);
  }
}

TEST(DenseHead, BackwardMatchesFiniteDifference) {
  std::mt19937_64 g(5);
  auto head = Dense<double>::zeros(3, 4);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto t : head.tensors())
    for (auto& v : t) v = nd(g);
  const auto emb = random_logits(5, 4, g, 1.0);
  const std::vector<int> y{0, 1, 2, 1, 0};
  const auto r = softmax_cross_entropy(head.logits(emb), y);
  MatrixR<double> demb(5, 4);
  const auto gh = head.backward(emb, r.grad, &demb);
  const double h = 1e-6;
  auto hp = head, hm = head;
  hp.weight.data[5] += h;
  hm.weight.data[5] -= h;
  EXPECT_NEAR(gh.weight.data[5],
              (softmax_cross_entropy(hp.logits(emb), y).loss - softmax_cross_entropy(hm.logits(emb), y).loss) / (2 * h), 1e-8);
  auto ep = emb, em = emb;
  ep(2, 1) += h;
  em(2, 1) -= h;
  EXPECT_NEAR(demb(2, 1),
              (softmax_cross_entropy(head.logits(ep), y).loss - softmax_cross_entropy(head.logits(em), y).loss) / (2 * h), 1e-8);
}

TEST(Optimizer, ClipHalvesNorm1124) {
  OptimizerState opt;
  opt.kind = OptimizerKind::sgd;
  opt.learning_rate = 1.0;
  std::vector<double> p{0.0, 0.0}, gr{11.24 * 0.6, 11.24 * 0.8};
  const auto info = clip_and_step<double>(opt, {std::span<double>(p)}, {std::span<const double>(gr)});
  EXPECT_NEAR(info.grad_norm, 11.24, 1e-12);
  EXPECT_NEAR(info.scale, 0.5, 1e-12);
  EXPECT_TRUE(info.clipped);
  EXPECT_NEAR(p[0], -11.24 * 0.6 * 0.5, 1e-12);
  EXPECT_NEAR(p[1], -11.24 * 0.8 * 0.5, 1e-12);
}

TEST(Optimizer, SgdUnitRateOnSelfGradient) {
  OptimizerState opt;
  opt.kind = OptimizerKind::sgd;
  opt.learning_rate = 1.0;
  std::vector<double> p{1.0, -2.0, 3.0};
  const auto gr = p;
  const auto info = clip_and_step<double>(opt, {std::span<double>(p)}, {std::span<const double>(gr)});
  EXPECT_FALSE(info.clipped);
  EXPECT_EQ(p, std::vector<double>(3, 0.0));
}

TEST(Optimizer, RmspropFirstIterate) {
  OptimizerState opt;
  opt.learning_rate = 0.01;
  std::vector<double> p{0.5, 0.5}, gr{0.3, -2.0};
  clip_and_step<double>(opt, {std::span<double>(p)}, {std::span<const double>(gr)});
  for (int i = 0; i < 2; ++i)
    EXPECT_NEAR(p[i] - 0.5, -0.01 * gr[i] / std::sqrt((1 - 0.9) * gr[i] * gr[i] + 1e-8), 1e-15);
  ASSERT_EQ(opt.accumulators.size(), 1u);
  EXPECT_EQ(opt.accumulators[0].size(), 2u);
}

TEST(Optimizer, ClipNeverIncreasesNormAndIsIdentityBelow) {
  std::mt19937_64 g(6);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> sc(0.01, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    OptimizerState opt;
    opt.kind = OptimizerKind::sgd;
    opt.learning_rate = 1.0;
    std::vector<double> a(7), b(3);
    const double s = sc(g);
    for (auto& v : a) v = s * nd(g);
    for (auto& v : b) v = s * nd(g);
    std::vector<double> pa(7, 0.0), pb(3, 0.0);
    const auto info = clip_and_step<double>(opt, {std::span<double>(pa), std::span<double>(pb)},
                                            {std::span<const double>(a), std::span<const double>(b)});
    double applied = 0.0;
    for (double v : pa) applied += v * v;
    for (double v : pb) applied += v * v;
    applied = std::sqrt(applied);
    EXPECT_LE(applied, info.grad_norm * (1 + 1e-12));
    EXPECT_LE(applied, kDefaultClipNorm * (1 + 1e-12));
    if (info.grad_norm <= kDefaultClipNorm) {
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(pa[i], -a[i]);
    }
  }
}

TEST(Optimizer, Errors) {
  OptimizerState opt;
  std::vector<double> p{1.0}, nan{std::nan("")}, two{1.0, 2.0};
  EXPECT_THROW(clip_and_step<double>(opt, {std::span<double>(p)}, {std::span<const double>(nan)}), RuntimeFailure);
  EXPECT_THROW(clip_and_step<double>(opt, {std::span<double>(p)}, {std::span<const double>(two)}), ValidationError);
  opt.clip_norm = 0.0;
  EXPECT_THROW(clip_and_step<double>(opt, {std::span<double>(p)}, {std::span<const double>(p)}), ValidationError);
}

TEST(LrSchedule, Examples) {
  const LrSchedule s;
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 1e-6);
  EXPECT_DOUBLE_EQ(lr_at(s, 500), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(s, 250), 2.55e-5);
  EXPECT_DOUBLE_EQ(lr_at(s, 900), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(s, -3), 1e-6);
  EXPECT_THROW(lr_at(LrSchedule{1e-3, 1e-4, 10}, 1), ValidationError);
  EXPECT_THROW(lr_at(LrSchedule{1e-6, 1e-4, 0}, 0), ValidationError);
}

TEST(CheckpointTest, BitExactRoundTrip) {
  Checkpoint ck{EmbeddingParams<float>::init(BackboneSpec{}, 9), Dense<float>::zeros(6, 512), {{"phase", "test"}}};
  ck.backbone.gamma[1].data[3] = std::numeric_limits<float>::denorm_min();
  ck.backbone.beta[2].data[0] = -0.0f;
  ck.head->bias.data[2] = 1.0f / 3.0f;
  const auto bytes = serialize(ck);
  EXPECT_EQ(bytes.substr(0, 4), "MMCK");
  const auto back = deserialize(bytes);
  EXPECT_EQ(back, ck);
  EXPECT_EQ(serialize(back), bytes);
  EXPECT_TRUE(std::signbit(back.backbone.beta[2].data[0]));

  const auto path = (std::filesystem::temp_directory_path() / "motormeta_net_test.ckpt").string();
  save_checkpoint(Checkpoint{ck.backbone, std::nullopt, {}}, path);
  const auto nohead = load_checkpoint(path);
  EXPECT_FALSE(nohead.head.has_value());
  EXPECT_EQ(nohead.backbone, ck.backbone);
  std::filesystem::remove(path);
}

TEST(CheckpointTest, CorruptInputRejected) {
  const auto bytes = serialize(Checkpoint{EmbeddingParams<float>::init(kSmall, 1), std::nullopt, {}});
  EXPECT_THROW(deserialize("XXXX" + bytes.substr(4)), ValidationError);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 3)), RuntimeFailure);
  EXPECT_THROW(deserialize(bytes + "x"), ValidationError);
  EXPECT_THROW(load_checkpoint("/nonexistent/path.ckpt"), ValidationError);
}
