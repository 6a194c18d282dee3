#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "h2dilr/codebook.hpp"
#include "h2dilr/error.hpp"
#include "oracles.hpp"

namespace h2dilr {
namespace {

Codebook book_with(std::vector<std::vector<double>> codes, UpdateMode mode = UpdateMode::loss) {
  std::size_t K = codes.size(), D = codes[0].size();
  Codebook cb("test", K, D, mode);
  Tensor values({K, D});
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t d = 0; d < D; ++d) values[k * D + d] = codes[k][d];
  }
  cb.set_embeddings(values);
  return cb;
}

TEST(NearestCode, PicksCloserCode) {
  Codebook cb = book_with({{0, 0}, {1, 1}});
  std::vector<double> z{0.1, 0.2};
  NearestCode nc = nearest_code(z, cb);
  EXPECT_EQ(nc.index, 0u);
  EXPECT_NEAR(nc.distance, std::sqrt(0.05), 1e-15);
}

TEST(NearestCode, TieGoesToLowestIndex) {
  Codebook cb = book_with({{0, 0}, {1, 1}});
  std::vector<double> z{0.5, 0.5};
  EXPECT_EQ(nearest_code(z, cb).index, 0u);
  Codebook cb3 = book_with({{2, 0}, {0, 0}, {0, 0}});
  std::vector<double> origin{0, 0};
  EXPECT_EQ(nearest_code(origin, cb3).index, 1u);
}

TEST(NearestCode, DimensionMismatchRejected) {
  Codebook cb = book_with({{0, 0}, {1, 1}});
  std::vector<double> z{1, 2, 3};
  EXPECT_THROW(nearest_code(z, cb), ShapeError);
}

TEST(NearestCode, MatchesExhaustiveScan) {
  std::mt19937_64 rng(42);
  Codebook cb = Codebook::uniform("r", 32, 8, UpdateMode::loss, rng);
  std::normal_distribution<double> n(0.0, 0.05);
  for (int q = 0; q < 1000; ++q) {
    std::vector<double> z(8);
    for (auto& v : z) v = n(rng);
    NearestCode got = nearest_code(z, cb);
    testing::ScanResult want = testing::exhaustive_scan(z, cb.embeddings().value);
    ASSERT_EQ(got.index, want.index);
    ASSERT_NEAR(got.distance, want.distance, 1e-12);
  }
}

TEST(Quantize, SingleRowReducesToNearestCode) {
  Codebook cb = book_with({{0, 0}, {1, 1}});
  QuantizationResult r = quantize(Tensor({1, 2}, std::vector<double>{0.9, 0.8}), cb);
  EXPECT_EQ(r.indices, std::vector<std::size_t>{1});
  EXPECT_EQ(cb.usage()[1], 1u);
}

TEST(Quantize, CodeRowsMapToThemselves) {
  std::mt19937_64 rng(3);
  Codebook cb = Codebook::uniform("r", 6, 4, UpdateMode::ema, rng);
  QuantizationResult r = quantize(cb.embeddings().value, cb);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(r.indices[k], k);
    EXPECT_EQ(r.distances[k], 0.0);
  }
}

TEST(Quantize, RowsAreExactCodeCopiesAndUsageSums) {
  std::mt19937_64 rng(5);
  Codebook cb = Codebook::uniform("r", 16, 4, UpdateMode::loss, rng);
  Tensor z = testing::random_tensor(rng, {50, 4}, -0.2, 0.2);
  QuantizationResult r = quantize(z, cb);
  std::uint64_t total = 0;
  for (auto c : cb.usage()) total += c;
  EXPECT_EQ(total, 50u);
  for (std::size_t j = 0; j < 50; ++j) {
    auto code = cb.code(r.indices[j]);
    for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(r.quantized[j * 4 + d], code[d]);
  }
}

TEST(Quantize, IdempotentOnQuantizedOutput) {
  std::mt19937_64 rng(9);
  Codebook cb = Codebook::uniform("r", 16, 4, UpdateMode::loss, rng);
  Tensor z = testing::random_tensor(rng, {40, 4}, -0.2, 0.2);
  QuantizationResult first = nearest_codes(z, cb);
  QuantizationResult second = nearest_codes(first.quantized, cb);
  EXPECT_EQ(first.indices, second.indices);
  for (double d : second.distances) EXPECT_EQ(d, 0.0);
}

TEST(Quantize, ScalingCodesAndQueriesKeepsIndices) {
  std::mt19937_64 rng(10);
  Codebook cb = Codebook::uniform("r", 16, 4, UpdateMode::loss, rng);
  Tensor z = testing::random_tensor(rng, {40, 4}, -0.2, 0.2);
  QuantizationResult base = nearest_codes(z, cb);
  for (double c : {0.5, 3.0, 17.0}) {
    Codebook scaled("s", 16, 4, UpdateMode::loss);
    Tensor e = cb.embeddings().value;
    for (auto& v : e.data()) v *= c;
    scaled.set_embeddings(e);
    Tensor zs = z;
    for (auto& v : zs.data()) v *= c;
    EXPECT_EQ(nearest_codes(zs, scaled).indices, base.indices) << "scale " << c;
  }
}

TEST(VqLoss, ZeroWhenEverythingMatches) {
  Graph g;
  Var x = g.input(Tensor::vector({1, 2}));
  Var z = g.input(Tensor({1, 2}, std::vector<double>{0.3, 0.4}));
  VqLossTerms t = vq_loss(x, x, z, z, 0.25);
  EXPECT_EQ(t.total.value().item(), 0.0);
  EXPECT_EQ(t.rec.value().item(), 0.0);
  EXPECT_EQ(t.code.value().item(), 0.0);
  EXPECT_EQ(t.commit.value().item(), 0.0);
}

TEST(VqLoss, HandComputedTerms) {
  Graph g;
  VqLossTerms t = vq_loss(g.input(Tensor::vector({0})), g.input(Tensor::vector({1})),
                          g.input(Tensor::vector({0, 0})), g.input(Tensor::vector({1, 1})), 0.25);
  EXPECT_DOUBLE_EQ(t.rec.value().item(), 1.0);
  EXPECT_DOUBLE_EQ(t.code.value().item(), 1.0);
  EXPECT_DOUBLE_EQ(t.commit.value().item(), 1.0);
  EXPECT_DOUBLE_EQ(t.total.value().item(), 2.25);
}

TEST(VqLoss, ShapeMismatchRejected) {
  Graph g;
  EXPECT_THROW(vq_loss(g.input(Tensor({2})), g.input(Tensor({3})), g.input(Tensor({2})), g.input(Tensor({2})), 0.25),
               ShapeError);
}

TEST(VqLoss, DecompositionIsExact) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 20; ++i) {
    Graph g;
    VqLossTerms t = vq_loss(g.input(testing::random_tensor(rng, {3, 5})), g.input(testing::random_tensor(rng, {3, 5})),
                            g.input(testing::random_tensor(rng, {4, 2})), g.input(testing::random_tensor(rng, {4, 2})),
                            0.25);
    double rebuilt = t.rec.value().item() + t.code.value().item() + 0.25 * t.commit.value().item();
    EXPECT_NEAR(t.total.value().item(), rebuilt, 1e-12);
  }
}

// Ablating one term at a time must move exactly one side of the STE split.
TEST(VqLoss, GradientRoutingByTermAblation) {
  std::mt19937_64 rng(13);
  Tensor z0 = testing::random_tensor(rng, {4, 3});
  Tensor zq0 = testing::random_tensor(rng, {4, 3});
  auto grads = [&](int term) {
    Graph g;
    Var z = g.input(z0);
    Var zq = g.input(zq0);
    Var x = g.constant(Tensor({2}, 1.0));
    VqLossTerms t = vq_loss(x, x, z, zq, 0.25);
    Var objective = term == 0 ? t.total : term == 1 ? t.code : ops::scale(t.commit, 0.25);
    g.backward(objective);
    return std::pair{g.grad(z), g.grad(zq)};
  };
  auto [z_total, zq_total] = grads(0);
  auto [z_code, zq_code] = grads(1);
  auto [z_commit, zq_commit] = grads(2);
  for (std::size_t i = 0; i < z0.size(); ++i) {
    EXPECT_EQ(z_code[i], 0.0);      // code term never reaches the encoder side
    EXPECT_EQ(zq_commit[i], 0.0);   // commit term never reaches the codes
    EXPECT_NEAR(z_total[i], z_commit[i], 1e-15);
    EXPECT_NEAR(zq_total[i], zq_code[i], 1e-15);
  }
}

TEST(EmaUpdate, HandComputedStep) {
  Codebook cb = book_with({{0, 0}}, UpdateMode::ema);
  Tensor rows({1, 2}, std::vector<double>{1, 1});
  std::vector<std::size_t> assign{0};
  ema_update(cb, rows, assign, EmaOptions{.alpha = 0.5});
  EXPECT_DOUBLE_EQ(cb.ema_cluster_size()[0], 1.0);
  EXPECT_DOUBLE_EQ(cb.ema_embed_sum()[0], 0.5);
  EXPECT_NEAR(cb.code(0)[0], 0.5, 1e-5);
  EXPECT_NEAR(cb.code(0)[1], 0.5, 1e-5);
}

TEST(EmaUpdate, UnassignedCodeKeepsDirection) {
  Codebook cb = book_with({{0.3, -0.6}, {5, 5}}, UpdateMode::ema);
  Tensor rows({1, 2}, std::vector<double>{5, 5});
  std::vector<std::size_t> assign{1};
  ema_update(cb, rows, assign, EmaOptions{.alpha = 0.9});
  EXPECT_NEAR(cb.code(0)[0], 0.3, 1e-4);
  EXPECT_NEAR(cb.code(0)[1], -0.6, 1e-4);
  EXPECT_NEAR(cb.code(0)[0] / cb.code(0)[1], -0.5, 1e-12);
}

TEST(EmaUpdate, EmbeddingsFollowStatistics) {
  std::mt19937_64 rng(4);
  Codebook cb = Codebook::uniform("e", 4, 3, UpdateMode::ema, rng);
  for (int step = 0; step < 10; ++step) {
    Tensor rows = testing::random_tensor(rng, {20, 3});
    QuantizationResult q = nearest_codes(rows, cb);
    ema_update(cb, rows, q.indices, EmaOptions{.alpha = 0.9});
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t d = 0; d < 3; ++d) {
        EXPECT_DOUBLE_EQ(cb.code(k)[d], cb.ema_embed_sum()[k * 3 + d] / (cb.ema_cluster_size()[k] + 1e-5));
      }
    }
  }
}

TEST(EmaUpdate, LossModeRejected) {
  Codebook cb = book_with({{0, 0}}, UpdateMode::loss);
  std::vector<std::size_t> assign{0};
  EXPECT_THROW(ema_update(cb, Tensor({1, 2}), assign, {}), ValidationError);
}

TEST(EmaUpdate, ConvergesToClusterMeans) {
  testing::TwoClusterStream stream;
  std::mt19937_64 init(1);
  Codebook cb = Codebook::uniform("two", 2, 2, UpdateMode::ema, init);
  std::mt19937_64 rng(2);
  for (int step = 0; step < 500; ++step) {
    Tensor rows = stream.next(rng);
    ema_update(cb, rows, nearest_codes(rows, cb).indices, EmaOptions{.alpha = 0.99});
  }
  // Each code owns one cluster; compare with the nearer true mean.
  for (std::size_t k = 0; k < 2; ++k) {
    double best = INFINITY;
    for (const auto& mu : stream.means) best = std::min(best, std::hypot(cb.code(k)[0] - mu[0], cb.code(k)[1] - mu[1]));
    EXPECT_LT(best, 0.05) << "code " << k;
  }
  EXPECT_NE(nearest_code(stream.means[0], cb).index, nearest_code(stream.means[1], cb).index);
}

TEST(EmaUpdate, DeadCodeReseedingIsOptIn) {
  Codebook cb = book_with({{0, 0}, {100, 100}}, UpdateMode::ema);
  Tensor rows({3, 2}, std::vector<double>{0.1, 0, 0.2, 0, 3, 3});
  std::vector<std::size_t> assign{0, 0, 0};
  for (int i = 0; i < 60; ++i) ema_update(cb, rows, assign, EmaOptions{.alpha = 0.9});
  EXPECT_GT(cb.code(1)[0], 10.0);

  Codebook cb2 = book_with({{0, 0}, {100, 100}}, UpdateMode::ema);
  for (int i = 0; i < 50; ++i) ema_update(cb2, rows, assign, EmaOptions{.alpha = 0.9, .reseed_dead = true});
  EXPECT_EQ(cb2.code(1)[0], 3.0);
  EXPECT_EQ(cb2.code(1)[1], 3.0);
}

TEST(PrivateLoss, ZeroWhenEqual) {
  Graph g;
  Var z = g.input(Tensor({1, 2}, std::vector<double>{0, 1}));
  EXPECT_EQ(private_codebook_loss(g, z, z, 0.5).value().item(), 0.0);
}

TEST(PrivateLoss, MeanOverDimension) {
  Graph g;
  Var z = g.input(Tensor({1, 2}, std::vector<double>{0, 1}));
  Var zq = g.input(Tensor({1, 2}, std::vector<double>{1, 1}));
  Var loss = private_codebook_loss(g, z, zq, 0.5);
  EXPECT_DOUBLE_EQ(loss.value().item(), 0.5);
  g.backward(loss);
  EXPECT_EQ(g.grad(z), Tensor({1, 2}));
  EXPECT_EQ(g.grad(zq), Tensor({1, 2}, std::vector<double>{1, 0}));
}

TEST(PrivateLoss, EmptySetDependsOnNu) {
  Graph g;
  EXPECT_EQ(private_codebook_loss(g, std::nullopt, std::nullopt, 1.0).value().item(), 0.0);
  EXPECT_THROW(private_codebook_loss(g, std::nullopt, std::nullopt, 0.5), Error);
}

TEST(Perplexity, ReferenceValues) {
  std::vector<std::uint64_t> uniform{5, 5, 5, 5};
  std::vector<std::uint64_t> single{0, 9, 0, 0};
  std::vector<std::uint64_t> two{2, 2, 0, 0};
  std::vector<std::uint64_t> none{0, 0};
  EXPECT_NEAR(perplexity(uniform), 4.0, 1e-12);
  EXPECT_NEAR(perplexity(single), 1.0, 1e-12);
  EXPECT_NEAR(perplexity(two), 2.0, 1e-12);
  EXPECT_THROW(perplexity(none), ValidationError);
}

}  // namespace
}  // namespace h2dilr
