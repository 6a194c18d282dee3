#include <gtest/gtest.h>

#include <charconv>
#include <cmath>
#include <random>
#include <sstream>

#include "h2dilr/error.hpp"
#include "h2dilr/eval_probe.hpp"
#include "tiny.hpp"

namespace h2dilr {
namespace {

using testing::slurp;
using testing::TempDir;
using testing::tiny_decoder;
using testing::tiny_spec;
using testing::tiny_stage1;
using testing::tiny_train;

TEST(Top1, PerfectWrongAndTies) {
  Tensor logits({3, 4}, std::vector<double>{0, 5, 1, 2, 9, 0, 0, 0, 1, 1, 1, 1});
  std::vector<int> labels{1, 0, 0};
  EXPECT_DOUBLE_EQ(top1_accuracy(logits, labels), 1.0);
  EXPECT_EQ(argmax_rows(logits)[2], 0u);  // ties go to the lower index

  Tensor one({1, 4}, std::vector<double>{0, 0, 3, 0});
  std::vector<int> wrong{1};
  EXPECT_DOUBLE_EQ(top1_accuracy(one, wrong), 0.0);

  EXPECT_THROW(top1_accuracy(one, std::vector<int>{}), ValidationError);
  EXPECT_THROW(top1_accuracy(logits, std::vector<int>{0, 1}), ShapeError);
}

TEST(Top1, UniformRandomLogitsAreAtChance) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, 3);
  const std::size_t N = 10000;
  Tensor logits({N, 4});
  std::vector<int> labels(N);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = u(rng);
  for (auto& y : labels) y = cls(rng);
  EXPECT_NEAR(top1_accuracy(logits, labels), 0.25, 0.02);
}

TEST(Mse, IdentityAndZeroPrediction) {
  auto data = generate_dataset(tiny_spec(10));
  std::vector<std::size_t> all(data[1].size());
  std::iota(all.begin(), all.end(), 0);
  Tensor x = data[1].batch(all);
  EXPECT_EQ(mean_squared_error(x, x), 0.0);
  EXPECT_NEAR(mean_squared_error(x, Tensor(x.shape())), 1.0, 1e-6);
  EXPECT_THROW(mean_squared_error(x, Tensor({1, 2})), ShapeError);
}

TEST(Mse, TrainedModelBeatsItsInitialisation) {
  Corpus corpus = make_corpus(generate_dataset(tiny_spec(20)), 1);
  Stage1Model model(tiny_stage1(), {4, 7}, 8);
  double before = reconstruction_mse(model, corpus, &Split::test);
  TrainConfig t = tiny_train(15);
  t.lr = 5e-3;
  pretrain_h2d(model, corpus, t);
  EXPECT_LT(reconstruction_mse(model, corpus, &Split::test), before);
  EXPECT_NEAR(mean_predictor_mse(corpus, &Split::test), 1.0, 0.05);
}

TEST(Summarize, SampleStdZeroIffAllEqual) {
  RunMetrics same = summarize({0.5, 0.5, 0.5, 0.5, 0.5});
  EXPECT_EQ(same.mean, 0.5);
  EXPECT_EQ(same.stddev, 0.0);
  EXPECT_EQ(same.n_seeds, 5u);
  RunMetrics diff = summarize({0.2, 0.4});
  EXPECT_DOUBLE_EQ(diff.mean, 0.3);
  EXPECT_NEAR(diff.stddev, std::sqrt(0.02), 1e-15);
  EXPECT_GT(summarize({0.5, 0.5, 0.5000001}).stddev, 0.0);
  EXPECT_EQ(summarize({0.7}).stddev, 0.0);
  EXPECT_THROW(summarize({}), ValidationError);
}

// Hand-built routing over a tiny model: every token of the test split goes to
// the shared book, code 7 for tone 2 and code (tone) otherwise.
struct HandRouted {
  Corpus corpus = make_corpus(generate_dataset(tiny_spec(10)), 1);
  Stage1Model model{tiny_stage1(), {4, 7}, 1};
  Features f;

  HandRouted() {
    std::size_t L = model.token_count();
    for (std::size_t i = 0; i < 2; ++i) {
      std::size_t N = corpus.subjects[i].size();
      f.z_hat.emplace_back(Shape{N, L, 8});
      f.shared_mask.emplace_back(N * L, 1);
      f.shared_index.emplace_back(N * L, 0);
      f.private_index.emplace_back(N * L, 0);
      for (std::size_t n = 0; n < N; ++n) {
        int tone = corpus.subjects[i].tone[n];
        for (std::size_t l = 0; l < L; ++l) f.shared_index[i][n * L + l] = tone == 2 ? 7 : static_cast<std::size_t>(tone);
      }
    }
  }
};

TEST(AssignCodes, CodeSevenTakesToneTwo) {
  HandRouted h;
  CodeAssignment a = assign_codes(h.model, h.f, h.corpus, &Split::test);
  ASSERT_EQ(a.codes.size(), 8u + 2u * 4u);
  const CodeStats& c7 = a.codes[7];
  EXPECT_EQ(c7.book, "shared");
  EXPECT_EQ(c7.index, 7u);
  EXPECT_EQ(c7.assigned, 2);
  std::uint64_t tone2 = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t n : h.corpus.splits[i].test) tone2 += h.corpus.subjects[i].tone[n] == 2;
  }
  std::uint64_t L = h.model.token_count();
  EXPECT_EQ(c7.histogram, (std::array<std::uint64_t, 4>{0, tone2 * L, 0, 0}));
  EXPECT_EQ(a.codes[0].assigned, kUnusedCode);
  EXPECT_EQ(a.codes[1].assigned, 1);
  EXPECT_EQ(a.entropy_shared, 0.0);
  EXPECT_TRUE(std::isnan(a.entropy_private));
}

TEST(AssignCodes, TiesGoToLowerTone) {
  HandRouted h;
  for (std::size_t i = 0; i < 2; ++i) std::fill(h.f.shared_index[i].begin(), h.f.shared_index[i].end(), 3);
  CodeAssignment a = assign_codes(h.model, h.f, h.corpus, &Split::test);
  // the split is tone-stratified, so every tone contributes equally to code 3
  EXPECT_EQ(a.codes[3].histogram[0], a.codes[3].histogram[3]);
  EXPECT_EQ(a.codes[3].assigned, 1);
  EXPECT_NEAR(a.entropy_shared, 2.0, 1e-12);
}

TEST(AssignCodes, HistogramsConserveTokens) {
  Corpus corpus = make_corpus(generate_dataset(tiny_spec(10)), 1);
  Stage1Model model(tiny_stage1(), {4, 7}, 2);
  pretrain_h2d(model, corpus, tiny_train(2));
  Features f = extract_features(model, corpus);
  for (auto part : {&Split::train, &Split::test}) {
    CodeAssignment a = assign_codes(model, f, corpus, part);
    std::uint64_t total = 0;
    for (const auto& c : a.codes) {
      for (auto v : c.histogram) total += v;
    }
    std::uint64_t expected = 0;
    for (std::size_t i = 0; i < 2; ++i) expected += (corpus.splits[i].*part).size() * model.token_count();
    EXPECT_EQ(total, expected);
    EXPECT_EQ(a.tokens, expected);
  }
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

TEST(Export, AllCodesIdempotentAndExactFloats) {
  Corpus corpus = make_corpus(generate_dataset(tiny_spec(10)), 1);
  Stage1Model model(tiny_stage1(), {4, 7}, 2);
  pretrain_h2d(model, corpus, tiny_train(2));
  Features f = extract_features(model, corpus);
  TempDir tmp("export");
  export_embeddings(model, f, corpus, tmp.path() / "a");
  export_embeddings(model, f, corpus, tmp.path() / "b");
  std::string codes = slurp(tmp.path() / "a" / "codes.csv");
  EXPECT_EQ(codes, slurp(tmp.path() / "b" / "codes.csv"));
  EXPECT_EQ(slurp(tmp.path() / "a" / "samples.csv"), slurp(tmp.path() / "b" / "samples.csv"));

  auto rows = lines(codes);
  const std::size_t KS = 8, m = 2, KP = 4;
  ASSERT_EQ(rows.size(), 1 + KS + m * KP);
  EXPECT_EQ(rows[0].rfind("book,index,assigned_tone,e0,", 0), 0u);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    std::vector<std::string> cells;
    std::istringstream in(rows[r]);
    for (std::string c; std::getline(in, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 3u + 8u);
    const Codebook& cb = cells[0] == "shared" ? model.codebooks().shared()
                                              : model.codebooks().private_book(cells[0] == "private/0" ? 0 : 1);
    auto code = cb.code(std::stoul(cells[1]));
    for (std::size_t d = 0; d < 8; ++d) {
      float v = 0;
      std::from_chars(cells[3 + d].data(), cells[3 + d].data() + cells[3 + d].size(), v);
      EXPECT_EQ(v, static_cast<float>(code[d])) << rows[r];
    }
  }
  std::size_t samples = corpus.subjects[0].size() + corpus.subjects[1].size();
  EXPECT_EQ(lines(slurp(tmp.path() / "a" / "samples.csv")).size(), 1 + samples);

  std::filesystem::path blocker = tmp.path() / "file";
  std::ofstream(blocker) << "x";
  EXPECT_THROW(export_embeddings(model, f, corpus, blocker / "sub"), IoError);
}

TEST(Report, NuOneHasNoHeteroCellsAndNuZeroNoHomo) {
  Corpus corpus = make_corpus(generate_dataset(tiny_spec(10)), 1);
  Stage1Model one(tiny_stage1(1.0), {4, 7}, 2), zero(tiny_stage1(0.0), {4, 7}, 2), half(tiny_stage1(0.5), {4, 7}, 2);
  for (auto* m : {&one, &zero, &half}) m->freeze();
  std::vector<std::uint64_t> seeds{1, 2};
  auto report = disentanglement_report({{1.0, &one}, {0.0, &zero}, {0.5, &half}}, corpus, tiny_decoder(1), seeds);
  ASSERT_EQ(report.rows.size(), 3u);
  for (auto k : {LabelKind::tone, LabelKind::subject}) {
    EXPECT_FALSE(report.rows[0].has(Representation::hetero_only, k));
    EXPECT_TRUE(report.rows[0].has(Representation::homo_only, k));
    EXPECT_FALSE(report.rows[1].has(Representation::homo_only, k));
    EXPECT_TRUE(report.rows[1].has(Representation::hetero_only, k));
    for (auto r : {Representation::full, Representation::homo_only, Representation::hetero_only}) {
      EXPECT_TRUE(report.rows[2].has(r, k));
    }
  }
  EXPECT_THROW(report.rows[0].cell(Representation::hetero_only, LabelKind::subject), Error);
  EXPECT_EQ(report.rows[2].cell(Representation::full, LabelKind::tone).metrics.n_seeds, 2u);

  auto text = lines(format_report_text(report));
  ASSERT_EQ(text.size(), 5u);
  EXPECT_NE(text[1].find('-'), std::string::npos);
  EXPECT_EQ(text[1].size(), text[3].size());
  auto csv = lines(format_report_csv(report));
  EXPECT_EQ(csv[0], "nu,label,representation,n_seeds,mean,std,per_seed");
  EXPECT_EQ(csv.size(), 1u + 4u + 4u + 6u);
}

}  // namespace
}  // namespace h2dilr
