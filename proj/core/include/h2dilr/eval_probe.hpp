#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "h2dilr/pipeline.hpp"

namespace h2dilr {

/// Column of the largest entry per row of logits [N, C]; ties go to the
/// lower index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

double top1_accuracy(const Tensor& logits, std::span<const int> labels);

/// Mean of (x - x_hat)^2 over every element; shapes must match.
double mean_squared_error(const Tensor& x, const Tensor& x_hat);

/// Mean over samples, timesteps and channels of (x - x_hat)^2 for the
/// selected samples of every subject.
double reconstruction_mse(Stage1Model& model, const Corpus& corpus, std::vector<std::size_t> Split::*part);

/// Same metric for a predictor that outputs each channel's training-split mean.
double mean_predictor_mse(const Corpus& corpus, std::vector<std::size_t> Split::*part);

struct RunMetrics {
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for one seed
  std::size_t n_seeds = 0;
};
RunMetrics summarize(std::vector<double> per_seed);

inline constexpr int kUnusedCode = 0;

struct CodeStats {
  std::string book;  // "shared" or "private/i"
  std::size_t index = 0;
  std::array<std::uint64_t, kTones> histogram{};
  int assigned = kUnusedCode;  // tone 1..4, or kUnusedCode
};

struct CodeAssignment {
  std::vector<CodeStats> codes;  // shared book first, then each private book
  std::uint64_t tokens = 0;
  /// H(tone | code) in bits over tokens routed to each family; NaN when the
  /// family received no token.
  double entropy_shared = 0.0;
  double entropy_private = 0.0;
};

/// Tallies, for every code, the tones of the samples whose tokens it
/// quantized, over the chosen split.
CodeAssignment assign_codes(const Stage1Model& model, const Features& features, const Corpus& corpus,
                            std::vector<std::size_t> Split::*part);

struct ProbeCell {
  Representation representation;
  LabelKind label;
  RunMetrics metrics;
};

struct DisentanglementRow {
  double nu = 0.5;
  std::vector<ProbeCell> cells;

  const ProbeCell& cell(Representation r, LabelKind k) const;
  bool has(Representation r, LabelKind k) const;
};

struct DisentanglementReport {
  std::vector<DisentanglementRow> rows;
};

struct ProbeModel {
  double nu;
  Stage1Model* model;
};

/// Runs the {full, homo_only, hetero_only} x {tone, subject} probes for each
/// model over all seeds. Representations with no routed tokens at a given nu
/// (hetero at nu = 1, homo at nu = 0) are left out.
DisentanglementReport disentanglement_report(const std::vector<ProbeModel>& models, const Corpus& corpus,
                                             const DecoderConfig& base, std::span<const std::uint64_t> seeds);

std::string format_report_text(const DisentanglementReport& report);
std::string format_report_csv(const DisentanglementReport& report);

/// Writes `codes.csv` (one row per code: book, index, assigned tone, the
/// embedding) and `samples.csv` (token-averaged representation per sample
/// with labels) into dir.
void export_embeddings(const Stage1Model& model, const Features& features, const Corpus& corpus,
                       const std::filesystem::path& dir);

}  // namespace h2dilr
