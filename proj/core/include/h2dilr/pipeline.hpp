#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "h2dilr/h2d.hpp"
#include "h2dilr/networks.hpp"
#include "h2dilr/optim.hpp"
#include "h2dilr/synthdata.hpp"

namespace h2dilr {

/// h2d routes tokens between the shared and private books; unified
/// quantizes everything against a single shared book.
enum class Paradigm { h2d, unified };

std::string to_string(Paradigm p);
Paradigm parse_paradigm(const std::string& s);

struct Stage1Config {
  EncoderConfig encoder;  // in_channels is taken from the channel registry
  H2DOptions h2d;
  Paradigm paradigm = Paradigm::h2d;
  std::size_t T = 1000;
};

struct TrainConfig {
  std::size_t epochs = 1000;
  std::size_t batch = 32;
  double lr = 5e-5;
  AdamWOptions adam;
  bool include_val = false;  // stage 1 only: also train on the validation split
  std::uint64_t seed = 0;
};

struct StepLosses {
  std::size_t subject = 0;
  double total = 0.0;
  double rec = 0.0;
  double pri = 0.0;
  double commit = 0.0;
};

/// One row of the metrics log. Fields that do not apply to a stage are NaN.
struct EpochLog {
  std::size_t epoch = 0;
  std::string split;
  double loss_rec = 0.0;
  double loss_pri = 0.0;
  double loss_commit = 0.0;
  double loss_total = 0.0;
  double acc = 0.0;
  double perplexity_shared = 0.0;
  std::vector<double> perplexity_private;
  double lr = 0.0;
};

/// Per-subject encoders and decoders plus the codebooks.
class Stage1Model {
 public:
  Stage1Model(const Stage1Config& cfg, std::vector<std::size_t> channels, std::uint64_t seed);

  const Stage1Config& config() const { return cfg_; }
  const std::vector<std::size_t>& channels() const { return channels_; }
  std::size_t subjects() const { return channels_.size(); }
  std::size_t token_count() const;

  Encoder& encoder(std::size_t subject);
  const Encoder& encoder(std::size_t subject) const;
  Decoder& decoder(std::size_t subject);
  H2DState& codebooks() { return state_; }
  const H2DState& codebooks() const { return state_; }

  /// One optimizer step on a single-subject batch x [B, T, C], followed by
  /// the moving-average update of the shared book (skipped when no token was
  /// routed to it).
  StepLosses train_step(const Tensor& x, std::size_t subject, AdamW& opt, double lr);

  /// Losses on x without any update or usage bookkeeping.
  StepLosses evaluate(const Tensor& x, std::size_t subject);

  /// Reconstruction x_hat [B, T, C] through the quantizer, no bookkeeping.
  Tensor reconstruct(const Tensor& x, std::size_t subject);

  /// Quantized tokens [B, L, D] and their routing, no bookkeeping.
  struct Tokens {
    Tensor z_hat;
    std::vector<TokenRouting> routing;
  };
  Tokens tokens(const Tensor& x, std::size_t subject);

  struct NamedTensor {
    std::string name;
    Tensor* value;
  };
  /// Every persistent tensor in a fixed order, codebook statistics included.
  std::vector<NamedTensor> tensors();
  std::vector<Parameter*> trainable(std::size_t subject);

  void freeze();
  bool frozen() const { return frozen_; }

 private:
  void check_subject(std::size_t subject, const Tensor& x) const;

  Stage1Config cfg_;
  std::vector<std::size_t> channels_;
  std::vector<Encoder> encoders_;
  std::vector<Decoder> decoders_;
  H2DState state_;
  bool frozen_ = false;
};

/// Per-subject datasets with their fixed splits.
struct Corpus {
  std::vector<SubjectDataset> subjects;
  std::vector<Split> splits;
};
Corpus make_corpus(std::vector<SubjectDataset> data, std::uint64_t split_seed);

struct PretrainResult {
  std::vector<EpochLog> log;
  std::vector<StepLosses> steps;
};

/// Stage 1: per-subject batches interleaved round-robin in subject order;
/// subjects with fewer batches recycle theirs so every subject contributes
/// the same number of steps per epoch. `progress` sees every log row as it
/// is produced.
PretrainResult pretrain_h2d(Stage1Model& model, const Corpus& corpus, const TrainConfig& train,
                            const std::function<void(const EpochLog&)>& progress = {});

/// Batches of one epoch for each subject (index lists into the train split).
std::vector<std::vector<std::vector<std::size_t>>> round_robin_schedule(const Corpus& corpus, std::size_t batch,
                                                                        bool include_val, std::uint64_t seed,
                                                                        std::size_t epoch);

enum class LabelKind { tone, subject };
enum class Representation { full, homo_only, hetero_only };

std::string to_string(LabelKind k);
std::string to_string(Representation r);
LabelKind parse_label_kind(const std::string& s);
Representation parse_representation(const std::string& s);

/// Frozen stage-1 representations of every sample.
struct Features {
  std::vector<Tensor> z_hat;  // per subject [N_i, L, D]
  std::vector<std::vector<std::uint8_t>> shared_mask;  // per subject, N_i * L
  std::vector<std::vector<std::size_t>> shared_index;  // code index per token (shared-routed)
  std::vector<std::vector<std::size_t>> private_index;  // code index per token (private-routed)
};
Features extract_features(Stage1Model& model, const Corpus& corpus);

struct DecoderConfig {
  TransformerConfig transformer;
  TrainConfig train;
  LabelKind label = LabelKind::tone;
  Representation representation = Representation::full;
  bool per_subject = false;  // one classifier per subject instead of a pooled one
};

struct DecoderResult {
  std::vector<TransformerClassifier> models;  // one, or one per subject
  std::vector<std::size_t> best_epoch;
  double val_acc = 0.0;
  double test_acc = 0.0;
  std::vector<EpochLog> log;
};

/// Stage 2: trains only the transformer on frozen features and keeps the
/// epoch with the best validation accuracy (ties go to the earlier epoch).
DecoderResult train_decoder(const Stage1Model& model, const Features& features, const Corpus& corpus,
                            const DecoderConfig& cfg);

/// Row-wise token keep mask for a representation.
std::vector<std::uint8_t> representation_mask(const std::vector<std::uint8_t>& shared_mask, Representation r);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log, std::size_t subjects);

// Checkpoints: a human-readable `manifest` plus `tensors.bin` holding
// little-endian 32-bit floats.

struct Checkpoint {
  std::string stage;  // "h2d" or "decode"
  Stage1Config config;
  std::vector<std::size_t> channels;
  std::uint64_t seed = 0;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::vector<std::uint64_t>> usage;
  std::map<std::string, std::string> extra;  // free-form key=value entries
};

Checkpoint make_checkpoint(Stage1Model& model, std::uint64_t seed);
void add_classifiers(Checkpoint& ckpt, std::vector<TransformerClassifier>& models, const DecoderConfig& cfg);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Rebuilds the model from a checkpoint. When `expected_channels` is given
/// the registries must match. The loaded model is frozen unless
/// `keep_trainable` is set.
Stage1Model restore_stage1(const Checkpoint& ckpt, std::optional<std::vector<std::size_t>> expected_channels = {},
                           bool keep_trainable = false);

}  // namespace h2dilr
