#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "h2dilr/autodiff.hpp"

namespace h2dilr {

struct EncoderConfig {
  std::size_t in_channels = 0;
  std::size_t stem_channels = 64;
  std::vector<std::size_t> block_channels{128, 256, 512};
  std::size_t kernel = 4;
  std::size_t stride = 2;
  std::size_t latent_dim = 256;
};

/// Temporal extents through the encoder: input, after the stem, after each
/// block. The last entry is the token count L.
std::vector<std::size_t> encoder_extents(const EncoderConfig& cfg, std::size_t T);

struct ConvLayer {
  Parameter weight;
  Parameter bias;
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  bool transpose = false;
};

/// Per-subject convolutional encoder: x [B, T, C] -> z [B, L, D].
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, const std::string& prefix, std::mt19937_64& rng);

  const EncoderConfig& config() const { return cfg_; }
  std::size_t token_count(std::size_t T) const;
  Var forward(Graph& g, Var x);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

 private:
  EncoderConfig cfg_;
  // stem, one conv per block (each followed by pooling), latent projection
  std::vector<ConvLayer> layers_;
};

/// Mirror of an Encoder built from transpose convolutions:
/// z_hat [B, L, D] -> x_hat [B, T, C].
class Decoder {
 public:
  Decoder(const EncoderConfig& cfg, const std::string& prefix, std::mt19937_64& rng);

  Var forward(Graph& g, Var z_hat, std::size_t T);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

 private:
  EncoderConfig cfg_;
  std::vector<ConvLayer> layers_;
};

struct TransformerConfig {
  std::size_t in_dim = 256;
  std::size_t patch = 5;
  std::size_t embed = 128;
  std::size_t ffn = 512;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t classes = 4;
  bool rel_pos_all_blocks = false;
  std::size_t max_distance = 16;  // relative offsets are clipped to +-max_distance
  double dropout = 0.1;
};

/// Patch embedding, pre-norm attention blocks, mean pooling, linear head:
/// tokens [B, L, D] -> logits [B, classes].
class TransformerClassifier {
 public:
  TransformerClassifier(const TransformerConfig& cfg, const std::string& prefix, std::mt19937_64& rng);

  const TransformerConfig& config() const { return cfg_; }
  std::size_t patch_count(std::size_t L) const;

  /// Dropout is active only when `dropout_rng` is given.
  Var forward(Graph& g, Var tokens, std::mt19937_64* dropout_rng = nullptr);

  /// Logit bias [heads, P, P] of block `b` (zeros for blocks without one).
  Tensor position_bias(std::size_t block, std::size_t P) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

 private:
  struct Block {
    Parameter ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    std::optional<Parameter> rel_pos;  // [2 * max_distance + 1, heads]
  };

  TransformerConfig cfg_;
  Parameter patch_w_, patch_b_;
  std::vector<Block> blocks_;
  Parameter head_w_, head_b_;
};

/// Fills a weight with N(0, gain / fan_in).
void init_normal_fan_in(Parameter& p, std::size_t fan_in, double gain, std::mt19937_64& rng);

std::size_t count_parameters(const std::vector<const Parameter*>& params);

}  // namespace h2dilr
