#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "h2dilr/autodiff.hpp"
#include "h2dilr/codebook.hpp"

namespace h2dilr {

/// Number of shared-routed tokens out of L: floor(nu * L + 0.5).
std::size_t n_shared(double nu, std::size_t L);

/// Shared/private split of one sample's L latent tokens.
struct TokenRouting {
  std::size_t n_tokens = 0;
  double nu = 0.5;
  std::vector<std::uint8_t> shared_mask;
  std::vector<std::size_t> rank;  // 1..L, ascending by shared distance
  std::vector<std::size_t> shared_index;  // nearest shared code, every token
  std::vector<double> shared_distance;
  std::vector<std::size_t> private_index;  // filled by h2d_quantize for private-routed tokens

  std::size_t count_shared() const;
};

struct H2DOptions {
  double nu = 0.5;
  double alpha = 0.99;
  double beta = 0.25;
  std::size_t K_private = 32;
  std::size_t code_dim = 256;
  double epsilon = 1e-5;
  bool reseed_dead = false;
};

/// Shared ema-mode codebook of size m * K_private plus one loss-mode private
/// codebook per subject.
class H2DState {
 public:
  H2DState(std::size_t subjects, const H2DOptions& opt, std::uint64_t seed);

  const H2DOptions& options() const { return opt_; }
  double nu() const { return opt_.nu; }
  double beta() const { return opt_.beta; }
  std::size_t subjects() const { return privates_.size(); }

  Codebook& shared() { return shared_; }
  const Codebook& shared() const { return shared_; }
  Codebook& private_book(std::size_t subject);
  const Codebook& private_book(std::size_t subject) const;

  EmaOptions ema_options() const { return {opt_.alpha, opt_.epsilon, opt_.reseed_dead}; }

 private:
  H2DOptions opt_;
  Codebook shared_;
  std::vector<Codebook> privates_;
};

/// Ranks tokens z [L, D] by distance to their nearest shared code and routes
/// the n_shared(nu, L) closest to the shared codebook.
TokenRouting partition(const Tensor& z, const Codebook& shared, double nu);

/// Per-token quantization: shared-routed tokens copy their shared code,
/// private-routed tokens take a fresh nearest code from the subject's private
/// book. Fills routing.private_index and records usage in both books.
Tensor h2d_quantize(const Tensor& z, TokenRouting& routing, H2DState& state, std::size_t subject);

/// Routing plus private assignment for one sample z [L, D], leaving usage
/// counts untouched. Used for evaluation and feature extraction.
TokenRouting route_tokens(const Tensor& z, const H2DState& state, std::size_t subject);

/// Code rows [L, D] selected by a completed routing.
Tensor routed_codes(const TokenRouting& routing, const H2DState& state, std::size_t subject);

/// Batch quantization on a graph.
struct QuantizedTokens {
  Var z_hat;  // [B, L, D], straight-through: value is the codes, gradient goes to z
  Var codes;  // [B*L, D], code rows; gradient reaches the private embeddings only
  std::vector<TokenRouting> routing;  // one per sample
};

/// z is [B, L, D] and every sample belongs to `subject`.
QuantizedTokens h2d_quantize(Graph& g, Var z, H2DState& state, std::size_t subject);

/// Single-codebook quantization used by the unified configuration.
QuantizedTokens unified_quantize(Graph& g, Var z, Codebook& book);

struct H2DLossTerms {
  Var total;
  Var rec;
  Var pri;
  Var commit;
};

/// rec + pri + beta * commit. z and codes are [N, D] or [B, L, D] token rows
/// in sample order; routing covers the same N tokens. `codes` must be the
/// code rows (QuantizedTokens::codes), not the straight-through output, so
/// that pri reaches the private embeddings. pri is restricted to private
/// rows, commit spans every row.
H2DLossTerms h2d_loss(Graph& g, Var x, Var x_hat, Var z, Var codes, std::span<const TokenRouting> routing,
                      double beta);

/// Unified objective: rec + beta * commit.
H2DLossTerms unified_loss(Graph& g, Var x, Var x_hat, Var z, Var codes, double beta);

/// Shared-routed token rows of z [N, D] and their shared code indices.
struct SharedRows {
  Tensor rows;
  std::vector<std::size_t> indices;
};
SharedRows shared_rows(const Tensor& z, std::span<const TokenRouting> routing);

}  // namespace h2dilr
