#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "h2dilr/autodiff.hpp"
#include "h2dilr/tensor.hpp"

namespace h2dilr {

enum class UpdateMode { ema, loss };

/// K learnable D-dimensional code embeddings plus usage statistics.
///
/// In ema mode the embeddings are maintained from running cluster statistics
/// and never receive gradients; in loss mode they are an ordinary trainable
/// parameter.
class Codebook {
 public:
  Codebook(std::string name, std::size_t codes, std::size_t dim, UpdateMode mode);

  /// Embeddings drawn uniformly from [-1/K, 1/K].
  static Codebook uniform(std::string name, std::size_t codes, std::size_t dim, UpdateMode mode, std::mt19937_64& rng);

  std::size_t size() const { return embeddings_.value.dim(0); }
  std::size_t dim() const { return embeddings_.value.dim(1); }
  UpdateMode mode() const { return mode_; }
  const std::string& name() const { return embeddings_.name; }

  Parameter& embeddings() { return embeddings_; }
  const Parameter& embeddings() const { return embeddings_; }
  std::span<const double> code(std::size_t k) const;
  /// Overwrites all embeddings; in ema mode the running statistics restart
  /// from the new values with unit cluster size.
  void set_embeddings(const Tensor& values);

  Tensor& ema_cluster_size() { return cluster_size_; }
  const Tensor& ema_cluster_size() const { return cluster_size_; }
  Tensor& ema_embed_sum() { return embed_sum_; }
  const Tensor& ema_embed_sum() const { return embed_sum_; }

  const std::vector<std::uint64_t>& usage() const { return usage_; }
  void record_usage(std::size_t k, std::uint64_t n = 1) { usage_.at(k) += n; }
  void reset_usage();

  /// Consecutive ema updates in which each code received no rows.
  std::vector<std::size_t>& idle_updates() { return idle_; }

 private:
  Parameter embeddings_;
  UpdateMode mode_;
  Tensor cluster_size_;
  Tensor embed_sum_;
  std::vector<std::uint64_t> usage_;
  std::vector<std::size_t> idle_;
};

struct NearestCode {
  std::size_t index = 0;
  double distance = 0.0;
};

/// Euclidean nearest embedding; ties resolve to the lowest index.
NearestCode nearest_code(std::span<const double> z, const Codebook& cb);

struct QuantizationResult {
  std::vector<std::size_t> indices;
  Tensor quantized;  // [L, D], rows copied from the codebook
  std::vector<double> distances;
};

/// Nearest code for every row of z [L, D] without touching usage counts.
QuantizationResult nearest_codes(const Tensor& z, const Codebook& cb);

/// nearest_codes plus usage bookkeeping.
QuantizationResult quantize(const Tensor& z, Codebook& cb);

struct VqLossTerms {
  Var total;
  Var rec;
  Var code;
  Var commit;
};

/// rec + code + beta * commit with mean reduction everywhere. The code term
/// only reaches z_hat, the commit term only reaches z.
VqLossTerms vq_loss(Var x, Var x_hat, Var z, Var z_hat, double beta);

struct EmaOptions {
  double alpha = 0.99;
  double epsilon = 1e-5;
  bool reseed_dead = false;
  std::size_t dead_after = 50;
};

/// Cluster-statistics moving average: rows [N, D] with their assigned code
/// indices update cluster sizes, embedding sums, and the embeddings.
void ema_update(Codebook& cb, const Tensor& rows, std::span<const std::size_t> assignments, const EmaOptions& opt);

/// Mean of (sg[z] - z_hat)^2 over the private-routed rows. With no private
/// rows the loss is zero when nu == 1 and a routing error otherwise.
Var private_codebook_loss(Graph& g, const std::optional<Var>& z_rows, const std::optional<Var>& z_hat_rows, double nu);

/// exp(entropy) of the normalized usage distribution.
double perplexity(std::span<const std::uint64_t> usage);

}  // namespace h2dilr
