#include "h2dilr/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "h2dilr/error.hpp"

namespace h2dilr {

Codebook::Codebook(std::string name, std::size_t codes, std::size_t dim, UpdateMode mode)
    : embeddings_{std::move(name), Tensor({codes, dim}), mode == UpdateMode::loss},
      mode_(mode),
      cluster_size_({codes}, 1.0),
      embed_sum_({codes, dim}),
      usage_(codes, 0),
      idle_(codes, 0) {}

Codebook Codebook::uniform(std::string name, std::size_t codes, std::size_t dim, UpdateMode mode,
                           std::mt19937_64& rng) {
  Codebook cb(std::move(name), codes, dim, mode);
  double bound = 1.0 / static_cast<double>(codes);
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor values({codes, dim});
  for (auto& v : values.data()) v = u(rng);
  cb.set_embeddings(values);
  return cb;
}

std::span<const double> Codebook::code(std::size_t k) const {
  if (k >= size()) throw ShapeError("codebook '" + name() + "': code " + std::to_string(k) + " out of range");
  return {embeddings_.value.ptr() + k * dim(), dim()};
}

void Codebook::set_embeddings(const Tensor& values) {
  if (values.shape() != embeddings_.value.shape()) {
    throw ShapeError("codebook '" + name() + "': embeddings " + shape_str(values.shape()) + " vs " +
                     shape_str(embeddings_.value.shape()));
  }
  if (!values.all_finite()) throw NumericError("codebook '" + name() + "': non-finite embeddings");
  embeddings_.value = values;
  cluster_size_.fill(1.0);
  embed_sum_ = values;
}

void Codebook::reset_usage() { std::fill(usage_.begin(), usage_.end(), 0); }

NearestCode nearest_code(std::span<const double> z, const Codebook& cb) {
  std::size_t D = cb.dim();
  if (z.size() != D) {
    throw ShapeError("nearest_code: query dim " + std::to_string(z.size()) + " vs codebook '" + cb.name() + "' dim " +
                     std::to_string(D));
  }
  const double* e = cb.embeddings().value.ptr();
  NearestCode best{0, 0.0};
  double best_sq = INFINITY;
  for (std::size_t k = 0; k < cb.size(); ++k) {
    double sq = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      double diff = z[d] - e[k * D + d];
      sq += diff * diff;
    }
    if (sq < best_sq) {
      best_sq = sq;
      best.index = k;
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

QuantizationResult nearest_codes(const Tensor& z, const Codebook& cb) {
  if (z.rank() != 2) throw ShapeError("quantize: latent must be [L, D], got " + shape_str(z.shape()));
  std::size_t L = z.dim(0), D = z.dim(1);
  QuantizationResult r{std::vector<std::size_t>(L), Tensor({L, cb.dim()}), std::vector<double>(L)};
  for (std::size_t j = 0; j < L; ++j) {
    NearestCode nc = nearest_code({z.ptr() + j * D, D}, cb);
    r.indices[j] = nc.index;
    r.distances[j] = nc.distance;
    auto code = cb.code(nc.index);
    std::copy(code.begin(), code.end(), r.quantized.ptr() + j * D);
  }
  return r;
}

QuantizationResult quantize(const Tensor& z, Codebook& cb) {
  QuantizationResult r = nearest_codes(z, cb);
  for (std::size_t k : r.indices) cb.record_usage(k);
  return r;
}

VqLossTerms vq_loss(Var x, Var x_hat, Var z, Var z_hat, double beta) {
  if (beta < 0.0) throw ValidationError("vq_loss: beta must be non-negative");
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("vq_loss: x " + shape_str(x.shape()) + " vs x_hat " + shape_str(x_hat.shape()));
  }
  if (z.shape() != z_hat.shape()) {
    throw ShapeError("vq_loss: z " + shape_str(z.shape()) + " vs z_hat " + shape_str(z_hat.shape()));
  }
  VqLossTerms t;
  t.rec = ops::mse(x, x_hat);
  t.code = ops::mse(ops::stop_gradient(z), z_hat);
  t.commit = ops::mse(z, ops::stop_gradient(z_hat));
  t.total = ops::add(ops::add(t.rec, t.code), ops::scale(t.commit, beta));
  return t;
}

void ema_update(Codebook& cb, const Tensor& rows, std::span<const std::size_t> assignments, const EmaOptions& opt) {
  if (cb.mode() != UpdateMode::ema) {
    throw ValidationError("ema_update: codebook '" + cb.name() + "' is gradient-trained");
  }
  if (!(opt.alpha >= 0.0 && opt.alpha < 1.0)) throw ValidationError("ema_update: alpha must lie in [0, 1)");
  std::size_t K = cb.size(), D = cb.dim();
  if (rows.size() > 0 && (rows.rank() != 2 || rows.dim(1) != D)) {
    throw ShapeError("ema_update: rows must be [N, " + std::to_string(D) + "], got " + shape_str(rows.shape()));
  }
  std::size_t N = rows.size() == 0 ? 0 : rows.dim(0);
  if (assignments.size() != N) throw ShapeError("ema_update: one assignment per row required");

  std::vector<double> counts(K, 0.0);
  std::vector<double> sums(K * D, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t k = assignments[n];
    if (k >= K) throw ShapeError("ema_update: assignment " + std::to_string(k) + " out of range");
    counts[k] += 1.0;
    for (std::size_t d = 0; d < D; ++d) sums[k * D + d] += rows[n * D + d];
  }

  // Farthest rows from their current code, for optional dead-code reseeding.
  std::vector<std::size_t> far_rows;
  if (opt.reseed_dead && N > 0) {
    std::vector<double> dist(N);
    for (std::size_t n = 0; n < N; ++n) {
      auto e = cb.code(assignments[n]);
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += (rows[n * D + d] - e[d]) * (rows[n * D + d] - e[d]);
      dist[n] = s;
    }
    far_rows.resize(N);
    std::iota(far_rows.begin(), far_rows.end(), 0);
    std::stable_sort(far_rows.begin(), far_rows.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  }

  Tensor& size = cb.ema_cluster_size();
  Tensor& sum = cb.ema_embed_sum();
  Tensor& emb = cb.embeddings().value;
  auto& idle = cb.idle_updates();
  std::size_t next_far = 0;
  for (std::size_t k = 0; k < K; ++k) {
    idle[k] = counts[k] > 0.0 ? 0 : idle[k] + 1;
    if (opt.reseed_dead && idle[k] >= opt.dead_after && next_far < far_rows.size()) {
      std::size_t n = far_rows[next_far++];
      size[k] = 1.0;
      for (std::size_t d = 0; d < D; ++d) {
        sum[k * D + d] = rows[n * D + d];
        emb[k * D + d] = rows[n * D + d];
      }
      idle[k] = 0;
      continue;
    }
    size[k] = opt.alpha * size[k] + (1.0 - opt.alpha) * counts[k];
    double denom = size[k] + opt.epsilon;
    for (std::size_t d = 0; d < D; ++d) {
      sum[k * D + d] = opt.alpha * sum[k * D + d] + (1.0 - opt.alpha) * sums[k * D + d];
      emb[k * D + d] = sum[k * D + d] / denom;
    }
  }
  if (!emb.all_finite()) throw NumericError("ema_update: codebook '" + cb.name() + "' became non-finite");
}

Var private_codebook_loss(Graph& g, const std::optional<Var>& z_rows, const std::optional<Var>& z_hat_rows, double nu) {
  if (z_rows.has_value() != z_hat_rows.has_value()) {
    throw ShapeError("private_codebook_loss: latent and quantized row sets must both be present or both empty");
  }
  if (!z_rows) {
    if (nu < 1.0) throw Error("private_codebook_loss: no private-routed tokens with nu < 1 (routing bug)");
    return g.constant(Tensor::scalar(0.0));
  }
  if (z_rows->shape() != z_hat_rows->shape()) {
    throw ShapeError("private_codebook_loss: " + shape_str(z_rows->shape()) + " vs " + shape_str(z_hat_rows->shape()));
  }
  return ops::mse(ops::stop_gradient(*z_rows), *z_hat_rows);
}

double perplexity(std::span<const std::uint64_t> usage) {
  double total = 0.0;
  for (auto c : usage) total += static_cast<double>(c);
  if (total <= 0.0) throw ValidationError("perplexity: usage counts are all zero");
  double h = 0.0;
  for (auto c : usage) {
    if (c == 0) continue;
    double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return std::exp(h);
}

}  // namespace h2dilr
