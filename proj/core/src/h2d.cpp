#include "h2dilr/h2d.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "h2dilr/error.hpp"
#include "h2dilr/rng.hpp"

namespace h2dilr {

std::size_t n_shared(double nu, std::size_t L) {
  if (!(nu >= 0.0 && nu <= 1.0)) throw ValidationError("partition factor nu must lie in [0, 1]");
  return static_cast<std::size_t>(std::floor(nu * static_cast<double>(L) + 0.5));
}

std::size_t TokenRouting::count_shared() const {
  return static_cast<std::size_t>(std::count(shared_mask.begin(), shared_mask.end(), 1));
}

H2DState::H2DState(std::size_t subjects, const H2DOptions& opt, std::uint64_t seed)
    : opt_(opt), shared_("shared", std::max<std::size_t>(subjects, 1) * opt.K_private, opt.code_dim, UpdateMode::ema) {
  if (subjects == 0) throw ValidationError("h2d: at least one subject is required");
  if (opt.K_private == 0 || opt.code_dim == 0) throw ValidationError("h2d: codebook sizes must be positive");
  n_shared(opt.nu, 1);  // validates nu
  if (!(opt.alpha >= 0.0 && opt.alpha < 1.0)) throw ValidationError("h2d: alpha must lie in [0, 1)");
  if (opt.beta < 0.0) throw ValidationError("h2d: beta must be non-negative");

  auto rng = make_stream(seed, "init/shared_codebook");
  shared_ = Codebook::uniform("shared", subjects * opt.K_private, opt.code_dim, UpdateMode::ema, rng);
  privates_.reserve(subjects);
  for (std::size_t i = 0; i < subjects; ++i) {
    auto prng = make_stream(seed, "init/private/" + std::to_string(i));
    privates_.push_back(Codebook::uniform("private/" + std::to_string(i), opt.K_private, opt.code_dim,
                                          UpdateMode::loss, prng));
  }
}

Codebook& H2DState::private_book(std::size_t subject) {
  if (subject >= privates_.size()) {
    throw ValidationError("h2d: unknown subject " + std::to_string(subject) + " (have " +
                          std::to_string(privates_.size()) + ")");
  }
  return privates_[subject];
}

const Codebook& H2DState::private_book(std::size_t subject) const {
  return const_cast<H2DState*>(this)->private_book(subject);
}

TokenRouting partition(const Tensor& z, const Codebook& shared, double nu) {
  if (z.rank() != 2 || z.dim(1) != shared.dim()) {
    throw ShapeError("partition: latent must be [L, " + std::to_string(shared.dim()) + "], got " + shape_str(z.shape()));
  }
  std::size_t L = z.dim(0);
  std::size_t keep = n_shared(nu, L);
  QuantizationResult q = nearest_codes(z, shared);

  TokenRouting r;
  r.n_tokens = L;
  r.nu = nu;
  r.shared_index = std::move(q.indices);
  r.shared_distance = std::move(q.distances);
  r.private_index.assign(L, 0);
  r.rank.assign(L, 0);
  r.shared_mask.assign(L, 0);

  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r.shared_distance[a] < r.shared_distance[b]; });
  for (std::size_t pos = 0; pos < L; ++pos) {
    r.rank[order[pos]] = pos + 1;
    r.shared_mask[order[pos]] = pos < keep ? 1 : 0;
  }
  return r;
}

Tensor h2d_quantize(const Tensor& z, TokenRouting& routing, H2DState& state, std::size_t subject) {
  Codebook& priv = state.private_book(subject);
  Codebook& shared = state.shared();
  if (z.rank() != 2 || z.dim(0) != routing.n_tokens || z.dim(1) != shared.dim()) {
    throw ShapeError("h2d_quantize: latent " + shape_str(z.shape()) + " does not match routing of " +
                     std::to_string(routing.n_tokens) + " tokens");
  }
  std::size_t D = z.dim(1);
  Tensor out({routing.n_tokens, D});
  for (std::size_t j = 0; j < routing.n_tokens; ++j) {
    std::span<const double> code;
    if (routing.shared_mask[j]) {
      code = shared.code(routing.shared_index[j]);
      shared.record_usage(routing.shared_index[j]);
    } else {
      NearestCode nc = nearest_code({z.ptr() + j * D, D}, priv);
      routing.private_index[j] = nc.index;
      priv.record_usage(nc.index);
      code = priv.code(nc.index);
    }
    std::copy(code.begin(), code.end(), out.ptr() + j * D);
  }
  return out;
}

TokenRouting route_tokens(const Tensor& z, const H2DState& state, std::size_t subject) {
  const Codebook& priv = state.private_book(subject);
  TokenRouting r = partition(z, state.shared(), state.nu());
  std::size_t D = z.dim(1);
  for (std::size_t j = 0; j < r.n_tokens; ++j) {
    if (!r.shared_mask[j]) r.private_index[j] = nearest_code({z.ptr() + j * D, D}, priv).index;
  }
  return r;
}

Tensor routed_codes(const TokenRouting& routing, const H2DState& state, std::size_t subject) {
  const Codebook& priv = state.private_book(subject);
  const Codebook& shared = state.shared();
  std::size_t D = shared.dim();
  Tensor out({routing.n_tokens, D});
  for (std::size_t j = 0; j < routing.n_tokens; ++j) {
    auto code = routing.shared_mask[j] ? shared.code(routing.shared_index[j]) : priv.code(routing.private_index[j]);
    std::copy(code.begin(), code.end(), out.ptr() + j * D);
  }
  return out;
}

namespace {

void check_tokens(Var z, std::size_t dim, const char* where) {
  if (z.shape().size() != 3 || z.shape()[2] != dim) {
    throw ShapeError(std::string(where) + ": latent must be [B, L, " + std::to_string(dim) + "], got " +
                     shape_str(z.shape()));
  }
}

Tensor sample_rows(const Tensor& z, std::size_t b) {
  std::size_t L = z.dim(1), D = z.dim(2);
  Tensor out({L, D});
  std::copy_n(z.ptr() + b * L * D, L * D, out.ptr());
  return out;
}

}  // namespace

QuantizedTokens h2d_quantize(Graph& g, Var z, H2DState& state, std::size_t subject) {
  Codebook& shared = state.shared();
  Codebook& priv = state.private_book(subject);
  check_tokens(z, shared.dim(), "h2d_quantize");
  std::size_t B = z.shape()[0], L = z.shape()[1], D = z.shape()[2];
  std::size_t KS = shared.size();

  QuantizedTokens out;
  std::vector<std::size_t> table_index(B * L);
  bool any_private = false;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor zb = sample_rows(z.value(), b);
    TokenRouting r = partition(zb, shared, state.nu());
    h2d_quantize(zb, r, state, subject);
    for (std::size_t j = 0; j < L; ++j) {
      if (r.shared_mask[j]) {
        table_index[b * L + j] = r.shared_index[j];
      } else {
        table_index[b * L + j] = KS + r.private_index[j];
        any_private = true;
      }
    }
    out.routing.push_back(std::move(r));
  }

  Var table = g.constant(shared.embeddings().value);
  if (any_private) table = ops::concat({table, g.parameter(priv.embeddings())});
  out.codes = ops::gather_rows(table, table_index);
  out.z_hat = ops::straight_through(z, ops::reshape(out.codes, {B, L, D}));
  return out;
}

QuantizedTokens unified_quantize(Graph& g, Var z, Codebook& book) {
  check_tokens(z, book.dim(), "unified_quantize");
  std::size_t B = z.shape()[0], L = z.shape()[1], D = z.shape()[2];
  QuantizedTokens out;
  std::vector<std::size_t> index(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    QuantizationResult q = quantize(sample_rows(z.value(), b), book);
    TokenRouting r;
    r.n_tokens = L;
    r.nu = 1.0;
    r.shared_mask.assign(L, 1);
    r.rank.resize(L);
    std::iota(r.rank.begin(), r.rank.end(), 1);
    r.shared_index = q.indices;
    r.shared_distance = q.distances;
    r.private_index.assign(L, 0);
    std::copy(q.indices.begin(), q.indices.end(), index.begin() + b * L);
    out.routing.push_back(std::move(r));
  }
  out.codes = ops::gather_rows(g.constant(book.embeddings().value), index);
  out.z_hat = ops::straight_through(z, ops::reshape(out.codes, {B, L, D}));
  return out;
}

namespace {

Var token_rows(Var v) {
  const Shape& s = v.shape();
  if (s.size() == 2) return v;
  if (s.size() == 3) return ops::reshape(v, {s[0] * s[1], s[2]});
  throw ShapeError("h2d_loss: token tensor must be [N, D] or [B, L, D], got " + shape_str(s));
}

}  // namespace

H2DLossTerms h2d_loss(Graph& g, Var x, Var x_hat, Var z, Var codes, std::span<const TokenRouting> routing,
                      double beta) {
  if (beta < 0.0) throw ValidationError("h2d_loss: beta must be non-negative");
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("h2d_loss: x " + shape_str(x.shape()) + " vs x_hat " + shape_str(x_hat.shape()));
  }
  Var zr = token_rows(z);
  Var qr = token_rows(codes);
  if (zr.shape() != qr.shape()) {
    throw ShapeError("h2d_loss: z " + shape_str(z.shape()) + " vs codes " + shape_str(codes.shape()));
  }
  std::size_t N = 0;
  std::vector<std::size_t> private_rows;
  double nu = routing.empty() ? 1.0 : routing.front().nu;
  for (const TokenRouting& r : routing) {
    if (r.shared_mask.size() != r.n_tokens) throw Error("h2d_loss: malformed routing");
    for (std::size_t j = 0; j < r.n_tokens; ++j) {
      if (!r.shared_mask[j]) private_rows.push_back(N + j);
    }
    N += r.n_tokens;
  }
  if (N != zr.shape()[0]) {
    throw Error("h2d_loss: routing covers " + std::to_string(N) + " tokens but latent has " +
                std::to_string(zr.shape()[0]));
  }

  H2DLossTerms t;
  t.rec = ops::mse(x, x_hat);
  std::optional<Var> zp, qp;
  if (!private_rows.empty()) {
    zp = ops::gather_rows(zr, private_rows);
    qp = ops::gather_rows(qr, private_rows);
  }
  // Rounding can leave no private tokens even with nu < 1 (short sequences);
  // the loss is zero then, and a count mismatch is a routing bug.
  std::size_t expected = 0;
  for (const TokenRouting& r : routing) expected += r.n_tokens - n_shared(nu, r.n_tokens);
  if (expected != private_rows.size()) {
    throw Error("h2d_loss: routing has " + std::to_string(private_rows.size()) + " private tokens, expected " +
                std::to_string(expected));
  }
  t.pri = private_rows.empty() ? g.constant(Tensor::scalar(0.0)) : private_codebook_loss(g, zp, qp, nu);
  t.commit = ops::mse(zr, ops::stop_gradient(qr));
  t.total = ops::add(ops::add(t.rec, t.pri), ops::scale(t.commit, beta));
  return t;
}

H2DLossTerms unified_loss(Graph& g, Var x, Var x_hat, Var z, Var codes, double beta) {
  if (beta < 0.0) throw ValidationError("unified_loss: beta must be non-negative");
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("unified_loss: x " + shape_str(x.shape()) + " vs x_hat " + shape_str(x_hat.shape()));
  }
  Var zr = token_rows(z);
  Var qr = token_rows(codes);
  if (zr.shape() != qr.shape()) {
    throw ShapeError("unified_loss: z " + shape_str(z.shape()) + " vs codes " + shape_str(codes.shape()));
  }
  H2DLossTerms t;
  t.rec = ops::mse(x, x_hat);
  t.pri = g.constant(Tensor::scalar(0.0));
  t.commit = ops::mse(zr, ops::stop_gradient(qr));
  t.total = ops::add(ops::add(t.rec, t.pri), ops::scale(t.commit, beta));
  return t;
}

SharedRows shared_rows(const Tensor& z, std::span<const TokenRouting> routing) {
  std::size_t D = z.shape().back();
  std::vector<double> rows;
  SharedRows out;
  std::size_t base = 0;
  for (const TokenRouting& r : routing) {
    for (std::size_t j = 0; j < r.n_tokens; ++j) {
      if (!r.shared_mask[j]) continue;
      const double* src = z.ptr() + (base + j) * D;
      rows.insert(rows.end(), src, src + D);
      out.indices.push_back(r.shared_index[j]);
    }
    base += r.n_tokens;
  }
  if (base * D != z.size()) throw Error("shared_rows: routing does not cover the latent");
  if (!out.indices.empty()) out.rows = Tensor({out.indices.size(), D}, std::move(rows));
  return out;
}

}  // namespace h2dilr
