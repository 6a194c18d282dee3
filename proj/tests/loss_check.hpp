#pragma once

// Finite-difference checks of the two quantized-autoencoder objectives. The
// reference losses are plain loops over doubles; stop-gradient operands are
// frozen at their base values, which is what stop-gradient means.

#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "h2dilr/codebook.hpp"
#include "h2dilr/h2d.hpp"

namespace h2dilr::testing {

inline double mean_sq(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double rel_err(double analytic, double fd) { return std::abs(analytic - fd) / std::max(1.0, std::abs(fd)); }

/// Max relative error of the analytic gradient of rec + code + beta * commit
/// against central differences, for one random instance.
inline double vq_loss_fd_error(std::mt19937_64& rng, double step = 1e-5) {
  std::uniform_int_distribution<std::size_t> ext(1, 6);
  std::uniform_real_distribution<double> beta_dist(0.0, 1.0);
  Shape xs{ext(rng), ext(rng)}, zs{ext(rng), ext(rng)};
  Tensor x = random_tensor(rng, xs), xh = random_tensor(rng, xs);
  Tensor z = random_tensor(rng, zs), zq = random_tensor(rng, zs);
  double beta = beta_dist(rng);

  Graph g;
  Var vx = g.constant(x), vxh = g.input(xh), vz = g.input(z), vzq = g.input(zq);
  g.backward(vq_loss(vx, vxh, vz, vzq, beta).total);
  Tensor gxh = g.grad(vxh), gz = g.grad(vz), gzq = g.grad(vzq);

  auto F = [&](const Tensor& xh_, const Tensor& z_, const Tensor& zq_) {
    return mean_sq(x.vec(), xh_.vec()) + mean_sq(z.vec(), zq_.vec()) + beta * mean_sq(z_.vec(), zq.vec());
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < xh.size(); ++i) {
    Tensor p = xh, m = xh;
    p[i] += step;
    m[i] -= step;
    worst = std::max(worst, rel_err(gxh[i], (F(p, z, zq) - F(m, z, zq)) / (2 * step)));
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    Tensor p = z, m = z;
    p[i] += step;
    m[i] -= step;
    worst = std::max(worst, rel_err(gz[i], (F(xh, p, zq) - F(xh, m, zq)) / (2 * step)));
  }
  for (std::size_t i = 0; i < zq.size(); ++i) {
    Tensor p = zq, m = zq;
    p[i] += step;
    m[i] -= step;
    worst = std::max(worst, rel_err(gzq[i], (F(xh, z, p) - F(xh, z, m)) / (2 * step)));
  }
  return worst;
}

/// Same check for rec + pri + beta * commit through h2d_quantize, with the
/// routing and code assignments of the base point held fixed.
inline double h2d_loss_fd_error(std::mt19937_64& rng, double step = 1e-5) {
  std::uniform_int_distribution<std::size_t> ext(1, 5);
  std::uniform_real_distribution<double> nu_dist(0.0, 1.0);
  std::size_t B = ext(rng), L = ext(rng), D = ext(rng), T = ext(rng) + 1;
  H2DOptions opt;
  opt.nu = nu_dist(rng);
  opt.beta = nu_dist(rng);
  opt.K_private = ext(rng);
  opt.code_dim = D;
  H2DState state(2, opt, rng());
  std::size_t subject = rng() % 2;
  Codebook& priv = state.private_book(subject);
  priv.set_embeddings(random_tensor(rng, priv.embeddings().value.shape(), -0.5, 0.5));

  Tensor x = random_tensor(rng, {B, T}), xh = random_tensor(rng, {B, T});
  Tensor z = random_tensor(rng, {B, L, D}, -0.5, 0.5);

  Graph g;
  Var vx = g.constant(x), vxh = g.input(xh), vz = g.input(z);
  QuantizedTokens q = h2d_quantize(g, vz, state, subject);
  Gradients grads = g.backward(h2d_loss(g, vx, vxh, vz, q.codes, q.routing, opt.beta).total);
  Tensor gxh = g.grad(vxh), gz = g.grad(vz);
  Tensor gp = grads.count(&priv.embeddings()) ? grads.at(&priv.embeddings())
                                              : Tensor::zeros_like(priv.embeddings().value);

  // Frozen base quantities.
  std::vector<double> codes0 = q.codes.value().vec();
  std::vector<std::size_t> prow, pidx;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < L; ++j) {
      if (!q.routing[b].shared_mask[j]) {
        prow.push_back(b * L + j);
        pidx.push_back(q.routing[b].private_index[j]);
      }
    }
  }
  auto F = [&](const Tensor& xh_, const Tensor& z_, const Tensor& P) {
    double pri = 0.0;
    for (std::size_t r = 0; r < prow.size(); ++r) {
      for (std::size_t d = 0; d < D; ++d) {
        double diff = z[prow[r] * D + d] - P[pidx[r] * D + d];
        pri += diff * diff;
      }
    }
    if (!prow.empty()) pri /= static_cast<double>(prow.size() * D);
    return mean_sq(x.vec(), xh_.vec()) + pri + opt.beta * mean_sq(z_.vec(), codes0);
  };
  Tensor P = priv.embeddings().value;
  double worst = 0.0;
  for (std::size_t i = 0; i < xh.size(); ++i) {
    Tensor p = xh, m = xh;
    p[i] += step;
    m[i] -= step;
    worst = std::max(worst, rel_err(gxh[i], (F(p, z, P) - F(m, z, P)) / (2 * step)));
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    Tensor p = z, m = z;
    p[i] += step;
    m[i] -= step;
    worst = std::max(worst, rel_err(gz[i], (F(xh, p, P) - F(xh, m, P)) / (2 * step)));
  }
  for (std::size_t i = 0; i < P.size(); ++i) {
    Tensor p = P, m = P;
    p[i] += step;
    m[i] -= step;
    worst = std::max(worst, rel_err(gp[i], (F(xh, z, p) - F(xh, z, m)) / (2 * step)));
  }
  return worst;
}

}  // namespace h2dilr::testing
