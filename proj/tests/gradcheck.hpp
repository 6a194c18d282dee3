#pragma once

// Central finite-difference oracle shared by the unit and acceptance suites.
// It only evaluates forward values; it never looks at the analytic backward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "h2dilr/autodiff.hpp"

namespace h2dilr::testing {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCase {
  std::string name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> make_inputs;
  Builder build;
};

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            double avoid_zero = 0.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    do {
      v = u(rng);
    } while (std::abs(v) < avoid_zero);
  }
  return t;
}

/// Scalar objective: sum(out * projection) with a fixed projection drawn
/// from `proj_seed`, so every output element influences the check.
inline double evaluate(const Builder& build, const std::vector<Tensor>& inputs, std::uint64_t proj_seed) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  Var out = build(g, vars);
  std::mt19937_64 rng(proj_seed);
  Tensor proj = random_tensor(rng, out.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < proj.size(); ++i) s += proj[i] * out.value()[i];
  return s;
}

/// Max over all input elements of |analytic - fd| / max(1, |fd|).
inline double gradcheck(const Builder& build, const std::vector<Tensor>& inputs, std::uint64_t proj_seed,
                        double step = 1e-5) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t));
  Var out = build(g, vars);
  std::mt19937_64 rng(proj_seed);
  Var proj = g.constant(random_tensor(rng, out.shape()));
  Var loss = ops::sum(ops::mul(out, proj));
  g.backward(loss);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor analytic = g.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[k][i] += step;
      minus[k][i] -= step;
      double fd = (evaluate(build, plus, proj_seed) - evaluate(build, minus, proj_seed)) / (2.0 * step);
      double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// One case per autodiff primitive, with small random extents.
inline std::vector<GradCase> primitive_cases() {
  std::vector<GradCase> cases;
  auto dim = [](std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  cases.push_back({"relu", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 5}, -1, 1, 1e-3)}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::relu(v[0]); }});
  cases.push_back({"gelu", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 5}, -3, 3)}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::gelu(v[0]); }});
  cases.push_back({"add", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {3, 2}), random_tensor(rng, {3, 2})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); }});
  cases.push_back({"mul", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {3, 2}), random_tensor(rng, {3, 2})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::mul(v[0], v[1]); }});
  cases.push_back({"scale", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {4})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::scale(v[0], -1.7); }});
  cases.push_back({"sum", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 3})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::sum(v[0]); }});
  cases.push_back({"mean", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 3})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::mean(v[0]); }});
  cases.push_back({"mean_tokens", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 3, 4})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::mean_tokens(v[0]); }});
  cases.push_back({"mse", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::mse(v[0], v[1]); }});
  cases.push_back({"cross_entropy", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {3, 4}, -2, 2)}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::cross_entropy(v[0], {0, 3, 1}); }});
  cases.push_back({"softmax", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 5}, -2, 2)}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::softmax(v[0]); }});
  cases.push_back({"layer_norm",
                   [](auto& rng) {
                     return std::vector<Tensor>{random_tensor(rng, {3, 6}, -2, 2), random_tensor(rng, {6}, 0.5, 1.5),
                                                random_tensor(rng, {6})};
                   },
                   [](Graph&, const std::vector<Var>& v) { return ops::layer_norm(v[0], v[1], v[2]); }});
  cases.push_back({"linear",
                   [](auto& rng) {
                     return std::vector<Tensor>{random_tensor(rng, {2, 3, 4}), random_tensor(rng, {5, 4}),
                                                random_tensor(rng, {5})};
                   },
                   [](Graph&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); }});
  cases.push_back({"conv1d",
                   [dim](auto& rng) {
                     std::size_t T = dim(rng, 6, 11);
                     return std::vector<Tensor>{random_tensor(rng, {2, 3, T}), random_tensor(rng, {2, 3, 4}),
                                                random_tensor(rng, {2})};
                   },
                   [](Graph&, const std::vector<Var>& v) {
                     return ops::conv1d(v[0], v[1], v[2], Conv1dOptions{.stride = 2, .pad_left = 1, .pad_right = 1});
                   }});
  cases.push_back({"conv1d_same_stride1",
                   [](auto& rng) {
                     return std::vector<Tensor>{random_tensor(rng, {1, 2, 7}), random_tensor(rng, {3, 2, 4}),
                                                random_tensor(rng, {3})};
                   },
                   [](Graph&, const std::vector<Var>& v) {
                     return ops::conv1d(v[0], v[1], v[2], Conv1dOptions{.stride = 1, .pad_left = 1, .pad_right = 2});
                   }});
  cases.push_back({"conv_transpose1d",
                   [dim](auto& rng) {
                     std::size_t T = dim(rng, 3, 6);
                     return std::vector<Tensor>{random_tensor(rng, {2, 3, T}), random_tensor(rng, {3, 2, 4}),
                                                random_tensor(rng, {2})};
                   },
                   [](Graph&, const std::vector<Var>& v) {
                     return ops::conv_transpose1d(
                         v[0], v[1], v[2],
                         ConvTranspose1dOptions{.stride = 2, .pad_left = 1, .pad_right = 1, .output_padding = 1});
                   }});
  cases.push_back({"avg_pool1d", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 2, 7})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::avg_pool1d(v[0]); }});
  cases.push_back({"attention",
                   [](auto& rng) {
                     return std::vector<Tensor>{random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 3, 4}),
                                                random_tensor(rng, {2, 3, 4})};
                   },
                   [](Graph&, const std::vector<Var>& v) { return ops::attention(v[0], v[1], v[2], 2, std::nullopt); }});
  cases.push_back({"attention_with_logit_bias",
                   [](auto& rng) {
                     return std::vector<Tensor>{random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 3, 4}),
                                                random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 3, 3})};
                   },
                   [](Graph&, const std::vector<Var>& v) { return ops::attention(v[0], v[1], v[2], 2, v[3]); }});
  cases.push_back({"reshape", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 6})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::reshape(v[0], {3, 4}); }});
  cases.push_back({"transpose", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 3, 4})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::transpose(v[0]); }});
  cases.push_back({"concat", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 3}), random_tensor(rng, {1, 3})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::concat({v[0], v[1]}); }});
  cases.push_back({"slice_rows", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {4, 3})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::slice_rows(v[0], 1, 3); }});
  cases.push_back({"zero_mask", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 2, 3})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::zero_mask(v[0], {1, 0, 0, 1}); }});
  cases.push_back({"gather_rows", [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {4, 3})}; },
                   [](Graph&, const std::vector<Var>& v) { return ops::gather_rows(v[0], {2, 0, 2, 3}); }});
  // stop_gradient cuts the edge, so finite differences (which see the full
  // dependence) only agree when the stopped branch does not depend on x.
  cases.push_back({"stop_gradient_constant_branch",
                   [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, {3})}; },
                   [](Graph& g, const std::vector<Var>& v) {
                     Var c = g.constant(Tensor::vector({0.5, -1.0, 2.0}));
                     return ops::add(v[0], ops::stop_gradient(c));
                   }});
  return cases;
}

}  // namespace h2dilr::testing
