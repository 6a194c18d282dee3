#include "h2dilr/optim.hpp"

#include <cmath>
#include <numbers>

#include "h2dilr/error.hpp"

namespace h2dilr {

double cosine_lr(std::size_t step, std::size_t total_steps, double base) {
  if (total_steps == 0) throw ValidationError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw ValidationError("cosine_lr: step beyond schedule end");
  if (step == total_steps) return 0.0;
  double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return std::max(0.0, base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
}

void AdamW::step(const std::vector<Parameter*>& params, const Gradients& grads, double lr) {
  std::vector<std::pair<Parameter*, const Tensor*>> work;
  for (Parameter* p : params) {
    if (!p->requires_grad) continue;
    auto it = grads.find(p);
    if (it == grads.end()) continue;
    if (it->second.shape() != p->value.shape()) {
      throw ShapeError("adamw: gradient " + shape_str(it->second.shape()) + " for '" + p->name + "' " +
                       shape_str(p->value.shape()));
    }
    if (!it->second.all_finite()) throw NumericError("adamw: non-finite gradient for '" + p->name + "', step aborted");
    work.emplace_back(p, &it->second);
  }
  for (auto [p, g] : work) {
    Moments& s = state_[p->name];
    if (s.t == 0) {
      s.m = Tensor::zeros_like(p->value);
      s.v = Tensor::zeros_like(p->value);
    }
    ++s.t;
    double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(s.t));
    double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(s.t));
    double decay = 1.0 - lr * opt_.weight_decay;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      double gi = (*g)[i];
      s.m[i] = opt_.beta1 * s.m[i] + (1.0 - opt_.beta1) * gi;
      s.v[i] = opt_.beta2 * s.v[i] + (1.0 - opt_.beta2) * gi * gi;
      double mhat = s.m[i] / bc1;
      double vhat = s.v[i] / bc2;
      p->value[i] = p->value[i] * decay - lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
}

std::uint64_t AdamW::steps(const std::string& name) const {
  auto it = state_.find(name);
  return it == state_.end() ? 0 : it->second.t;
}

}  // namespace h2dilr
