#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "h2dilr/autodiff.hpp"

namespace h2dilr {

/// base * 0.5 * (1 + cos(pi * step / total)).
double cosine_lr(std::size_t step, std::size_t total_steps, double base);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay and per-parameter step counts. State is
/// keyed by parameter name, so it survives copies of the owning model.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

  /// Updates every parameter in `params` that has an entry in `grads` and
  /// requires a gradient. Frozen or unreached parameters are left untouched.
  /// A non-finite gradient aborts the whole step before anything changes.
  void step(const std::vector<Parameter*>& params, const Gradients& grads, double lr);

  const AdamWOptions& options() const { return opt_; }
  std::uint64_t steps(const std::string& name) const;

 private:
  struct Moments {
    Tensor m;
    Tensor v;
    std::uint64_t t = 0;
  };
  AdamWOptions opt_;
  std::map<std::string, Moments> state_;
};

}  // namespace h2dilr
