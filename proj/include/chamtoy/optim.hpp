#ifndef CHAMTOY_OPTIM_HPP_
#define CHAMTOY_OPTIM_HPP_

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chamtoy/kv_config.hpp"
#include "chamtoy/tensor.hpp"

namespace chamtoy {

enum class LrSchedule { ExpDecay, Cosine };

std::string to_string(LrSchedule s);
LrSchedule parse_lr_schedule(std::string_view s);

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  std::uint64_t warmup_steps = 100;
  double peak_lr = 3e-3;
  LrSchedule schedule = LrSchedule::ExpDecay;
  std::uint64_t total_steps = 2000;
  // ExpDecay reaches decay_floor * peak_lr at total_steps.
  double decay_floor = 0.01;

  void validate() const;
  void to_kv(KvMap& kv) const;  // `optim.*`
  bool set(std::string_view key, std::string_view value);
};

// Linear warm-up from 0, then the configured decay. step <= total_steps.
double lr_at(std::uint64_t step, const OptimConfig& cfg);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Global L2 norm over every gradient buffer (missing gradients count as 0).
double global_grad_norm(std::span<const std::pair<std::string, Tensor>> params);
// Scales all gradients by threshold/norm when norm > threshold. Returns the
// pre-clip norm.
double clip_global_norm(std::span<const std::pair<std::string, Tensor>> params,
                        double threshold);

struct OptimState {
  std::uint64_t step = 0;
  std::vector<std::vector<Scalar>> m;
  std::vector<std::vector<Scalar>> v;
};

// Decoupled weight decay, then the bias-corrected Adam update. Throws
// DivergenceError naming the parameter on a non-finite gradient; parameters
// are left untouched in that case.
void adamw_step(std::span<const std::pair<std::string, Tensor>> params,
                OptimState& state, const OptimConfig& cfg, double lr);

}  // namespace chamtoy

#endif  // CHAMTOY_OPTIM_HPP_
