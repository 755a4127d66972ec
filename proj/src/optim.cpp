#include "chamtoy/optim.hpp"

#include <cmath>
#include <numbers>

namespace chamtoy {

std::string to_string(LrSchedule s) {
  return s == LrSchedule::ExpDecay ? "exp_decay" : "cosine";
}

LrSchedule parse_lr_schedule(std::string_view s) {
  if (s == "exp_decay") return LrSchedule::ExpDecay;
  if (s == "cosine") return LrSchedule::Cosine;
  throw ConfigError("unknown lr schedule '" + std::string(s) +
                    "' (expected exp_decay or cosine)");
}

void OptimConfig::validate() const {
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
    throw ConfigError("optim.beta1 and optim.beta2 must lie in (0, 1)");
  }
  if (!(eps > 0)) throw ConfigError("optim.eps must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (!(clip_norm > 0)) throw ConfigError("optim.clip_norm must be positive");
  if (!(peak_lr >= 0)) throw ConfigError("optim.peak_lr must be >= 0");
  if (total_steps == 0) throw ConfigError("optim.total_steps must be positive");
  if (warmup_steps > total_steps) {
    throw ConfigError("optim.warmup_steps exceeds optim.total_steps");
  }
  if (!(decay_floor > 0 && decay_floor <= 1)) {
    throw ConfigError("optim.decay_floor must lie in (0, 1]");
  }
}

void OptimConfig::to_kv(KvMap& kv) const {
  kv["optim.beta1"] = format_scalar(beta1);
  kv["optim.beta2"] = format_scalar(beta2);
  kv["optim.eps"] = format_scalar(eps);
  kv["optim.weight_decay"] = format_scalar(weight_decay);
  kv["optim.clip_norm"] = format_scalar(clip_norm);
  kv["optim.warmup_steps"] = std::to_string(warmup_steps);
  kv["optim.peak_lr"] = format_scalar(peak_lr);
  kv["optim.schedule"] = to_string(schedule);
  kv["optim.total_steps"] = std::to_string(total_steps);
  kv["optim.decay_floor"] = format_scalar(decay_floor);
}

bool OptimConfig::set(std::string_view key, std::string_view value) {
  if (key == "optim.beta1") beta1 = parse_scalar(key, value);
  else if (key == "optim.beta2") beta2 = parse_scalar(key, value);
  else if (key == "optim.eps") eps = parse_scalar(key, value);
  else if (key == "optim.weight_decay") weight_decay = parse_scalar(key, value);
  else if (key == "optim.clip_norm") clip_norm = parse_scalar(key, value);
  else if (key == "optim.warmup_steps") warmup_steps = parse_u64(key, value);
  else if (key == "optim.peak_lr") peak_lr = parse_scalar(key, value);
  else if (key == "optim.schedule") schedule = parse_lr_schedule(value);
  else if (key == "optim.total_steps") total_steps = parse_u64(key, value);
  else if (key == "optim.decay_floor") decay_floor = parse_scalar(key, value);
  else return false;
  return true;
}

double lr_at(std::uint64_t step, const OptimConfig& cfg) {
  if (step > cfg.total_steps) {
    throw DomainError("lr_at: step " + std::to_string(step) +
                      " past total_steps " + std::to_string(cfg.total_steps));
  }
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) /
           static_cast<double>(cfg.warmup_steps);
  }
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  if (span == 0) return cfg.peak_lr;
  const double t = static_cast<double>(step - cfg.warmup_steps);
  if (cfg.schedule == LrSchedule::Cosine) {
    return 0.5 * cfg.peak_lr * (1 + std::cos(std::numbers::pi * t / span));
  }
  // gamma^span = decay_floor
  return cfg.peak_lr * std::exp(std::log(cfg.decay_floor) * t / span);
}

double global_grad_norm(std::span<const std::pair<std::string, Tensor>> params) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (Scalar g : p.grad()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

double clip_global_norm(std::span<const std::pair<std::string, Tensor>> params,
                        double threshold) {
  if (!(threshold > 0)) throw DomainError("clip threshold must be positive");
  const double norm = global_grad_norm(params);
  if (norm > threshold) {
    const double scale = threshold / norm;
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      Tensor t = p;
      for (Scalar& g : t.mutable_grad()) g = static_cast<Scalar>(g * scale);
    }
  }
  return norm;
}

void adamw_step(std::span<const std::pair<std::string, Tensor>> params,
                OptimState& state, const OptimConfig& cfg, double lr) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].second.numel(), Scalar{0});
      state.v[i].assign(params[i].second.numel(), Scalar{0});
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("optimizer state has " + std::to_string(state.m.size()) +
                     " entries for " + std::to_string(params.size()) +
                     " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (state.m[i].size() != p.numel() || state.v[i].size() != p.numel()) {
      throw ShapeError("optimizer state for '" + name + "' has wrong size");
    }
    if (!p.has_grad()) continue;
    for (Scalar g : p.grad()) {
      if (!std::isfinite(g)) {
        throw DivergenceError("non-finite gradient in parameter '" + name + "'");
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1 - std::pow(cfg.beta1, t);
  const double bc2 = 1 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto data = p.mutable_data();
    const bool has_grad = p.has_grad();
    const auto grad = has_grad ? p.grad() : std::span<const Scalar>{};
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      double x = data[j];
      x -= lr * cfg.weight_decay * x;
      m[j] = static_cast<Scalar>(cfg.beta1 * m[j] + (1 - cfg.beta1) * g);
      v[j] = static_cast<Scalar>(cfg.beta2 * v[j] + (1 - cfg.beta2) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      x -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      data[j] = static_cast<Scalar>(x);
    }
  }
}

}  // namespace chamtoy
