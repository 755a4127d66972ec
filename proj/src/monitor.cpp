#include "chamtoy/monitor.hpp"

#include <cmath>

namespace chamtoy {

void MonitorConfig::validate() const {
  if (!(ewma_decay > 0 && ewma_decay < 1)) {
    throw ConfigError("monitor.ewma_decay must lie in (0, 1)");
  }
  if (!(slope_threshold > 0)) {
    throw ConfigError("monitor.slope_threshold must be positive");
  }
  if (window == 0) throw ConfigError("monitor.window must be positive");
}

void MonitorConfig::to_kv(KvMap& kv) const {
  kv["monitor.ewma_decay"] = format_scalar(ewma_decay);
  kv["monitor.slope_threshold"] = format_scalar(slope_threshold);
  kv["monitor.window"] = std::to_string(window);
  kv["monitor.grace_steps"] = std::to_string(grace_steps);
}

bool MonitorConfig::set(std::string_view key, std::string_view value) {
  if (key == "monitor.ewma_decay") ewma_decay = parse_scalar(key, value);
  else if (key == "monitor.slope_threshold") slope_threshold = parse_scalar(key, value);
  else if (key == "monitor.window") window = parse_size(key, value);
  else if (key == "monitor.grace_steps") grace_steps = parse_u64(key, value);
  else return false;
  return true;
}

NormMonitor::NormMonitor(MonitorConfig cfg) : cfg_(cfg) { cfg_.validate(); }

const NormRecord& NormMonitor::observe(std::uint64_t step, double rms,
                                       double loss) {
  if (!trace_.empty() && step <= last_step_) {
    throw DomainError("monitor steps must increase (got " +
                      std::to_string(step) + " after " +
                      std::to_string(last_step_) + ")");
  }
  NormRecord r;
  r.step = step;
  r.rms = rms;
  r.loss = loss;
  if (!std::isfinite(rms) || !std::isfinite(loss) || !(rms > 0)) {
    // A zero rms has no log; the EWMA holds.
    if (!std::isfinite(rms) || !std::isfinite(loss)) flagged_ = true;
    r.ewma_log_rms = ewma_;
  } else {
    const double lr = std::log(rms);
    if (!started_) {
      ewma_ = lr;
      started_ = true;
    } else {
      const double next = cfg_.ewma_decay * ewma_ + (1 - cfg_.ewma_decay) * lr;
      const bool armed = step > cfg_.grace_steps;
      rising_ = armed && next - ewma_ > cfg_.slope_threshold ? rising_ + 1 : 0;
      ewma_ = next;
      if (rising_ >= cfg_.window) flagged_ = true;
    }
    r.ewma_log_rms = ewma_;
  }
  r.diverged = flagged_;
  last_step_ = step;
  trace_.push_back(r);
  return trace_.back();
}

void NormMonitor::save_state(KvMap& kv, const std::string& prefix) const {
  kv[prefix + "started"] = started_ ? "true" : "false";
  kv[prefix + "ewma"] = format_scalar(ewma_);
  kv[prefix + "rising"] = std::to_string(rising_);
  kv[prefix + "flagged"] = flagged_ ? "true" : "false";
  kv[prefix + "last_step"] = std::to_string(last_step_);
}

void NormMonitor::load_state(const KvMap& kv, const std::string& prefix) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(prefix + k);
    if (it == kv.end()) throw DataError("missing monitor state '" + prefix + k + "'");
    return it->second;
  };
  started_ = parse_bool(prefix + "started", get("started"));
  ewma_ = parse_scalar(prefix + "ewma", get("ewma"));
  rising_ = parse_size(prefix + "rising", get("rising"));
  flagged_ = parse_bool(prefix + "flagged", get("flagged"));
  last_step_ = parse_u64(prefix + "last_step", get("last_step"));
  trace_.clear();
}

double output_rms(std::span<const Scalar> x) {
  if (x.empty()) return 0;
  double sq = 0;
  for (Scalar v : x) sq += static_cast<double>(v) * v;
  return std::sqrt(sq / static_cast<double>(x.size()));
}

std::string norm_trace_csv_header() {
  return "step,rms,loss,ewma_log_rms,diverged";
}

std::string norm_trace_csv_row(const NormRecord& r) {
  return std::to_string(r.step) + "," + format_scalar(r.rms) + "," +
         format_scalar(r.loss) + "," + format_scalar(r.ewma_log_rms) + "," +
         (r.diverged ? "1" : "0");
}

}  // namespace chamtoy
