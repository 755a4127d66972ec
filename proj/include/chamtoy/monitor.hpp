#ifndef CHAMTOY_MONITOR_HPP_
#define CHAMTOY_MONITOR_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chamtoy/kv_config.hpp"
#include "chamtoy/tensor.hpp"

namespace chamtoy {

struct MonitorConfig {
  double ewma_decay = 0.99;
  // Flag when the EWMA of log-rms rises by more than slope_threshold per step
  // for `window` consecutive steps.
  double slope_threshold = 1e-3;
  std::size_t window = 100;
  // Steps up to and including this one update the EWMA but never count as
  // rising. Lets the init transient (embeddings growing from a small init
  // scale) settle. Non-finite values flag regardless.
  std::uint64_t grace_steps = 0;

  void validate() const;
  void to_kv(KvMap& kv) const;  // `monitor.*`
  bool set(std::string_view key, std::string_view value);
};

struct NormRecord {
  std::uint64_t step = 0;
  double rms = 0;
  double loss = 0;
  double ewma_log_rms = 0;
  bool diverged = false;
};

// Tracks the rms of the last transformer layer's output. Once raised, the
// divergence flag stays raised.
class NormMonitor {
 public:
  explicit NormMonitor(MonitorConfig cfg = {});

  const NormRecord& observe(std::uint64_t step, double rms, double loss);

  bool diverged() const { return flagged_; }
  const std::vector<NormRecord>& trace() const { return trace_; }
  const MonitorConfig& config() const { return cfg_; }

  // Internal state (not the trace) for checkpoint resume.
  void save_state(KvMap& kv, const std::string& prefix) const;
  void load_state(const KvMap& kv, const std::string& prefix);

 private:
  MonitorConfig cfg_;
  std::vector<NormRecord> trace_;
  bool started_ = false;
  double ewma_ = 0;
  std::size_t rising_ = 0;
  bool flagged_ = false;
  std::uint64_t last_step_ = 0;
};

// sqrt(mean(x^2)) over every element.
double output_rms(std::span<const Scalar> x);

std::string norm_trace_csv_header();
std::string norm_trace_csv_row(const NormRecord& r);

}  // namespace chamtoy

#endif  // CHAMTOY_MONITOR_HPP_
