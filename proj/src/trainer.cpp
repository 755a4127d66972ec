#include "chamtoy/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace chamtoy {

namespace {

constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kDropoutStream = 2;
const std::string kMonitorPrefix = "train.monitor.";

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  optim.validate();
  mixture.validate();
  monitor.validate();
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (seq_len == 0) throw ConfigError("train.seq_len must be positive");
  if (seq_len > model.context_length) {
    throw ConfigError("train.seq_len " + std::to_string(seq_len) +
                      " exceeds model.context_length " +
                      std::to_string(model.context_length));
  }
}

void TrainConfig::to_kv(KvMap& kv) const {
  model.to_kv(kv);
  optim.to_kv(kv);
  mixture.to_kv(kv);
  monitor.to_kv(kv);
  kv["train.batch_size"] = std::to_string(batch_size);
  kv["train.seq_len"] = std::to_string(seq_len);
  kv["train.seed"] = std::to_string(seed);
  kv["train.checkpoint_every"] = std::to_string(checkpoint_every);
  kv["train.halt_on_divergence"] = halt_on_divergence ? "true" : "false";
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
  if (model.set(key, value) || optim.set(key, value) ||
      mixture.set(key, value) || monitor.set(key, value)) {
    return true;
  }
  if (key == "train.batch_size") batch_size = parse_size(key, value);
  else if (key == "train.seq_len") seq_len = parse_size(key, value);
  else if (key == "train.seed") seed = parse_u64(key, value);
  else if (key == "train.checkpoint_every") checkpoint_every = parse_u64(key, value);
  else if (key == "train.halt_on_divergence") halt_on_divergence = parse_bool(key, value);
  else return false;
  return true;
}

PretrainBatches::PretrainBatches(EncodedCorpus corpus, MixtureSpec mixture,
                                 MixedVocab vocab, std::size_t seq_len)
    : corpus_(std::move(corpus)), mixture_(std::move(mixture)),
      vocab_(vocab), seq_len_(seq_len) {
  mixture_.validate();
  for (int stage : {1, 2}) {
    for (const auto& s : mixture_.probabilities(stage)) {
      const auto* docs = corpus_.find(s.name);
      if (!docs || docs->empty()) {
        throw ConfigError("mixture source '" + s.name +
                          "' has no documents in the corpus");
      }
    }
  }
}

std::vector<TrainingRow> PretrainBatches::batch(std::uint64_t step,
                                                std::uint64_t total_steps,
                                                std::size_t batch_size,
                                                Rng& rng) const {
  std::vector<TrainingRow> rows;
  rows.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::string src = sample_source(step, total_steps, mixture_, rng);
    const auto& docs = *corpus_.find(src);
    const Document& doc = docs[rng.below(docs.size())];
    TrainingRow row;
    row.tokens = realize_document(doc, vocab_, rng);
    if (row.tokens.size() > seq_len_ + 1) row.tokens.resize(seq_len_ + 1);
    rows.push_back(std::move(row));
  }
  return rows;
}

TrainingRow row_from_packed(const PackedSequence& seq) {
  if (seq.tokens.size() < 2) throw DataError("packed sequence too short to train on");
  TrainingRow row;
  row.tokens = seq.tokens;
  row.target_mask.assign(seq.loss_mask.begin() + 1, seq.loss_mask.end());
  return row;
}

SftBatches::SftBatches(std::vector<PackedSequence> sequences)
    : sequences_(std::move(sequences)) {
  if (sequences_.empty()) throw DataError("no SFT sequences to train on");
}

std::vector<TrainingRow> SftBatches::batch(std::uint64_t, std::uint64_t,
                                           std::size_t batch_size,
                                           Rng& rng) const {
  std::vector<TrainingRow> rows;
  for (std::size_t b = 0; b < batch_size; ++b) {
    rows.push_back(row_from_packed(sequences_[rng.below(sequences_.size())]));
  }
  return rows;
}

std::string loss_csv_header() {
  return "step,ce,zloss,lr,grad_norm,output_rms,diverged";
}

std::string loss_csv_row(const StepLog& s) {
  return std::to_string(s.step) + "," + format_scalar(s.ce) + "," +
         format_scalar(s.zloss) + "," + format_scalar(s.lr) + "," +
         format_scalar(s.grad_norm) + "," + format_scalar(s.output_rms) + "," +
         (s.diverged ? "1" : "0");
}

std::vector<StepLog> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != loss_csv_header()) {
    throw DataError(path.string() + ": unexpected header");
  }
  std::vector<StepLog> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 7) throw DataError(where + ": expected 7 fields");
    try {
      StepLog s;
      s.step = parse_u64("step", f[0]);
      s.ce = parse_scalar("ce", f[1]);
      s.zloss = parse_scalar("zloss", f[2]);
      s.lr = parse_scalar("lr", f[3]);
      s.grad_norm = parse_scalar("grad_norm", f[4]);
      s.output_rms = parse_scalar("output_rms", f[5]);
      s.diverged = f[6] == "1";
      out.push_back(s);
    } catch (const ConfigError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

StepResult batch_loss(const Transformer& model, std::span<const TrainingRow> rows,
                      bool train, Rng* rng) {
  if (rows.empty()) throw DataError("empty batch");
  const ModelConfig& cfg = model.config();
  StepResult result;
  std::optional<Tensor> total;
  double sq = 0;
  std::size_t count = 0;
  for (const auto& row : rows) {
    if (row.tokens.size() < 2) throw DataError("training row shorter than 2 tokens");
    const std::span<const TokenId> all(row.tokens);
    const auto inputs = all.first(all.size() - 1);
    const auto targets = all.subspan(1);
    ForwardResult fwd = model_forward(model, inputs, train, rng);
    LossBreakdown lb =
        total_loss(fwd.logits, targets, row.target_mask, cfg.z_loss_coeff);
    result.loss.cross_entropy += lb.cross_entropy;
    result.loss.z_loss += lb.z_loss;
    result.loss.unmasked_token_count += lb.unmasked_token_count;
    total = total ? add(*total, lb.loss) : lb.loss;
    for (Scalar v : fwd.last_layer_output.data()) sq += static_cast<double>(v) * v;
    count += fwd.last_layer_output.numel();
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  result.loss.cross_entropy *= inv;
  result.loss.z_loss *= inv;
  result.loss.total = result.loss.cross_entropy + result.loss.z_loss;
  result.loss.loss = mul_scalar(*total, static_cast<Scalar>(inv));
  result.output_rms = std::sqrt(sq / static_cast<double>(count));
  return result;
}

std::string checkpoint_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%08llu",
                static_cast<unsigned long long>(step));
  return buf;
}

namespace {

Checkpoint make_checkpoint(const Transformer& model, const OptimState& opt,
                           const NormMonitor& monitor, std::uint64_t step,
                           const TrainConfig& cfg) {
  Checkpoint ck = checkpoint_from_model(model);
  ck.step = step;
  const auto params = model.named_parameters();
  if (!opt.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Shape& shape = params[i].second.shape();
      ck.tensors.emplace_back("adam.m." + params[i].first,
                              Tensor::from_data(shape, opt.m[i]));
      ck.tensors.emplace_back("adam.v." + params[i].first,
                              Tensor::from_data(shape, opt.v[i]));
    }
  }
  ck.extra["train.optim_step"] = std::to_string(opt.step);
  ck.extra["train.seed"] = std::to_string(cfg.seed);
  ck.extra["train.total_steps"] = std::to_string(cfg.optim.total_steps);
  monitor.save_state(ck.extra, kMonitorPrefix);
  return ck;
}

void restore(const Checkpoint& ck, Transformer& model, OptimState& opt,
             NormMonitor& monitor) {
  if (!(ck.config.d_model == model.config().d_model &&
        ck.config.n_layers == model.config().n_layers &&
        ck.config.vocab_size() == model.config().vocab_size())) {
    throw ConfigError("checkpoint model does not match the configured model");
  }
  const auto params = model.named_parameters();
  const Transformer loaded = model_from_checkpoint(ck);
  const auto src = loaded.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor dst = params[i].second;
    std::copy(src[i].second.data().begin(), src[i].second.data().end(),
              dst.mutable_data().begin());
  }
  auto get = [&](const std::string& k) {
    auto it = ck.extra.find(k);
    if (it == ck.extra.end()) throw DataError("checkpoint lacks '" + k + "'");
    return it->second;
  };
  opt = {};
  opt.step = parse_u64("train.optim_step", get("train.optim_step"));
  if (opt.step > 0) {
    for (const auto& [name, p] : params) {
      const Tensor* m = ck.find("adam.m." + name);
      const Tensor* v = ck.find("adam.v." + name);
      if (!m || !v) throw DataError("checkpoint lacks optimizer state for '" + name + "'");
      opt.m.emplace_back(m->data().begin(), m->data().end());
      opt.v.emplace_back(v->data().begin(), v->data().end());
    }
  }
  monitor.load_state(ck.extra, kMonitorPrefix);
}

// Keeps the header and rows whose leading step field is <= step.
void truncate_csv(const std::filesystem::path& path, std::uint64_t step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoull(line.substr(0, comma)) <= step) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

}  // namespace

TrainResult train_loop(Transformer& model, const BatchSource& data,
                       const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (!(model.config() == cfg.model)) model.set_config(cfg.model);
  OptimState opt;
  NormMonitor monitor(cfg.monitor);
  std::uint64_t start = 0;
  if (opts.resume_from) {
    const Checkpoint ck = load_checkpoint(*opts.resume_from);
    restore(ck, model, opt, monitor);
    start = ck.step;
    if (start > cfg.optim.total_steps) {
      throw ConfigError("checkpoint step is past optim.total_steps");
    }
  }
  const std::uint64_t end =
      opts.stop_after ? std::min(opts.stop_after, cfg.optim.total_steps)
                      : cfg.optim.total_steps;

  const bool write = !opts.run_dir.empty();
  std::ofstream loss_out, trace_out;
  if (write) {
    std::filesystem::create_directories(opts.run_dir / "checkpoints");
    const auto loss_path = opts.run_dir / "loss.csv";
    const auto trace_path = opts.run_dir / "norm_trace.csv";
    if (start > 0) {
      truncate_csv(loss_path, start);
      truncate_csv(trace_path, start);
    }
    const bool fresh = start == 0 || !std::filesystem::exists(loss_path);
    loss_out.open(loss_path, fresh ? std::ios::trunc : std::ios::app);
    trace_out.open(trace_path, fresh ? std::ios::trunc : std::ios::app);
    if (!loss_out || !trace_out) {
      throw DataError("cannot write traces under " + opts.run_dir.string());
    }
    if (fresh) {
      loss_out << loss_csv_header() << "\n";
      trace_out << norm_trace_csv_header() << "\n";
    }
  }

  TrainResult result;
  const auto params = model.named_parameters();
  auto save = [&](std::uint64_t step) {
    if (!write) return;
    const auto dir = opts.run_dir / "checkpoints" / checkpoint_name(step);
    save_checkpoint(dir, make_checkpoint(model, opt, monitor, step, cfg));
    result.final_checkpoint = dir;
  };

  for (std::uint64_t step = start; step < end; ++step) {
    const std::uint64_t t = step + 1;
    Rng data_rng(derive_seed(cfg.seed, kDataStream, step));
    Rng drop_rng(derive_seed(cfg.seed, kDropoutStream, step));
    const auto rows = data.batch(step, cfg.optim.total_steps, cfg.batch_size, data_rng);

    model.zero_grad();
    StepResult sr = batch_loss(model, rows, true, &drop_rng);
    sr.loss.loss.backward();

    StepLog log;
    log.step = t;
    log.ce = sr.loss.cross_entropy;
    log.zloss = sr.loss.z_loss;
    log.lr = lr_at(t, cfg.optim);
    log.output_rms = sr.output_rms;
    log.grad_norm = global_grad_norm(params);
    const bool finite = std::isfinite(log.grad_norm) && std::isfinite(log.total());
    if (finite) clip_global_norm(params, cfg.optim.clip_norm);

    const NormRecord& rec =
        monitor.observe(t, finite ? sr.output_rms : NAN, log.total());
    log.diverged = rec.diverged;
    result.log.push_back(log);
    result.trace.push_back(rec);
    if (write) {
      loss_out << loss_csv_row(log) << "\n";
      trace_out << norm_trace_csv_row(rec) << "\n";
      loss_out.flush();
      trace_out.flush();
    }
    if (opts.on_step) opts.on_step(log);
    result.final_step = t;

    if (!finite || (rec.diverged && cfg.halt_on_divergence)) {
      if (!finite && !cfg.halt_on_divergence) {
        throw DivergenceError("non-finite loss or gradient at step " +
                              std::to_string(t));
      }
      result.halted = true;
      save(step);  // parameters as they were before this step's update
      return result;
    }
    adamw_step(params, opt, cfg.optim, log.lr);
    if (cfg.checkpoint_every && t % cfg.checkpoint_every == 0 && t != end) save(t);
  }
  if (result.final_step == 0) result.final_step = start;
  save(result.final_step);
  return result;
}

}  // namespace chamtoy
