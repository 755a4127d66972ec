#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "chamtoy/bpe.hpp"
#include "chamtoy/checkpoint.hpp"
#include "chamtoy/decoder.hpp"
#include "chamtoy/evalkit.hpp"
#include "chamtoy/inference.hpp"
#include "chamtoy/trainer.hpp"

namespace chamtoy::cli {

namespace fs = std::filesystem;

void TokenizerConfig::validate() const {
  if (bpe_vocab < BpeModel::kByteAlphabet) {
    throw ConfigError("tokenizer.bpe_vocab " + std::to_string(bpe_vocab) +
                      " is below the byte alphabet of " +
                      std::to_string(BpeModel::kByteAlphabet));
  }
  if (codebook_size < 2) throw ConfigError("tokenizer.codebook_size must be at least 2");
  if (kmeans_iters == 0) throw ConfigError("tokenizer.kmeans_iters must be positive");
  geometry.validate();
}

void TokenizerConfig::to_kv(KvMap& kv) const {
  kv["tokenizer.bpe_vocab"] = std::to_string(bpe_vocab);
  kv["tokenizer.codebook_size"] = std::to_string(codebook_size);
  kv["tokenizer.image_side"] = std::to_string(geometry.side);
  kv["tokenizer.patch"] = std::to_string(geometry.patch);
  kv["tokenizer.channels"] = std::to_string(geometry.channels);
  kv["tokenizer.kmeans_iters"] = std::to_string(kmeans_iters);
  kv["tokenizer.seed"] = std::to_string(seed);
}

bool TokenizerConfig::set(std::string_view key, std::string_view value) {
  if (key == "tokenizer.bpe_vocab") bpe_vocab = parse_size(key, value);
  else if (key == "tokenizer.codebook_size") codebook_size = parse_size(key, value);
  else if (key == "tokenizer.image_side") geometry.side = parse_size(key, value);
  else if (key == "tokenizer.patch") geometry.patch = parse_size(key, value);
  else if (key == "tokenizer.channels") geometry.channels = parse_size(key, value);
  else if (key == "tokenizer.kmeans_iters") kmeans_iters = parse_size(key, value);
  else if (key == "tokenizer.seed") seed = parse_u64(key, value);
  else return false;
  return true;
}

MixedTokenizer load_tokenizer(const fs::path& dir) {
  TokenizerConfig cfg;
  for (const auto& [k, v] : read_kv_file(dir / "tokenizer.cfg")) {
    if (!cfg.set(k, v)) {
      throw ConfigError((dir / "tokenizer.cfg").string() + ": unknown key '" + k + "'");
    }
  }
  cfg.validate();
  MixedTokenizer tok{MixedVocab(cfg.bpe_vocab, cfg.codebook_size),
                     BpeModel::load(dir / "bpe.txt"),
                     Codebook::load(dir / "codebook.bin"), cfg.geometry};
  if (tok.bpe.vocab_size() > cfg.bpe_vocab) {
    throw DataError("BPE model has more symbols than tokenizer.bpe_vocab");
  }
  if (tok.codebook.size() != cfg.codebook_size ||
      tok.codebook.patch() != cfg.geometry.patch ||
      tok.codebook.channels() != cfg.geometry.channels) {
    throw DataError("codebook file does not match tokenizer.cfg");
  }
  return tok;
}

std::uint64_t env_seed(std::uint64_t fallback) {
  const char* s = std::getenv("CHAMTOY_SEED");
  if (!s || !*s) return fallback;
  return parse_u64("CHAMTOY_SEED", s);
}

namespace {

// Config file first, then each --set in order. Unknown keys are errors.
template <typename Target>
void apply_overrides(Target& target, const std::string& config_file,
                     const std::vector<std::string>& sets) {
  auto apply = [&](const std::string& k, const std::string& v,
                   const std::string& origin) {
    if (!target.set(k, v)) throw ConfigError(origin + ": unknown key '" + k + "'");
  };
  if (!config_file.empty()) {
    for (const auto& [k, v] : read_kv_file(config_file)) apply(k, v, config_file);
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects key=value, got '" + s + "'");
    }
    apply(s.substr(0, eq), s.substr(eq + 1), "--set");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// ---- tokenizer-train --------------------------------------------------------

struct TokenizerArgs {
  std::string corpus, out_dir, config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

int cmd_tokenizer_train(const TokenizerArgs& a, std::ostream& out) {
  TokenizerConfig cfg;
  cfg.seed = env_seed(0);
  apply_overrides(cfg, a.config, a.sets);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  const auto records = read_corpus(a.corpus);
  std::vector<std::string> texts;
  std::set<fs::path> image_paths;
  for (const auto& r : records) {
    if (r.kind == RecordKind::Sft) {
      texts.push_back(r.prompt);
      if (!r.answer.empty()) texts.push_back(r.answer);
    } else {
      std::string_view rest = r.text;
      for (auto pos = rest.find(kImageMarker); pos != std::string_view::npos;
           pos = rest.find(kImageMarker)) {
        texts.emplace_back(rest.substr(0, pos));
        rest = rest.substr(pos + kImageMarker.size());
      }
      texts.emplace_back(rest);
    }
    image_paths.insert(r.images.begin(), r.images.end());
    if (r.answer_image) image_paths.insert(*r.answer_image);
  }
  std::vector<Image> images;
  for (const auto& p : image_paths) {
    images.push_back(center_crop_square(read_pnm(p), cfg.geometry.side));
  }
  if (images.empty()) throw DataError("corpus " + a.corpus + " has no images");

  const BpeModel bpe = BpeModel::train(texts, cfg.bpe_vocab);
  Rng rng(derive_seed(cfg.seed, 0x746f6b));
  CodebookReport report;
  const Codebook cb = train_codebook(images, cfg.codebook_size, cfg.geometry.patch,
                                     cfg.kmeans_iters, rng, &report);

  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  bpe.save(dir / "bpe.txt");
  cb.save(dir / "codebook.bin");
  KvMap kv;
  cfg.to_kv(kv);
  write_kv_file(dir / "tokenizer.cfg", kv);
  KvMap rep;
  rep["codebook_mse"] = format_scalar(report.final_mse);
  rep["codebook_distinct_patches"] = std::to_string(report.distinct_patches);
  rep["codebook_padded"] = report.padded ? "true" : "false";
  rep["bpe_vocab_size"] = std::to_string(bpe.vocab_size());
  rep["bpe_merges"] = std::to_string(bpe.merges().size());
  rep["images"] = std::to_string(images.size());
  rep["texts"] = std::to_string(texts.size());
  write_kv_file(dir / "report.txt", rep);
  if (report.padded) {
    out << "note: codebook size " << cfg.codebook_size << " exceeds the "
        << report.distinct_patches
        << " distinct patches; extra entries are jittered copies\n";
  }
  out << format_kv(rep);
  return kOk;
}

// ---- train / sft ------------------------------------------------------------

struct TrainArgs {
  std::string corpus, tokenizer, run_dir, config, preset = "toy", resume, init,
      ablate;
  bool toy = false;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

TrainConfig build_train_config(const TrainArgs& a, const MixedTokenizer& tok,
                               bool sft) {
  TrainConfig cfg;
  cfg.model = preset(a.preset);
  if (a.toy) cfg.model = with_toy_dims(cfg.model);
  cfg.model.text_vocab = tok.vocab.text_size();
  cfg.model.image_vocab = tok.vocab.image_size();
  cfg.seed = env_seed(0);
  if (sft) {
    cfg.optim.schedule = LrSchedule::Cosine;
    cfg.optim.peak_lr = 1e-5;
    cfg.optim.warmup_steps = 0;
    cfg.model.dropout_p = 0.05;
  }
  apply_overrides(cfg, a.config, a.sets);
  if (a.seed) cfg.seed = *a.seed;
  if (cfg.model.text_vocab != tok.vocab.text_size() ||
      cfg.model.image_vocab != tok.vocab.image_size()) {
    throw ConfigError("model vocabulary does not match the tokenizer (text " +
                      std::to_string(tok.vocab.text_size()) + ", image " +
                      std::to_string(tok.vocab.image_size()) + ")");
  }
  if (cfg.model.n_special != kSpecialCount) {
    throw ConfigError("model.n_special must be " + std::to_string(kSpecialCount));
  }
  cfg.validate();
  return cfg;
}

int run_training(const TrainArgs& a, bool sft, std::ostream& out) {
  const MixedTokenizer tok = load_tokenizer(a.tokenizer);
  const TrainConfig base = build_train_config(a, tok, sft);

  std::vector<std::pair<fs::path, TrainConfig>> runs;
  if (a.ablate.empty()) {
    runs.emplace_back(a.run_dir, base);
  } else if (a.ablate == "qknorm") {
    TrainConfig on = base, off = base;
    on.model.use_qk_norm = true;
    off.model.use_qk_norm = false;
    runs.emplace_back(fs::path(a.run_dir) / "qknorm-on", on);
    runs.emplace_back(fs::path(a.run_dir) / "qknorm-off", off);
  } else {
    throw ConfigError("unknown ablation '" + a.ablate + "' (expected qknorm)");
  }
  if (!a.resume.empty() && runs.size() > 1) {
    throw ConfigError("--resume cannot be combined with --ablate");
  }

  const auto records = read_corpus(a.corpus);
  const EncodedCorpus encoded = encode_corpus(records, tok);
  std::unique_ptr<BatchSource> data;
  PackResult packed;
  if (sft) {
    packed = pack_sft(encoded.sft, base.seq_len + 1, tok.vocab);
    data = std::make_unique<SftBatches>(packed.sequences);
  } else {
    data = std::make_unique<PretrainBatches>(encoded, base.mixture, tok.vocab,
                                             base.seq_len);
  }

  bool halted = false;
  for (const auto& [dir, cfg] : runs) {
    fs::create_directories(dir);
    KvMap kv;
    cfg.to_kv(kv);
    write_kv_file(dir / "config.txt", kv);
    if (sft) {
      std::string rej = "id,required_length\n";
      for (const auto& r : packed.rejections) {
        rej += r.id + "," + std::to_string(r.required_length) + "\n";
      }
      write_text(dir / "rejections.csv", rej);
      if (!packed.rejections.empty()) {
        out << packed.rejections.size() << " SFT examples exceed "
            << base.seq_len + 1 << " tokens and were rejected\n";
      }
    }
    Transformer model = a.init.empty()
                            ? Transformer(cfg.model, cfg.seed)
                            : model_from_checkpoint(load_checkpoint(a.init));
    if (!a.init.empty()) model.set_config(cfg.model);
    TrainOptions opts;
    opts.run_dir = dir;
    if (!a.resume.empty()) opts.resume_from = fs::path(a.resume);
    const TrainResult res = train_loop(model, *data, cfg, opts);
    out << dir.string() << ": step " << res.final_step;
    if (!res.log.empty()) {
      out << ", loss " << format_scalar(res.log.back().total());
    }
    out << (res.halted ? ", halted: divergence flagged" : "") << "\n";
    halted = halted || res.halted;
  }
  return halted ? kDiverged : kOk;
}

// ---- generate ---------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, tokenizer, prompt_file, modality = "any", out_dir,
      config, sampling;
  std::vector<std::string> prompt_images, sets;
  std::optional<double> temperature, top_p;
  std::optional<std::size_t> max_tokens;
  std::optional<std::uint64_t> seed;
  bool stream = false;
  bool instruct = false;
};

TokenIds encode_prompt(const std::string& text,
                       const std::vector<std::string>& images,
                       const MixedTokenizer& tok) {
  TokenIds out;
  std::string_view rest = text;
  std::size_t used = 0;
  for (auto pos = rest.find(kImageMarker); pos != std::string_view::npos;
       pos = rest.find(kImageMarker)) {
    const TokenIds t = tok.encode_text(rest.substr(0, pos));
    out.insert(out.end(), t.begin(), t.end());
    if (used >= images.size()) {
      throw DataError("prompt has more image markers than --prompt-image files");
    }
    const TokenIds b =
        image_block(tok.encode_picture(read_pnm(images[used++]), true), tok.vocab);
    out.insert(out.end(), b.begin(), b.end());
    rest = rest.substr(pos + kImageMarker.size());
  }
  if (used != images.size()) {
    throw DataError("prompt has fewer image markers than --prompt-image files");
  }
  const TokenIds t = tok.encode_text(rest);
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  const MixedTokenizer tok = load_tokenizer(a.tokenizer);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Transformer model = model_from_checkpoint(ck);
  if (model.config().vocab_size() != tok.vocab.total_size()) {
    throw ConfigError("checkpoint vocabulary does not match the tokenizer");
  }

  DecodePolicy policy;
  policy.seed = env_seed(0);
  apply_overrides(policy, a.config, a.sets);
  policy.modality = parse_modality(a.modality);
  if (a.temperature) {
    policy.sampling.kind = SamplingKind::Temperature;
    policy.sampling.temperature = *a.temperature;
  }
  if (a.top_p) {
    policy.sampling.kind = SamplingKind::TopP;
    policy.sampling.top_p = *a.top_p;
  }
  if (!a.sampling.empty()) policy.sampling.kind = parse_sampling(a.sampling);
  if (a.max_tokens) policy.max_tokens = *a.max_tokens;
  if (a.seed) policy.seed = *a.seed;
  policy.validate();

  std::string prompt_text;
  if (!a.prompt_file.empty()) {
    std::ifstream in(a.prompt_file, std::ios::binary);
    if (!in) throw DataError("cannot read " + a.prompt_file);
    std::ostringstream os;
    os << in.rdbuf();
    prompt_text = os.str();
  }
  TokenIds prompt = encode_prompt(prompt_text, a.prompt_images, tok);
  if (a.instruct) prompt.push_back(tok.vocab.sep());
  const DecodeSpace space{tok.vocab, tok.geometry.tokens_per_image()};

  InferenceSession session(model);
  TokenIds tokens;
  if (a.stream) {
    auto on_event = [&](const StreamEvent& e) {
      if (e.kind == EventKind::ImageBlockStart) {
        out << "[image]" << std::flush;
      } else if (e.kind == EventKind::ImageBlockEnd) {
        out << "[/image]" << std::flush;
      } else if (tok.vocab.is_text(e.token) && e.token < tok.bpe.vocab_size()) {
        out << tok.bpe.token_bytes(e.token) << std::flush;
      }
    };
    tokens = generate_stream(session, prompt, policy, space, on_event,
                             {&tok.codebook, tok.geometry.side});
    out << "\n";
  } else {
    tokens = generate_fused(session, prompt, policy, space);
  }
  const auto doc = detokenize_mixed(tokens, tok);
  if (!a.stream) {
    std::size_t n_images = 0;
    for (const auto& s : doc) {
      if (s.kind == Segment::Kind::Text) out << s.text;
      else out << "[image " << n_images++ << "]";
    }
    out << "\n";
  }
  if (!a.out_dir.empty()) {
    const fs::path dir = a.out_dir;
    write_document(dir, doc);
    KvMap kv;
    policy.to_kv(kv);
    write_kv_file(dir / "generation.cfg", kv);
    std::string ids;
    for (TokenId t : tokens) ids += std::to_string(t) + "\n";
    write_text(dir / "tokens.txt", ids);
  }
  return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> outcomes;
  std::string judgments, out_dir;
  std::size_t bootstrap_iters = kDefaultBootstrapIterations;
  double level = 0.95;
  std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.outcomes.empty() && a.judgments.empty()) {
    throw ConfigError("eval needs --outcomes and/or --judgments");
  }
  const std::uint64_t seed = a.seed ? *a.seed : env_seed(0);
  const fs::path dir = a.out_dir;
  if (!a.out_dir.empty()) {
    fs::create_directories(dir);
    KvMap kv;
    kv["eval.bootstrap_iters"] = std::to_string(a.bootstrap_iters);
    kv["eval.level"] = format_scalar(a.level);
    kv["eval.seed"] = std::to_string(seed);
    write_kv_file(dir / "eval.cfg", kv);
  }
  for (const auto& path : a.outcomes) {
    const auto outcomes = read_outcomes_csv(path);
    const std::string stem = fs::path(path).stem().string();
    const std::string table = format_win_table(outcomes, stem);
    out << table << "\n";
    if (!a.out_dir.empty()) {
      write_text(dir / (stem + ".table.txt"), table);
      write_text(dir / (stem + ".winrates.csv"), win_table_csv(outcomes));
    }
  }
  if (!a.judgments.empty()) {
    const auto records = read_judgments_csv(a.judgments);
    const BootstrapResult ci = bootstrap_ci(records, a.bootstrap_iters, a.level, seed);
    KvMap rep;
    rep["alpha"] = format_scalar(ci.point);
    rep["ci_low"] = format_scalar(ci.low);
    rep["ci_high"] = format_scalar(ci.high);
    rep["ci_level"] = format_scalar(a.level);
    rep["bootstrap_iterations"] = std::to_string(ci.iterations);
    rep["bootstrap_skipped"] = std::to_string(ci.skipped);
    out << format_kv(rep);
    if (!a.out_dir.empty()) write_kv_file(dir / "alpha.txt", rep);
  }
  return kOk;
}

// ---- monitor-report ---------------------------------------------------------

int cmd_monitor_report(const std::string& run_dir, std::ostream& out) {
  const fs::path dir = run_dir;
  const auto log = read_loss_csv(dir / "loss.csv");
  if (log.empty()) throw DataError((dir / "loss.csv").string() + " has no rows");
  std::map<std::uint64_t, double> ewma;
  if (fs::exists(dir / "norm_trace.csv")) {
    std::ifstream in(dir / "norm_trace.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      if (f.size() == 5) ewma[parse_u64("step", f[0])] = parse_scalar("ewma", f[3]);
    }
  }
  const StepLog* first_flag = nullptr;
  double min_loss = log.front().total(), max_rms = log.front().output_rms;
  std::uint64_t min_step = log.front().step;
  for (const auto& s : log) {
    if (s.total() < min_loss) {
      min_loss = s.total();
      min_step = s.step;
    }
    max_rms = std::max(max_rms, s.output_rms);
    if (s.diverged && !first_flag) first_flag = &s;
  }
  const auto& first = log.front();
  const auto& last = log.back();
  char buf[256];
  std::string report;
  auto line = [&](const char* label, const std::string& value) {
    std::snprintf(buf, sizeof buf, "%-18s %s\n", label, value.c_str());
    report += buf;
  };
  line("steps", std::to_string(first.step) + ".." + std::to_string(last.step));
  line("first loss", format_scalar(first.total()));
  line("last loss", format_scalar(last.total()));
  line("min loss", format_scalar(min_loss) + " at step " + std::to_string(min_step));
  line("first output rms", format_scalar(first.output_rms));
  line("last output rms", format_scalar(last.output_rms));
  line("max output rms", format_scalar(max_rms));
  line("divergence", first_flag ? "flagged at step " + std::to_string(first_flag->step)
                                : "none");
  out << report;
  write_text(dir / "monitor_report.txt", report);
  std::string csv = "step,loss,ce,zloss,lr,grad_norm,output_rms,ewma_log_rms,diverged\n";
  for (const auto& s : log) {
    const auto it = ewma.find(s.step);
    csv += std::to_string(s.step) + "," + format_scalar(s.total()) + "," +
           format_scalar(s.ce) + "," + format_scalar(s.zloss) + "," +
           format_scalar(s.lr) + "," + format_scalar(s.grad_norm) + "," +
           format_scalar(s.output_rms) + "," +
           (it == ewma.end() ? std::string() : format_scalar(it->second)) + "," +
           (s.diverged ? "1" : "0") + "\n";
  }
  write_text(dir / "monitor_plot.csv", csv);
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Toy mixed-modal early-fusion transformer toolkit", "chamtoy"};
  app.require_subcommand(1);

  TokenizerArgs tk;
  auto* c_tok = app.add_subcommand("tokenizer-train", "Train the BPE and image codebook");
  c_tok->add_option("--corpus", tk.corpus, "Corpus .jsonl file or directory")->required();
  c_tok->add_option("--out", tk.out_dir, "Output directory")->required();
  c_tok->add_option("--config", tk.config, "key=value config file");
  c_tok->add_option("--set", tk.sets, "key=value override (repeatable)");
  c_tok->add_option("--seed", tk.seed, "Seed (default: CHAMTOY_SEED or 0)");

  TrainArgs tr, sf;
  auto add_train = [](CLI::App* c, TrainArgs& a) {
    c->add_option("--corpus", a.corpus, "Corpus .jsonl file or directory")->required();
    c->add_option("--tokenizer", a.tokenizer, "Tokenizer directory")->required();
    c->add_option("--run-dir", a.run_dir, "Run directory")->required();
    c->add_option("--preset", a.preset, "toy | 7b-recipe | 34b-recipe | llama2-recipe");
    c->add_flag("--toy", a.toy, "Shrink the preset to toy dimensions");
    c->add_option("--config", a.config, "key=value config file");
    c->add_option("--set", a.sets, "key=value override (repeatable)");
    c->add_option("--seed", a.seed, "Seed (default: CHAMTOY_SEED or 0)");
    c->add_option("--resume", a.resume, "Checkpoint directory to resume from");
    c->add_option("--ablate", a.ablate, "Paired runs toggling one switch: qknorm");
  };
  auto* c_train = app.add_subcommand("train", "Pre-train on the mixture");
  add_train(c_train, tr);
  auto* c_sft = app.add_subcommand("sft", "Supervised fine-tuning on packed pairs");
  add_train(c_sft, sf);
  c_sft->add_option("--init", sf.init, "Checkpoint to start from");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Generate a mixed-modal document");
  c_gen->add_option("--checkpoint", gen.checkpoint, "Checkpoint directory")->required();
  c_gen->add_option("--tokenizer", gen.tokenizer, "Tokenizer directory")->required();
  c_gen->add_option("--prompt-file", gen.prompt_file, "UTF-8 prompt; <img> marks images");
  c_gen->add_option("--prompt-image", gen.prompt_images, "Image for each <img> marker");
  c_gen->add_option("--modality", gen.modality, "any | text | image")
      ->check(CLI::IsMember({"any", "text", "image"}));
  c_gen->add_option("--sampling", gen.sampling, "greedy | temperature | top_p");
  c_gen->add_option("--temperature", gen.temperature, "Sampling temperature");
  c_gen->add_option("--top-p", gen.top_p, "Nucleus mass");
  c_gen->add_option("--max-tokens", gen.max_tokens, "Token budget");
  c_gen->add_option("--seed", gen.seed, "Seed (default: CHAMTOY_SEED or 0)");
  c_gen->add_flag("--stream", gen.stream, "Print tokens as they are produced");
  c_gen->add_flag("--instruct", gen.instruct, "End the prompt with SEP, as in SFT pairs");
  c_gen->add_option("--out-dir", gen.out_dir, "Write segments and a manifest here");
  c_gen->add_option("--config", gen.config, "key=value config file");
  c_gen->add_option("--set", gen.sets, "key=value override (repeatable)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Win rates, alpha and bootstrap CI");
  c_eval->add_option("--outcomes", ev.outcomes, "item_id,result,category,modality CSV");
  c_eval->add_option("--judgments", ev.judgments, "item_id,annotator_id,label CSV");
  c_eval->add_option("--bootstrap-iters", ev.bootstrap_iters, "Bootstrap iterations");
  c_eval->add_option("--level", ev.level, "Confidence level");
  c_eval->add_option("--seed", ev.seed, "Seed (default: CHAMTOY_SEED or 0)");
  c_eval->add_option("--out-dir", ev.out_dir, "Report directory");

  std::string synth_dir;
  std::optional<std::uint64_t> synth_seed;
  SyntheticOptions synth;
  auto* c_syn = app.add_subcommand("synth-corpus", "Write the synthetic two-tone corpus");
  c_syn->add_option("--out", synth_dir, "Output directory")->required();
  c_syn->add_option("--seed", synth_seed, "Seed (default: CHAMTOY_SEED or 0)");
  c_syn->add_option("--image-side", synth.side, "Image side in pixels");
  c_syn->add_option("--text", synth.text_records, "Text-only records");
  c_syn->add_option("--pairs", synth.pair_records, "Caption/image records");
  c_syn->add_option("--interleaved", synth.interleaved_records, "Interleaved records");
  c_syn->add_option("--sft", synth.sft_records, "Prompt/answer records");

  std::string report_dir;
  auto* c_mon = app.add_subcommand("monitor-report", "Summarize loss.csv and the norm trace");
  c_mon->add_option("--run-dir", report_dir, "Run directory")->required();

  std::vector<std::string> argv_store{"chamtoy"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*c_tok) return cmd_tokenizer_train(tk, out);
    if (*c_train) return run_training(tr, false, out);
    if (*c_sft) return run_training(sf, true, out);
    if (*c_gen) return cmd_generate(gen, out);
    if (*c_eval) return cmd_eval(ev, out);
    if (*c_syn) {
      const auto corpus = make_synthetic_corpus(synth, synth_seed ? *synth_seed : env_seed(0));
      write_corpus(synth_dir, corpus);
      out << corpus.records.size() << " records written to " << synth_dir << "\n";
      return kOk;
    }
    if (*c_mon) return cmd_monitor_report(report_dir, out);
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    return kDiverged;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace chamtoy::cli
