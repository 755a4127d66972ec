// Acceptance run: one line per criterion, non-zero exit on any failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "chamtoy/bpe.hpp"
#include "chamtoy/codebook.hpp"
#include "chamtoy/decoder.hpp"
#include "chamtoy/evalkit.hpp"
#include "chamtoy/inference.hpp"
#include "chamtoy/kv_config.hpp"
#include "chamtoy/layers.hpp"
#include "chamtoy/monitor.hpp"
#include "chamtoy/objective.hpp"
#include "chamtoy/trainer.hpp"
#include "cli.hpp"
#include "support.hpp"

using namespace chamtoy;
using chamtoy::testing::grad_check;
using chamtoy::testing::uniform;
namespace fs = std::filesystem;

namespace {

// Collects failures for one criterion; keeps the first few messages.
struct Report {
  std::size_t checks = 0, failures = 0;
  std::vector<std::string> notes;
  void expect(bool ok, const std::string& what) {
    ++checks;
    if (ok) return;
    if (++failures <= 5) notes.push_back(what);
  }
  void info(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(6);
  o << v;
  return o.str();
}

using Seconds = std::chrono::duration<double>;

// ---------------------------------------------------------------------------

void gradients(Report& r) {
  const auto t0 = std::chrono::steady_clock::now();
  double ops = 0, layers = 0, e2e = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto a = uniform({2, 3}, rng, -1, 1), b = uniform({2, 3}, rng, -1, 1);
    auto p = uniform({2, 3}, rng, 0.5, 2), q = uniform({3}, rng, 0.5, 2);
    auto w = uniform({2, 3}, rng, -1, 1, false);
    auto m = uniform({3, 2}, rng, -1, 1);
    auto proj = [&](const Tensor& t) { return sum_all(mul(t, w)); };
    const std::vector<std::pair<std::vector<Tensor>, std::function<Tensor()>>> elementary = {
        {{a, b}, [&] { return proj(add(a, b)); }},
        {{a, b}, [&] { return proj(sub(a, b)); }},
        {{a, b}, [&] { return proj(mul(a, b)); }},
        {{a, p}, [&] { return proj(div(a, p)); }},
        {{p, a}, [&] { return proj(pow(p, a)); }},
        {{p}, [&] { return proj(pow(p, 2.5)); }},
        {{a}, [&] { return proj(neg(a)); }},
        {{a}, [&] { return proj(exp(a)); }},
        {{p}, [&] { return proj(log(p)); }},
        {{a}, [&] { return proj(add_scalar(a, 0.7)); }},
        {{a}, [&] { return proj(mul_scalar(a, -1.3)); }},
        {{a, q}, [&] { return proj(div(a, q)); }},
        {{a, m}, [&] { return sum_all(mul(matmul(a, m), matmul(a, m))); }},
        {{a}, [&] { return sum_all(mul(transpose(a), transpose(w))); }},
        {{a}, [&] { return sum_all(mul(reshape(a, {3, 2}), reshape(w, {3, 2}))); }},
        {{a}, [&] { return proj(softmax(a)); }},
        {{a}, [&] { return sum_all(mul(sum(a, 1), sum(w, 1))); }},
        {{a}, [&] { return sum_all(mul(mean(a, 0), mean(w, 0))); }},
        {{a}, [&] { return sum_all(mul(max(a, 1), sum(w, 1))); }},
        {{a}, [&] { return sum_all(mul(rms(a, 1), sum(w, 1))); }},
    };
    for (const auto& [leaves, f] : elementary) ops = std::max(ops, grad_check(leaves, f).max_rel_error);

    // Layer ops.
    const std::size_t d = 8, heads = 4, kv = 2, hd = 2, dff = 12;
    auto x = uniform({4, d}, rng, -1, 1), gain = uniform({d}, rng, 0.5, 1.5);
    auto px = uniform({4, d}, rng, -1, 1, false);
    auto w1 = uniform({d, dff}, rng, -0.5, 0.5), w2 = uniform({dff, d}, rng, -0.5, 0.5),
         w3 = uniform({d, dff}, rng, -0.5, 0.5);
    auto q3 = uniform({4, heads, hd}, rng, -1, 1), k3 = uniform({4, kv, hd}, rng, -1, 1),
         v3 = uniform({4, kv, hd}, rng, -1, 1), pw = uniform({4, heads, hd}, rng, -1, 1, false);
    auto gq = uniform({heads, hd}, rng, 0.5, 1.5), gk = uniform({kv, hd}, rng, 0.5, 1.5);
    auto table = uniform({10, d}, rng, -1, 1);
    const std::vector<std::size_t> pos{0, 3, 4, 9};
    const std::vector<TokenId> ids{3, 1, 3, 9};
    auto logits = uniform({4, 7}, rng, -2, 2);
    const std::vector<TokenId> targets{1, 6, 0, 3};
    const LossMask mask{1, 0, 1, 1};
    auto s = [&](const Tensor& t) { return sum_all(mul(t, px)); };
    const std::vector<std::pair<std::vector<Tensor>, std::function<Tensor()>>> layer_ops = {
        {{x, gain}, [&] { return s(rms_norm(x, gain, 1e-5)); }},
        {{x, gain}, [&] { return s(layer_norm(x, gain, 1e-5)); }},
        {{x}, [&] { return s(silu(x)); }},
        {{x, w1, w2, w3}, [&] { return s(swiglu_ffn(x, w1, w2, w3)); }},
        {{q3}, [&] { return sum_all(mul(rope(q3, pos), pw)); }},
        {{q3, k3, gq, gk}, [&] {
           auto [nq, nk] = qk_norm(q3, k3, gq, gk, 1e-5);
           return add(sum_all(mul(nq, pw)), sum_all(mul(nk, nk)));
         }},
        {{q3, k3, v3}, [&] { return sum_all(mul(causal_attention(q3, k3, v3), pw)); }},
        {{table}, [&] { return s(embedding(table, ids)); }},
        {{logits}, [&] { return total_loss(logits, targets, mask, 0.1).loss; }},
    };
    for (const auto& [leaves, f] : layer_ops) layers = std::max(layers, grad_check(leaves, f).max_rel_error);

    if (seed % 10 == 0) {  // the model check is the slow one
      ModelConfig c;
      c.d_model = 8;
      c.n_layers = 2;
      c.n_heads = 2;
      c.n_kv_heads = 1;
      c.d_ff = 12;
      c.context_length = 8;
      c.text_vocab = 10;
      c.image_vocab = 6;
      c.init_std = 0.3;
      c.norm_strategy = seed % 20 ? NormStrategy::PostNormReorder : NormStrategy::PreNorm;
      c.use_qk_norm = seed % 30 != 0;
      c.z_loss_coeff = 1e-3;
      Transformer model(c, seed);
      std::vector<TokenId> toks(6);
      for (auto& t : toks) t = static_cast<TokenId>(rng.below(c.vocab_size()));
      std::vector<Tensor> leaves;
      for (const auto& [n, t] : model.named_parameters()) leaves.push_back(t);
      const std::span<const TokenId> all(toks);
      e2e = std::max(e2e, grad_check(leaves, [&] {
                            const auto f = model_forward(model, all.first(5), false, nullptr);
                            return total_loss(f.logits, all.subspan(1), {}, c.z_loss_coeff).loss;
                          }).max_rel_error);
    }
  }
  const double secs = Seconds(std::chrono::steady_clock::now() - t0).count();
  r.expect(ops < 1e-4, "elementary ops max rel error " + fmt(ops));
  r.expect(layers < 1e-4, "layer ops max rel error " + fmt(layers));
  r.expect(e2e < 1e-3, "end-to-end max rel error " + fmt(e2e));
  r.expect(secs < 60, "took " + fmt(secs) + " s");
  r.info("ops " + fmt(ops) + ", layers " + fmt(layers) + ", model " + fmt(e2e) + ", " + fmt(secs) + " s");
}

void softmax_shift(Report& r) {
  Rng rng(2);
  std::size_t ce_ok = 0, z_ok = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t rows = 1 + rng.below(4), cols = 2 + rng.below(9);
    // Dyadic grid: adding an integer constant is exact in binary floating point.
    std::vector<Scalar> z(rows * cols), zc(rows * cols);
    for (auto& v : z) v = static_cast<Scalar>(static_cast<double>(rng.below(20001)) / 1024.0 - 10.0);
    const Scalar c = static_cast<Scalar>(static_cast<double>(rng.below(2001)) - 1000.0);
    for (std::size_t i = 0; i < z.size(); ++i) zc[i] = z[i] + c;
    const auto p = softmax(Tensor::from_data({rows, cols}, z));
    const auto pc = softmax(Tensor::from_data({rows, cols}, zc));
    r.expect(std::equal(p.data().begin(), p.data().end(), pc.data().begin()), "softmax changed under a shift");
    for (std::size_t row = 0; row < rows; ++row) {
      double s = 0;
      for (std::size_t k = 0; k < cols; ++k) s += p[row * cols + k];
      r.expect(std::abs(s - 1) < 1e-12, "row sum " + fmt(s));
    }
    // Cross-entropy ignores any shift; z-loss tracks (log Z + c)^2.
    const auto logits = uniform({rows, cols}, rng, -3, 3, false);
    std::vector<TokenId> t(rows);
    for (auto& x : t) x = static_cast<TokenId>(rng.below(cols));
    const double shift = rng.uniform(-30, 30);
    std::vector<Scalar> moved(logits.data().begin(), logits.data().end());
    for (auto& v : moved) v += static_cast<Scalar>(shift);
    const auto m = Tensor::from_data({rows, cols}, moved);
    const double ce0 = cross_entropy_masked(logits, t).item(), ce1 = cross_entropy_masked(m, t).item();
    ce_ok += std::abs(ce0 - ce1) <= 1e-10 * std::max(1.0, ce0);
    const auto row = uniform({1, cols}, rng, -3, 3, false);
    const double lz = log_sum_exp(row.data());
    const double dz = rng.uniform(0.05, 10) * (rng.below(2) ? 1 : -1);
    std::vector<Scalar> rm(row.data().begin(), row.data().end());
    for (auto& v : rm) v += static_cast<Scalar>(dz);
    const double z0 = z_loss(row, 1e-5).item(), z1 = z_loss(Tensor::from_data({1, cols}, rm), 1e-5).item();
    const double expect = 1e-5 * (lz + dz) * (lz + dz);
    const bool mirror = std::abs(lz + dz + lz) < 1e-9;  // |log Z| unchanged only at c = -2 log Z
    z_ok += !mirror && z1 != z0 && std::abs(z1 - expect) <= 1e-12 * std::max(1.0, expect);
  }
  r.expect(ce_ok == 2000, "cross-entropy moved under shift in " + std::to_string(2000 - ce_ok) + " cases");
  r.expect(z_ok == 2000, "z-loss failed to follow the shift in " + std::to_string(2000 - z_ok) + " cases");
}

void zloss_value(Report& r) {
  const double z = z_loss(Tensor::zeros({1, 4}), 1e-5).item();
  r.expect(std::abs(z - 1.92181e-5) <= 1e-10, "z-loss " + fmt(z));
  const double l4 = std::log(4.0);
  r.expect(std::abs(z - 1e-5 * l4 * l4) <= 1e-18, "z-loss off the (ln 4)^2 oracle");
  r.info("z = " + fmt(z));
}

void qknorm_bound(Report& r) {
  Rng rng(4);
  double worst = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t hd = 2 * (1 + rng.below(16)), heads = 1 + rng.below(4), n = 1 + rng.below(6);
    const double scale = std::pow(10.0, rng.uniform(-3, 4));
    const auto q = uniform({n, heads, hd}, rng, -scale, scale, false);
    const auto k = uniform({n, heads, hd}, rng, -scale, scale, false);
    const auto [nq, nk] = qk_norm(q, k, Tensor::full({heads, hd}, 1), Tensor::full({heads, hd}, 1), 1e-5);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t h = 0; h < heads; ++h) {
          double dot = 0;
          for (std::size_t e = 0; e < hd; ++e) dot += nq[(i * heads + h) * hd + e] * nk[(j * heads + h) * hd + e];
          const double logit = dot / std::sqrt(static_cast<double>(hd));
          worst = std::max(worst, std::abs(logit) / std::sqrt(static_cast<double>(hd)));
        }
  }
  r.expect(worst <= 1 + 1e-12, "|logit| / sqrt(head_dim) reached " + fmt(worst));
  r.info("max |logit| / sqrt(head_dim) = " + fmt(worst));
}

double row_rms(const Tensor& t, std::size_t row, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) s += t[row * d + i] * t[row * d + i];
  return std::sqrt(s / static_cast<double>(d));
}

double total_norm(const Tensor& t) {
  double s = 0;
  for (Scalar v : t.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

void norm_reorder(Report& r) {
  double post_dev = 0, post_shift = 0, pre_ratio = 1e300;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_ff = 24;
    c.context_length = 16;
    c.text_vocab = 10;
    c.image_vocab = 6;
    c.init_std = 0.3;
    c.use_qk_norm = seed % 2 == 0;
    c.eps = 0;  // unit gains and no eps: the increments are exactly unit rms
    Rng rng(seed);
    const auto x = uniform({6, c.d_model}, rng, -1, 1, false);
    const auto x100 = mul_scalar(x, 100);

    c.norm_strategy = NormStrategy::PostNormReorder;
    const Transformer post(c, seed);
    std::vector<Tensor> a, b;
    block_forward(x, post.layers[0], c, false, nullptr, {.increments = &a});
    block_forward(x100, post.layers[0], c, false, nullptr, {.increments = &b});
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t row = 0; row < 6; ++row) {
        post_dev = std::max(post_dev, std::abs(row_rms(a[i], row, c.d_model) - 1));
        post_dev = std::max(post_dev, std::abs(row_rms(b[i], row, c.d_model) - 1));
        post_shift = std::max(post_shift, std::abs(row_rms(a[i], row, c.d_model) - row_rms(b[i], row, c.d_model)));
      }

    // PreNorm normalizes before the branch, so the branch input is
    // norm(x) * gain; scaling that input by 100 means scaling the gains.
    c.norm_strategy = NormStrategy::PreNorm;
    const Transformer pre(c, seed);
    LayerParams scaled = pre.layers[0];
    scaled.attn_norm = mul_scalar(pre.layers[0].attn_norm, 100);
    scaled.ffn_norm = mul_scalar(pre.layers[0].ffn_norm, 100);
    std::vector<Tensor> pa, pb;
    block_forward(x, pre.layers[0], c, false, nullptr, {.increments = &pa});
    block_forward(x, scaled, c, false, nullptr, {.increments = &pb});
    for (std::size_t i = 0; i < 2; ++i) pre_ratio = std::min(pre_ratio, total_norm(pb[i]) / total_norm(pa[i]));
  }
  r.expect(post_dev <= 1e-6, "post-norm-reorder increment rms off by " + fmt(post_dev));
  r.expect(post_shift <= 1e-6, "post-norm-reorder increment rms moved by " + fmt(post_shift) + " under x100");
  r.expect(pre_ratio >= 10, "pre-norm increments grew only x" + fmt(pre_ratio));
  r.info("post |rms-1| " + fmt(post_dev) + ", pre-norm growth >= x" + fmt(pre_ratio));
}

void monitor(Report& r) {
  Rng rng(6);
  std::size_t false_pos = 0, missed = 0;
  std::uint64_t slowest = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    NormMonitor m;
    const double base = std::exp(rng.uniform(-4, 4));
    const int kind = trial % 4;
    const double decay = 1 - 0.01 * rng.uniform();
    const double noise = 0.3 * rng.uniform();
    // Bounded oscillation on training-noise timescales. A slow, large swing
    // (say period 250, x4.5 range) holds >0.5%/step growth for 100+ steps and
    // is rightly flagged, so it does not belong in the stable family.
    const double amp = 0.3 * rng.uniform(), period = rng.uniform(5, 50);
    for (std::uint64_t t = 1; t <= 1000; ++t) {
      const double td = static_cast<double>(t);
      double v = base;
      if (kind == 1) v = base * std::pow(decay, td);
      if (kind == 2) v = base * std::exp(noise * rng.normal());
      if (kind == 3) v = base * (1 + amp * std::sin(6.283185307179586 * td / period));
      m.observe(t, v, 1.0);
    }
    false_pos += m.diverged();
  }
  for (int trial = 0; trial < 1000; ++trial) {
    NormMonitor m;
    const double base = std::exp(rng.uniform(-4, 4));
    const std::uint64_t onset = trial % 2 ? rng.below(500) : 0;
    std::uint64_t at = 0;
    for (std::uint64_t t = 1; t <= onset + 200 && !at; ++t) {
      const double g = t > onset ? static_cast<double>(t - onset) : 0.0;
      if (m.observe(t, base * std::pow(1.01, g) * std::exp(0.01 * rng.normal()), 1.0).diverged) at = t;
    }
    if (!at) ++missed;
    else slowest = std::max(slowest, at - onset);
  }
  r.expect(false_pos == 0, std::to_string(false_pos) + " false positives in 1000 stable traces");
  r.expect(missed == 0, std::to_string(missed) + " growth traces not flagged within 200 steps");
  r.info("slowest detection " + std::to_string(slowest) + " steps after onset");
}

// Depth-first walk of the decode state machine. Each branch favours one
// token class with a dominant logit; greedy picks the legal argmax.
void walk(const DecodeState& st, const DecodePolicy& pol, const DecodeSpace& space, std::size_t depth,
          std::set<std::pair<bool, std::size_t>>& states, std::size_t& sequences, Report& r) {
  states.insert({st.in_image, st.remaining});
  const auto& v = space.vocab;
  if (!st.in_image) {
    // Closed prefix: the discipline must hold as is.
    bool ok = true;
    try {
      check_block_discipline(st.emitted, space);
    } catch (const DataError&) {
      ok = false;
    }
    r.expect(ok, "block discipline broken");
  }
  if (st.finished || depth == 0) {
    ++sequences;
    return;
  }
  const std::vector<TokenId> reps{0, v.image_token(1), v.bos(), v.eos(), v.pad(), v.sep(), v.boi(), v.eoi()};
  std::set<TokenId> seen;
  const auto mask = legal_mask(st, pol, v);
  for (TokenId favoured : reps) {
    DecodeState next = st;
    std::vector<Scalar> l(v.total_size(), 0);
    l[favoured] = 100;
    Rng rng(0);
    const auto out = step(next, l, pol, space, rng);
    r.expect(mask[out.token], "sampled an illegal token");
    if (!seen.insert(out.token).second) continue;
    walk(next, pol, space, depth - 1, states, sequences, r);
  }
}

void decoder(Report& r) {
  std::size_t sequences = 0;
  for (std::size_t K = 1; K <= 4; ++K) {
    const DecodeSpace space{MixedVocab(6, 5), K};
    for (auto m : {Modality::Unconstrained, Modality::TextOnly, Modality::ImageOnly}) {
      DecodePolicy pol;
      pol.modality = m;
      std::set<std::pair<bool, std::size_t>> states;
      walk(DecodeState{}, pol, space, 10, states, sequences, r);
      r.expect(states.size() <= K + 2, "more states than K + 2");
      if (m != Modality::TextOnly) r.expect(states.size() == K + 1, "image states not all reached");
    }
  }

  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_ff = 24;
  c.context_length = 64;
  c.text_vocab = 20;
  c.image_vocab = 8;
  c.use_qk_norm = true;
  c.init_std = 0.5;
  const Transformer model(c, 9);
  const DecodeSpace space{MixedVocab(20, 8), 4};
  InferenceSession sa(model), sb(model);
  std::size_t mismatched = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DecodePolicy p;
    p.modality = static_cast<Modality>(seed % 3);
    p.sampling.kind = seed % 2 ? SamplingKind::TopP : SamplingKind::Temperature;
    p.sampling.top_p = 0.9;
    p.max_tokens = 20;
    p.seed = seed;
    const TokenIds prompt{4, 5};
    TokenIds streamed;
    generate_stream(sa, prompt, p, space, [&](const StreamEvent& e) {
      if (e.kind == EventKind::Token) streamed.push_back(e.token);
    });
    mismatched += streamed != generate_fused(sb, prompt, p, space);
  }
  r.expect(mismatched == 0, std::to_string(mismatched) + " of 100 seeds differ between streaming and fused");

  double worst = 0;
  Rng rng(10);
  for (int trial = 0; trial < 4; ++trial) {
    auto cfg = c;
    cfg.norm_strategy = trial % 2 ? NormStrategy::PostNormReorder : NormStrategy::PreNorm;
    cfg.qk_norm_after_rope = trial == 2;
    const Transformer m(cfg, trial);
    InferenceSession s(m);
    TokenIds seq;
    for (std::size_t i = 0; i < 48; ++i) {
      seq.push_back(static_cast<TokenId>(rng.below(cfg.vocab_size())));
      const auto inc = s.feed(seq.back());
      const auto full = model_forward(m, seq, false, nullptr).logits;
      const std::size_t V = cfg.vocab_size();
      for (std::size_t k = 0; k < V; ++k) worst = std::max(worst, std::abs(inc[k] - full[i * V + k]));
    }
  }
  r.expect(worst <= 1e-8, "kv cache differs by " + fmt(worst));
  r.info(std::to_string(sequences) + " walked sequences, kv-cache max diff " + fmt(worst));
}

void tokenizer(Report& r) {
  Rng rng(11);
  std::vector<std::string> corpus;
  for (int i = 0; i < 200; ++i) corpus.push_back("a mixed corpus line " + chamtoy::testing::random_utf8(rng, 12));
  const auto bpe = BpeModel::train(corpus, 400);
  std::size_t bad = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto s = chamtoy::testing::random_utf8(rng, 24);
    bad += bpe.decode(bpe.encode(s)) != s;
  }
  r.expect(bad == 0, std::to_string(bad) + " BPE round trips failed");

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<Image> imgs;
    const std::size_t side = 8 * (1 + seed % 3), patch = seed % 2 ? 2 : 4, ch = seed % 4 == 3 ? 3 : 1;
    for (int i = 0; i < 5; ++i) {
      Image im(side, side, ch);
      for (auto& p : im.pixels) p = rng.uniform();
      imgs.push_back(im);
    }
    CodebookReport rep;
    const auto cb = train_codebook(imgs, 12, patch, 15, rng, &rep);
    for (std::size_t i = 1; i < rep.mse_per_iteration.size(); ++i)
      r.expect(rep.mse_per_iteration[i] <= rep.mse_per_iteration[i - 1], "k-means mse rose");
    const MixedVocab vocab(300, 12);
    for (const auto& im : imgs) {
      const auto t = encode_image(im, cb, vocab);
      r.expect(t.size() == (side / patch) * (side / patch), "token count is not (H/p)^2");
      const Image back = decode_image(t, cb, vocab, side, side);
      r.expect(encode_image(back, cb, vocab) == t, "quantization is not idempotent");
      r.expect(decode_image(encode_image(back, cb, vocab), cb, vocab, side, side) == back,
               "decoded image moved on a second pass");
    }
  }
}

void mixture(Report& r) {
  const auto d = MixtureSpec::defaults();
  for (std::uint64_t total = 1; total <= 5000; ++total) {
    const auto sw = d.switch_step(total);
    r.expect(sw == static_cast<std::uint64_t>(std::floor(0.8 * static_cast<double>(total))), "switch step");
    if (sw > 0) r.expect(d.stage_at(sw - 1, total) == 1, "stage 1 before the switch");
    if (sw < total) r.expect(d.stage_at(sw, total) == 2, "stage 2 at the switch");
  }
  MixtureSpec two;
  two.stage1 = {{"A", 1.0}};
  two.stage2_extra = {{"B", 1.0}};
  for (const auto& s : two.probabilities(2)) {
    const double want = s.name == "A" ? 1.0 / 3 : 2.0 / 3;
    r.expect(std::abs(s.weight - want) < 1e-15, "halving rule gives " + fmt(s.weight) + " for " + s.name);
  }
  const MixedVocab v(50, 16);
  TokenIds img;
  for (std::size_t i = 0; i < 4; ++i) img.push_back(v.image_token(i));
  Rng rng(12);
  std::size_t first = 0;
  for (int i = 0; i < 10000; ++i) {
    bool f = false;
    rotate_caption_pair(img, TokenIds{1, 2}, v, rng, &f);
    first += f;
  }
  const double frac = first / 10000.0;
  r.expect(std::abs(frac - 0.5) <= 0.01, "image-first fraction " + fmt(frac));

  // SFT masking: no gradient reaches any prompt or separator logit.
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 12;
  c.context_length = 32;
  c.text_vocab = 20;
  c.image_vocab = 8;
  c.z_loss_coeff = 1e-4;
  c.dropout_p = 0.05;
  const MixedVocab sv(20, 8);
  double leaked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Transformer m(c, seed);
    std::vector<PairedExample> ex;
    for (int i = 0; i < 4; ++i) {
      PairedExample e{"e" + std::to_string(i), {}, {}};
      for (std::size_t k = 0, n = 1 + rng.below(5); k < n; ++k) e.prompt.push_back(static_cast<TokenId>(rng.below(20)));
      for (std::size_t k = 0, n = 1 + rng.below(5); k < n; ++k) e.answer.push_back(static_cast<TokenId>(rng.below(20)));
      ex.push_back(e);
    }
    for (const auto& seq : pack_sft(ex, 24, sv).sequences) {
      const TrainingRow row = row_from_packed(seq);
      const std::span<const TokenId> all(row.tokens);
      Rng drop(seed);
      const auto f = model_forward(m, all.first(all.size() - 1), true, &drop);
      total_loss(f.logits, all.subspan(1), row.target_mask, c.z_loss_coeff).loss.backward();
      const std::size_t V = c.vocab_size();
      for (std::size_t p = 0; p < row.target_mask.size(); ++p)
        if (!row.target_mask[p])
          for (std::size_t k = 0; k < V; ++k) leaked = std::max(leaked, std::abs(static_cast<double>(f.logits.grad()[p * V + k])));
    }
  }
  r.expect(leaked == 0, "prompt-position gradient " + fmt(leaked));
  r.info("image-first fraction " + fmt(frac));
}

void evaluation(Report& r) {
  const std::map<std::string, std::pair<double, double>> expect{
      {"appendix_gemini_plus.csv", {58.8, 60.4}},
      {"appendix_gpt4v_plus.csv", {51.6, 47.3}},
      {"appendix_gemini.csv", {69.1, 68.4}},
      {"appendix_gpt4v.csv", {61.7, 57.5}},
  };
  std::string line;
  for (const auto& [file, want] : expect) {
    const auto o = read_outcomes_csv(chamtoy::testing::fixture(file));
    const double overall = 100 * win_rate(o);
    double mixed = -1;
    for (const auto& row : breakdown(o, GroupBy::Modality).rows)
      if (row.group == "mixed") mixed = 100 * row.win_rate;
    r.expect(std::abs(overall - want.first) <= 0.05, file + " overall " + fmt(overall));
    if (file == "appendix_gemini_plus.csv") {
      r.expect(std::abs(mixed - want.second) <= 0.05, file + " mixed " + fmt(mixed));
    }
    line += fmt(overall) + " ";
  }
  using V = std::vector<std::string>;
  r.expect(maj_at_n(V{"7"}) == "7", "maj@1 is not the identity");
  r.expect(maj_at_n(V{"4", "5", "4"}) == "4", "maj@3 majority");
  r.expect(maj_at_n(V{"a", "b"}) == "a", "maj tie-break");
  r.expect(kDefaultBootstrapIterations == 1000, "default bootstrap iterations");
  const auto ci = bootstrap_ci(read_judgments_csv(chamtoy::testing::fixture("judgments_sample.csv")));
  r.expect(ci.iterations == 1000, "bootstrap ran " + std::to_string(ci.iterations) + " iterations");
  r.info("overall win rates " + line + "(alpha point values are not reproducible without the raw annotations)");
}

int run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = chamtoy::cli::run(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

void learnability(Report& r) {
  chamtoy::testing::TempDir dir("accept");
  const auto corpus = dir.path() / "corpus", tok = dir.path() / "tok";
  r.expect(run_cli({"synth-corpus", "--out", corpus.string(), "--seed", "0"}) == 0, "synth-corpus failed");
  r.expect(run_cli({"tokenizer-train", "--corpus", corpus.string(), "--out", tok.string()}) == 0,
           "tokenizer-train failed");
  if (r.failures) return;

  const auto toy = dir.path() / "toy";
  const auto t0 = std::chrono::steady_clock::now();
  const int code = run_cli({"train", "--corpus", corpus.string(), "--tokenizer", tok.string(), "--run-dir",
                            toy.string(), "--preset", "toy"});
  const double secs = Seconds(std::chrono::steady_clock::now() - t0).count();
  r.expect(code == 0, "toy run exit " + std::to_string(code));
  if (code == 0) {
    const auto log = read_loss_csv(toy / "loss.csv");
    const double at10 = log.at(9).total(), last = log.back().total();
    r.expect(last < 0.5 * at10, "final loss " + fmt(last) + " vs step-10 " + fmt(at10));
    r.expect(secs <= 300, "toy run took " + fmt(secs) + " s");
    r.info("toy: " + std::to_string(log.size()) + " steps in " + fmt(secs) + " s, loss " + fmt(at10) + " -> " +
           fmt(last));
  }

  const auto big = dir.path() / "34b";
  const int code34 = run_cli({"train", "--corpus", corpus.string(), "--tokenizer", tok.string(), "--run-dir",
                              big.string(), "--preset", "34b-recipe", "--toy"});
  r.expect(code34 == 0, "34b-recipe run exit " + std::to_string(code34));
  if (code34 == 0) {
    const auto log = read_loss_csv(big / "loss.csv");
    std::size_t flagged = 0;
    for (const auto& s : log) flagged += s.diverged;
    r.expect(flagged == 0, "34b-recipe run flagged divergence");
    const auto steps = std::stoull(read_kv_file(big / "config.txt").at("optim.total_steps"));
    r.expect(log.size() == steps, "34b-recipe run stopped early");
    r.info("34b-recipe: " + std::to_string(log.size()) + " steps, final loss " + fmt(log.back().total()));
  }

  const auto abl = dir.path() / "abl";
  const int codeab = run_cli({"train", "--corpus", corpus.string(), "--tokenizer", tok.string(), "--run-dir",
                              abl.string(), "--ablate", "qknorm", "--set", "optim.total_steps=200", "--set",
                              "optim.warmup_steps=20"});
  r.expect(codeab == 0, "ablation exit " + std::to_string(codeab));
  if (codeab == 0) {
    const auto on = read_loss_csv(abl / "qknorm-on" / "loss.csv");
    const auto off = read_loss_csv(abl / "qknorm-off" / "loss.csv");
    r.expect(on.size() == 200 && off.size() == 200, "ablation traces have the wrong length");
    for (std::size_t i = 0; i < std::min(on.size(), off.size()); ++i)
      r.expect(on[i].step == off[i].step, "ablation traces are not step-aligned");
    r.expect(fs::exists(abl / "qknorm-on" / "norm_trace.csv") && fs::exists(abl / "qknorm-off" / "norm_trace.csv"),
             "norm traces missing");
    const auto kon = read_kv_file(abl / "qknorm-on" / "config.txt");
    const auto koff = read_kv_file(abl / "qknorm-off" / "config.txt");
    std::vector<std::string> diff;
    for (const auto& [k, v] : kon)
      if (koff.at(k) != v) diff.push_back(k);
    r.expect(diff == std::vector<std::string>{"model.use_qk_norm"}, "ablation configs differ in more than qk-norm");
  }
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Report&)>>> criteria{
      {"gradient integrity", gradients},
      {"softmax translation invariance", softmax_shift},
      {"z-loss value", zloss_value},
      {"qk-norm logit bound", qknorm_bound},
      {"norm-reorder bound", norm_reorder},
      {"divergence monitor", monitor},
      {"decoder laws", decoder},
      {"tokenizer laws", tokenizer},
      {"mixture and packing", mixture},
      {"evaluation arithmetic", evaluation},
      {"learnability smoke test", learnability},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Report rep;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(rep);
    } catch (const std::exception& e) {
      ++rep.failures;
      rep.notes.push_back(std::string("threw: ") + e.what());
    }
    const double secs = Seconds(std::chrono::steady_clock::now() - t0).count();
    const bool ok = rep.failures == 0;
    failed += !ok;
    std::printf("[%s] %zu %s (%zu checks, %.1f s)\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                rep.checks, secs);
    for (const auto& n : rep.notes) std::printf("       %s\n", n.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
