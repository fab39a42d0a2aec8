#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "attn/attention.hpp"
#include "attn/graph.hpp"
#include "attn/rng.hpp"

namespace attn {

enum class AttMode { Soft, Hard };

struct ModelDims {
  std::size_t K = 0;  // vocabulary size
  std::size_t m = 0;  // embedding size
  std::size_t n = 0;  // LSTM size
  std::size_t D = 0;  // annotation feature size
  std::size_t A = 0;  // attention MLP hidden size (defaults to n in configs)
};

// All learned tensors. The LSTM uses one stacked affine over the
// concatenated [E y_{t-1}; h_{t-1}; z_t] with gate blocks ordered i, f, o, g.
struct DecoderParams {
  ModelDims dims;
  Tensor embed;    // m x K
  Tensor lstm_W;   // 4n x (m+n+D)
  Tensor lstm_b;   // 4n
  AttentionParams att;
  Tensor init_c_W1, init_c_b1, init_c_W2, init_c_b2;  // n x D, n, n x n, n
  Tensor init_h_W1, init_h_b1, init_h_W2, init_h_b2;
  Tensor out_W;  // K x m
  Tensor out_h;  // m x n
  Tensor out_z;  // m x D

  static DecoderParams init(const ModelDims& d, Rng& rng) {
    check(d.K >= 1 && d.m >= 1 && d.n >= 1 && d.D >= 1 && d.A >= 1,
          "model dimensions must be positive");
    DecoderParams p;
    p.dims = d;
    p.embed = Tensor({d.m, d.K});
    p.lstm_W = Tensor({4 * d.n, d.m + d.n + d.D});
    p.lstm_b = Tensor({4 * d.n});
    p.att = AttentionParams::init(d.D, d.A, d.n, rng);
    p.init_c_W1 = Tensor({d.n, d.D});
    p.init_c_b1 = Tensor({d.n});
    p.init_c_W2 = Tensor({d.n, d.n});
    p.init_c_b2 = Tensor({d.n});
    p.init_h_W1 = Tensor({d.n, d.D});
    p.init_h_b1 = Tensor({d.n});
    p.init_h_W2 = Tensor({d.n, d.n});
    p.init_h_b2 = Tensor({d.n});
    p.out_W = Tensor({d.K, d.m});
    p.out_h = Tensor({d.m, d.n});
    p.out_z = Tensor({d.m, d.D});
    fill_glorot(p.embed, rng);
    fill_glorot(p.lstm_W, rng);
    fill_glorot(p.init_c_W1, rng);
    fill_glorot(p.init_c_W2, rng);
    fill_glorot(p.init_h_W1, rng);
    fill_glorot(p.init_h_W2, rng);
    fill_glorot(p.out_W, rng);
    fill_glorot(p.out_h, rng);
    fill_glorot(p.out_z, rng);
    return p;
  }

  std::vector<std::pair<std::string, Tensor*>> entries() {
    return {{"embed", &embed},           {"lstm_W", &lstm_W},
            {"lstm_b", &lstm_b},         {"att_proj_a", &att.proj_a},
            {"att_proj_h", &att.proj_h}, {"att_score", &att.score},
            {"att_gate_w", &att.gate_w}, {"init_c_W1", &init_c_W1},
            {"init_c_b1", &init_c_b1},   {"init_c_W2", &init_c_W2},
            {"init_c_b2", &init_c_b2},   {"init_h_W1", &init_h_W1},
            {"init_h_b1", &init_h_b1},   {"init_h_W2", &init_h_W2},
            {"init_h_b2", &init_h_b2},   {"out_W", &out_W},
            {"out_h", &out_h},           {"out_z", &out_z}};
  }

  std::vector<std::pair<std::string, const Tensor*>> entries() const {
    auto* self = const_cast<DecoderParams*>(this);
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [k, v] : self->entries()) out.emplace_back(k, v);
    return out;
  }

  Tensor& by_name(const std::string& name) {
    for (auto& [k, v] : entries())
      if (k == name) return *v;
    throw error("no parameter block named '" + name + "'");
  }

  // Parameter names reachable from each mode's computation. The gate only
  // exists on the soft path.
  std::vector<std::string> names(AttMode mode) const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries())
      if (mode == AttMode::Soft || k != "att_gate_w") out.push_back(k);
    return out;
  }

  bool all_finite() const {
    for (const auto& [_, t] : entries())
      if (!t->all_finite()) return false;
    return true;
  }
};

struct DecoderState {
  Tensor h;  // [n], |h_j| <= 1
  Tensor c;  // [n]
  std::size_t t = 0;
};

// Token index sequence ending in exactly one EOS token.
struct CaptionSequence {
  std::vector<std::uint32_t> tokens;

  std::size_t length() const { return tokens.size(); }

  void validate(std::uint32_t eos, std::size_t K) const {
    check(!tokens.empty(), "caption must contain the end token");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      check(tokens[i] < K, "caption token out of vocabulary range");
      check((tokens[i] == eos) == (i + 1 == tokens.size()),
            "caption must contain exactly one end token, at the final position");
    }
  }
};

inline Tensor embedding_column(const DecoderParams& p, std::uint32_t token) {
  check(token < p.dims.K, "token index out of range");
  Tensor e({p.dims.m});
  for (std::size_t r = 0; r < p.dims.m; ++r) e.data[r] = p.embed.at(r, token);
  return e;
}

namespace detail {

inline Tensor mlp2(const Tensor& W1, const Tensor& b1, const Tensor& W2, const Tensor& b2,
                   const Tensor& x, bool tanh_out) {
  Tensor h = matvec(W1, x);
  for (std::size_t i = 0; i < h.size(); ++i) h.data[i] = std::tanh(h.data[i] + b1.data[i]);
  Tensor y = matvec(W2, h);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y.data[i] += b2.data[i];
    if (tanh_out) y.data[i] = std::tanh(y.data[i]);
  }
  return y;
}

}  // namespace detail

// c_0 and h_0 from the mean annotation through the two init MLPs. init_h gets
// a tanh output layer so |h_0| <= 1 like every later hidden state.
inline DecoderState init_state(const AnnotationGrid& grid, const DecoderParams& p) {
  check_shape(grid.feature_dim() == p.dims.D, "init_state: feature dimension");
  Tensor mean({p.dims.D});
  const std::size_t L = grid.locations();
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t d = 0; d < p.dims.D; ++d) mean.data[d] += grid.features.at(i, d);
  for (auto& v : mean.data) v /= static_cast<double>(L);

  DecoderState s;
  s.c = detail::mlp2(p.init_c_W1, p.init_c_b1, p.init_c_W2, p.init_c_b2, mean, false);
  s.h = detail::mlp2(p.init_h_W1, p.init_h_b1, p.init_h_W2, p.init_h_b2, mean, true);
  s.t = 0;
  return s;
}

// One LSTM transition: gates from the stacked affine over
// [prev embedding; h_{t-1}; context], then c_t = f.c + i.g, h_t = o.tanh(c_t).
inline DecoderState lstm_step(const Tensor& prev_embed, const DecoderState& state,
                              const Tensor& context, const DecoderParams& p) {
  const std::size_t m = p.dims.m, n = p.dims.n, D = p.dims.D;
  check_shape(prev_embed.size() == m && state.h.size() == n && context.size() == D,
              "lstm_step: dimension mismatch");
  Tensor x({m + n + D});
  std::copy(prev_embed.data.begin(), prev_embed.data.end(), x.data.begin());
  std::copy(state.h.data.begin(), state.h.data.end(), x.data.begin() + m);
  std::copy(context.data.begin(), context.data.end(), x.data.begin() + m + n);

  Tensor pre = matvec(p.lstm_W, x);
  for (std::size_t i = 0; i < pre.size(); ++i) pre.data[i] += p.lstm_b.data[i];

  DecoderState out;
  out.h = Tensor({n});
  out.c = Tensor({n});
  out.t = state.t + 1;
  for (std::size_t j = 0; j < n; ++j) {
    const double gi = 1.0 / (1.0 + std::exp(-pre.data[j]));
    const double gf = 1.0 / (1.0 + std::exp(-pre.data[n + j]));
    const double go = 1.0 / (1.0 + std::exp(-pre.data[2 * n + j]));
    const double gg = std::tanh(pre.data[3 * n + j]);
    out.c.data[j] = gf * state.c.data[j] + gi * gg;
    out.h.data[j] = go * std::tanh(out.c.data[j]);
  }
  return out;
}

// Deep output distribution: softmax(out_W (E y_{t-1} + out_h h_t + out_z z_t)).
// `h_override` lets the training path feed a dropout-masked hidden state.
inline Tensor output_distribution(std::uint32_t prev_token, const DecoderState& state,
                                  const Tensor& context, const DecoderParams& p,
                                  const Tensor* h_override = nullptr) {
  const Tensor& h = h_override ? *h_override : state.h;
  Tensor inner = embedding_column(p, prev_token);
  const Tensor hh = matvec(p.out_h, h);
  const Tensor zz = matvec(p.out_z, context);
  for (std::size_t i = 0; i < inner.size(); ++i) inner.data[i] += hh.data[i] + zz.data[i];
  Tensor logits = matvec(p.out_W, inner);
  softmax_inplace(logits);
  return logits;
}

struct StepOptions {
  bool apply_gate = true;
  bool argmax_location = false;             // hard inference default
  std::optional<std::size_t> force_location;  // overrides sampling entirely
};

struct StepResult {
  Tensor distribution;  // [K]
  DecoderState state;
  AttentionWeights weights;
  std::optional<std::size_t> location;  // hard path
  double beta = 1.0;                    // soft path gate value
};

// Composition of one decode step: scores from the pre-update hidden state,
// context per mode, LSTM transition, then the output distribution.
inline StepResult decode_step(const AnnotationGrid& grid, const DecoderState& state,
                              std::uint32_t prev_token, const DecoderParams& p, AttMode mode,
                              Rng* rng = nullptr, const StepOptions& opt = {}) {
  StepResult r;
  r.weights = attention_weights(attention_scores(grid, state.h, p.att));

  Tensor context;
  if (mode == AttMode::Soft) {
    SoftContext sc = soft_context(grid, r.weights, state.h, p.att, opt.apply_gate);
    context = std::move(sc.context);
    r.beta = sc.beta;
  } else {
    std::size_t loc;
    if (opt.force_location) {
      loc = *opt.force_location;
      check(loc < grid.locations(), "forced location out of range");
    } else if (opt.argmax_location) {
      loc = static_cast<std::size_t>(
          std::max_element(r.weights.alpha.data.begin(), r.weights.alpha.data.end()) -
          r.weights.alpha.data.begin());
    } else {
      check(rng != nullptr, "hard decode_step requires an rng to sample the location");
      loc = rng->categorical(r.weights.alpha.data);
    }
    r.location = loc;
    context = grid.row(loc);
  }

  r.state = lstm_step(embedding_column(p, prev_token), state, context, p);
  r.distribution = output_distribution(prev_token, r.state, context, p);
  return r;
}

// --- teacher forcing ------------------------------------------------------

struct ForcedOptions {
  AttMode mode = AttMode::Soft;
  bool apply_gate = true;
  const std::vector<Tensor>* dropout_masks = nullptr;   // per step, [n]
  Rng* rng = nullptr;                                   // hard sampling
  const std::vector<std::size_t>* force_locations = nullptr;  // enumeration
};

struct ForcedResult {
  double logp_y = 0.0;    // sum_t log p(y_t | .)
  double logp_s = 0.0;    // hard: sum_t log alpha_t[s_t]
  double entropy_sum = 0.0;
  std::vector<std::size_t> locations;
  AttentionTrace trace;
};

// Runs the decoder along a given caption, conditioning each step on the
// observed previous word. This is the forward-only reference path; training
// gradients come from the graph built in training.hpp.
inline ForcedResult teacher_forced(const AnnotationGrid& grid, const CaptionSequence& caption,
                                   const DecoderParams& p, std::uint32_t bos,
                                   const ForcedOptions& opt = {}) {
  const std::size_t C = caption.length();
  if (opt.dropout_masks)
    check(opt.dropout_masks->size() == C, "teacher_forced: need one dropout mask per step");
  if (opt.force_locations)
    check(opt.force_locations->size() == C, "teacher_forced: need one location per step");

  ForcedResult r;
  if (opt.mode == AttMode::Hard) r.trace.sampled_locations.emplace();
  if (opt.mode == AttMode::Soft && opt.apply_gate) r.trace.betas.emplace();

  DecoderState state = init_state(grid, p);
  std::uint32_t prev = bos;
  for (std::size_t t = 0; t < C; ++t) {
    AttentionWeights w = attention_weights(attention_scores(grid, state.h, p.att));
    r.entropy_sum += multinoulli_entropy(w);

    Tensor context;
    double beta = 1.0;
    if (opt.mode == AttMode::Soft) {
      SoftContext sc = soft_context(grid, w, state.h, p.att, opt.apply_gate);
      context = std::move(sc.context);
      beta = sc.beta;
    } else {
      std::size_t loc;
      if (opt.force_locations) {
        loc = (*opt.force_locations)[t];
      } else {
        check(opt.rng != nullptr, "hard teacher_forced requires an rng");
        loc = opt.rng->categorical(w.alpha.data);
      }
      r.locations.push_back(loc);
      r.logp_s += std::log(w.alpha.data[loc]);
      context = grid.row(loc);
    }

    state = lstm_step(embedding_column(p, prev), state, context, p);

    const Tensor* h_for_output = &state.h;
    Tensor h_masked;
    if (opt.dropout_masks) {
      h_masked = state.h;
      for (std::size_t j = 0; j < h_masked.size(); ++j)
        h_masked.data[j] *= (*opt.dropout_masks)[t].data[j];
      h_for_output = &h_masked;
    }
    Tensor dist = output_distribution(prev, state, context, p, h_for_output);
    r.logp_y += std::log(dist.data[caption.tokens[t]]);

    r.trace.per_step.push_back(w.alpha);
    if (r.trace.sampled_locations) r.trace.sampled_locations->push_back(r.locations.back());
    if (r.trace.betas) r.trace.betas->push_back(beta);
    prev = caption.tokens[t];
  }
  return r;
}

// --- generation -----------------------------------------------------------

struct GenStrategy {
  enum Kind { Greedy, Beam, Sample } kind = Greedy;
  std::size_t width = 1;      // beam
  double temperature = 1.0;   // sample
};

struct GenerateOptions {
  AttMode mode = AttMode::Soft;
  GenStrategy strategy;
  std::size_t max_len = 16;
  std::uint32_t bos = 0;
  std::uint32_t eos = 1;
  bool sample_attention = false;  // hard path: sample s_t instead of argmax
  bool apply_gate = true;
};

struct Generated {
  CaptionSequence caption;
  AttentionTrace trace;
  double logp = 0.0;  // sum of emitted-token log probabilities
};

namespace detail {

struct Beam {
  CaptionSequence caption;
  AttentionTrace trace;
  DecoderState state;
  double logp = 0.0;
  bool done = false;
};

inline void record_trace(AttentionTrace& trace, const StepResult& step, AttMode mode,
                         bool gated) {
  trace.per_step.push_back(step.weights.alpha);
  if (mode == AttMode::Hard) {
    if (!trace.sampled_locations) trace.sampled_locations.emplace();
    trace.sampled_locations->push_back(*step.location);
  } else if (gated) {
    if (!trace.betas) trace.betas.emplace();
    trace.betas->push_back(step.beta);
  }
}

}  // namespace detail

// Decodes a caption from an annotation grid. Stops at EOS or max_len; when
// max_len is hit without an EOS emission the terminal token is appended
// without a trace entry, so the trace length always equals the number of
// emitted tokens.
inline Generated generate(const AnnotationGrid& grid, const DecoderParams& p,
                          const GenerateOptions& opt, Rng& rng) {
  check(opt.max_len >= 1, "generate: max_len must be at least 1");
  StepOptions step_opt;
  step_opt.apply_gate = opt.apply_gate;
  step_opt.argmax_location = !opt.sample_attention;

  if (opt.strategy.kind == GenStrategy::Beam) {
    check(opt.strategy.width >= 1, "generate: beam width must be at least 1");
    std::vector<detail::Beam> beams(1);
    beams[0].state = init_state(grid, p);
    std::vector<detail::Beam> finished;

    for (std::size_t t = 0; t < opt.max_len; ++t) {
      std::vector<detail::Beam> candidates;
      for (const auto& beam : beams) {
        const std::uint32_t prev =
            beam.caption.tokens.empty() ? opt.bos : beam.caption.tokens.back();
        StepResult step = decode_step(grid, beam.state, prev, p, opt.mode, &rng, step_opt);
        // Top `width` continuations of this beam, by probability.
        std::vector<std::size_t> order(step.distribution.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          return step.distribution.data[a] > step.distribution.data[b];
        });
        const std::size_t take = std::min(opt.strategy.width, order.size());
        for (std::size_t k = 0; k < take; ++k) {
          detail::Beam next = beam;
          next.state = step.state;
          next.logp += std::log(step.distribution.data[order[k]]);
          next.caption.tokens.push_back(static_cast<std::uint32_t>(order[k]));
          detail::record_trace(next.trace, step, opt.mode, opt.apply_gate);
          next.done = order[k] == opt.eos;
          candidates.push_back(std::move(next));
        }
      }
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const auto& a, const auto& b) { return a.logp > b.logp; });
      beams.clear();
      for (auto& c : candidates) {
        if (c.done)
          finished.push_back(std::move(c));
        else if (beams.size() < opt.strategy.width)
          beams.push_back(std::move(c));
      }
      if (beams.empty()) break;
    }

    detail::Beam* best = nullptr;
    for (auto& f : finished)
      if (!best || f.logp > best->logp) best = &f;
    if (!best) {
      for (auto& b : beams)
        if (!best || b.logp > best->logp) best = &b;
      best->caption.tokens.push_back(opt.eos);  // truncated at max_len
    }
    Generated out;
    out.caption = std::move(best->caption);
    out.trace = std::move(best->trace);
    out.logp = best->logp;
    return out;
  }

  Generated out;
  DecoderState state = init_state(grid, p);
  std::uint32_t prev = opt.bos;
  for (std::size_t t = 0; t < opt.max_len; ++t) {
    StepResult step = decode_step(grid, state, prev, p, opt.mode, &rng, step_opt);
    std::uint32_t token;
    if (opt.strategy.kind == GenStrategy::Greedy) {
      token = static_cast<std::uint32_t>(
          std::max_element(step.distribution.data.begin(), step.distribution.data.end()) -
          step.distribution.data.begin());
    } else {
      Tensor q = step.distribution;
      if (opt.strategy.temperature != 1.0) {
        check(opt.strategy.temperature > 0.0, "generate: temperature must be positive");
        double z = 0.0;
        for (auto& v : q.data) {
          v = std::pow(v, 1.0 / opt.strategy.temperature);
          z += v;
        }
        for (auto& v : q.data) v /= z;
      }
      token = static_cast<std::uint32_t>(rng.categorical(q.data));
    }
    out.logp += std::log(step.distribution.data[token]);
    out.caption.tokens.push_back(token);
    detail::record_trace(out.trace, step, opt.mode, opt.apply_gate);
    state = step.state;
    prev = token;
    if (token == opt.eos) return out;
  }
  out.caption.tokens.push_back(opt.eos);  // truncated at max_len
  return out;
}

// --- graph builders ---------------------------------------------------------

struct DecoderParamNodes {
  NodeId embed, lstm_W, lstm_b;
  AttentionParamNodes att;
  NodeId ic_W1, ic_b1, ic_W2, ic_b2;
  NodeId ih_W1, ih_b1, ih_W2, ih_b2;
  NodeId out_W, out_h, out_z;
  bool has_gate = false;
};

// Declares one input node per parameter block, named identically to
// DecoderParams::entries() so bind_params and GradientMap keys line up.
inline DecoderParamNodes decoder_param_inputs(Graph& g, const ModelDims& d,
                                              bool with_gate) {
  DecoderParamNodes p;
  p.embed = g.input("embed", {d.m, d.K});
  p.lstm_W = g.input("lstm_W", {4 * d.n, d.m + d.n + d.D});
  p.lstm_b = g.input("lstm_b", {4 * d.n});
  p.att.proj_a = g.input("att_proj_a", {d.D, d.A});
  p.att.proj_h = g.input("att_proj_h", {d.A, d.n});
  p.att.score = g.input("att_score", {d.A});
  if (with_gate) p.att.gate_w = g.input("att_gate_w", {d.n});
  p.has_gate = with_gate;
  p.ic_W1 = g.input("init_c_W1", {d.n, d.D});
  p.ic_b1 = g.input("init_c_b1", {d.n});
  p.ic_W2 = g.input("init_c_W2", {d.n, d.n});
  p.ic_b2 = g.input("init_c_b2", {d.n});
  p.ih_W1 = g.input("init_h_W1", {d.n, d.D});
  p.ih_b1 = g.input("init_h_b1", {d.n});
  p.ih_W2 = g.input("init_h_W2", {d.n, d.n});
  p.ih_b2 = g.input("init_h_b2", {d.n});
  p.out_W = g.input("out_W", {d.K, d.m});
  p.out_h = g.input("out_h", {d.m, d.n});
  p.out_z = g.input("out_z", {d.m, d.D});
  return p;
}

inline void bind_params(Evaluation& ev, const DecoderParams& params) {
  for (const auto& [name, tensor] : params.entries())
    if (ev.graph().has_node(name)) ev.bind(name, *tensor);
}

inline std::map<std::string, Tensor> param_bindings(const DecoderParams& params,
                                                    const Graph& g) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, tensor] : params.entries())
    if (g.has_node(name)) out.emplace(name, *tensor);
  return out;
}

struct InitStateNodes {
  NodeId h0, c0;
};

inline InitStateNodes init_state_nodes(Graph& g, NodeId grid, const DecoderParamNodes& p) {
  NodeId mean = g.mean(grid, 0);  // [D] column means
  auto mlp = [&](NodeId W1, NodeId b1, NodeId W2, NodeId b2, bool tanh_out) {
    NodeId hidden = g.tanh(g.affine(W1, mean, b1));
    NodeId out = g.affine(W2, hidden, b2);
    return tanh_out ? g.tanh(out) : out;
  };
  InitStateNodes s;
  s.c0 = mlp(p.ic_W1, p.ic_b1, p.ic_W2, p.ic_b2, false);
  s.h0 = mlp(p.ih_W1, p.ih_b1, p.ih_W2, p.ih_b2, true);
  return s;
}

struct StepNodes {
  NodeId alpha;      // [L]
  NodeId beta;       // {1}, soft+gate only
  NodeId context;    // [D]
  NodeId h, c;       // [n]
  NodeId prob;       // [K]
  NodeId logp_word;  // {1}: log p(target | .), when a target input is given
  NodeId pick_logalpha;  // {1}: log alpha[s_t], hard path only
};

struct StepInputs {
  NodeId h_prev, c_prev;
  NodeId y_prev;      // [K] one-hot
  NodeId y_target;    // [K] one-hot, invalid for generation graphs
  NodeId drop_mask;   // [n]
  NodeId s;           // [L] one-hot (input or constant), hard path only
};

struct StepBodyNodes {
  NodeId h, c, prob, logp_word;
};

// Everything downstream of the context: the LSTM transition plus the deep
// output distribution. Split from the attention part so the enumeration
// oracle can branch per location while sharing one attention evaluation.
inline StepBodyNodes build_step_body(Graph& g, const DecoderParamNodes& p, const ModelDims& d,
                                     NodeId context, const StepInputs& in) {
  StepBodyNodes out;
  NodeId embed_prev = g.matmul(p.embed, in.y_prev);  // [m]
  NodeId x = g.concat({embed_prev, in.h_prev, context});
  NodeId pre = g.affine(p.lstm_W, x, p.lstm_b);  // [4n], blocks i,f,o,g
  const std::size_t n = d.n;
  NodeId gi = g.sigmoid(g.slice(pre, 0, n));
  NodeId gf = g.sigmoid(g.slice(pre, n, n));
  NodeId go = g.sigmoid(g.slice(pre, 2 * n, n));
  NodeId gg = g.tanh(g.slice(pre, 3 * n, n));
  out.c = g.add(g.mul(gf, in.c_prev), g.mul(gi, gg));
  out.h = g.mul(go, g.tanh(out.c));

  NodeId h_for_output = g.mul(out.h, in.drop_mask);
  NodeId inner = g.add(g.add(embed_prev, g.matmul(p.out_h, h_for_output)),
                       g.matmul(p.out_z, context));
  NodeId logits = g.matmul(p.out_W, inner);
  out.prob = g.softmax(logits);
  if (in.y_target.valid()) out.logp_word = g.log(g.dot(out.prob, in.y_target));
  return out;
}

// Appends one decode step to the graph. Mirrors decode_step()/teacher_forced()
// arithmetic exactly; the two paths are cross-checked in the tests.
inline StepNodes build_step(Graph& g, const DecoderParamNodes& p, const ModelDims& d,
                            NodeId grid, NodeId grid_proj, const StepInputs& in, AttMode mode,
                            bool apply_gate) {
  StepNodes out;
  NodeId e = attention_scores_node(g, grid_proj, in.h_prev, p.att);
  out.alpha = attention_weights_node(g, e);

  if (mode == AttMode::Soft) {
    out.context =
        soft_context_node(g, grid, out.alpha, in.h_prev, p.att, apply_gate, &out.beta);
  } else {
    check(in.s.valid(), "hard step needs a location one-hot");
    out.context = g.matmul(in.s, grid);
    out.pick_logalpha = g.log(g.dot(in.s, out.alpha));
  }

  StepBodyNodes body = build_step_body(g, p, d, out.context, in);
  out.h = body.h;
  out.c = body.c;
  out.prob = body.prob;
  out.logp_word = body.logp_word;
  return out;
}

}  // namespace attn
