#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "attn/data.hpp"
#include "attn/decoder.hpp"
#include "attn/evalviz.hpp"
#include "attn/gradcheck.hpp"
#include "attn/graph.hpp"

namespace attn {

// --- unrolled objective graphs ------------------------------------------------

// Trajectory flavors a training graph can express. Substituted is the hard
// path's expectation substitution: soft contexts (no gate), no score term.
enum class TrajectoryKind { Soft, HardSampled, HardSubstituted };

// A teacher-forced decoder unrolled over C steps, with the loss terms both
// learning rules need. Inputs: "grid", "y0".."yC", "mask1".."maskC", the
// parameter blocks, and per-kind scalars ("lambda_pen" for soft,
// "coeff"/"lambda_e" for hard-sampled, "lambda_e" for hard-substituted).
struct UnrolledGraph {
  Graph g;
  ModelDims dims;
  std::size_t L = 0, C = 0;
  TrajectoryKind kind = TrajectoryKind::Soft;
  std::vector<NodeId> alphas;
  std::vector<NodeId> betas;

  // Node labels present per kind:
  //   soft:            loss (L_d), nll, penalty, alpha_colsum, entropy
  //   hard sampled:    objective (J), logp_y, logp_s, entropy
  //   hard substituted objective, logp_y, entropy
};

inline UnrolledGraph build_unrolled(const ModelDims& dims, std::size_t L, std::size_t C,
                                    TrajectoryKind kind, bool apply_gate = true) {
  check(C >= 1, "build_unrolled: caption length must be at least 1");
  UnrolledGraph u;
  u.dims = dims;
  u.L = L;
  u.C = C;
  u.kind = kind;
  Graph& g = u.g;

  const bool soft_ctx = kind != TrajectoryKind::HardSampled;
  const bool gate = kind == TrajectoryKind::Soft && apply_gate;
  DecoderParamNodes p = decoder_param_inputs(g, dims, gate);
  NodeId grid = g.input("grid", {L, dims.D});
  NodeId grid_proj = attention_grid_projection(g, grid, p.att);
  InitStateNodes init = init_state_nodes(g, grid, p);

  std::vector<NodeId> y(C + 1);
  for (std::size_t t = 0; t <= C; ++t) y[t] = g.input("y" + std::to_string(t), {dims.K});
  std::vector<NodeId> masks(C);
  for (std::size_t t = 1; t <= C; ++t)
    masks[t - 1] = g.input("mask" + std::to_string(t), {dims.n});

  NodeId h = init.h0, c = init.c0;
  NodeId logp_sum, logp_s_sum, entropy_sum, colsum;
  for (std::size_t t = 1; t <= C; ++t) {
    StepInputs in;
    in.h_prev = h;
    in.c_prev = c;
    in.y_prev = y[t - 1];
    in.y_target = y[t];
    in.drop_mask = masks[t - 1];
    if (kind == TrajectoryKind::HardSampled)
      in.s = g.input("s" + std::to_string(t), {L});
    StepNodes step = build_step(g, p, dims, grid, grid_proj, in,
                                soft_ctx ? AttMode::Soft : AttMode::Hard, gate);
    h = step.h;
    c = step.c;
    u.alphas.push_back(step.alpha);
    if (step.beta.valid()) u.betas.push_back(step.beta);

    NodeId ent = entropy_node(g, step.alpha);
    logp_sum = t == 1 ? step.logp_word : g.add(logp_sum, step.logp_word);
    entropy_sum = t == 1 ? ent : g.add(entropy_sum, ent);
    colsum = t == 1 ? step.alpha : g.add(colsum, step.alpha);
    if (kind == TrajectoryKind::HardSampled)
      logp_s_sum = t == 1 ? step.pick_logalpha : g.add(logp_s_sum, step.pick_logalpha);
  }

  g.label(entropy_sum, "entropy");
  if (kind == TrajectoryKind::Soft) {
    NodeId nll = g.scalar_mul(logp_sum, -1.0);
    g.label(nll, "nll");
    g.label(colsum, "alpha_colsum");
    Tensor ones({L});
    ones.fill(1.0);
    NodeId deficit = g.add(g.constant(std::move(ones)), g.scalar_mul(colsum, -1.0));
    NodeId penalty = g.sum(g.square(deficit));
    g.label(penalty, "penalty");
    NodeId lambda_pen = g.input("lambda_pen", {1});
    g.label(g.add(nll, g.mul(penalty, lambda_pen)), "loss");
  } else {
    g.label(logp_sum, "logp_y");
    NodeId lambda_e = g.input("lambda_e", {1});
    NodeId objective = g.add(logp_sum, g.mul(lambda_e, entropy_sum));
    if (kind == TrajectoryKind::HardSampled) {
      g.label(logp_s_sum, "logp_s");
      NodeId coeff = g.input("coeff", {1});
      objective = g.add(objective, g.mul(coeff, logp_s_sum));
    }
    g.label(objective, "objective");
  }
  return u;
}

// Graph cache keyed by caption length; graphs are per (dims, L, kind, gate),
// all fixed for one training run.
class GraphCache {
 public:
  GraphCache(const ModelDims& dims, std::size_t L, bool apply_gate)
      : dims_(dims), L_(L), gate_(apply_gate) {}

  const UnrolledGraph& get(TrajectoryKind kind, std::size_t C) {
    auto& slot = cache_[{static_cast<int>(kind), C}];
    if (!slot) slot = std::make_unique<UnrolledGraph>(build_unrolled(dims_, L_, C, kind, gate_));
    return *slot;
  }

 private:
  ModelDims dims_;
  std::size_t L_;
  bool gate_;
  std::map<std::pair<int, std::size_t>, std::unique_ptr<UnrolledGraph>> cache_;
};

// --- shared helpers ---------------------------------------------------------

inline void bind_caption(Evaluation& ev, std::span<const std::uint32_t> caption,
                         std::uint32_t bos) {
  ev.bind_one_hot("y0", bos);
  for (std::size_t t = 0; t < caption.size(); ++t)
    ev.bind_one_hot("y" + std::to_string(t + 1), caption[t]);
}

// Inverted-dropout masks: entries are 0 with probability `rate`, else
// 1/(1-rate). rate = 0 yields all-ones.
inline std::vector<Tensor> draw_dropout_masks(std::size_t steps, std::size_t n, double rate,
                                              Rng& rng) {
  check(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0, 1)");
  std::vector<Tensor> masks(steps, Tensor({n}));
  for (auto& m : masks)
    for (auto& v : m.data)
      v = (rate > 0.0 && rng.uniform() < rate) ? 0.0 : 1.0 / (1.0 - rate);
  return masks;
}

inline void bind_masks(Evaluation& ev, const std::vector<Tensor>& masks) {
  for (std::size_t t = 0; t < masks.size(); ++t)
    ev.bind("mask" + std::to_string(t + 1), masks[t]);
}

inline GradientMap zero_gradients(const DecoderParams& params, AttMode mode) {
  GradientMap out;
  for (const auto& name : params.names(mode)) {
    Tensor t(const_cast<DecoderParams&>(params).by_name(name).shape);
    out.emplace(name, std::move(t));
  }
  return out;
}

inline double gradient_norm(const GradientMap& grads) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double v : g.data) sq += v * v;
  return std::sqrt(sq);
}

inline double clip_global_norm(GradientMap& grads, double max_norm) {
  const double norm = gradient_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [_, g] : grads)
      for (double& v : g.data) v *= scale;
  }
  return norm;
}

// --- soft path ---------------------------------------------------------------

struct SoftLossConfig {
  double lambda_penalty = 1.0;  // doubly stochastic regularizer weight
  double dropout_rate = 0.5;
  bool apply_gate = true;
};

struct SoftLossResult {
  double loss = 0.0;      // mean L_d over the batch
  double mean_nll = 0.0;
  double mean_penalty = 0.0;
  GradientMap grads;      // d(mean L_d)/d(params)
  Tensor mean_alpha_colsum;  // [L], mean over batch of sum_t alpha_t
  double mean_beta = 1.0;
  double mean_entropy = 0.0;
};

// Penalized NLL over a same-length batch:
//   L_d = mean_b [ -sum_t log p(y_t) + lambda sum_i (1 - sum_t alpha_ti)^2 ].
inline SoftLossResult soft_loss(const Dataset& data, std::span<const std::size_t> batch,
                                const DecoderParams& params, const SoftLossConfig& cfg,
                                std::uint32_t bos, Rng& rng, GraphCache& cache,
                                bool training_dropout = true) {
  check(!batch.empty(), "soft_loss: empty batch");
  const std::size_t C = data.records[batch[0]].caption.size();
  for (std::size_t idx : batch)
    check(data.records[idx].caption.size() == C,
          "soft_loss: mixed caption lengths in one batch (bucket contract)");

  const UnrolledGraph& u = cache.get(TrajectoryKind::Soft, C);
  Evaluation ev(u.g);
  bind_params(ev, params);
  ev.bind_scalar("lambda_pen", cfg.lambda_penalty);

  SoftLossResult r;
  r.grads = zero_gradients(params, AttMode::Soft);
  r.mean_alpha_colsum = Tensor({u.L});
  r.mean_beta = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const double rate = training_dropout ? cfg.dropout_rate : 0.0;

  for (std::size_t idx : batch) {
    const DataRecord& rec = data.records[idx];
    ev.bind("grid", rec.grid);
    bind_caption(ev, rec.caption, bos);
    bind_masks(ev, draw_dropout_masks(C, params.dims.n, rate, rng));
    ev.run();

    r.loss += ev.value("loss").data[0] * inv_b;
    r.mean_nll += ev.value("nll").data[0] * inv_b;
    r.mean_penalty += ev.value("penalty").data[0] * inv_b;
    r.mean_entropy += ev.value("entropy").data[0] * inv_b;
    const Tensor& colsum = ev.value("alpha_colsum");
    for (std::size_t i = 0; i < colsum.size(); ++i)
      r.mean_alpha_colsum.data[i] += colsum.data[i] * inv_b;
    if (!u.betas.empty()) {
      double beta_sum = 0.0;
      for (NodeId b : u.betas) beta_sum += ev.value(b).data[0];
      r.mean_beta += beta_sum / static_cast<double>(u.betas.size()) * inv_b;
    }
    ev.backward_into(u.g.by_name("loss"), r.grads, inv_b);
  }
  if (u.betas.empty()) r.mean_beta = 1.0;
  return r;
}

// --- exact hard objective (enumeration oracle) -------------------------------

// L_s = sum_s p(s|a) log p(y|s,a) with the trajectory distribution expanded as
// a prefix tree (alpha_t depends on the sampled history through h). The whole
// sum is one graph, so backward() differentiates the enumerated objective
// directly, with no use of the score-function identity.
struct EnumGraph {
  Graph g;
  std::size_t L = 0, C = 0;
  NodeId Ls;
  std::vector<NodeId> leaf_logp_y, leaf_logp_s;
};

inline EnumGraph build_enum_graph(const ModelDims& dims, std::size_t L, std::size_t C) {
  EnumGraph eg;
  eg.L = L;
  eg.C = C;
  Graph& g = eg.g;

  DecoderParamNodes p = decoder_param_inputs(g, dims, /*with_gate=*/false);
  NodeId grid = g.input("grid", {L, dims.D});
  NodeId grid_proj = attention_grid_projection(g, grid, p.att);
  InitStateNodes init = init_state_nodes(g, grid, p);
  std::vector<NodeId> y(C + 1);
  for (std::size_t t = 0; t <= C; ++t) y[t] = g.input("y" + std::to_string(t), {dims.K});
  Tensor ones({dims.n});
  ones.fill(1.0);
  NodeId no_dropout = g.constant(std::move(ones));

  std::vector<NodeId> terms;
  // Depth-first over location prefixes; one attention evaluation per prefix,
  // one step body per branch.
  std::function<void(std::size_t, NodeId, NodeId, NodeId, NodeId)> expand =
      [&](std::size_t t, NodeId h, NodeId c, NodeId logp_y_acc, NodeId logp_s_acc) {
        NodeId e = attention_scores_node(g, grid_proj, h, p.att);
        NodeId alpha = attention_weights_node(g, e);
        for (std::size_t loc = 0; loc < L; ++loc) {
          NodeId s = g.constant(Tensor::one_hot(L, loc));
          NodeId pick = g.log(g.dot(s, alpha));
          NodeId logp_s = logp_s_acc.valid() ? g.add(logp_s_acc, pick) : pick;
          StepInputs in;
          in.h_prev = h;
          in.c_prev = c;
          in.y_prev = y[t - 1];
          in.y_target = y[t];
          in.drop_mask = no_dropout;
          StepBodyNodes body = build_step_body(g, p, dims, g.matmul(s, grid), in);
          NodeId logp_y =
              logp_y_acc.valid() ? g.add(logp_y_acc, body.logp_word) : body.logp_word;
          if (t == C) {
            NodeId p_s = g.exp(logp_s);
            terms.push_back(g.mul(p_s, logp_y));
            eg.leaf_logp_y.push_back(logp_y);
            eg.leaf_logp_s.push_back(logp_s);
          } else {
            expand(t + 1, body.h, body.c, logp_y, logp_s);
          }
        }
      };
  expand(1, init.h0, init.c0, NodeId{}, NodeId{});

  NodeId total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
  g.label(total, "Ls");
  eg.Ls = total;
  return eg;
}

struct ExactHardResult {
  double Ls = 0.0;
  double marginal_logp = 0.0;  // log p(y|a) = log sum_s p(s) p(y|s)
  GradientMap grads;           // exact dL_s/dW
};

inline constexpr std::size_t kEnumerationLimit = 4096;

inline ExactHardResult exact_hard_objective(const AnnotationGrid& grid,
                                            const CaptionSequence& caption,
                                            const DecoderParams& params, std::uint32_t bos) {
  const std::size_t L = grid.locations(), C = caption.length();
  double traj = 1.0;
  for (std::size_t t = 0; t < C; ++t) {
    traj *= static_cast<double>(L);
    check(traj <= static_cast<double>(kEnumerationLimit),
          "exact_hard_objective: L^C exceeds the enumeration limit");
  }

  EnumGraph eg = build_enum_graph(params.dims, L, C);
  Evaluation ev(eg.g);
  bind_params(ev, params);
  ev.bind("grid", grid.features);
  bind_caption(ev, caption.tokens, bos);
  ev.run();

  ExactHardResult r;
  r.Ls = ev.value("Ls").data[0];

  // log-sum-exp over trajectories of log p(s) + log p(y|s).
  double mx = -HUGE_VAL;
  std::vector<double> joint(eg.leaf_logp_y.size());
  for (std::size_t i = 0; i < joint.size(); ++i) {
    joint[i] = ev.value(eg.leaf_logp_y[i]).data[0] + ev.value(eg.leaf_logp_s[i]).data[0];
    mx = std::max(mx, joint[i]);
  }
  double z = 0.0;
  for (double j : joint) z += std::exp(j - mx);
  r.marginal_logp = mx + std::log(z);

  r.grads = zero_gradients(params, AttMode::Hard);
  ev.backward_into(eg.Ls, r.grads, 1.0);
  return r;
}

// --- hard-path Monte Carlo estimator ------------------------------------------

struct HardLossConfig {
  double lambda_r = 1.0;   // reward scale
  double lambda_e = 0.01;  // entropy bonus scale
  std::size_t sample_count = 1;
  double expectation_substitution_prob = 0.5;  // per image per update
  double baseline_decay = 0.9;
  double dropout_rate = 0.5;
};

struct BaselineState {
  double b = 0.0;
  std::uint64_t k = 0;  // mini-batches seen
};

struct GradientEstimate {
  GradientMap grad;  // ascent direction on L_s (+ entropy bonus)
  std::size_t sample_count = 0;
  double baseline = 0.0;  // value used during the batch
  double mean_logp = 0.0;
  std::optional<GradientMap> per_coord_variance;  // across single-sample estimates
};

// Monte Carlo gradient of the hard objective over a same-length batch, per
// sample: dlogp(y|s)/dW + lambda_r (logp(y|s) - b) dlogp(s|a)/dW
//         + lambda_e dH[s]/dW,
// with the whole trajectory replaced by expected contexts with probability
// expectation_substitution_prob per image (no score term in that case).
// The baseline is updated once per batch from the sampled trajectories' mean
// log-likelihood: b <- decay b + (1-decay) mean.
inline GradientEstimate hard_gradient_estimate(const Dataset& data,
                                               std::span<const std::size_t> batch,
                                               const DecoderParams& params,
                                               const HardLossConfig& cfg,
                                               BaselineState& baseline, std::uint32_t bos,
                                               Rng& rng, GraphCache& cache,
                                               bool track_variance = false) {
  check(!batch.empty(), "hard_gradient_estimate: empty batch");
  check(cfg.sample_count >= 1, "hard_gradient_estimate: need at least one sample");
  const std::size_t C = data.records[batch[0]].caption.size();
  for (std::size_t idx : batch)
    check(data.records[idx].caption.size() == C,
          "hard_gradient_estimate: mixed caption lengths in one batch");

  const UnrolledGraph& sampled_u = cache.get(TrajectoryKind::HardSampled, C);
  const UnrolledGraph& subst_u = cache.get(TrajectoryKind::HardSubstituted, C);
  Evaluation ev_sampled(sampled_u.g);
  Evaluation ev_subst(subst_u.g);
  bind_params(ev_sampled, params);
  bind_params(ev_subst, params);
  ev_sampled.bind_scalar("lambda_e", cfg.lambda_e);
  ev_subst.bind_scalar("lambda_e", cfg.lambda_e);

  GradientEstimate est;
  est.baseline = baseline.b;
  est.grad = zero_gradients(params, AttMode::Hard);
  const std::size_t total = batch.size() * cfg.sample_count;
  const double inv_total = 1.0 / static_cast<double>(total);

  // Welford accumulators over single-sample estimates, test instrumentation.
  GradientMap var_mean, var_m2, sample_grad;
  if (track_variance) {
    var_mean = zero_gradients(params, AttMode::Hard);
    var_m2 = zero_gradients(params, AttMode::Hard);
    sample_grad = zero_gradients(params, AttMode::Hard);
  }
  std::size_t welford_n = 0;

  double sampled_logp_sum = 0.0;
  std::size_t sampled_count = 0;

  for (std::size_t idx : batch) {
    const DataRecord& rec = data.records[idx];
    const AnnotationGrid grid{Tensor(rec.grid)};
    const CaptionSequence caption{rec.caption};
    const bool substitute = rng.uniform() < cfg.expectation_substitution_prob;

    for (std::size_t s = 0; s < cfg.sample_count; ++s) {
      const std::vector<Tensor> masks =
          draw_dropout_masks(C, params.dims.n, cfg.dropout_rate, rng);
      Evaluation& ev = substitute ? ev_subst : ev_sampled;
      ev.bind("grid", rec.grid);
      bind_caption(ev, rec.caption, bos);
      bind_masks(ev, masks);

      if (!substitute) {
        ForcedOptions opt;
        opt.mode = AttMode::Hard;
        opt.rng = &rng;
        opt.dropout_masks = &masks;
        ForcedResult roll = teacher_forced(grid, caption, params, bos, opt);
        for (std::size_t t = 0; t < C; ++t)
          ev.bind_one_hot("s" + std::to_string(t + 1), roll.locations[t]);
        ev.bind_scalar("coeff", cfg.lambda_r * (roll.logp_y - baseline.b));
        sampled_logp_sum += roll.logp_y;
        ++sampled_count;
      }

      ev.run();
      est.mean_logp += ev.value("logp_y").data[0] * inv_total;
      const NodeId objective = ev.graph().by_name("objective");
      ev.backward_into(objective, est.grad, inv_total);

      if (track_variance) {
        for (auto& [_, t] : sample_grad) t.fill(0.0);
        ev.backward_into(objective, sample_grad, 1.0);
        ++welford_n;
        for (auto& [name, mean] : var_mean) {
          Tensor& m2 = var_m2.at(name);
          const Tensor& x = sample_grad.at(name);
          for (std::size_t i = 0; i < mean.size(); ++i) {
            const double delta = x.data[i] - mean.data[i];
            mean.data[i] += delta / static_cast<double>(welford_n);
            m2.data[i] += delta * (x.data[i] - mean.data[i]);
          }
        }
      }
    }
  }

  est.sample_count = total;
  if (track_variance && welford_n > 1) {
    for (auto& [name, m2] : var_m2)
      for (auto& v : m2.data) v /= static_cast<double>(welford_n - 1);
    est.per_coord_variance = std::move(var_m2);
  }

  if (sampled_count > 0) {
    const double mean_logp = sampled_logp_sum / static_cast<double>(sampled_count);
    baseline.b = cfg.baseline_decay * baseline.b + (1.0 - cfg.baseline_decay) * mean_logp;
  }
  baseline.k += 1;
  return est;
}

// --- optimizers ---------------------------------------------------------------

enum class OptAlg { RmsProp, Adam };

struct OptimizerConfig {
  OptAlg alg = OptAlg::RmsProp;
  double lr = 1e-3;
  double rms_decay = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  OptimizerConfig cfg;
  std::map<std::string, Tensor> sq;   // second-moment accumulators
  std::map<std::string, Tensor> mom;  // first moment (adam)
  std::uint64_t step = 0;

  static OptimizerState init(const OptimizerConfig& cfg, const DecoderParams& params) {
    OptimizerState s;
    s.cfg = cfg;
    for (const auto& [name, t] : params.entries()) {
      s.sq.emplace(name, Tensor(t->shape));
      if (cfg.alg == OptAlg::Adam) s.mom.emplace(name, Tensor(t->shape));
    }
    return s;
  }
};

// One update. Gradients are for the loss being minimized; parameter blocks
// absent from `grads` are untouched.
inline void optimizer_step(DecoderParams& params, const GradientMap& grads,
                           OptimizerState& state) {
  state.step += 1;
  const OptimizerConfig& c = state.cfg;
  for (const auto& [name, g] : grads) {
    Tensor& p = params.by_name(name);
    check_shape(p.shape == g.shape, "optimizer_step: gradient shape mismatch for '" + name + "'");
    Tensor& sq = state.sq.at(name);
    if (c.alg == OptAlg::RmsProp) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        sq.data[i] = c.rms_decay * sq.data[i] + (1.0 - c.rms_decay) * g.data[i] * g.data[i];
        p.data[i] -= c.lr * g.data[i] / (std::sqrt(sq.data[i]) + c.eps);
      }
    } else {
      Tensor& m = state.mom.at(name);
      const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
      const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
      for (std::size_t i = 0; i < p.size(); ++i) {
        m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g.data[i];
        sq.data[i] = c.beta2 * sq.data[i] + (1.0 - c.beta2) * g.data[i] * g.data[i];
        const double mhat = m.data[i] / bc1;
        const double vhat = sq.data[i] / bc2;
        p.data[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
      }
    }
  }
}

// --- batching ------------------------------------------------------------------

struct Batch {
  std::size_t caption_len = 0;
  std::vector<std::size_t> indices;
};

// One epoch of same-length mini-batches: shuffle within each length bucket,
// chunk, then shuffle the batch order. Every index appears exactly once;
// final partial batches are kept.
inline std::vector<Batch> bucket_batches(const Dataset& data,
                                         std::span<const std::size_t> indices,
                                         std::size_t batch_size, Rng& rng) {
  check(!indices.empty(), "bucket_batches: empty corpus");
  check(batch_size >= 1, "bucket_batches: batch size must be at least 1");
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t idx : indices)
    buckets[data.records[idx].caption.size()].push_back(idx);

  std::vector<Batch> batches;
  for (auto& [len, bucket] : buckets) {
    for (std::size_t i = bucket.size(); i > 1; --i)
      std::swap(bucket[i - 1], bucket[rng.uniform_index(i)]);
    for (std::size_t start = 0; start < bucket.size(); start += batch_size) {
      Batch b;
      b.caption_len = len;
      const std::size_t end = std::min(start + batch_size, bucket.size());
      b.indices.assign(bucket.begin() + start, bucket.begin() + end);
      batches.push_back(std::move(b));
    }
  }
  for (std::size_t i = batches.size(); i > 1; --i)
    std::swap(batches[i - 1], batches[rng.uniform_index(i)]);
  return batches;
}

// --- training loop ---------------------------------------------------------------

struct TrainConfig {
  AttMode mode = AttMode::Soft;
  SoftLossConfig soft;
  HardLossConfig hard;
  OptimizerConfig opt;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 30;
  std::size_t patience = 5;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  std::size_t max_gen_len = 16;
  std::uint32_t bos = Vocabulary::kBos;
  std::uint32_t eos = Vocabulary::kEos;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::array<double, 4> bleu{0, 0, 0, 0};
  double baseline = 0.0;
  double grad_norm = 0.0;
  std::uint64_t wall_ms = 0;
};

struct TrainResult {
  DecoderParams best_params;
  std::size_t best_epoch = 0;
  std::array<double, 4> best_bleu{0, 0, 0, 0};
  std::vector<EpochMetrics> log;
  BaselineState baseline;
};

// Greedy-decode BLEU of `params` against the references in `indices`.
// Candidates and references are compared without the terminal EOS.
inline std::array<double, 4> validation_bleu(const Dataset& data,
                                             std::span<const std::size_t> indices,
                                             const DecoderParams& params, AttMode mode,
                                             std::uint32_t bos, std::uint32_t eos,
                                             std::size_t max_len, bool apply_gate = true) {
  check(!indices.empty(), "validation_bleu: empty validation set");
  std::vector<std::vector<std::uint32_t>> cands;
  std::vector<std::vector<std::vector<std::uint32_t>>> refs;
  Rng unused(0);  // greedy + argmax attention: nothing is sampled
  GenerateOptions opt;
  opt.mode = mode;
  opt.strategy.kind = GenStrategy::Greedy;
  opt.max_len = max_len;
  opt.bos = bos;
  opt.eos = eos;
  opt.apply_gate = apply_gate;
  for (std::size_t idx : indices) {
    const DataRecord& rec = data.records[idx];
    Generated gen = generate(AnnotationGrid{Tensor(rec.grid)}, params, opt, unused);
    std::vector<std::uint32_t> cand = gen.caption.tokens;
    if (!cand.empty() && cand.back() == eos) cand.pop_back();
    std::vector<std::uint32_t> ref = rec.caption;
    if (!ref.empty() && ref.back() == eos) ref.pop_back();
    cands.push_back(std::move(cand));
    refs.push_back({std::move(ref)});
  }
  return bleu(cands, refs).bleu;
}

// Names the offending parameter block when possible: a non-finite parameter
// is the root cause, a non-finite gradient the next best pointer.
inline void require_finite(double loss, const GradientMap& grads, const DecoderParams& params,
                           std::size_t epoch, std::size_t batch_index) {
  bool any_bad = !std::isfinite(loss);
  std::string bad;
  for (const auto& [name, t] : params.entries())
    if (!t->all_finite()) {
      bad = "parameter block '" + name + "'";
      break;
    }
  if (bad.empty())
    for (const auto& [name, g] : grads)
      if (!g.all_finite()) {
        bad = "gradient block '" + name + "'";
        break;
      }
  any_bad = any_bad || !bad.empty();
  if (!any_bad) return;
  if (bad.empty()) bad = "loss";
  throw numeric_error("non-finite " + bad + " at epoch " + std::to_string(epoch) + ", batch " +
                      std::to_string(batch_index));
}

// Epoch loop with early stopping on validation BLEU-4: keeps the parameters
// from the best epoch and stops once `patience` consecutive epochs fail to
// improve (patience 0 stops after the first epoch).
inline TrainResult train(const Dataset& data, std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, const DecoderParams& initial,
                         const TrainConfig& cfg, std::ostream* metrics_out = nullptr) {
  check(!val_idx.empty(), "train: empty validation set");
  check(data.K >= 1, "train: dataset has no vocabulary");

  DecoderParams params = initial;
  OptimizerState opt_state = OptimizerState::init(cfg.opt, params);
  GraphCache cache(params.dims, data.L, cfg.soft.apply_gate);
  BaselineState baseline;
  Rng root(cfg.seed);

  TrainResult result;
  result.best_params = params;
  double best_bleu4 = -1.0;
  std::size_t strikes = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng epoch_rng = root.split(epoch);
    Rng batch_order_rng = epoch_rng.split(0);
    Rng sample_rng = epoch_rng.split(1);

    double loss_sum = 0.0;
    double grad_norm_sum = 0.0;
    std::size_t batch_count = 0;
    for (const Batch& b : bucket_batches(data, train_idx, cfg.batch_size, batch_order_rng)) {
      GradientMap grads;
      double batch_loss = 0.0;
      if (cfg.mode == AttMode::Soft) {
        SoftLossResult r =
            soft_loss(data, b.indices, params, cfg.soft, cfg.bos, sample_rng, cache);
        grads = std::move(r.grads);
        batch_loss = r.loss;
      } else {
        GradientEstimate est = hard_gradient_estimate(data, b.indices, params, cfg.hard,
                                                      baseline, cfg.bos, sample_rng, cache);
        batch_loss = -est.mean_logp;
        grads = std::move(est.grad);
        for (auto& [_, g] : grads)  // maximize the objective
          for (double& v : g.data) v = -v;
      }
      require_finite(batch_loss, grads, params, epoch, batch_count);
      grad_norm_sum += clip_global_norm(grads, cfg.clip_norm);
      optimizer_step(params, grads, opt_state);
      loss_sum += batch_loss;
      ++batch_count;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(batch_count);
    m.baseline = baseline.b;
    m.grad_norm = grad_norm_sum / static_cast<double>(batch_count);
    m.bleu = validation_bleu(data, val_idx, params, cfg.mode, cfg.bos, cfg.eos,
                             cfg.max_gen_len, cfg.soft.apply_gate);
    m.wall_ms = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                               std::chrono::steady_clock::now() - t0)
                                               .count());
    result.log.push_back(m);
    if (metrics_out) {
      (*metrics_out) << "epoch=" << m.epoch << " mode="
                     << (cfg.mode == AttMode::Soft ? "soft" : "hard") << " loss=" << m.loss
                     << " bleu1=" << m.bleu[0] << " bleu2=" << m.bleu[1]
                     << " bleu3=" << m.bleu[2] << " bleu4=" << m.bleu[3]
                     << " baseline=" << m.baseline << " grad_norm=" << m.grad_norm
                     << " wall_ms=" << m.wall_ms << "\n";
      metrics_out->flush();
    }

    if (m.bleu[3] > best_bleu4) {
      best_bleu4 = m.bleu[3];
      result.best_params = params;
      result.best_epoch = epoch;
      result.best_bleu = m.bleu;
      strikes = 0;
    } else {
      ++strikes;
    }
    if (strikes >= cfg.patience) break;
  }
  result.baseline = baseline;
  return result;
}

}  // namespace attn
