#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "attn/graph.hpp"
#include "attn/rng.hpp"
#include "attn/tensor.hpp"

namespace attn {

// Per-location feature bank the decoder attends over: L rows of D features.
struct AnnotationGrid {
  Tensor features;  // L x D

  AnnotationGrid() = default;
  explicit AnnotationGrid(Tensor f) : features(std::move(f)) {
    check_shape(features.rank() == 2, "annotation grid must be L x D");
    check(features.all_finite(), "annotation grid contains non-finite values");
  }

  std::size_t locations() const { return features.rows(); }
  std::size_t feature_dim() const { return features.cols(); }

  Tensor row(std::size_t i) const {
    Tensor r({feature_dim()});
    for (std::size_t j = 0; j < feature_dim(); ++j) r.data[j] = features.at(i, j);
    return r;
  }
};

struct AttentionWeights {
  Tensor alpha;  // length L, entries in [0,1], summing to 1

  AttentionWeights() = default;
  explicit AttentionWeights(Tensor a) : alpha(std::move(a)) { validate(); }

  void validate() const {
    check_shape(alpha.rank() == 1, "attention weights must be a vector");
    double s = 0.0;
    for (double v : alpha.data) {
      check(v >= 0.0 && v <= 1.0, "attention weight outside [0,1]");
      s += v;
    }
    check(std::fabs(s - 1.0) <= 1e-9, "attention weights do not sum to 1");
  }
};

// Per-timestep attention record for a generated or teacher-forced caption.
// sampled_locations is present on the hard path, betas on the soft path.
struct AttentionTrace {
  std::vector<Tensor> per_step;
  std::optional<std::vector<std::size_t>> sampled_locations;
  std::optional<std::vector<double>> betas;

  std::size_t length() const { return per_step.size(); }
};

// f_att is a one-hidden-layer MLP: score_i = v . tanh(proj_a a_i + proj_h h).
// proj_a is stored D x A so the whole-grid projection is grid * proj_a, which
// is h-independent and computed once per caption. gate_w parameterizes the
// soft path's scalar gate beta = sigmoid(gate_w . h).
struct AttentionParams {
  Tensor proj_a;  // D x A
  Tensor proj_h;  // A x n
  Tensor score;   // A
  Tensor gate_w;  // n

  static AttentionParams init(std::size_t D, std::size_t A, std::size_t n, Rng& rng) {
    AttentionParams p;
    p.proj_a = Tensor({D, A});
    p.proj_h = Tensor({A, n});
    p.score = Tensor({A});
    p.gate_w = Tensor({n});
    fill_glorot(p.proj_a, rng);
    fill_glorot(p.proj_h, rng);
    fill_glorot(p.score, rng);
    fill_glorot(p.gate_w, rng);
    return p;
  }

  std::size_t attn_dim() const { return score.size(); }
  std::size_t hidden_dim() const { return proj_h.cols(); }
};

// e_ti = score . tanh(proj_a a_i + proj_h h_prev), one entry per location.
inline Tensor attention_scores(const AnnotationGrid& grid, const Tensor& h_prev,
                               const AttentionParams& p) {
  check_shape(h_prev.size() == p.hidden_dim(), "attention_scores: hidden state dimension");
  check_shape(grid.feature_dim() == p.proj_a.rows(), "attention_scores: feature dimension");
  const std::size_t L = grid.locations(), A = p.attn_dim();
  const Tensor hproj = matvec(p.proj_h, h_prev);  // [A]
  Tensor e({L});
  for (std::size_t i = 0; i < L; ++i) {
    double s = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      double pre = hproj.data[a];
      for (std::size_t d = 0; d < grid.feature_dim(); ++d)
        pre += grid.features.at(i, d) * p.proj_a.at(d, a);
      s += p.score.data[a] * std::tanh(pre);
    }
    e.data[i] = s;
  }
  return e;
}

inline AttentionWeights attention_weights(const Tensor& e) {
  check(e.all_finite(), "attention_weights: scores must be finite");
  Tensor a = e;
  softmax_inplace(a);
  return AttentionWeights(std::move(a));
}

struct SoftContext {
  Tensor context;  // [D]
  double beta;     // sigmoid gate, 1.0 when the gate is disabled
};

// phi for the deterministic path: beta * sum_i alpha_i a_i.
inline SoftContext soft_context(const AnnotationGrid& grid, const AttentionWeights& w,
                                const Tensor& h_prev, const AttentionParams& p,
                                bool apply_gate = true) {
  check_shape(w.alpha.size() == grid.locations(), "soft_context: weight count");
  SoftContext out;
  out.beta = apply_gate ? 1.0 / (1.0 + std::exp(-dot(p.gate_w, h_prev))) : 1.0;
  out.context = vecmat(w.alpha, grid.features);
  for (auto& v : out.context.data) v *= out.beta;
  return out;
}

struct HardSample {
  std::size_t location;
  Tensor one_hot;  // [L]
  Tensor context;  // the selected annotation row, [D]
};

// phi for the stochastic path: draw s ~ Multinoulli(alpha) and return the
// selected annotation unchanged (the gate only exists on the soft path).
inline HardSample hard_sample(const AnnotationGrid& grid, const AttentionWeights& w, Rng& rng) {
  check_shape(w.alpha.size() == grid.locations(), "hard_sample: weight count");
  HardSample out;
  out.location = rng.categorical(w.alpha.data);
  out.one_hot = Tensor::one_hot(grid.locations(), out.location);
  out.context = grid.row(out.location);
  return out;
}

// H[s] = -sum_i alpha_i ln alpha_i with 0 ln 0 := 0; lies in [0, ln L].
inline double multinoulli_entropy(const AttentionWeights& w) {
  double h = 0.0;
  for (double a : w.alpha.data)
    if (a > 0.0) h -= a * std::log(a);
  return h;
}

// --- graph-side builders -----------------------------------------------
//
// The same attention arithmetic expressed as graph nodes, used by the
// training graphs so gradients flow through the attention MLP.

struct AttentionParamNodes {
  NodeId proj_a, proj_h, score, gate_w;
};

inline AttentionParamNodes attention_param_inputs(Graph& g, std::size_t D, std::size_t A,
                                                  std::size_t n) {
  AttentionParamNodes nodes;
  nodes.proj_a = g.input("att_proj_a", {D, A});
  nodes.proj_h = g.input("att_proj_h", {A, n});
  nodes.score = g.input("att_score", {A});
  nodes.gate_w = g.input("att_gate_w", {n});
  return nodes;
}

// grid_proj = grid * proj_a, shared by every timestep of a caption.
inline NodeId attention_grid_projection(Graph& g, NodeId grid, const AttentionParamNodes& p) {
  return g.matmul(grid, p.proj_a);
}

inline NodeId attention_scores_node(Graph& g, NodeId grid_proj, NodeId h_prev,
                                    const AttentionParamNodes& p) {
  NodeId pre = g.add(grid_proj, g.matmul(p.proj_h, h_prev));  // [L x A] + [A]
  return g.matmul(g.tanh(pre), p.score);                      // [L]
}

inline NodeId attention_weights_node(Graph& g, NodeId scores) { return g.softmax(scores); }

// Soft context node; when gated, also emits the beta node.
inline NodeId soft_context_node(Graph& g, NodeId grid, NodeId alpha, NodeId h_prev,
                                const AttentionParamNodes& p, bool apply_gate,
                                NodeId* beta_out = nullptr) {
  NodeId ctx = g.matmul(alpha, grid);  // [D]
  if (!apply_gate) {
    if (beta_out) *beta_out = NodeId{};
    return ctx;
  }
  NodeId beta = g.sigmoid(g.dot(p.gate_w, h_prev));
  if (beta_out) *beta_out = beta;
  return g.mul(ctx, beta);
}

// -sum_i alpha_i log alpha_i. Softmax with max-subtraction keeps alpha
// strictly positive for the score ranges seen in training.
inline NodeId entropy_node(Graph& g, NodeId alpha) {
  return g.scalar_mul(g.sum(g.mul(alpha, g.log(alpha))), -1.0);
}

}  // namespace attn
