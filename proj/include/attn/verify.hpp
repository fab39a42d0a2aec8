#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "attn/checkpoint.hpp"
#include "attn/evalviz.hpp"
#include "attn/training.hpp"

namespace attn {

// Self-contained verification suites behind the `verify` command: the
// deterministic identities run at level "fast", the Monte Carlo estimator
// suites at level "full". Each check is also callable on its own so the
// acceptance harness can reuse the exact same code with its own knobs.

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double ms = 0.0;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  bool full = false;
  bool inject_gradient_bug = false;  // proves the harness catches a corrupted gradient
};

namespace verify_detail {

inline Tensor random_vec(std::size_t n, Rng& rng, double radius = 1.0) {
  Tensor t({n});
  fill_uniform(t, rng, radius);
  return t;
}

inline Tensor random_mat(std::size_t r, std::size_t c, Rng& rng, double radius = 1.0) {
  Tensor t({r, c});
  fill_uniform(t, rng, radius);
  return t;
}

inline ModelDims tiny_dims() { return ModelDims{9, 5, 6, 4, 4}; }

inline Dataset tiny_dataset(const ModelDims& d, std::size_t L,
                            const std::vector<std::size_t>& lengths, Rng& rng) {
  Dataset ds;
  ds.L = static_cast<std::uint32_t>(L);
  ds.D = static_cast<std::uint32_t>(d.D);
  ds.K = static_cast<std::uint32_t>(d.K);
  for (std::size_t len : lengths) {
    DataRecord rec;
    rec.grid = Tensor({L, d.D});
    fill_uniform(rec.grid, rng, 1.0);
    for (std::size_t t = 0; t + 1 < len; ++t)
      rec.caption.push_back(static_cast<std::uint32_t>(2 + rng.uniform_index(d.K - 2)));
    rec.caption.push_back(Vocabulary::kEos);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

inline std::map<std::string, Tensor> unrolled_bindings(const UnrolledGraph& u,
                                                       const DecoderParams& params,
                                                       const DataRecord& rec) {
  std::map<std::string, Tensor> bind = param_bindings(params, u.g);
  bind["grid"] = rec.grid;
  bind["y0"] = Tensor::one_hot(params.dims.K, Vocabulary::kBos);
  for (std::size_t t = 0; t < rec.caption.size(); ++t)
    bind["y" + std::to_string(t + 1)] = Tensor::one_hot(params.dims.K, rec.caption[t]);
  Tensor ones({params.dims.n});
  ones.fill(1.0);
  for (std::size_t t = 1; t <= rec.caption.size(); ++t)
    bind["mask" + std::to_string(t)] = ones;
  return bind;
}

}  // namespace verify_detail

// --- deterministic identity checks (level fast) -------------------------------

inline CheckResult check_primitive_gradients(std::uint64_t seed, bool inject_bug) {
  using namespace verify_detail;
  CheckResult r{"graph.primitive_gradients"};
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Graph g;
    auto x = g.input("x", Shape{5});
    auto M = g.input("M", Shape{3, 5});
    auto v = g.input("v", Shape{3});
    auto mixed = g.concat({g.matmul(M, x), v});
    auto act = g.concat({g.sigmoid(mixed), g.tanh(mixed), g.exp(g.scalar_mul(mixed, 0.4)),
                         g.square(mixed)});
    auto sm = g.softmax(g.slice(act, 0, 8));
    auto out = g.add(g.sum(g.mul(sm, g.slice(act, 8, 8))), g.mean(g.softmax(M, 1), -1));
    g.label(g.sum(g.concat({out, g.log(g.exp(x))}), -1), "out");

    std::map<std::string, Tensor> bind{{"x", random_vec(5, rng)},
                                       {"M", random_mat(3, 5, rng)},
                                       {"v", random_vec(3, rng)}};
    std::vector<std::string> wrt{"x", "M", "v"};
    GradientMap analytic = backward(g, bind, "out", wrt);
    if (inject_bug && trial == 3) analytic.at("M").data[4] += 0.1;
    auto report = grad_check_against(g, bind, "out", analytic, 1e-5, 1e-4);
    worst = std::max(worst, report.worst());
  }
  r.pass = worst < 1e-4;
  std::ostringstream os;
  os << "max rel err " << worst << " over 10 random points";
  r.detail = os.str();
  return r;
}

inline CheckResult check_softmax_simplex(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"graph.softmax_simplex"};
  Rng rng(seed);
  double worst_sum = 0.0, worst_shift = 0.0;
  bool nonneg = true;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor e = random_vec(9, rng, 30.0);
    AttentionWeights w = attention_weights(e);
    double s = 0.0;
    for (double v : w.alpha.data) {
      nonneg = nonneg && v >= 0.0;
      s += v;
    }
    worst_sum = std::max(worst_sum, std::fabs(s - 1.0));
    Tensor shifted = e;
    for (auto& v : shifted.data) v += 11.25;
    AttentionWeights w2 = attention_weights(shifted);
    for (std::size_t i = 0; i < e.size(); ++i)
      worst_shift = std::max(worst_shift, std::fabs(w.alpha.data[i] - w2.alpha.data[i]));
  }
  r.pass = nonneg && worst_sum < 1e-12 && worst_shift < 1e-12;
  std::ostringstream os;
  os << "sum dev " << worst_sum << ", shift dev " << worst_shift;
  r.detail = os.str();
  return r;
}

inline CheckResult check_evaluate_purity(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"graph.evaluate_purity"};
  Rng rng(seed);
  Graph g;
  g.input("x", Shape{8});
  g.input("W", Shape{6, 8});
  g.label(g.sum(g.softmax(g.tanh(g.matmul(g.by_name("W"), g.by_name("x"))))), "out");
  std::map<std::string, Tensor> bind{{"x", random_vec(8, rng)}, {"W", random_mat(6, 8, rng)}};
  auto v1 = evaluate(g, bind);
  auto v2 = evaluate(g, bind);
  r.pass = v1.at("out").data == v2.at("out").data;
  r.detail = "two evaluations bitwise identical";
  return r;
}

inline CheckResult check_attention_identities(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"attention.identities"};
  Rng rng(seed);
  bool ok = true;

  AttentionParams zero = AttentionParams::init(4, 3, 6, rng);
  zero.proj_a.fill(0.0);
  zero.proj_h.fill(0.0);
  zero.score.fill(0.0);
  AnnotationGrid grid{random_mat(5, 4, rng)};
  Tensor e = attention_scores(grid, random_vec(6, rng), zero);
  for (double v : e.data) ok = ok && v == 0.0;

  AttentionWeights w = attention_weights(Tensor::of({std::log(1.0), std::log(3.0)}));
  ok = ok && std::fabs(w.alpha.data[0] - 0.25) < 1e-12 &&
       std::fabs(w.alpha.data[1] - 0.75) < 1e-12;

  ok = ok && multinoulli_entropy(AttentionWeights(Tensor::one_hot(4, 1))) == 0.0;
  Tensor u({4});
  u.fill(0.25);
  ok = ok && std::fabs(multinoulli_entropy(AttentionWeights(u)) - std::log(4.0)) < 1e-12;
  ok = ok &&
       std::fabs(multinoulli_entropy(AttentionWeights(Tensor::of({0.25, 0.75}))) - 0.562335) <
           5e-7;
  r.pass = ok;
  r.detail = "zero-parameter scores, analytic softmax, entropy values";
  return r;
}

inline CheckResult check_decoder_zero_cases(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"decoder.zero_cases"};
  Rng rng(seed);
  DecoderParams p = DecoderParams::init(tiny_dims(), rng);
  for (auto& [_, t] : p.entries()) t->fill(0.0);
  AnnotationGrid grid{random_mat(4, 4, rng)};
  DecoderState s0 = init_state(grid, p);
  bool ok = true;
  for (double v : s0.h.data) ok = ok && v == 0.0;
  for (double v : s0.c.data) ok = ok && v == 0.0;
  DecoderState s1 = lstm_step(random_vec(5, rng), s0, random_vec(4, rng), p);
  for (double v : s1.c.data) ok = ok && v == 0.0;
  for (double v : s1.h.data) ok = ok && v == 0.0;
  Tensor dist = output_distribution(1, s1, random_vec(4, rng), p);
  for (double v : dist.data) ok = ok && std::fabs(v - 1.0 / 9.0) < 1e-14;
  r.pass = ok;
  r.detail = "zero parameters: zero states, uniform output";
  return r;
}

inline CheckResult check_soft_step_gradient(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"decoder.soft_step_gradient"};
  Rng rng(seed);
  const ModelDims d{6, 4, 5, 3, 4};
  DecoderParams params = DecoderParams::init(d, rng);
  const std::size_t L = 4;
  Graph g;
  DecoderParamNodes pn = decoder_param_inputs(g, d, true);
  NodeId grid = g.input("grid", {L, d.D});
  NodeId grid_proj = attention_grid_projection(g, grid, pn.att);
  StepInputs in;
  in.h_prev = g.input("h_prev", {d.n});
  in.c_prev = g.input("c_prev", {d.n});
  in.y_prev = g.input("y_prev", {d.K});
  in.y_target = g.input("y_target", {d.K});
  in.drop_mask = g.input("mask", {d.n});
  StepNodes step = build_step(g, pn, d, grid, grid_proj, in, AttMode::Soft, true);
  g.label(g.scalar_mul(step.logp_word, -1.0), "loss");

  std::map<std::string, Tensor> bind = param_bindings(params, g);
  bind["grid"] = random_mat(L, d.D, rng);
  bind["h_prev"] = random_vec(d.n, rng, 0.8);
  bind["c_prev"] = random_vec(d.n, rng);
  bind["y_prev"] = Tensor::one_hot(d.K, 2);
  bind["y_target"] = Tensor::one_hot(d.K, 4);
  Tensor ones({d.n});
  ones.fill(1.0);
  bind["mask"] = ones;
  std::vector<std::string> wrt = params.names(AttMode::Soft);
  auto report = grad_check(g, bind, "loss", wrt, 1e-5, 1e-4);
  r.pass = report.passed();
  std::ostringstream os;
  os << "max rel err " << report.worst();
  r.detail = os.str();
  return r;
}

// Criterion-1 instance: full soft loss (NLL + penalty + gate) at
// K=12, L=4, C=3, n=m=8, D=6; every parameter block under 1e-4.
inline CheckResult check_soft_loss_gradient(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"training.soft_loss_gradient"};
  Rng rng(seed);
  const ModelDims d{12, 8, 8, 6, 8};
  const std::size_t L = 4, C = 3;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);
  UnrolledGraph u = build_unrolled(d, L, C, TrajectoryKind::Soft);
  auto bind = unrolled_bindings(u, params, ds.records[0]);
  bind["lambda_pen"] = Tensor::scalar(1.0);
  std::vector<std::string> wrt = params.names(AttMode::Soft);
  auto report = grad_check(u.g, bind, "loss", wrt, 1e-5, 1e-4);
  r.pass = report.passed();
  std::ostringstream os;
  os << "max rel err " << report.worst() << " over " << wrt.size() << " parameter blocks";
  r.detail = os.str();
  return r;
}

inline CheckResult check_nwgm_identity(std::uint64_t seed, int instances = 100) {
  using namespace verify_detail;
  CheckResult r{"attention.nwgm_identity"};
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < instances; ++trial) {
    const ModelDims d{8, 5, 6, 4, 5};
    DecoderParams p = DecoderParams::init(d, rng);
    const std::size_t L = 2 + rng.uniform_index(4);
    AnnotationGrid grid{random_mat(L, d.D, rng)};
    DecoderState state = init_state(grid, p);
    const auto prev = static_cast<std::uint32_t>(rng.uniform_index(d.K));
    AttentionWeights w = attention_weights(attention_scores(grid, state.h, p.att));

    std::vector<std::vector<double>> logits(L, std::vector<double>(d.K));
    for (std::size_t i = 0; i < L; ++i) {
      Tensor a_i = grid.row(i);
      DecoderState s_i = lstm_step(embedding_column(p, prev), state, a_i, p);
      Tensor inner = embedding_column(p, prev);
      Tensor hh = matvec(p.out_h, s_i.h);
      Tensor zz = matvec(p.out_z, a_i);
      for (std::size_t k = 0; k < d.m; ++k) inner.data[k] += hh.data[k] + zz.data[k];
      Tensor lg = matvec(p.out_W, inner);
      logits[i].assign(lg.data.begin(), lg.data.end());
    }

    std::vector<double> nwgm(d.K, 0.0);
    for (std::size_t i = 0; i < L; ++i) {
      double mx = logits[i][0];
      for (double v : logits[i]) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : logits[i]) z += std::exp(v - mx);
      for (std::size_t k = 0; k < d.K; ++k)
        nwgm[k] += w.alpha.data[i] * (logits[i][k] - mx - std::log(z));
    }
    double nz = 0.0;
    for (auto& v : nwgm) {
      v = std::exp(v);
      nz += v;
    }
    for (auto& v : nwgm) v /= nz;

    Tensor expected({d.K});
    for (std::size_t k = 0; k < d.K; ++k)
      for (std::size_t i = 0; i < L; ++i) expected.data[k] += w.alpha.data[i] * logits[i][k];
    softmax_inplace(expected);
    for (std::size_t k = 0; k < d.K; ++k)
      worst = std::max(worst, std::fabs(nwgm[k] - expected.data[k]));
  }
  r.pass = worst < 1e-10;
  std::ostringstream os;
  os << "max deviation " << worst << " over " << instances << " instances";
  r.detail = os.str();
  return r;
}

// Criterion 6: penalty zero iff every column sum of alpha is 1 (within 1e-9);
// its gradient is covered by check_soft_loss_gradient (lambda bound to 1).
inline CheckResult check_penalty_iff(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"training.penalty_iff_zero"};
  Rng rng(seed);
  const ModelDims d = tiny_dims();
  bool ok = true;

  {
    // L=1, C=1: the single column sums to exactly 1, penalty exactly 0.
    DecoderParams params = DecoderParams::init(d, rng);
    Dataset ds = tiny_dataset(d, 1, {1}, rng);
    GraphCache cache(d, 1, true);
    SoftLossConfig cfg;
    cfg.dropout_rate = 0.0;
    std::vector<std::size_t> idx{0};
    Rng lr(1);
    SoftLossResult res = soft_loss(ds, idx, params, cfg, Vocabulary::kBos, lr, cache);
    ok = ok && std::fabs(res.mean_penalty) < 1e-18;
    ok = ok && std::fabs(res.mean_alpha_colsum.data[0] - 1.0) < 1e-9;
  }
  {
    // Uniform attention over L=4 at C=1: column sums 1/4, penalty 2.25.
    DecoderParams params = DecoderParams::init(d, rng);
    params.att.proj_a.fill(0.0);
    params.att.proj_h.fill(0.0);
    params.att.score.fill(0.0);
    Dataset ds = tiny_dataset(d, 4, {1}, rng);
    GraphCache cache(d, 4, true);
    SoftLossConfig cfg;
    cfg.dropout_rate = 0.0;
    std::vector<std::size_t> idx{0};
    Rng lr(2);
    SoftLossResult res = soft_loss(ds, idx, params, cfg, Vocabulary::kBos, lr, cache);
    ok = ok && std::fabs(res.mean_penalty - 2.25) < 1e-12;
    bool deviates = false;
    for (double v : res.mean_alpha_colsum.data) deviates = deviates || std::fabs(v - 1.0) > 1e-9;
    ok = ok && deviates && res.mean_penalty > 0.0;
  }
  r.pass = ok;
  r.detail = "zero exactly at unit column sums, 2.25 at uniform quarter sums";
  return r;
}

inline CheckResult check_bleu_oracles() {
  CheckResult r{"evalviz.bleu_oracles"};
  using Sent = std::vector<std::string>;
  bool ok = true;
  {
    Sent s{"a", "red", "square", "left", "of", "a", "blue", "circle"};
    auto rep = bleu<std::string>({s}, {{s}});
    for (double v : rep.bleu) ok = ok && std::fabs(v - 1.0) < 1e-12;
  }
  {
    auto rep = bleu<std::string>({{"a", "a", "a", "a"}}, {{{"a", "b"}}});
    ok = ok && std::fabs(rep.bleu[0] - 0.25) < 1e-12;
  }
  {
    auto rep = bleu<std::string>({{"a", "c", "b", "d"}}, {{{"a", "b", "c", "d"}}});
    ok = ok && std::fabs(rep.bleu[0] - 1.0) < 1e-12 && rep.bleu[1] == 0.0 && rep.bleu[3] == 0.0;
  }
  r.pass = ok;
  r.detail = "identity, clipping, zero-overlap cases";
  return r;
}

inline CheckResult check_file_formats(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"formats.roundtrip_and_errors"};
  Rng rng(seed);
  const auto dir = std::filesystem::temp_directory_path() / "attn_verify";
  std::filesystem::create_directories(dir);
  bool ok = true;
  std::string why;

  try {
    SceneSpec spec;
    Vocabulary vocab = Vocabulary::build(spec);
    Dataset ds = build_dataset(spec, 8, seed, vocab);
    const auto p1 = dir / "ds.bin";
    write_annotations(ds, p1);
    Dataset back = read_annotations(p1);
    ok = ok && back.records.size() == ds.records.size();
    const auto p2 = dir / "ds2.bin";
    write_annotations(back, p2);
    ByteReader a = ByteReader::from_file(p1);
    ByteReader b = ByteReader::from_file(p2);
    ok = ok && a.bytes(a.remaining()) == b.bytes(b.remaining());

    ByteReader again = ByteReader::from_file(p1);
    std::string bytes = again.bytes(again.remaining());
    std::string bad = bytes;
    bad[0] = 'Z';
    const auto pb = dir / "ds_bad.bin";
    std::ofstream(pb, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    try {
      read_annotations(pb);
      ok = false;
      why = "bad magic accepted";
    } catch (const bad_magic_error&) {
    }
    std::string trunc = bytes.substr(0, bytes.size() - 5);
    const auto pt = dir / "ds_trunc.bin";
    std::ofstream(pt, std::ios::binary)
        .write(trunc.data(), static_cast<std::streamsize>(trunc.size()));
    try {
      read_annotations(pt);
      ok = false;
      why = "truncated file accepted";
    } catch (const truncated_error&) {
    }

    DecoderParams params = DecoderParams::init(tiny_dims(), rng);
    const auto pc = dir / "ck.bin";
    save_checkpoint(params, AttMode::Soft, pc);
    Checkpoint ck = load_checkpoint(pc);
    for (const auto& [name, tensor] : params.entries())
      ok = ok && *tensor == ck.params.by_name(name);
  } catch (const std::exception& e) {
    ok = false;
    why = e.what();
  }
  std::filesystem::remove_all(dir);
  r.pass = ok;
  r.detail = ok ? "dataset and checkpoint round-trips, typed error paths" : why;
  return r;
}

inline CheckResult check_determinism(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"determinism.fixed_seed"};
  SceneSpec spec;
  Vocabulary vocab = Vocabulary::build(spec);
  Dataset a = build_dataset(spec, 30, seed, vocab);
  Dataset b = build_dataset(spec, 30, seed, vocab);
  bool ok = a.records.size() == b.records.size();
  for (std::size_t i = 0; ok && i < a.records.size(); ++i)
    ok = a.records[i].caption == b.records[i].caption && a.records[i].grid == b.records[i].grid;

  Rng rng(seed);
  DecoderParams p = DecoderParams::init(tiny_dims(), rng);
  AnnotationGrid grid{random_mat(4, 4, rng)};
  GenerateOptions opt;
  opt.mode = AttMode::Hard;
  opt.sample_attention = true;
  opt.max_len = 6;
  Rng g1(seed + 1), g2(seed + 1);
  Generated x = generate(grid, p, opt, g1);
  Generated y = generate(grid, p, opt, g2);
  ok = ok && x.caption.tokens == y.caption.tokens &&
       *x.trace.sampled_locations == *y.trace.sampled_locations;
  r.pass = ok;
  r.detail = "corpus and hard-attention decode reproduce bitwise";
  return r;
}

inline CheckResult check_beam_one_greedy(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"decoder.beam1_equals_greedy"};
  Rng rng(seed);
  bool ok = true;
  for (int trial = 0; trial < 5; ++trial) {
    DecoderParams p = DecoderParams::init(tiny_dims(), rng);
    AnnotationGrid grid{random_mat(4, 4, rng)};
    GenerateOptions opt;
    opt.max_len = 8;
    Rng r1(1), r2(1);
    Generated a = generate(grid, p, opt, r1);
    opt.strategy.kind = GenStrategy::Beam;
    opt.strategy.width = 1;
    Generated b = generate(grid, p, opt, r2);
    ok = ok && a.caption.tokens == b.caption.tokens;
  }
  r.pass = ok;
  r.detail = "5 random models";
  return r;
}

// --- Monte Carlo suites (level full) ----------------------------------------

inline CheckResult check_expectation_identity(std::uint64_t seed, int samples = 50000) {
  using namespace verify_detail;
  CheckResult r{"attention.expectation_identity"};
  Rng rng(seed);
  AnnotationGrid grid{random_mat(5, 4, rng, 2.0)};
  AttentionWeights w = attention_weights(random_vec(5, rng, 1.5));
  AttentionParams p = AttentionParams::init(4, 3, 6, rng);
  SoftContext expected = soft_context(grid, w, random_vec(6, rng), p, false);

  Tensor mean({4}), m2({4});
  for (int k = 1; k <= samples; ++k) {
    HardSample s = hard_sample(grid, w, rng);
    for (std::size_t d = 0; d < 4; ++d) {
      const double delta = s.context.data[d] - mean.data[d];
      mean.data[d] += delta / k;
      m2.data[d] += delta * (s.context.data[d] - mean.data[d]);
    }
  }
  bool ok = true;
  double worst_sigmas = 0.0;
  for (std::size_t d = 0; d < 4; ++d) {
    const double se = std::sqrt(m2.data[d] / (samples - 1) / samples);
    const double sig = std::fabs(mean.data[d] - expected.context.data[d]) / (se + 1e-300);
    worst_sigmas = std::max(worst_sigmas, sig);
    ok = ok && sig <= 3.0;
  }
  r.pass = ok;
  std::ostringstream os;
  os << "worst deviation " << worst_sigmas << " standard errors over " << samples << " draws";
  r.detail = os.str();
  return r;
}

inline CheckResult check_hard_sample_frequency(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"attention.hard_sample_frequency"};
  Rng rng(seed);
  AnnotationGrid grid{random_mat(2, 3, rng)};
  AttentionWeights w(Tensor::of({0.5, 0.5}));
  int zeros = 0;
  for (int i = 0; i < 10000; ++i)
    if (hard_sample(grid, w, rng).location == 0) ++zeros;
  const double freq = zeros / 10000.0;
  r.pass = freq >= 0.48 && freq <= 0.52;
  std::ostringstream os;
  os << "frequency " << freq << " (3 sigma band [0.48, 0.52])";
  r.detail = os.str();
  return r;
}

struct EstimatorCheckStats {
  std::size_t total = 0, within = 0;
};

// Shared core of criteria 3 and 4a: mean of single-sample estimates against
// the enumerated exact gradient, 3 standard errors per coordinate.
inline EstimatorCheckStats estimator_agreement(std::uint64_t seed, std::size_t samples,
                                               double constant_baseline) {
  using namespace verify_detail;
  Rng rng(seed);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 2;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);
  GraphCache cache(d, L, true);

  ExactHardResult exact = exact_hard_objective(AnnotationGrid{Tensor(ds.records[0].grid)},
                                               CaptionSequence{ds.records[0].caption}, params,
                                               Vocabulary::kBos);
  HardLossConfig cfg;
  cfg.lambda_r = 1.0;
  cfg.lambda_e = 0.0;
  cfg.expectation_substitution_prob = 0.0;
  cfg.dropout_rate = 0.0;
  cfg.sample_count = samples;
  BaselineState baseline;
  baseline.b = constant_baseline;
  std::vector<std::size_t> idx{0};
  Rng est_rng(seed + 1);
  GradientEstimate est = hard_gradient_estimate(ds, idx, params, cfg, baseline, Vocabulary::kBos,
                                                est_rng, cache, true);

  EstimatorCheckStats stats;
  for (const auto& [name, mean] : est.grad) {
    const Tensor& var = est.per_coord_variance->at(name);
    const Tensor& ref = exact.grads.at(name);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double se = std::sqrt(var.data[i] / static_cast<double>(samples));
      ++stats.total;
      if (std::fabs(mean.data[i] - ref.data[i]) <= 3.0 * se + 1e-12) ++stats.within;
    }
  }
  return stats;
}

inline CheckResult check_estimator_unbiased(std::uint64_t seed, std::size_t samples = 20000,
                                            double required_fraction = 0.99) {
  CheckResult r{"training.estimator_unbiased"};
  EstimatorCheckStats s = estimator_agreement(seed, samples, 0.0);
  r.pass = static_cast<double>(s.within) >= required_fraction * static_cast<double>(s.total);
  std::ostringstream os;
  os << s.within << "/" << s.total << " coordinates within 3 SE (" << samples << " samples)";
  r.detail = os.str();
  return r;
}

inline CheckResult check_baseline_neutrality(std::uint64_t seed, std::size_t samples = 20000,
                                             double required_fraction = 0.99) {
  CheckResult r{"training.baseline_neutrality"};
  EstimatorCheckStats s = estimator_agreement(seed, samples, -7.5);
  r.pass = static_cast<double>(s.within) >= required_fraction * static_cast<double>(s.total);
  std::ostringstream os;
  os << s.within << "/" << s.total << " coordinates within 3 SE at constant baseline -7.5";
  r.detail = os.str();
  return r;
}

inline CheckResult check_variance_reduction(std::uint64_t seed, std::size_t samples = 5000) {
  using namespace verify_detail;
  CheckResult r{"training.baseline_variance_reduction"};
  Rng rng(seed);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 2;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);
  GraphCache cache(d, L, true);

  HardLossConfig cfg;
  cfg.lambda_r = 1.0;
  cfg.lambda_e = 0.0;
  cfg.expectation_substitution_prob = 0.0;
  cfg.dropout_rate = 0.0;

  BaselineState warmed;
  {
    Rng warm_rng(seed + 1);
    std::vector<std::size_t> idx{0};
    for (int i = 0; i < 200; ++i)
      hard_gradient_estimate(ds, idx, params, cfg, warmed, Vocabulary::kBos, warm_rng, cache);
  }

  cfg.sample_count = samples;
  std::vector<std::size_t> idx{0};
  BaselineState frozen;
  frozen.b = warmed.b;
  Rng r1(seed + 2);
  GradientEstimate with_b =
      hard_gradient_estimate(ds, idx, params, cfg, frozen, Vocabulary::kBos, r1, cache, true);
  BaselineState zero;
  Rng r2(seed + 2);
  GradientEstimate no_b =
      hard_gradient_estimate(ds, idx, params, cfg, zero, Vocabulary::kBos, r2, cache, true);

  std::size_t total = 0, worse = 0;
  const double se_scale = std::sqrt(2.0 / static_cast<double>(samples - 1));
  for (const auto& [name, var_b] : *with_b.per_coord_variance) {
    const Tensor& var_0 = no_b.per_coord_variance->at(name);
    for (std::size_t i = 0; i < var_b.size(); ++i) {
      ++total;
      const double se =
          se_scale * std::sqrt(var_b.data[i] * var_b.data[i] + var_0.data[i] * var_0.data[i]);
      if (var_b.data[i] - var_0.data[i] > 3.0 * se) ++worse;
    }
  }
  r.pass = static_cast<double>(worse) <= 0.10 * static_cast<double>(total);
  std::ostringstream os;
  os << worse << "/" << total << " coordinates strictly worse beyond 3 sigma (baseline "
     << warmed.b << ")";
  r.detail = os.str();
  return r;
}

inline CheckResult check_lower_bound(std::uint64_t seed, int instances = 50) {
  using namespace verify_detail;
  CheckResult r{"training.variational_lower_bound"};
  Rng rng(seed);
  const ModelDims d = tiny_dims();
  double worst_margin = HUGE_VAL;
  for (int trial = 0; trial < instances; ++trial) {
    DecoderParams params = DecoderParams::init(d, rng);
    const std::size_t L = 2 + rng.uniform_index(2);
    const std::size_t C = 1 + rng.uniform_index(2);
    Dataset ds = tiny_dataset(d, L, {C}, rng);
    ExactHardResult ex = exact_hard_objective(AnnotationGrid{Tensor(ds.records[0].grid)},
                                              CaptionSequence{ds.records[0].caption}, params,
                                              Vocabulary::kBos);
    worst_margin = std::min(worst_margin, ex.marginal_logp - ex.Ls);
  }
  r.pass = worst_margin >= -1e-12;
  std::ostringstream os;
  os << "min(log p(y|a) - L_s) = " << worst_margin << " over " << instances << " instances";
  r.detail = os.str();
  return r;
}

inline CheckResult check_optimizer_descent(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"training.optimizer_descent"};
  Rng rng(seed);
  const ModelDims d = tiny_dims();
  Dataset ds = tiny_dataset(d, 3, {4, 4, 4, 4}, rng);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  bool ok = true;
  for (OptAlg alg : {OptAlg::RmsProp, OptAlg::Adam}) {
    DecoderParams params = DecoderParams::init(d, rng);
    GraphCache cache(d, 3, true);
    SoftLossConfig cfg;
    cfg.dropout_rate = 0.0;
    Rng r1(1);
    SoftLossResult before = soft_loss(ds, idx, params, cfg, Vocabulary::kBos, r1, cache);
    OptimizerConfig ocfg;
    ocfg.alg = alg;
    ocfg.lr = 1e-4;
    OptimizerState state = OptimizerState::init(ocfg, params);
    optimizer_step(params, before.grads, state);
    Rng r2(1);
    SoftLossResult after = soft_loss(ds, idx, params, cfg, Vocabulary::kBos, r2, cache);
    ok = ok && after.loss < before.loss;
  }
  r.pass = ok;
  r.detail = "one step at lr 1e-4 decreases the soft loss (both algorithms)";
  return r;
}

inline CheckResult check_noise_sigma(std::uint64_t seed) {
  using namespace verify_detail;
  CheckResult r{"data.noise_sigma"};
  SceneSpec spec;
  Scene scene;
  scene.grid_side = spec.grid_side;
  scene.objects = {SceneObject{0, 0, 0}};
  Rng rng(seed);
  double sum = 0.0, sq = 0.0;
  const int N = 10000;
  for (int i = 0; i < N; ++i) {
    AnnotationGrid g = encode_scene(scene, spec, rng);
    const double v = g.features.at(3, 0);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / N;
  const double sd = std::sqrt(sq / N - mean * mean);
  r.pass = sd >= 0.045 && sd <= 0.055;
  std::ostringstream os;
  os << "sample std " << sd << " (target band [0.045, 0.055])";
  r.detail = os.str();
  return r;
}

// --- driver ------------------------------------------------------------------

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

inline VerifyReport run_verification(const VerifyOptions& opt) {
  VerifyReport report;
  auto run = [&](std::function<CheckResult()> fn) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult c = fn();
    c.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
               .count();
    report.checks.push_back(std::move(c));
  };

  const std::uint64_t s = opt.seed;
  run([&] { return check_primitive_gradients(s, opt.inject_gradient_bug); });
  run([&] { return check_softmax_simplex(s + 1); });
  run([&] { return check_evaluate_purity(s + 2); });
  run([&] { return check_attention_identities(s + 3); });
  run([&] { return check_decoder_zero_cases(s + 4); });
  run([&] { return check_soft_step_gradient(17); });
  run([&] { return check_soft_loss_gradient(s + 6); });
  run([&] { return check_nwgm_identity(s + 7); });
  run([&] { return check_penalty_iff(s + 8); });
  run([&] { return check_bleu_oracles(); });
  run([&] { return check_file_formats(s + 9); });
  run([&] { return check_determinism(s + 10); });
  run([&] { return check_beam_one_greedy(s + 11); });
  run([&] { return check_lower_bound(s + 12, 10); });

  if (opt.full) {
    run([&] { return check_expectation_identity(s + 13); });
    run([&] { return check_hard_sample_frequency(s + 14); });
    run([&] { return check_estimator_unbiased(s + 15); });
    run([&] { return check_baseline_neutrality(s + 16); });
    run([&] { return check_variance_reduction(s + 17); });
    run([&] { return check_lower_bound(s + 18, 50); });
    run([&] { return check_optimizer_descent(s + 19); });
    run([&] { return check_noise_sigma(s + 20); });
  }
  return report;
}

}  // namespace attn
