#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "attn/training.hpp"

using namespace attn;

namespace {

constexpr std::uint32_t kBos = Vocabulary::kBos;  // 0
constexpr std::uint32_t kEos = Vocabulary::kEos;  // 1

// Tiny synthetic dataset with random grids and random captions of the given
// lengths (terminal EOS included in each length).
Dataset tiny_dataset(const ModelDims& d, std::size_t L, std::vector<std::size_t> lengths,
                     Rng& rng) {
  Dataset ds;
  ds.L = static_cast<std::uint32_t>(L);
  ds.D = static_cast<std::uint32_t>(d.D);
  ds.K = static_cast<std::uint32_t>(d.K);
  for (std::size_t len : lengths) {
    DataRecord rec;
    rec.grid = Tensor({L, d.D});
    fill_uniform(rec.grid, rng, 1.0);
    for (std::size_t t = 0; t + 1 < len; ++t)
      rec.caption.push_back(
          static_cast<std::uint32_t>(2 + rng.uniform_index(d.K - 2)));
    rec.caption.push_back(kEos);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

ModelDims tiny_dims() { return ModelDims{9, 5, 6, 4, 4}; }

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

}  // namespace

TEST_CASE("soft graph value path matches the plain teacher-forced path") {
  Rng rng(1);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {4}, rng);
  const DataRecord& rec = ds.records[0];

  UnrolledGraph u = build_unrolled(d, L, rec.caption.size(), TrajectoryKind::Soft);
  Evaluation ev(u.g);
  bind_params(ev, params);
  ev.bind("grid", rec.grid);
  bind_caption(ev, rec.caption, kBos);
  for (std::size_t t = 1; t <= rec.caption.size(); ++t)
    ev.bind_fill("mask" + std::to_string(t), 1.0);
  ev.bind_scalar("lambda_pen", 0.7);
  ev.run();

  ForcedResult plain =
      teacher_forced(AnnotationGrid{Tensor(rec.grid)}, CaptionSequence{rec.caption}, params, kBos);
  REQUIRE(ev.value("nll").data[0] == Catch::Approx(-plain.logp_y).margin(1e-11));
  REQUIRE(ev.value("entropy").data[0] == Catch::Approx(plain.entropy_sum).margin(1e-11));

  // Penalty recomputed from the plain trace.
  double pen = 0.0;
  for (std::size_t i = 0; i < L; ++i) {
    double colsum = 0.0;
    for (const Tensor& alpha : plain.trace.per_step) colsum += alpha.data[i];
    pen += (1.0 - colsum) * (1.0 - colsum);
  }
  REQUIRE(ev.value("penalty").data[0] == Catch::Approx(pen).margin(1e-11));
  REQUIRE(ev.value("loss").data[0] ==
          Catch::Approx(-plain.logp_y + 0.7 * pen).margin(1e-10));
}

TEST_CASE("soft_loss: zero penalty weight reduces to the mean NLL") {
  Rng rng(2);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, 3, {5, 5, 5}, rng);
  GraphCache cache(d, 3, true);
  SoftLossConfig cfg;
  cfg.lambda_penalty = 0.0;
  cfg.dropout_rate = 0.0;
  auto idx = iota_indices(3);
  Rng loss_rng(3);
  SoftLossResult r = soft_loss(ds, idx, params, cfg, kBos, loss_rng, cache);

  double nll = 0.0;
  for (const auto& rec : ds.records) {
    ForcedResult f = teacher_forced(AnnotationGrid{Tensor(rec.grid)},
                                    CaptionSequence{rec.caption}, params, kBos);
    nll -= f.logp_y / 3.0;
  }
  REQUIRE(r.loss == Catch::Approx(nll).margin(1e-10));
  REQUIRE(r.mean_penalty > 0.0);  // reported even when unweighted
}

TEST_CASE("soft_loss: penalty arithmetic at degenerate attention") {
  Rng rng(4);
  ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);

  SECTION("single location: column sum is exactly one at C=1, penalty zero") {
    Dataset ds = tiny_dataset(d, 1, {1}, rng);
    GraphCache cache(d, 1, true);
    SoftLossConfig cfg;
    cfg.dropout_rate = 0.0;
    auto idx = iota_indices(1);
    Rng loss_rng(5);
    SoftLossResult r = soft_loss(ds, idx, params, cfg, kBos, loss_rng, cache);
    REQUIRE(r.mean_penalty == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(r.loss == Catch::Approx(r.mean_nll).margin(1e-12));
  }

  SECTION("uniform attention over four locations at C=1: penalty 2.25 lambda") {
    params.att.proj_a.fill(0.0);
    params.att.proj_h.fill(0.0);
    params.att.score.fill(0.0);
    Dataset ds = tiny_dataset(d, 4, {1}, rng);
    GraphCache cache(d, 4, true);
    SoftLossConfig cfg;
    cfg.lambda_penalty = 2.0;
    cfg.dropout_rate = 0.0;
    auto idx = iota_indices(1);
    Rng loss_rng(6);
    SoftLossResult r = soft_loss(ds, idx, params, cfg, kBos, loss_rng, cache);
    REQUIRE(r.mean_penalty == Catch::Approx(2.25).margin(1e-12));
    REQUIRE(r.loss - r.mean_nll == Catch::Approx(2.0 * 2.25).margin(1e-12));
  }
}

TEST_CASE("soft_loss: mixed-length batches are rejected") {
  Rng rng(7);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, 3, {4, 6}, rng);
  GraphCache cache(d, 3, true);
  SoftLossConfig cfg;
  auto idx = iota_indices(2);
  Rng loss_rng(8);
  REQUIRE_THROWS_AS(soft_loss(ds, idx, params, cfg, kBos, loss_rng, cache), error);
}

TEST_CASE("soft loss gradient passes the finite-difference check, penalty included") {
  Rng rng(9);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 3;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);

  UnrolledGraph u = build_unrolled(d, L, C, TrajectoryKind::Soft);
  std::map<std::string, Tensor> bind = param_bindings(params, u.g);
  bind["grid"] = ds.records[0].grid;
  bind["y0"] = Tensor::one_hot(d.K, kBos);
  for (std::size_t t = 0; t < C; ++t)
    bind["y" + std::to_string(t + 1)] = Tensor::one_hot(d.K, ds.records[0].caption[t]);
  Tensor ones({d.n});
  ones.fill(1.0);
  for (std::size_t t = 1; t <= C; ++t) bind["mask" + std::to_string(t)] = ones;
  bind["lambda_pen"] = Tensor::scalar(1.0);

  std::vector<std::string> wrt = params.names(AttMode::Soft);
  auto report = grad_check(u.g, bind, "loss", wrt, 1e-5, 1e-4);
  INFO("worst rel err " << report.worst());
  REQUIRE(report.passed());
}

TEST_CASE("per-caption NLL gradient check at the spec instance dimensions") {
  // K=12, L=4, n=m=8, D=6: every parameter block within 1e-4.
  Rng rng(10);
  const ModelDims d{12, 8, 8, 6, 8};
  const std::size_t L = 4, C = 3;
  DecoderParams params = DecoderParams::init(d, rng);

  UnrolledGraph u = build_unrolled(d, L, C, TrajectoryKind::Soft);
  std::map<std::string, Tensor> bind = param_bindings(params, u.g);
  Tensor grid({L, d.D});
  fill_uniform(grid, rng, 1.0);
  bind["grid"] = grid;
  bind["y0"] = Tensor::one_hot(d.K, kBos);
  const std::uint32_t caption[C] = {4, 7, kEos};
  for (std::size_t t = 0; t < C; ++t)
    bind["y" + std::to_string(t + 1)] = Tensor::one_hot(d.K, caption[t]);
  Tensor ones({d.n});
  ones.fill(1.0);
  for (std::size_t t = 1; t <= C; ++t) bind["mask" + std::to_string(t)] = ones;
  bind["lambda_pen"] = Tensor::scalar(0.0);

  std::vector<std::string> wrt = params.names(AttMode::Soft);
  auto report = grad_check(u.g, bind, "nll", wrt, 1e-5, 1e-4);
  INFO("worst rel err " << report.worst());
  REQUIRE(report.passed());
}

TEST_CASE("exact_hard_objective: single location reduces to the ungated soft likelihood") {
  Rng rng(11);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, 1, {3}, rng);
  const AnnotationGrid grid{Tensor(ds.records[0].grid)};
  const CaptionSequence caption{ds.records[0].caption};

  ExactHardResult ex = exact_hard_objective(grid, caption, params, kBos);
  ForcedOptions opt;
  opt.apply_gate = false;
  ForcedResult plain = teacher_forced(grid, caption, params, kBos, opt);
  REQUIRE(ex.Ls == Catch::Approx(plain.logp_y).margin(1e-11));
  REQUIRE(ex.marginal_logp == Catch::Approx(plain.logp_y).margin(1e-11));
}

TEST_CASE("exact_hard_objective: two-location single-step closed form") {
  Rng rng(12);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, 2, {1}, rng);
  const AnnotationGrid grid{Tensor(ds.records[0].grid)};
  const CaptionSequence caption{ds.records[0].caption};

  DecoderState s0 = init_state(grid, params);
  AttentionWeights alpha = attention_weights(attention_scores(grid, s0.h, params.att));
  double expected = 0.0, marginal = 0.0;
  for (std::size_t loc = 0; loc < 2; ++loc) {
    ForcedOptions opt;
    opt.mode = AttMode::Hard;
    std::vector<std::size_t> locs{loc};
    opt.force_locations = &locs;
    ForcedResult f = teacher_forced(grid, caption, params, kBos, opt);
    expected += alpha.alpha.data[loc] * f.logp_y;
    marginal += alpha.alpha.data[loc] * std::exp(f.logp_y);
  }
  ExactHardResult ex = exact_hard_objective(grid, caption, params, kBos);
  REQUIRE(ex.Ls == Catch::Approx(expected).margin(1e-12));
  REQUIRE(ex.marginal_logp == Catch::Approx(std::log(marginal)).margin(1e-12));
}

TEST_CASE("exact_hard_objective: gradient matches finite differences of the enumerated sum") {
  Rng rng(13);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 2;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);

  EnumGraph eg = build_enum_graph(d, L, C);
  std::map<std::string, Tensor> bind = param_bindings(params, eg.g);
  bind["grid"] = ds.records[0].grid;
  bind["y0"] = Tensor::one_hot(d.K, kBos);
  for (std::size_t t = 0; t < C; ++t)
    bind["y" + std::to_string(t + 1)] = Tensor::one_hot(d.K, ds.records[0].caption[t]);

  std::vector<std::string> wrt = params.names(AttMode::Hard);
  auto report = grad_check(eg.g, bind, "Ls", wrt, 1e-5, 1e-4);
  INFO("worst rel err " << report.worst());
  REQUIRE(report.passed());

  // exact_hard_objective returns the same gradient as a direct backward pass.
  ExactHardResult ex = exact_hard_objective(AnnotationGrid{Tensor(ds.records[0].grid)},
                                            CaptionSequence{ds.records[0].caption}, params, kBos);
  GradientMap direct = backward(eg.g, bind, "Ls", wrt);
  for (const auto& [name, g] : direct)
    for (std::size_t i = 0; i < g.size(); ++i)
      REQUIRE(ex.grads.at(name).data[i] == Catch::Approx(g.data[i]).margin(1e-12));
}

TEST_CASE("exact_hard_objective: enumeration limit enforced") {
  Rng rng(14);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, 9, {5}, rng);  // 9^5 = 59049 > 4096
  REQUIRE_THROWS_AS(exact_hard_objective(AnnotationGrid{Tensor(ds.records[0].grid)},
                                         CaptionSequence{ds.records[0].caption}, params, kBos),
                    error);
}

TEST_CASE("lower bound: enumerated objective never exceeds the marginal log-likelihood") {
  Rng rng(15);
  const ModelDims d = tiny_dims();
  for (int trial = 0; trial < 50; ++trial) {
    DecoderParams params = DecoderParams::init(d, rng);
    const std::size_t L = 2 + rng.uniform_index(2);  // 2..3
    const std::size_t C = 1 + rng.uniform_index(2);  // 1..2
    Dataset ds = tiny_dataset(d, L, {C}, rng);
    ExactHardResult ex = exact_hard_objective(AnnotationGrid{Tensor(ds.records[0].grid)},
                                              CaptionSequence{ds.records[0].caption}, params,
                                              kBos);
    REQUIRE(ex.marginal_logp - ex.Ls >= -1e-12);
  }
}

TEST_CASE("hard objective graph passes a finite-difference check at fixed locations") {
  Rng rng(16);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 2;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);

  UnrolledGraph u = build_unrolled(d, L, C, TrajectoryKind::HardSampled);
  std::map<std::string, Tensor> bind = param_bindings(params, u.g);
  bind["grid"] = ds.records[0].grid;
  bind["y0"] = Tensor::one_hot(d.K, kBos);
  for (std::size_t t = 0; t < C; ++t)
    bind["y" + std::to_string(t + 1)] = Tensor::one_hot(d.K, ds.records[0].caption[t]);
  Tensor ones({d.n});
  ones.fill(1.0);
  for (std::size_t t = 1; t <= C; ++t) bind["mask" + std::to_string(t)] = ones;
  bind["s1"] = Tensor::one_hot(L, 2);
  bind["s2"] = Tensor::one_hot(L, 0);
  bind["coeff"] = Tensor::scalar(-1.7);  // frozen reward coefficient
  bind["lambda_e"] = Tensor::scalar(0.3);

  std::vector<std::string> wrt = params.names(AttMode::Hard);
  auto report = grad_check(u.g, bind, "objective", wrt, 1e-5, 1e-4);
  INFO("worst rel err " << report.worst());
  REQUIRE(report.passed());
}

TEST_CASE("hard estimator: reward and entropy scales of zero leave the pathwise term") {
  Rng rng(17);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 2;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);
  GraphCache cache(d, L, true);

  HardLossConfig cfg;
  cfg.lambda_r = 0.0;
  cfg.lambda_e = 0.0;
  cfg.expectation_substitution_prob = 0.0;
  cfg.dropout_rate = 0.0;
  BaselineState baseline;
  auto idx = iota_indices(1);
  Rng est_rng(18);
  Rng replay_rng = est_rng;  // identical stream for the manual replay
  GradientEstimate est =
      hard_gradient_estimate(ds, idx, params, cfg, baseline, kBos, est_rng, cache);

  // Replay: same coin, same rollout, gradient of logp_y alone.
  const AnnotationGrid grid{Tensor(ds.records[0].grid)};
  const CaptionSequence caption{ds.records[0].caption};
  (void)replay_rng.uniform();  // the substitution coin
  ForcedOptions opt;
  opt.mode = AttMode::Hard;
  opt.rng = &replay_rng;
  ForcedResult roll = teacher_forced(grid, caption, params, kBos, opt);

  const UnrolledGraph& u = cache.get(TrajectoryKind::HardSampled, C);
  Evaluation ev(u.g);
  bind_params(ev, params);
  ev.bind("grid", ds.records[0].grid);
  bind_caption(ev, ds.records[0].caption, kBos);
  for (std::size_t t = 1; t <= C; ++t) ev.bind_fill("mask" + std::to_string(t), 1.0);
  for (std::size_t t = 0; t < C; ++t)
    ev.bind_one_hot("s" + std::to_string(t + 1), roll.locations[t]);
  ev.bind_scalar("coeff", 0.0);
  ev.bind_scalar("lambda_e", 0.0);
  ev.run();
  std::vector<std::string> wrt = params.names(AttMode::Hard);
  GradientMap pathwise = ev.backward("logp_y", wrt);

  for (const auto& [name, g] : pathwise)
    for (std::size_t i = 0; i < g.size(); ++i)
      REQUIRE(est.grad.at(name).data[i] == Catch::Approx(g.data[i]).margin(1e-13));
}

TEST_CASE("hard estimator: baseline follows the exponential decay rule") {
  Rng rng(19);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, 3, {2, 2, 2, 2}, rng);
  GraphCache cache(d, 3, true);

  HardLossConfig cfg;
  cfg.expectation_substitution_prob = 0.0;
  cfg.dropout_rate = 0.0;
  cfg.baseline_decay = 0.9;
  BaselineState baseline;
  baseline.b = 0.0;
  auto idx = iota_indices(4);
  Rng est_rng(20);
  GradientEstimate est =
      hard_gradient_estimate(ds, idx, params, cfg, baseline, kBos, est_rng, cache);
  // b' = 0.9 b + 0.1 * (batch mean log-likelihood); b was 0.
  REQUIRE(baseline.b == Catch::Approx(0.1 * est.mean_logp).margin(1e-9));
  REQUIRE(baseline.k == 1);
  REQUIRE(est.baseline == 0.0);  // the value used during the batch
}

TEST_CASE("hard estimator: unbiased against the enumerated gradient") {
  // lambda_r=1, lambda_e=0, b=0, no substitution: the estimator mean must
  // match dL_s/dW within 3 standard errors on nearly every coordinate.
  Rng rng(21);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 2;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);
  GraphCache cache(d, L, true);

  ExactHardResult exact = exact_hard_objective(AnnotationGrid{Tensor(ds.records[0].grid)},
                                               CaptionSequence{ds.records[0].caption}, params,
                                               kBos);

  HardLossConfig cfg;
  cfg.lambda_r = 1.0;
  cfg.lambda_e = 0.0;
  cfg.expectation_substitution_prob = 0.0;
  cfg.dropout_rate = 0.0;
  cfg.sample_count = 6000;
  BaselineState baseline;  // b = 0, updated only after the batch
  auto idx = iota_indices(1);
  Rng est_rng(22);
  GradientEstimate est = hard_gradient_estimate(ds, idx, params, cfg, baseline, kBos, est_rng,
                                                cache, /*track_variance=*/true);
  REQUIRE(est.per_coord_variance.has_value());

  std::size_t total = 0, within = 0;
  for (const auto& [name, mean] : est.grad) {
    const Tensor& var = est.per_coord_variance->at(name);
    const Tensor& ref = exact.grads.at(name);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double se = std::sqrt(var.data[i] / static_cast<double>(cfg.sample_count));
      ++total;
      if (std::fabs(mean.data[i] - ref.data[i]) <= 3.0 * se + 1e-12) ++within;
    }
  }
  INFO(within << " / " << total << " coordinates within 3 standard errors");
  REQUIRE(static_cast<double>(within) >= 0.97 * static_cast<double>(total));
}

TEST_CASE("hard estimator: a constant baseline leaves the mean unchanged") {
  Rng rng(23);
  const ModelDims d = tiny_dims();
  const std::size_t L = 3, C = 2;
  DecoderParams params = DecoderParams::init(d, rng);
  Dataset ds = tiny_dataset(d, L, {C}, rng);
  GraphCache cache(d, L, true);

  ExactHardResult exact = exact_hard_objective(AnnotationGrid{Tensor(ds.records[0].grid)},
                                               CaptionSequence{ds.records[0].caption}, params,
                                               kBos);
  HardLossConfig cfg;
  cfg.lambda_r = 1.0;
  cfg.lambda_e = 0.0;
  cfg.expectation_substitution_prob = 0.0;
  cfg.dropout_rate = 0.0;
  cfg.sample_count = 6000;
  BaselineState baseline;
  baseline.b = -7.5;  // arbitrary constant offset
  auto idx = iota_indices(1);
  Rng est_rng(24);
  GradientEstimate est = hard_gradient_estimate(ds, idx, params, cfg, baseline, kBos, est_rng,
                                                cache, true);

  std::size_t total = 0, within = 0;
  for (const auto& [name, mean] : est.grad) {
    const Tensor& var = est.per_coord_variance->at(name);
    const Tensor& ref = exact.grads.at(name);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double se = std::sqrt(var.data[i] / static_cast<double>(cfg.sample_count));
      ++total;
      if (std::fabs(mean.data[i] - ref.data[i]) <= 3.0 * se + 1e-12) ++within;
    }
  }
  REQUIRE(static_cast<double>(within) >= 0.97 * static_cast<double>(total));
}

TEST_CASE("hard estimator: running baseline does not hurt variance") {
  Rng rng(25);
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

  // Warm the baseline with 200 single-sample batches, parameters frozen.
  BaselineState warmed;
  {
    Rng warm_rng(26);
    auto idx = iota_indices(1);
    for (int i = 0; i < 200; ++i)
      hard_gradient_estimate(ds, idx, params, cfg, warmed, kBos, warm_rng, cache);
    REQUIRE(warmed.k == 200);
  }

  const std::size_t N = 2000;
  cfg.sample_count = N;
  auto idx = iota_indices(1);

  BaselineState frozen_warm;
  frozen_warm.b = warmed.b;
  Rng r1(27);
  GradientEstimate with_baseline =
      hard_gradient_estimate(ds, idx, params, cfg, frozen_warm, kBos, r1, cache, true);

  BaselineState zero;
  Rng r2(27);
  GradientEstimate without_baseline =
      hard_gradient_estimate(ds, idx, params, cfg, zero, kBos, r2, cache, true);

  // Normal-approximation standard error of a sample variance:
  // SE(s^2) ~ s^2 sqrt(2/(N-1)). Flag coordinates strictly worse beyond 3 SE.
  std::size_t total = 0, worse = 0;
  const double se_scale = std::sqrt(2.0 / static_cast<double>(N - 1));
  for (const auto& [name, var_b] : *with_baseline.per_coord_variance) {
    const Tensor& var_0 = without_baseline.per_coord_variance->at(name);
    for (std::size_t i = 0; i < var_b.size(); ++i) {
      ++total;
      const double se =
          se_scale * std::sqrt(var_b.data[i] * var_b.data[i] + var_0.data[i] * var_0.data[i]);
      if (var_b.data[i] - var_0.data[i] > 3.0 * se) ++worse;
    }
  }
  INFO(worse << " / " << total << " coordinates strictly worse beyond 3 sigma");
  REQUIRE(static_cast<double>(worse) <= 0.10 * static_cast<double>(total));
}

TEST_CASE("optimizer_step: zero gradients leave parameters unchanged") {
  Rng rng(28);
  const ModelDims d = tiny_dims();
  for (OptAlg alg : {OptAlg::RmsProp, OptAlg::Adam}) {
    DecoderParams params = DecoderParams::init(d, rng);
    DecoderParams before = params;
    OptimizerConfig cfg;
    cfg.alg = alg;
    OptimizerState state = OptimizerState::init(cfg, params);
    GradientMap zero = zero_gradients(params, AttMode::Soft);
    optimizer_step(params, zero, state);
    for (const auto& [name, t] : params.entries())
      REQUIRE(*t == before.by_name(name));
  }
}

TEST_CASE("optimizer_step: first adam update matches the hand-computed form") {
  Rng rng(29);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  DecoderParams before = params;
  OptimizerConfig cfg;
  cfg.alg = OptAlg::Adam;
  cfg.lr = 0.01;
  OptimizerState state = OptimizerState::init(cfg, params);

  GradientMap grads = zero_gradients(params, AttMode::Soft);
  Rng grad_rng(30);
  for (auto& [_, g] : grads) fill_uniform(g, grad_rng, 0.5);
  optimizer_step(params, grads, state);

  // Step 1 from zero moments: mhat = g, vhat = g^2, so the update is
  // -lr g / (|g| + eps), independent of |g| up to sign.
  for (const auto& [name, g] : grads) {
    const Tensor& now = params.by_name(name);
    const Tensor& was = before.by_name(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double expect = was.data[i] - cfg.lr * g.data[i] / (std::fabs(g.data[i]) + cfg.eps);
      REQUIRE(now.data[i] == Catch::Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("optimizer_step: first rmsprop update matches the hand-computed form") {
  Rng rng(31);
  const ModelDims d = tiny_dims();
  DecoderParams params = DecoderParams::init(d, rng);
  DecoderParams before = params;
  OptimizerConfig cfg;
  cfg.alg = OptAlg::RmsProp;
  cfg.lr = 0.01;
  OptimizerState state = OptimizerState::init(cfg, params);

  GradientMap grads = zero_gradients(params, AttMode::Soft);
  Rng grad_rng(32);
  for (auto& [_, g] : grads) fill_uniform(g, grad_rng, 0.5);
  optimizer_step(params, grads, state);

  for (const auto& [name, g] : grads) {
    const Tensor& now = params.by_name(name);
    const Tensor& was = before.by_name(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double acc = (1.0 - cfg.rms_decay) * g.data[i] * g.data[i];
      const double expect = was.data[i] - cfg.lr * g.data[i] / (std::sqrt(acc) + cfg.eps);
      REQUIRE(now.data[i] == Catch::Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("optimizer_step: identical calls from identical state give identical results") {
  Rng rng(33);
  const ModelDims d = tiny_dims();
  DecoderParams p1 = DecoderParams::init(d, rng);
  DecoderParams p2 = p1;
  OptimizerConfig cfg;
  cfg.alg = OptAlg::Adam;
  OptimizerState s1 = OptimizerState::init(cfg, p1);
  OptimizerState s2 = OptimizerState::init(cfg, p2);
  GradientMap grads = zero_gradients(p1, AttMode::Soft);
  Rng grad_rng(34);
  for (auto& [_, g] : grads) fill_uniform(g, grad_rng, 0.5);
  for (int i = 0; i < 3; ++i) {
    optimizer_step(p1, grads, s1);
    optimizer_step(p2, grads, s2);
  }
  for (const auto& [name, t] : p1.entries()) REQUIRE(*t == p2.by_name(name));
}

TEST_CASE("one small optimizer step decreases the soft loss on a fixed batch") {
  Rng rng(35);
  const ModelDims d = tiny_dims();
  Dataset ds = tiny_dataset(d, 3, {4, 4, 4, 4}, rng);
  auto idx = iota_indices(4);
  for (OptAlg alg : {OptAlg::RmsProp, OptAlg::Adam}) {
    DecoderParams params = DecoderParams::init(d, rng);
    GraphCache cache(d, 3, true);
    SoftLossConfig cfg;
    cfg.dropout_rate = 0.0;  // deterministic loss
    Rng r1(36);
    SoftLossResult before = soft_loss(ds, idx, params, cfg, kBos, r1, cache);
    OptimizerConfig ocfg;
    ocfg.alg = alg;
    ocfg.lr = 1e-4;
    OptimizerState state = OptimizerState::init(ocfg, params);
    optimizer_step(params, before.grads, state);
    Rng r2(36);
    SoftLossResult after = soft_loss(ds, idx, params, cfg, kBos, r2, cache);
    INFO((alg == OptAlg::Adam ? "adam" : "rmsprop"));
    REQUIRE(after.loss < before.loss);
  }
}

TEST_CASE("bucket_batches: homogeneous lengths, full coverage, partial tail batches") {
  Rng rng(37);
  const ModelDims d = tiny_dims();
  std::vector<std::size_t> lengths;
  for (int i = 0; i < 100; ++i) lengths.push_back(3);
  for (int i = 0; i < 28; ++i) lengths.push_back(5);
  Dataset ds = tiny_dataset(d, 3, lengths, rng);
  auto idx = iota_indices(ds.records.size());

  Rng batch_rng(38);
  auto batches = bucket_batches(ds, idx, 32, batch_rng);
  std::vector<bool> seen(ds.records.size(), false);
  std::size_t len5_batches = 0;
  for (const auto& b : batches) {
    REQUIRE((b.caption_len == 3 || b.caption_len == 5));
    for (std::size_t i : b.indices) {
      REQUIRE(ds.records[i].caption.size() == b.caption_len);
      REQUIRE_FALSE(seen[i]);
      seen[i] = true;
    }
    if (b.caption_len == 5) {
      ++len5_batches;
      REQUIRE(b.indices.size() == 28);  // single partial batch
    }
  }
  REQUIRE(len5_batches == 1);
  for (bool s : seen) REQUIRE(s);
}

TEST_CASE("bucket_batches: batch size one and seeded reproducibility") {
  Rng rng(39);
  const ModelDims d = tiny_dims();
  Dataset ds = tiny_dataset(d, 3, {4, 4, 6, 6, 6}, rng);
  auto idx = iota_indices(5);
  Rng r1(40);
  auto singles = bucket_batches(ds, idx, 1, r1);
  REQUIRE(singles.size() == 5);
  for (const auto& b : singles) REQUIRE(b.indices.size() == 1);

  Rng r2(41), r3(41);
  auto a = bucket_batches(ds, idx, 2, r2);
  auto b = bucket_batches(ds, idx, 2, r3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i].indices == b[i].indices);
}

TEST_CASE("train: patience zero runs exactly one epoch") {
  Rng rng(42);
  const ModelDims d = tiny_dims();
  std::vector<std::size_t> lengths(30, 3);
  Dataset ds = tiny_dataset(d, 3, lengths, rng);
  DecoderParams params = DecoderParams::init(d, rng);

  auto idx = iota_indices(30);
  std::vector<std::size_t> train_idx(idx.begin(), idx.begin() + 24);
  std::vector<std::size_t> val_idx(idx.begin() + 24, idx.end());

  TrainConfig cfg;
  cfg.mode = AttMode::Soft;
  cfg.soft.dropout_rate = 0.0;
  cfg.batch_size = 8;
  cfg.max_epochs = 10;
  cfg.patience = 0;
  cfg.seed = 43;
  std::ostringstream metrics;
  TrainResult r = train(ds, train_idx, val_idx, params, cfg, &metrics);
  REQUIRE(r.log.size() == 1);
  REQUIRE(r.best_epoch == 1);
  const std::string line = metrics.str();
  REQUIRE(line.find("epoch=1") != std::string::npos);
  REQUIRE(line.find("mode=soft") != std::string::npos);
  REQUIRE(line.find("bleu4=") != std::string::npos);
  REQUIRE(line.find("wall_ms=") != std::string::npos);
}

TEST_CASE("train: hard mode smoke run logs a baseline trajectory") {
  Rng rng(44);
  const ModelDims d = tiny_dims();
  std::vector<std::size_t> lengths(24, 2);
  Dataset ds = tiny_dataset(d, 3, lengths, rng);
  DecoderParams params = DecoderParams::init(d, rng);
  auto idx = iota_indices(24);
  std::vector<std::size_t> train_idx(idx.begin(), idx.begin() + 20);
  std::vector<std::size_t> val_idx(idx.begin() + 20, idx.end());

  TrainConfig cfg;
  cfg.mode = AttMode::Hard;
  cfg.hard.dropout_rate = 0.0;
  cfg.batch_size = 10;
  cfg.max_epochs = 2;
  cfg.patience = 5;
  cfg.seed = 45;
  std::ostringstream metrics;
  TrainResult r = train(ds, train_idx, val_idx, params, cfg, &metrics);
  REQUIRE(r.log.size() == 2);
  REQUIRE(r.log[1].baseline != 0.0);
  REQUIRE(metrics.str().find("mode=hard") != std::string::npos);
  REQUIRE(r.baseline.k == r.log.size() * 2);  // two batches per epoch
}

TEST_CASE("train: declining validation keeps the first-epoch checkpoint") {
  // With patience >= 1 and a validation score that can only stay flat or
  // drop, the best checkpoint is the earliest one.
  Rng rng(46);
  const ModelDims d = tiny_dims();
  std::vector<std::size_t> lengths(20, 3);
  Dataset ds = tiny_dataset(d, 3, lengths, rng);
  DecoderParams params = DecoderParams::init(d, rng);
  auto idx = iota_indices(20);
  std::vector<std::size_t> train_idx(idx.begin(), idx.begin() + 16);
  std::vector<std::size_t> val_idx(idx.begin() + 16, idx.end());

  TrainConfig cfg;
  cfg.soft.dropout_rate = 0.0;
  cfg.batch_size = 8;
  cfg.max_epochs = 4;
  cfg.patience = 3;
  cfg.seed = 47;
  TrainResult r = train(ds, train_idx, val_idx, params, cfg);
  // Random captions cannot be predicted: BLEU-4 stays 0, so epoch 1 wins.
  REQUIRE(r.best_epoch == 1);
}

TEST_CASE("train: non-finite parameters abort with a named block") {
  Rng rng(48);
  const ModelDims d = tiny_dims();
  std::vector<std::size_t> lengths(12, 3);
  Dataset ds = tiny_dataset(d, 3, lengths, rng);
  DecoderParams params = DecoderParams::init(d, rng);
  params.embed.data[3] = std::numeric_limits<double>::infinity();
  auto idx = iota_indices(12);
  std::vector<std::size_t> train_idx(idx.begin(), idx.begin() + 8);
  std::vector<std::size_t> val_idx(idx.begin() + 8, idx.end());

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epochs = 1;
  cfg.seed = 49;
  try {
    train(ds, train_idx, val_idx, params, cfg);
    FAIL("expected a numeric_error");
  } catch (const numeric_error& e) {
    REQUIRE(std::string(e.what()).find("embed") != std::string::npos);
  }
}
