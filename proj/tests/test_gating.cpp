// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "uniflow/errors.hpp"
#include "uniflow/gating.hpp"

using namespace uniflow;
using namespace uniflow::gating;
using flow::ContextFeatures;
using flow::NetArch;
using flow::VelocityField;

namespace {

ContextFeatures make_ctx(int prefix, int state, int chunk_len, int d_model) {
  ContextFeatures ctx;
  ctx.tokens = Mat::Zero(prefix + state + chunk_len, d_model);
  ctx.prefix = {0, prefix};
  ctx.state = {prefix, prefix + state};
  ctx.action_tokens = {prefix + state, prefix + state + chunk_len};
  return ctx;
}

double wasserstein_1d_oracle(Eigen::VectorXd a, Eigen::VectorXd b) {
  std::sort(a.data(), a.data() + a.size());
  std::sort(b.data(), b.data() + b.size());
  return (a - b).squaredNorm();
}

}  // namespace

TEST_CASE("action anchor is the column mean") {
  Mat one(1, 4);
  one << 1.0, -2.0, 0.5, 3.0;
  CHECK(action_anchor(one).transpose() == one.row(0));

  Mat sym(2, 3);
  sym << 1.0, -0.5, 2.0, -1.0, 0.5, -2.0;
  CHECK(action_anchor(sym).isZero(0.0));

  Rng rng(1);
  Mat m(16, 8);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 8; ++j) m(i, j) = rng.normal();
  const Vec anchor = action_anchor(m);
  for (int j = 0; j < 8; ++j) {
    double s = 0.0;
    for (int i = 0; i < 16; ++i) s += m(i, j);
    CHECK(std::abs(anchor[j] - s / 16.0) < 1e-15);
  }

  CHECK_THROWS_AS(action_anchor(Mat(0, 4)), std::invalid_argument);
}

TEST_CASE("swd of identical samples is zero for any slice count and seed") {
  Rng rng(2);
  Mat h(6, 4);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 4; ++j) h(i, j) = rng.normal();
  for (const int m : {1, 7, 32})
    for (const std::uint64_t seed : {0ULL, 9ULL, 12345ULL}) CHECK(swd(h, h, m, seed) == 0.0);
}

TEST_CASE("swd hand case: {0,2} vs {1,3} in one dimension gives exactly 2") {
  Mat h(2, 1), z(2, 1);
  h << 0.0, 2.0;
  z << 1.0, 3.0;
  CHECK(swd(h, z, 1, 4) == 2.0);
}

TEST_CASE("swd in one dimension equals the exact sorted-quantile Wasserstein") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(20));
    Mat h(n, 1), z(n, 1);
    for (int i = 0; i < n; ++i) {
      h(i, 0) = rng.normal();
      z(i, 0) = rng.normal() + 0.5;
    }
    const double oracle = wasserstein_1d_oracle(h.col(0), z.col(0));
    CHECK(std::abs(swd(h, z, 5, trial) - oracle) < 1e-12);
  }
}

TEST_CASE("swd is invariant to row permutations") {
  Rng rng(4);
  Mat h(8, 3), z(8, 3);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 3; ++j) {
      h(i, j) = rng.normal();
      z(i, j) = rng.normal();
    }
  const double base = swd(h, z, 16, 7);
  Mat hp = h;
  hp.row(0).swap(hp.row(5));
  hp.row(2).swap(hp.row(7));
  CHECK(swd(hp, z, 16, 7) == base);
  CHECK(base >= 0.0);
  CHECK(swd(h, z, 16, 7) == base);  // seed determinism
}

TEST_CASE("gate law g = exp(-D/tau)") {
  CHECK(gate(0.0, 1.0) == 1.0);
  CHECK(gate(0.0, 3.7) == 1.0);
  CHECK(gate(2.0, 2.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(gate(1e9, 1.0) == 1e-300);  // underflow clamp keeps (0,1] literal
  CHECK_THROWS_AS(gate(-0.1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(gate(1.0, 0.0), std::invalid_argument);

  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double d1 = rng.uniform(0.0, 10.0), d2 = rng.uniform(0.0, 10.0);
    const double tau = rng.uniform(0.1, 5.0);
    if (d1 < d2) CHECK(gate(d1, tau) > gate(d2, tau));
  }
}

TEST_CASE("enhance with lambda 0 is the identity") {
  auto p = MpgParams::init(6, 4, Rng(6), /*lambda=*/0.0);
  auto ctx = make_ctx(2, 1, 3, 6);
  ctx.tokens.setRandom();
  const auto out = enhance(ctx, 0.5, p);
  CHECK(out.tokens == ctx.tokens);
}

TEST_CASE("the prior offset survives a vanishing gate") {
  auto p = MpgParams::init(6, 4, Rng(7), /*lambda=*/0.25);
  p.b_mpg.setConstant(2.0);
  auto ctx = make_ctx(0, 2, 2, 6);
  ctx.tokens.setRandom();
  const auto out = enhance(ctx, 1e-300, p);
  const Mat expected_limit =
      ctx.tokens + Mat::Constant(ctx.rows(), 6, 0.25 * 2.0);  // H + lambda*b
  CHECK((out.tokens - expected_limit).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gate difference isolates the projected term and excludes the bias") {
  auto p = MpgParams::init(8, 4, Rng(8), /*lambda=*/0.125);
  p.b_mpg.setRandom();
  auto ctx = make_ctx(1, 2, 3, 8);
  ctx.tokens.setRandom();
  const double g1 = 0.75, g2 = 0.25;
  const auto h1 = enhance(ctx, g1, p);
  const auto h2 = enhance(ctx, g2, p);
  const auto span = ctx.suffix();
  const Mat suffix = ctx.tokens.middleRows(span.begin, span.size());
  const Mat projected = suffix * p.e_obs.transpose() * p.w_mpg.transpose();
  const Mat expected = p.lambda * (g1 - g2) * projected;
  const Mat got = h1.tokens.middleRows(span.begin, span.size()) -
                  h2.tokens.middleRows(span.begin, span.size());
  CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-12);
  // prefix rows are untouched by enhancement
  CHECK(h1.tokens.topRows(1) == ctx.tokens.topRows(1));
}

TEST_CASE("variance identity: row variance under a fluctuating gate scales with the projected term only") {
  auto p = MpgParams::init(5, 3, Rng(9), /*lambda=*/0.2);
  p.b_mpg.setRandom();
  auto ctx = make_ctx(0, 1, 1, 5);
  ctx.tokens.setRandom();
  const std::vector<double> gates = {0.2, 0.5, 0.8};
  // E[g], Var[g]
  double mean_g = 0.0, var_g = 0.0;
  for (const double g : gates) mean_g += g / gates.size();
  for (const double g : gates) var_g += (g - mean_g) * (g - mean_g) / gates.size();

  const Mat row = ctx.tokens.row(0);
  const Mat projected = row * p.e_obs.transpose() * p.w_mpg.transpose();
  for (int j = 0; j < 5; ++j) {
    double mean = 0.0, var = 0.0;
    std::vector<double> vals;
    for (const double g : gates) vals.push_back(enhance(ctx, g, p).tokens(0, j));
    for (const double v : vals) mean += v / vals.size();
    for (const double v : vals) var += (v - mean) * (v - mean) / vals.size();
    const double expected = var_g * p.lambda * p.lambda * projected(0, j) * projected(0, j);
    CHECK(var == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("jacobian damping: smaller gates shrink feature sensitivity") {
  // identity projections make the sensitivity exactly (1 + lambda*g) per row
  MpgParams p;
  p.e_obs = Mat::Identity(4, 4);
  p.e_act = Mat::Identity(4, 4);
  p.w_mpg = Mat::Identity(4, 4);
  p.b_mpg = Vec::Zero(4);
  p.lambda = 0.5;
  auto ctx = make_ctx(0, 1, 1, 4);
  ctx.tokens.setRandom();
  Mat eps = Mat::Random(2, 4) * 1e-3;

  auto sensitivity = [&](double g) {
    ContextFeatures shifted = ctx;
    shifted.tokens += eps;
    return (enhance(shifted, g, p).tokens - enhance(ctx, g, p).tokens).norm();
  };
  CHECK(sensitivity(0.1) < sensitivity(0.9));
  CHECK(sensitivity(0.9) == doctest::Approx((1.0 + 0.5 * 0.9) * eps.norm()).epsilon(1e-9));
}

TEST_CASE("assess produces a zero discrepancy for matched projections") {
  MpgParams p = MpgParams::init(6, 4, Rng(10));
  p.e_obs.setZero();
  p.e_act.setZero();
  const Mat suffix = Mat::Random(5, 6);
  const Vec anchor = Vec::Random(6);
  const auto diag = assess(suffix, anchor, p);
  CHECK(diag.discrepancy == 0.0);
  CHECK(diag.gate == 1.0);
}

TEST_CASE("refine with zero rounds is exactly euler_denoise") {
  const VelocityField field(NetArch{4, 2, 6, 1, {16}}, Rng(11));
  auto ctx = make_ctx(2, 1, 4, 6);
  ctx.tokens.setRandom();
  const auto p = MpgParams::init(6, 4, Rng(12));
  const auto encoder = ActionEncoder::init(6, 2, Rng(13));
  const Mat x0 = Mat::Random(4, 2);
  const auto plain = flow::euler_denoise(field, x0, 8, ctx, 0);
  const auto refined = refine(field, ctx, 0, 8, p, encoder, x0, 0);
  CHECK(refined.actions == plain.actions);
  CHECK_FALSE(refined.diverged);
}

TEST_CASE("near-unit gates keep refinement close to an always-on enhancement run") {
  const VelocityField field(NetArch{3, 2, 6, 1, {16}}, Rng(14));
  auto ctx = make_ctx(1, 2, 3, 6);
  ctx.tokens.setRandom();
  // a very high temperature trusts any context: g = exp(-D/tau) ~ 1
  auto p = MpgParams::init(6, 4, Rng(15), /*lambda=*/0.01, /*tau=*/1e9);
  const auto encoder = ActionEncoder::init(6, 2, Rng(16));
  const Mat x0 = Mat::Random(3, 2);

  std::vector<RoundDiagnostics> diag;
  const auto gated = refine(field, ctx, 1, 8, p, encoder, x0, 0, &diag);
  REQUIRE(diag.size() == 1);
  for (const auto& step : diag[0].steps) CHECK(step.gate > 0.999);

  ContextFeatures always_on = enhance(ctx, 1.0, p);
  const auto reference = flow::euler_denoise(field, x0, 8, always_on, 0);
  CHECK((gated.actions - reference.actions).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("zero projections give an exactly unit gate and an exact always-on match") {
  const VelocityField field(NetArch{3, 2, 6, 1, {16}}, Rng(17));
  auto ctx = make_ctx(1, 2, 3, 6);
  ctx.tokens.setRandom();
  auto p = MpgParams::init(6, 4, Rng(15), /*lambda=*/0.05);
  p.e_obs.setZero();  // every projection collapses: D == 0, g == 1
  p.e_act.setZero();
  const auto encoder = ActionEncoder::init(6, 2, Rng(16));
  const Mat x0 = Mat::Random(3, 2);

  std::vector<RoundDiagnostics> diag;
  const auto gated = refine(field, ctx, 1, 8, p, encoder, x0, 0, &diag);
  for (const auto& step : diag[0].steps) {
    CHECK(step.discrepancy == 0.0);
    CHECK(step.gate == 1.0);
  }
  ContextFeatures always_on = enhance(ctx, 1.0, p);
  const auto reference = flow::euler_denoise(field, x0, 8, always_on, 0);
  CHECK(gated.actions == reference.actions);
}

TEST_CASE("a diverging refinement round falls back to the last finite result") {
  // A field whose output explodes once the context grows: linear in the
  // pooled context with a huge coefficient. Stage 1 sees a zero context and
  // stays finite; the enhanced round adds a large ungated bias and diverges.
  NetArch arch{1, 1, 4, 1, {}};
  Vec params = Vec::Zero(arch.param_count());
  Eigen::Map<Mat> w(params.data(), 1, arch.input_dim());
  w(0, 2) = 1e160;  // coefficient on the first pooled-context channel
  const VelocityField field(arch, params);

  auto ctx = make_ctx(1, 1, 1, 4);  // all-zero tokens
  MpgParams p = MpgParams::init(4, 2, Rng(18), /*lambda=*/1.0);
  p.b_mpg.setConstant(1e160);
  const auto encoder = ActionEncoder::init(4, 1, Rng(19));
  Mat x0(1, 1);
  x0 << 0.25;

  const auto base = flow::euler_denoise(field, x0, 4, ctx, 0);
  const auto result = refine(field, ctx, 2, 4, p, encoder, x0, 0);
  CHECK(result.diverged);
  CHECK(result.actions == base.actions);
}

TEST_CASE("joint training gradients match finite differences with the gate frozen") {
  const int d_model = 5, d_emb = 3, T = 3, d = 2;
  const VelocityField field(NetArch{T, d, d_model, 1, {12}}, Rng(20));
  auto p = MpgParams::init(d_model, d_emb, Rng(21), /*lambda=*/0.3);
  p.b_mpg.setRandom();
  const auto encoder = ActionEncoder::init(d_model, d, Rng(22));
  auto ctx = make_ctx(2, 1, T, d_model);
  ctx.tokens.setRandom();
  Rng rng(23);
  Mat target(T, d), x0(T, d);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < d; ++j) {
      target(i, j) = rng.normal();
      x0(i, j) = rng.normal();
    }
  const double t = 0.4;

  const auto analytic = mpg_fm_loss(field, p, encoder, ctx, target, x0, t, 0);
  CHECK(analytic.dtau == 0.0);

  // loss with the gate frozen at the analytic run's value
  const double g_frozen = analytic.diag.gate;
  auto frozen_loss = [&](const MpgParams& pp) {
    const auto enhanced = enhance(ctx, g_frozen, pp);
    return flow::fm_loss(field, target, x0, t, enhanced, 0).loss;
  };

  const double eps = 1e-6;
  double worst = 0.0;
  auto fd_check = [&](double* param, double analytic_grad) {
    const double saved = *param;
    *param = saved + eps;
    const double lp = frozen_loss(p);
    *param = saved - eps;
    const double lm = frozen_loss(p);
    *param = saved;
    const double fd = (lp - lm) / (2.0 * eps);
    worst = std::max(worst, std::abs(fd - analytic_grad) /
                                std::max({1.0, std::abs(fd), std::abs(analytic_grad)}));
  };
  for (int i = 0; i < d_model; ++i)
    for (int j = 0; j < d_emb; ++j) fd_check(&p.w_mpg(i, j), analytic.dw_mpg(i, j));
  for (int i = 0; i < d_emb; ++i)
    for (int j = 0; j < d_model; ++j) fd_check(&p.e_obs(i, j), analytic.de_obs(i, j));
  for (int i = 0; i < d_model; ++i) fd_check(&p.b_mpg[i], analytic.db_mpg[i]);
  CHECK(worst < 1e-6);

  // tau only reaches the loss through the stop-gradiented gate: with the
  // gate frozen the loss is exactly flat in tau.
  const double before = frozen_loss(p);
  p.tau *= 2.0;
  CHECK(frozen_loss(p) == before);
}

TEST_CASE("field gradients through the enhanced context match finite differences") {
  const VelocityField field(NetArch{2, 2, 4, 1, {8}}, Rng(24));
  const auto p = MpgParams::init(4, 3, Rng(25), /*lambda=*/0.2);
  const auto encoder = ActionEncoder::init(4, 2, Rng(26));
  auto ctx = make_ctx(1, 1, 2, 4);
  ctx.tokens.setRandom();
  const Mat target = Mat::Random(2, 2), x0 = Mat::Random(2, 2);
  const double t = 0.6;

  const auto analytic = mpg_fm_loss(field, p, encoder, ctx, target, x0, t, 0);
  VelocityField probe = field;
  const double eps = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < probe.params().size(); ++i) {
    const double saved = probe.params()[i];
    probe.mutable_params()[i] = saved + eps;
    const double lp = mpg_fm_loss(probe, p, encoder, ctx, target, x0, t, 0).loss;
    probe.mutable_params()[i] = saved - eps;
    const double lm = mpg_fm_loss(probe, p, encoder, ctx, target, x0, t, 0).loss;
    probe.mutable_params()[i] = saved;
    const double fd = (lp - lm) / (2.0 * eps);
    worst = std::max(worst, std::abs(fd - analytic.dfield[i]) /
                                std::max({1.0, std::abs(fd), std::abs(analytic.dfield[i])}));
  }
  CHECK(worst < 1e-5);
}
