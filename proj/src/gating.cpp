// SPDX-License-Identifier: Apache-2.0
#include "uniflow/gating.hpp"

#include <algorithm>
#include <cmath>

#include "uniflow/errors.hpp"

namespace uniflow::gating {

void MpgParams::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("MpgParams: lambda must be >= 0");
  if (!(tau > 0.0)) throw std::invalid_argument("MpgParams: tau must be > 0");
  if (slices < 1) throw std::invalid_argument("MpgParams: slice count must be >= 1");
  if (e_obs.rows() != d_emb() || e_obs.cols() != d_model() || e_act.rows() != d_emb() ||
      e_act.cols() != d_model() || b_mpg.size() != d_model())
    throw std::invalid_argument("MpgParams: inconsistent projection shapes");
}

MpgParams MpgParams::init(int d_model, int d_emb, Rng rng, double lambda, double tau, int slices) {
  MpgParams p;
  p.lambda = lambda;
  p.tau = tau;
  p.slices = slices;
  p.slice_seed = rng.child("slices").seed();
  auto fill = [](Mat& m, int rows, int cols, Rng r, double scale) {
    m.resize(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = scale * r.normal();
  };
  fill(p.e_obs, d_emb, d_model, rng.child("e_obs"), 1.0 / std::sqrt(d_model));
  fill(p.e_act, d_emb, d_model, rng.child("e_act"), 1.0 / std::sqrt(d_model));
  fill(p.w_mpg, d_model, d_emb, rng.child("w_mpg"), 1.0 / std::sqrt(d_emb));
  p.b_mpg = Vec::Zero(d_model);
  p.validate();
  return p;
}

ActionEncoder ActionEncoder::init(int d_model, int action_dim, Rng rng) {
  ActionEncoder enc;
  enc.w.resize(d_model, action_dim);
  const double scale = 1.0 / std::sqrt(action_dim);
  for (int i = 0; i < d_model; ++i)
    for (int j = 0; j < action_dim; ++j) enc.w(i, j) = scale * rng.normal();
  return enc;
}

Vec action_anchor(const Mat& action_embeds_noise_free) {
  if (action_embeds_noise_free.rows() < 1)
    throw std::invalid_argument("action_anchor: at least one embedding row required");
  return action_embeds_noise_free.colwise().mean().transpose();
}

Mat layer_norm_rows(const Mat& m) {
  constexpr double kEps = 1e-5;
  Mat out(m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i) {
    const double mean = m.row(i).mean();
    const double var = (m.row(i).array() - mean).square().mean();
    out.row(i) = (m.row(i).array() - mean) / std::sqrt(var + kEps);
  }
  return out;
}

double swd(const Mat& h_hat, const Mat& z_hat, int slices, std::uint64_t slice_seed) {
  if (h_hat.rows() != z_hat.rows() || h_hat.cols() != z_hat.cols())
    throw std::invalid_argument("swd: sample shapes must match");
  if (h_hat.rows() < 1) throw std::invalid_argument("swd: empty samples");
  if (slices < 1) throw std::invalid_argument("swd: slice count must be >= 1");

  Rng rng(slice_seed);
  const int n = static_cast<int>(h_hat.rows());
  const int dim = static_cast<int>(h_hat.cols());
  std::vector<double> ph(static_cast<size_t>(n)), pz(static_cast<size_t>(n));
  double total = 0.0;
  for (int m = 0; m < slices; ++m) {
    Vec theta(dim);
    do {
      for (int j = 0; j < dim; ++j) theta[j] = rng.normal();
    } while (theta.norm() < 1e-12);
    theta /= theta.norm();
    for (int i = 0; i < n; ++i) {
      ph[static_cast<size_t>(i)] = h_hat.row(i).dot(theta);
      pz[static_cast<size_t>(i)] = z_hat.row(i).dot(theta);
    }
    std::sort(ph.begin(), ph.end());
    std::sort(pz.begin(), pz.end());
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const double diff = ph[static_cast<size_t>(i)] - pz[static_cast<size_t>(i)];
      acc += diff * diff;
    }
    total += acc;
  }
  return total / slices;
}

double gate(double discrepancy, double tau) {
  if (discrepancy < 0.0) throw std::invalid_argument("gate: discrepancy must be >= 0");
  if (!(tau > 0.0)) throw std::invalid_argument("gate: tau must be > 0");
  const double g = std::exp(-discrepancy / tau);
  return g < 1e-300 ? 1e-300 : g;
}

Mat enhance_rows(const Mat& rows, double g, const MpgParams& p) {
  if (!(g > 0.0 && g <= 1.0)) throw std::invalid_argument("enhance: gate must lie in (0, 1]");
  p.validate();
  if (rows.cols() != p.d_model())
    throw std::invalid_argument("enhance: row width does not match d_model");
  const Mat projected = rows * p.e_obs.transpose() * p.w_mpg.transpose();
  Mat out = rows + (p.lambda * g) * projected;
  out.rowwise() += (p.lambda * p.b_mpg).transpose();
  return out;
}

ContextFeatures enhance(const ContextFeatures& ctx, double g, const MpgParams& p) {
  ContextFeatures out = ctx;
  const auto span = ctx.suffix();
  if (span.size() > 0)
    out.tokens.middleRows(span.begin, span.size()) =
        enhance_rows(ctx.tokens.middleRows(span.begin, span.size()), g, p);
  return out;
}

GateDiagnostics assess(const Mat& suffix_rows, const Vec& anchor, const MpgParams& p) {
  p.validate();
  if (anchor.size() != p.d_model())
    throw std::invalid_argument("assess: anchor width does not match d_model");
  const Mat h_hat = layer_norm_rows(suffix_rows * p.e_obs.transpose());
  const Vec z = p.e_act * anchor;
  const Mat z_hat = layer_norm_rows(z.transpose()).replicate(suffix_rows.rows(), 1);
  GateDiagnostics diag;
  diag.discrepancy = swd(h_hat, z_hat, p.slices, p.slice_seed);
  diag.gate = gate(diag.discrepancy, p.tau);
  return diag;
}

double RoundDiagnostics::mean_discrepancy() const {
  if (steps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& d : steps) s += d.discrepancy;
  return s / static_cast<double>(steps.size());
}

double RoundDiagnostics::mean_gate() const {
  if (steps.empty()) return 1.0;
  double s = 0.0;
  for (const auto& d : steps) s += d.gate;
  return s / static_cast<double>(steps.size());
}

namespace {

Mat suffix_for_gate(const ContextFeatures& ctx, const ActionEncoder& encoder, const Mat& iterate) {
  const int n_state = ctx.state.size();
  Mat rows(n_state + iterate.rows(), ctx.d_model());
  if (n_state > 0) rows.topRows(n_state) = ctx.tokens.middleRows(ctx.state.begin, n_state);
  rows.bottomRows(iterate.rows()) = encoder.encode(iterate);
  return rows;
}

}  // namespace

flow::ActionChunk refine(const flow::VelocityField& field, const ContextFeatures& ctx, int n_ref,
                         int euler_steps, const MpgParams& p, const ActionEncoder& encoder,
                         const Mat& x0, int embodiment,
                         std::vector<RoundDiagnostics>* diagnostics,
                         const flow::IterateHook& lock) {
  if (n_ref < 0) throw std::invalid_argument("refine: n_ref must be >= 0");
  flow::ActionChunk chunk = flow::euler_denoise(field, x0, euler_steps, ctx, embodiment, lock);
  if (diagnostics) diagnostics->clear();

  for (int round = 1; round <= n_ref; ++round) {
    const Vec anchor = action_anchor(encoder.encode(chunk.actions));
    RoundDiagnostics round_diag;
    ContextFeatures step_ctx = ctx;  // holder refreshed per step
    auto provider = [&](int, const Mat& x) -> const ContextFeatures& {
      const auto diag = assess(suffix_for_gate(ctx, encoder, x), anchor, p);
      round_diag.steps.push_back(diag);
      step_ctx = enhance(ctx, diag.gate, p);
      return step_ctx;
    };
    try {
      Mat refined = flow::denoise_loop(field, x0, euler_steps, provider, embodiment, lock);
      chunk.actions = std::move(refined);
      chunk.timesteps = Vec::Ones(x0.rows());
    } catch (const DivergenceError&) {
      chunk.diverged = true;  // keep the last finite round's result
      if (diagnostics) diagnostics->push_back(std::move(round_diag));
      break;
    }
    if (diagnostics) diagnostics->push_back(std::move(round_diag));
  }
  return chunk;
}

MpgLossGrad mpg_fm_loss(const flow::VelocityField& field, const MpgParams& p,
                        const ActionEncoder& encoder, const ContextFeatures& ctx,
                        const Mat& target, const Mat& x0, double t, int embodiment) {
  p.validate();
  const auto& arch = field.arch();
  ctx.validate(arch.chunk_len);

  Mat x_t = (1.0 - t) * x0 + t * target;
  const Vec anchor = action_anchor(encoder.encode(target));
  MpgLossGrad out;
  out.diag = assess(suffix_for_gate(ctx, encoder, x_t), anchor, p);
  const double g = out.diag.gate;  // stop-gradient: constant from here on

  const ContextFeatures enhanced = enhance(ctx, g, p);
  const auto fw = field.forward(x_t, t, enhanced, embodiment);
  const Mat residual = fw.output - (target - x0);
  out.loss = residual.squaredNorm();

  out.dfield = Vec::Zero(field.params().size());
  Vec dinput;
  field.backward(fw, 2.0 * residual, out.dfield, &dinput);

  // Pooled context = mean over rows, so every row of the enhanced context
  // receives dpooled / n. Only suffix rows pass through the gate pathway.
  const Vec dpooled = dinput.segment(field.input_offset_pooled(), arch.d_model);
  const Vec drow = dpooled / static_cast<double>(ctx.rows());
  const auto span = ctx.suffix();

  out.de_obs = Mat::Zero(p.d_emb(), p.d_model());
  out.dw_mpg = Mat::Zero(p.d_model(), p.d_emb());
  out.db_mpg = Vec::Zero(p.d_model());
  const Vec wt_drow = p.w_mpg.transpose() * drow;
  for (int i = span.begin; i < span.end; ++i) {
    const Vec h = ctx.tokens.row(i).transpose();
    const Vec e = p.e_obs * h;
    out.dw_mpg.noalias() += (p.lambda * g) * (drow * e.transpose());
    out.de_obs.noalias() += (p.lambda * g) * (wt_drow * h.transpose());
    out.db_mpg += p.lambda * drow;
  }
  out.dtau = 0.0;
  return out;
}

}  // namespace uniflow::gating
