// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "uniflow/flow.hpp"

namespace uniflow::gating {

using flow::ContextFeatures;
using flow::Mat;
using flow::Vec;

/// Parameters of the manifold-preserving gate: observation/action projections
/// into a shared embedding space, the enhancement projection with its ungated
/// bias, and the discrepancy hyperparameters.
struct MpgParams {
  Mat e_obs;   // d_emb x d_model
  Mat e_act;   // d_emb x d_model (action embeddings live in model space)
  Mat w_mpg;   // d_model x d_emb
  Vec b_mpg;   // d_model
  double lambda = 0.1;
  double tau = 1.0;
  int slices = 32;  // M
  std::uint64_t slice_seed = 0;

  int d_model() const { return static_cast<int>(w_mpg.rows()); }
  int d_emb() const { return static_cast<int>(w_mpg.cols()); }
  void validate() const;
  static MpgParams init(int d_model, int d_emb, Rng rng, double lambda = 0.1, double tau = 1.0,
                        int slices = 32);
};

/// Linear encoder mapping action rows (d) into model space (d_model) at zero
/// noise level; supplies both the anchor and the gate's action-token view.
struct ActionEncoder {
  Mat w;  // d_model x action_dim
  Mat encode(const Mat& action_rows) const { return action_rows * w.transpose(); }
  static ActionEncoder init(int d_model, int action_dim, Rng rng);
};

struct GateDiagnostics {
  double discrepancy = 0.0;  // D >= 0
  double gate = 1.0;         // exp(-D/tau) in (0, 1]
};

/// Column-wise mean of noise-free action embeddings; rejects empty input.
Vec action_anchor(const Mat& action_embeds_noise_free);

/// Per-row mean-zero unit-variance normalization, eps 1e-5, no learned affine.
Mat layer_norm_rows(const Mat& m);

/// Sliced Wasserstein discrepancy between two n x d_emb samples: mean over M
/// unit directions (Gaussian draws, normalized, re-derived from the seed on
/// every call) of the squared distance between sorted projections.
double swd(const Mat& h_hat, const Mat& z_hat, int slices, std::uint64_t slice_seed);

/// Reliability gate g = exp(-D / tau), clamped at 1e-300 so it stays inside
/// (0, 1] in floating point. Treated as a constant under differentiation.
double gate(double discrepancy, double tau);

/// Gated residual with the ungated prior offset, applied to each given row:
/// row + lambda * g * W * E_obs(row) + lambda * b.
Mat enhance_rows(const Mat& rows, double g, const MpgParams& p);

/// enhance_rows over the suffix span (state + action tokens); prefix rows
/// pass through untouched.
ContextFeatures enhance(const ContextFeatures& ctx, double g, const MpgParams& p);

/// Discrepancy + gate for a suffix block against an anchor: D from
/// LN(E_obs * rows) vs LN(E_act * anchor) broadcast along the rows.
GateDiagnostics assess(const Mat& suffix_rows, const Vec& anchor, const MpgParams& p);

struct RoundDiagnostics {
  std::vector<GateDiagnostics> steps;  // one per Euler step
  double mean_discrepancy() const;
  double mean_gate() const;
};

/// Two-stage refinement: a baseline denoising pass, then n_ref rounds that
/// anchor the gate on the previous round's prediction (encoded noise-free)
/// and enhance the suffix features at every Euler step. n_ref == 0 is
/// bit-identical to euler_denoise. A diverging round returns the last finite
/// round's result with the chunk's diverged flag set.
flow::ActionChunk refine(const flow::VelocityField& field, const ContextFeatures& ctx, int n_ref,
                         int euler_steps, const MpgParams& p, const ActionEncoder& encoder,
                         const Mat& x0, int embodiment,
                         std::vector<RoundDiagnostics>* diagnostics = nullptr,
                         const flow::IterateHook& lock = {});

/// Joint training objective: fm_loss evaluated on the enhanced context, with
/// the anchor built from the ground-truth chunk and the gate stop-gradiented.
/// Returns exact gradients for the field and for the trainable gate
/// parameters; d_tau is identically zero by the stop-gradient contract.
struct MpgLossGrad {
  double loss = 0.0;
  Vec dfield;
  Mat de_obs;
  Mat dw_mpg;
  Vec db_mpg;
  double dtau = 0.0;  // always 0: the gate is a constant under differentiation
  GateDiagnostics diag;
};
MpgLossGrad mpg_fm_loss(const flow::VelocityField& field, const MpgParams& p,
                        const ActionEncoder& encoder, const ContextFeatures& ctx,
                        const Mat& target, const Mat& x0, double t, int embodiment);

}  // namespace uniflow::gating
