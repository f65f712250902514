// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "uniflow/flow.hpp"
#include "uniflow/space.hpp"

namespace uniflow::chunking {

using flow::Mat;
using flow::Vec;

/// Draws an inference delay (in control steps) from the embodiment's delay
/// distribution.
int sample_delay(const space::DelayModel& model, Rng& rng);

/// Per-token flow timesteps for a delayed chunk: 1 on the committed prefix
/// (rows < d), t_base on the generated postfix.
Vec assign_timesteps(int chunk_len, int delay, double t_base);

/// Flow-matching loss restricted to the postfix. The committed prefix rows
/// enter the field input as constants (clean actions at timestep 1) and are
/// excluded from the sum, so the loss and its gradient are exactly
/// independent of the target's prefix rows. With d == 0 this is bit-identical
/// to fm_loss.
flow::LossGrad masked_fm_loss(const flow::VelocityField& field, const Mat& chunk_target,
                              const Mat& committed_prefix, const Mat& x0, int delay,
                              double t_base, const flow::ContextFeatures& ctx, int embodiment);

/// Control steps to commit before starting an inference cycle:
/// ceil(t_inference / t_control) + epsilon_safety. Overestimation is safe;
/// underestimation breaks continuity.
int commit_delay(double t_inference_s, double t_control_s, int epsilon_safety);

/// Overwrites iterate rows < d with the committed buffer rows; rows >= d
/// pass through untouched. Throws ProtocolError when fewer than d committed
/// rows are supplied.
Mat lock_prefix(const Mat& iterate, const Mat& buffer_rows, int delay);

/// lock_prefix packaged as the euler_denoise iterate hook, so the lock holds
/// at every Euler step including the initial state.
flow::IterateHook make_lock_hook(Mat buffer_rows, int delay);

/// Execution continuation: the currently executing prefix followed by the
/// freshly generated postfix. Only postfix rows of the new chunk are
/// admitted.
Mat stitch(const Mat& prev_exec, const Mat& new_chunk, int delay);

}  // namespace uniflow::chunking
