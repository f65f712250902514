// SPDX-License-Identifier: Apache-2.0
#include "uniflow/chunking.hpp"

#include <cmath>

#include "uniflow/errors.hpp"

namespace uniflow::chunking {

int sample_delay(const space::DelayModel& model, Rng& rng) {
  model.validate();
  const double u = rng.uniform();
  double cum = 0.0;
  for (int d = 0; d < model.d_max; ++d) {
    cum += model.pmf[static_cast<size_t>(d)];
    if (u < cum) return d;
  }
  return model.d_max - 1;
}

Vec assign_timesteps(int chunk_len, int delay, double t_base) {
  if (delay < 0 || delay > chunk_len)
    throw std::invalid_argument("assign_timesteps: delay must lie in [0, T]");
  if (!(t_base >= 0.0 && t_base < 1.0))
    throw std::invalid_argument("assign_timesteps: t_base must lie in [0, 1)");
  Vec t = Vec::Constant(chunk_len, t_base);
  t.head(delay).setOnes();
  return t;
}

flow::LossGrad masked_fm_loss(const flow::VelocityField& field, const Mat& chunk_target,
                              const Mat& committed_prefix, const Mat& x0, int delay,
                              double t_base, const flow::ContextFeatures& ctx, int embodiment) {
  const int T = static_cast<int>(chunk_target.rows());
  if (delay < 0 || delay > T) throw std::invalid_argument("masked_fm_loss: delay must lie in [0, T]");
  if (committed_prefix.rows() < delay)
    throw ProtocolError("masked_fm_loss: fewer committed rows than the delay requires");
  if (delay > 0 && committed_prefix.cols() != chunk_target.cols())
    throw std::invalid_argument("masked_fm_loss: committed prefix width mismatch");
  return flow::detail::fm_loss_kernel(field, chunk_target, delay > 0 ? &committed_prefix : nullptr,
                                      delay, x0, t_base, ctx, embodiment, nullptr);
}

int commit_delay(double t_inference_s, double t_control_s, int epsilon_safety) {
  if (t_inference_s < 0.0) throw std::invalid_argument("commit_delay: negative inference time");
  if (!(t_control_s > 0.0)) throw std::invalid_argument("commit_delay: control period must be > 0");
  if (epsilon_safety < 0) throw std::invalid_argument("commit_delay: negative safety margin");
  return static_cast<int>(std::ceil(t_inference_s / t_control_s)) + epsilon_safety;
}

Mat lock_prefix(const Mat& iterate, const Mat& buffer_rows, int delay) {
  if (delay < 0 || delay > iterate.rows())
    throw std::invalid_argument("lock_prefix: delay must lie in [0, T]");
  if (buffer_rows.rows() < delay)
    throw ProtocolError("lock_prefix: caller under-committed (" +
                        std::to_string(buffer_rows.rows()) + " buffered rows, need " +
                        std::to_string(delay) + ")");
  Mat out = iterate;
  if (delay > 0) out.topRows(delay) = buffer_rows.topRows(delay);
  return out;
}

flow::IterateHook make_lock_hook(Mat buffer_rows, int delay) {
  if (delay == 0) return {};
  if (buffer_rows.rows() < delay)
    throw ProtocolError("make_lock_hook: caller under-committed");
  return [rows = std::move(buffer_rows), delay](Mat& x) { x.topRows(delay) = rows.topRows(delay); };
}

Mat stitch(const Mat& prev_exec, const Mat& new_chunk, int delay) {
  if (prev_exec.rows() != new_chunk.rows() || prev_exec.cols() != new_chunk.cols())
    throw std::invalid_argument("stitch: chunk shapes must match");
  if (delay < 0 || delay > new_chunk.rows())
    throw std::invalid_argument("stitch: delay must lie in [0, T]");
  Mat out = new_chunk;
  if (delay > 0) out.topRows(delay) = prev_exec.topRows(delay);
  return out;
}

}  // namespace uniflow::chunking
