// SPDX-License-Identifier: Apache-2.0
#include "uniflow/policy.hpp"

#include <cmath>

#include "uniflow/errors.hpp"

namespace uniflow::policy {

namespace {

constexpr double kPi = 3.14159265358979323846;

double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

bool is_angle_kind(space::SlotKind kind) {
  return kind == space::SlotKind::arm_joint_rad || kind == space::SlotKind::finger_rad ||
         kind == space::SlotKind::base_heading;
}

}  // namespace

std::vector<Vec> reference_window(const std::vector<Vec>& reference, long step, int chunk_len) {
  if (reference.empty()) throw std::invalid_argument("reference_window: empty reference");
  std::vector<Vec> window;
  window.reserve(static_cast<size_t>(chunk_len));
  for (int j = 1; j <= chunk_len; ++j) {
    const size_t idx = std::min(static_cast<size_t>(step + j), reference.size() - 1);
    window.push_back(reference[idx]);
  }
  return window;
}

AnalyticExpert::AnalyticExpert(const space::EmbodimentSpec& emb, const space::SlotLayout& layout,
                               sim::Dynamics dynamics, double lag_alpha, int chunk_len)
    : emb_(emb), layout_(&layout), dynamics_(dynamics), lag_alpha_(lag_alpha),
      chunk_len_(chunk_len) {
  if (chunk_len_ < 1) throw std::invalid_argument("AnalyticExpert: chunk length must be >= 1");
}

double AnalyticExpert::expert_action(space::SlotKind kind, double q, double r, double dt) const {
  if (dynamics_ == sim::Dynamics::first_order_lag) return q + (r - q) / lag_alpha_;
  if (kind == space::SlotKind::eef_delta_m || kind == space::SlotKind::eef_rot_axis_angle)
    return r - q;  // per-step delta
  const double gap = is_angle_kind(kind) ? wrap_angle(r - q) : (r - q);
  return gap / dt;
}

Mat AnalyticExpert::plan_chunk(const Observation& obs, const Mat& committed, int lock_rows,
                               Rng, CycleDiagnostics*) {
  if (obs.reference == nullptr) throw std::invalid_argument("AnalyticExpert: reference required");
  const auto window = reference_window(*obs.reference, obs.step, chunk_len_);
  Mat chunk(chunk_len_, layout_->dim());
  chunk.setZero();

  // roll the committed prefix through the model to get the hand-off state
  sim::SimEmbodiment model(emb_, *layout_, dynamics_, lag_alpha_);
  model.state = obs.state;
  for (int i = 0; i < lock_rows; ++i) {
    chunk.row(i) = committed.row(i);
    model.step(committed.row(i).transpose());
  }
  for (int i = lock_rows; i < chunk_len_; ++i) {
    Vec action = Vec::Zero(layout_->dim());
    for (const int slot : emb_.active_slots) {
      action[slot] = expert_action(layout_->kind_of_slot(slot), model.state[slot],
                                   window[static_cast<size_t>(i)][slot], emb_.control_period_s);
    }
    chunk.row(i) = action.transpose();
    model.step(action);
  }
  return chunk;
}

ContextBuilder::ContextBuilder(const space::EmbodimentSpec& emb, const space::SlotLayout& layout,
                               int chunk_len, int d_model, std::uint64_t seed, int prefix_rows,
                               int state_rows)
    : emb_(emb), layout_(&layout), chunk_len_(chunk_len), d_model_(d_model),
      prefix_rows_(prefix_rows), state_rows_(state_rows) {
  if (prefix_rows_ < 1 || state_rows_ < 1)
    throw std::invalid_argument("ContextBuilder: need at least one prefix and one state row");
  Rng rng(seed);
  const int n_active = emb_.active_count();
  auto fill = [](Mat& m, int rows, int cols, Rng r) {
    m.resize(rows, cols);
    const double scale = 1.0 / std::sqrt(cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = scale * r.normal();
  };
  fill(w_ref_, prefix_rows_ * d_model_, chunk_len_ * n_active, rng.child("ref"));
  fill(w_state_, state_rows_ * d_model_, n_active, rng.child("state"));
}

flow::ContextFeatures ContextBuilder::build(const Vec& unified_state,
                                            const std::vector<Vec>& reference_window_unified) const {
  if (static_cast<int>(reference_window_unified.size()) != chunk_len_)
    throw std::invalid_argument("ContextBuilder: reference window must have chunk length");
  const int n_active = emb_.active_count();
  const Vec q = space::extract(unified_state, emb_);

  Vec rel(chunk_len_ * n_active);
  for (int j = 0; j < chunk_len_; ++j)
    rel.segment(j * n_active, n_active) =
        space::extract(reference_window_unified[static_cast<size_t>(j)], emb_) - q;

  flow::ContextFeatures ctx;
  ctx.tokens = Mat::Zero(prefix_rows_ + state_rows_ + chunk_len_, d_model_);
  const Vec ref_feat = w_ref_ * rel;
  for (int r = 0; r < prefix_rows_; ++r)
    ctx.tokens.row(r) = ref_feat.segment(r * d_model_, d_model_).transpose();
  const Vec state_feat = w_state_ * q;
  for (int r = 0; r < state_rows_; ++r)
    ctx.tokens.row(prefix_rows_ + r) = state_feat.segment(r * d_model_, d_model_).transpose();
  ctx.prefix = {0, prefix_rows_};
  ctx.state = {prefix_rows_, prefix_rows_ + state_rows_};
  ctx.action_tokens = {prefix_rows_ + state_rows_, prefix_rows_ + state_rows_ + chunk_len_};
  return ctx;
}

FlowChunkPolicy::FlowChunkPolicy(flow::VelocityField field, ContextBuilder builder,
                                 const space::EmbodimentSpec& emb,
                                 const space::SlotLayout& layout, int embodiment_index,
                                 FlowPolicyOptions options,
                                 std::optional<gating::MpgParams> mpg,
                                 std::optional<gating::ActionEncoder> encoder)
    : field_(std::move(field)), builder_(std::move(builder)), emb_(emb), layout_(&layout),
      embodiment_index_(embodiment_index), options_(options), mpg_(std::move(mpg)),
      encoder_(std::move(encoder)) {
  if (field_.arch().action_dim != emb_.active_count())
    throw std::invalid_argument("FlowChunkPolicy: field action width must match active slots");
  if (options_.mpg && (!mpg_.has_value() || !encoder_.has_value()))
    throw std::invalid_argument("FlowChunkPolicy: gating enabled without parameters");
}

Mat FlowChunkPolicy::plan_chunk(const Observation& obs, const Mat& committed, int lock_rows,
                                Rng cycle_rng, CycleDiagnostics* diag) {
  if (obs.reference == nullptr) throw std::invalid_argument("FlowChunkPolicy: reference required");
  const int T = chunk_len();
  const int n_active = emb_.active_count();

  auto ctx = builder_.build(obs.state, reference_window(*obs.reference, obs.step, T));
  if (options_.corruption_sigma > 0.0) {
    Rng noise = cycle_rng.child("corruption");
    const auto span = ctx.suffix();
    for (int i = span.begin; i < span.end; ++i)
      for (int j = 0; j < ctx.d_model(); ++j)
        ctx.tokens(i, j) += options_.corruption_sigma * noise.normal();
  }

  Mat x0(T, n_active);
  Rng noise_rng = cycle_rng.child("x0");
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < n_active; ++j) x0(i, j) = noise_rng.normal();

  flow::IterateHook lock;
  if (lock_rows > 0) {
    Mat committed_active(lock_rows, n_active);
    for (int i = 0; i < lock_rows; ++i)
      committed_active.row(i) = space::extract(committed.row(i).transpose(), emb_).transpose();
    lock = chunking::make_lock_hook(std::move(committed_active), lock_rows);
  }

  flow::ActionChunk chunk;
  if (options_.mpg && options_.refine_rounds > 0) {
    std::vector<gating::RoundDiagnostics> rounds;
    chunk = gating::refine(field_, ctx, options_.refine_rounds, options_.euler_steps, *mpg_,
                           *encoder_, x0, embodiment_index_, diag ? &rounds : nullptr, lock);
    if (diag) {
      diag->rounds = std::move(rounds);
      diag->diverged = chunk.diverged;
    }
  } else {
    chunk = flow::euler_denoise(field_, x0, options_.euler_steps, ctx, embodiment_index_, lock);
  }
  chunk.committed_prefix = lock_rows;

  Mat unified(T, layout_->dim());
  for (int i = 0; i < T; ++i)
    unified.row(i) =
        space::project(chunk.actions.row(i).transpose(), emb_, *layout_).transpose();
  // the locked prefix must survive the round-trip bit-exactly
  for (int i = 0; i < lock_rows; ++i) unified.row(i) = committed.row(i);
  return unified;
}

}  // namespace uniflow::policy
