// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "uniflow/chunking.hpp"
#include "uniflow/flow.hpp"
#include "uniflow/gating.hpp"
#include "uniflow/sim.hpp"
#include "uniflow/space.hpp"

namespace uniflow::policy {

using flow::Mat;
using flow::Vec;

/// Snapshot handed to a policy at the start of an inference cycle.
struct Observation {
  Vec state;      // unified state at cycle start
  long step = 0;  // absolute control step the chunk begins at
  const std::vector<Vec>* reference = nullptr;  // full reference trajectory
};

struct CycleDiagnostics {
  std::vector<gating::RoundDiagnostics> rounds;
  bool diverged = false;
};

/// Produces unified-space action chunks for steps [obs.step, obs.step + T).
/// `committed` holds at least `lock_rows` unified rows already queued for
/// execution; implementations must reproduce them bit-exactly in the prefix.
class ChunkPolicy {
 public:
  virtual ~ChunkPolicy() = default;
  virtual int chunk_len() const = 0;
  virtual Mat plan_chunk(const Observation& obs, const Mat& committed, int lock_rows,
                         Rng cycle_rng, CycleDiagnostics* diag) = 0;
};

/// Scripted reference-tracking expert with model knowledge: plans from the
/// state predicted after the committed prefix executes. Used to close the
/// loop without learning and as the dataset generator for the toy field.
class AnalyticExpert : public ChunkPolicy {
 public:
  AnalyticExpert(const space::EmbodimentSpec& emb, const space::SlotLayout& layout,
                 sim::Dynamics dynamics, double lag_alpha, int chunk_len);

  int chunk_len() const override { return chunk_len_; }
  Mat plan_chunk(const Observation& obs, const Mat& committed, int lock_rows, Rng cycle_rng,
                 CycleDiagnostics* diag) override;

  /// The action driving one slot of the given kind from q toward r in one step.
  double expert_action(space::SlotKind kind, double q, double r, double dt) const;

 private:
  space::EmbodimentSpec emb_;
  const space::SlotLayout* layout_;
  sim::Dynamics dynamics_;
  double lag_alpha_;
  int chunk_len_;
};

/// Fixed seeded linear maps turning an observation into ContextFeatures:
/// prefix rows encode the upcoming reference window (relative to the current
/// state), state rows encode the current state, action-token rows start at
/// zero. The same builder is used for training and deployment.
class ContextBuilder {
 public:
  ContextBuilder(const space::EmbodimentSpec& emb, const space::SlotLayout& layout, int chunk_len,
                 int d_model, std::uint64_t seed, int prefix_rows = 2, int state_rows = 2);

  flow::ContextFeatures build(const Vec& unified_state,
                              const std::vector<Vec>& reference_window_unified) const;
  int d_model() const { return d_model_; }
  int prefix_rows() const { return prefix_rows_; }
  int state_rows() const { return state_rows_; }

 private:
  space::EmbodimentSpec emb_;
  const space::SlotLayout* layout_;
  int chunk_len_;
  int d_model_;
  int prefix_rows_;
  int state_rows_;
  Mat w_ref_;    // (prefix_rows * d_model) x (chunk_len * n_active)
  Mat w_state_;  // (state_rows * d_model) x n_active
};

struct FlowPolicyOptions {
  int euler_steps = 8;
  int refine_rounds = 0;        // MPG refinement rounds at inference
  bool mpg = false;             // enable gating
  double corruption_sigma = 0;  // additive noise on suffix rows (experiments)
};

/// The trained rectified-flow policy: builds context from the observation,
/// locks the committed prefix through every Euler step, optionally refines
/// with the manifold-preserving gate, and projects rows back into unified
/// space.
class FlowChunkPolicy : public ChunkPolicy {
 public:
  FlowChunkPolicy(flow::VelocityField field, ContextBuilder builder,
                  const space::EmbodimentSpec& emb, const space::SlotLayout& layout,
                  int embodiment_index, FlowPolicyOptions options,
                  std::optional<gating::MpgParams> mpg = std::nullopt,
                  std::optional<gating::ActionEncoder> encoder = std::nullopt);

  int chunk_len() const override { return field_.arch().chunk_len; }
  Mat plan_chunk(const Observation& obs, const Mat& committed, int lock_rows, Rng cycle_rng,
                 CycleDiagnostics* diag) override;

  const flow::VelocityField& field() const { return field_; }
  flow::VelocityField& mutable_field() { return field_; }
  const ContextBuilder& builder() const { return builder_; }
  const std::optional<gating::MpgParams>& mpg_params() const { return mpg_; }
  std::optional<gating::MpgParams>& mutable_mpg_params() { return mpg_; }
  const std::optional<gating::ActionEncoder>& encoder() const { return encoder_; }
  const FlowPolicyOptions& options() const { return options_; }
  FlowPolicyOptions& mutable_options() { return options_; }

 private:
  flow::VelocityField field_;
  ContextBuilder builder_;
  space::EmbodimentSpec emb_;
  const space::SlotLayout* layout_;
  int embodiment_index_;
  FlowPolicyOptions options_;
  std::optional<gating::MpgParams> mpg_;
  std::optional<gating::ActionEncoder> encoder_;
};

/// Reference window [step+1, step+T] in unified coordinates, padded with the
/// last reference when the trajectory ends.
std::vector<Vec> reference_window(const std::vector<Vec>& reference, long step, int chunk_len);

}  // namespace uniflow::policy
