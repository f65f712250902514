// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "uniflow/rng.hpp"
#include "uniflow/space.hpp"

namespace uniflow::sim {

using space::Mat;
using space::Vec;

enum class Dynamics { integrator, first_order_lag };

/// Desk-scale kinematic stand-in for a robot: state lives in the unified
/// space; only the embodiment's active slots respond to actions. Angle slots
/// wrap to (-pi, pi].
struct SimEmbodiment {
  space::EmbodimentSpec spec;
  const space::SlotLayout* layout = nullptr;
  Dynamics dynamics = Dynamics::integrator;
  double lag_alpha = 0.5;
  Vec state;

  SimEmbodiment(const space::EmbodimentSpec& spec, const space::SlotLayout& layout,
                Dynamics dynamics = Dynamics::integrator, double lag_alpha = 0.5);
  void step(const Vec& action_unified);
  /// Hold action: leaves the state unchanged for one step (all-zero command).
  Vec hold_action() const { return Vec::Zero(layout->dim()); }
};

/// Inference-latency injection for sessions and benchmarks.
struct LatencyModel {
  enum class Kind { constant, uniform_jitter, spike };
  Kind kind = Kind::constant;
  double value_s = 0.0;      // constant / spike base
  double lo_s = 0.0;         // uniform_jitter
  double hi_s = 0.0;
  double spike_p = 0.0;      // spike probability
  double magnitude_s = 0.0;  // spike surcharge

  double sample(Rng& rng) const;
  static LatencyModel constant(double value_s);
  static LatencyModel uniform_jitter(double lo_s, double hi_s);
  static LatencyModel spike(double base_s, double p, double magnitude_s);
};

enum class TaskKind { reach, figure_eight, bimodal_pick };
TaskKind task_kind_from_string(const std::string& s);

struct TaskParams {
  TaskKind kind = TaskKind::reach;
  double amplitude = 0.5;  // workspace scale of the generated targets
  int period = 100;        // figure_eight period in steps
};

/// Per-step state targets over the embodiment's active slots (projected into
/// the unified space). Smooth in the continuous limit; goals are seeded.
std::vector<Vec> reference_trajectory(const TaskParams& task, int total_steps, std::uint64_t seed,
                                      const space::EmbodimentSpec& emb,
                                      const space::SlotLayout& layout);

struct ContinuityMetrics {
  double max_step_jump = 0.0;  // max L_inf difference of consecutive actions
  double mean_jerk = 0.0;      // mean L2 norm of second differences
  double underflow_rate = 0.0;
};

ContinuityMetrics continuity_metrics(const std::vector<Vec>& executed_actions,
                                     const std::vector<bool>& underflow_flags);

/// Mean wrist-displacement similarity: cosine between net predicted and
/// ground-truth wrist displacement (first to last state), averaged over
/// hands. A zero displacement on either side contributes 0.
double mwds(const std::vector<Vec>& predicted_states, const std::vector<Vec>& ground_truth_states,
            const std::vector<std::array<int, 3>>& wrist_slots);

/// Trajectory CSV export: header "step,slot0,...,slotN".
void write_trajectory_csv(const std::string& path, const std::vector<Vec>& states);

}  // namespace uniflow::sim
