// SPDX-License-Identifier: Apache-2.0
#include "uniflow/sim.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace uniflow::sim {

namespace {

constexpr double kPi = 3.14159265358979323846;

double wrap_angle(double a) {
  // (-pi, pi]
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

SimEmbodiment::SimEmbodiment(const space::EmbodimentSpec& spec_in,
                             const space::SlotLayout& layout_in, Dynamics dynamics_in,
                             double lag_alpha_in)
    : spec(spec_in), layout(&layout_in), dynamics(dynamics_in), lag_alpha(lag_alpha_in) {
  if (!(lag_alpha > 0.0 && lag_alpha <= 1.0))
    throw std::invalid_argument("SimEmbodiment: lag alpha must lie in (0, 1]");
  state = Vec::Zero(layout->dim());
}

void SimEmbodiment::step(const Vec& action_unified) {
  if (action_unified.size() != layout->dim())
    throw std::invalid_argument("SimEmbodiment: action dimension does not match layout");
  if (!action_unified.allFinite())
    throw std::invalid_argument("SimEmbodiment: non-finite action rejected");

  const double dt = spec.control_period_s;
  for (const int slot : spec.active_slots) {
    const auto kind = layout->kind_of_slot(slot);
    double& q = state[slot];
    const double a = action_unified[slot];
    switch (dynamics) {
      case Dynamics::integrator:
        if (kind == space::SlotKind::eef_delta_m || kind == space::SlotKind::eef_rot_axis_angle) {
          q += a;  // per-step delta composition; rotation slots compose per axis component
        } else {
          q += a * dt;
        }
        break;
      case Dynamics::first_order_lag:
        q += lag_alpha * (a - q);
        break;
    }
    if (is_angle_kind(kind)) q = wrap_angle(q);
  }
  if (!state.allFinite()) throw std::runtime_error("SimEmbodiment: state left the finite range");
}

double LatencyModel::sample(Rng& rng) const {
  double v = 0.0;
  switch (kind) {
    case Kind::constant:
      v = value_s;
      break;
    case Kind::uniform_jitter:
      v = rng.uniform(lo_s, hi_s);
      break;
    case Kind::spike:
      v = value_s + (rng.uniform() < spike_p ? magnitude_s : 0.0);
      break;
  }
  return v < 0.0 ? 0.0 : v;
}

LatencyModel LatencyModel::constant(double value_s) {
  if (value_s < 0.0) throw std::invalid_argument("LatencyModel: negative latency");
  LatencyModel m;
  m.kind = Kind::constant;
  m.value_s = value_s;
  return m;
}

LatencyModel LatencyModel::uniform_jitter(double lo_s, double hi_s) {
  if (lo_s < 0.0 || hi_s < lo_s) throw std::invalid_argument("LatencyModel: invalid jitter range");
  LatencyModel m;
  m.kind = Kind::uniform_jitter;
  m.lo_s = lo_s;
  m.hi_s = hi_s;
  return m;
}

LatencyModel LatencyModel::spike(double base_s, double p, double magnitude_s) {
  if (base_s < 0.0 || magnitude_s < 0.0 || p < 0.0 || p > 1.0)
    throw std::invalid_argument("LatencyModel: invalid spike parameters");
  LatencyModel m;
  m.kind = Kind::spike;
  m.value_s = base_s;
  m.spike_p = p;
  m.magnitude_s = magnitude_s;
  return m;
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "reach") return TaskKind::reach;
  if (s == "figure_eight") return TaskKind::figure_eight;
  if (s == "bimodal_pick") return TaskKind::bimodal_pick;
  throw std::invalid_argument("unknown task: " + s);
}

std::vector<Vec> reference_trajectory(const TaskParams& task, int total_steps, std::uint64_t seed,
                                      const space::EmbodimentSpec& emb,
                                      const space::SlotLayout& layout) {
  if (total_steps < 1) throw std::invalid_argument("reference_trajectory: need at least one step");
  Rng rng(seed);
  const int n_active = emb.active_count();
  std::vector<Vec> refs;
  refs.reserve(static_cast<size_t>(total_steps));

  switch (task.kind) {
    case TaskKind::reach: {
      Vec goal(n_active);
      for (int i = 0; i < n_active; ++i) goal[i] = rng.uniform(-task.amplitude, task.amplitude);
      for (int n = 0; n < total_steps; ++n) {
        const double u = static_cast<double>(n) / std::max(1, total_steps - 1);
        const double s = u * u * (3.0 - 2.0 * u);  // smoothstep, C1
        refs.push_back(space::project(s * goal, emb, layout));
      }
      break;
    }
    case TaskKind::figure_eight: {
      if (task.period < 2) throw std::invalid_argument("figure_eight: period must be >= 2");
      for (int n = 0; n < total_steps; ++n) {
        const double phase = 2.0 * kPi * static_cast<double>(n % task.period) / task.period;
        Vec raw = Vec::Zero(n_active);
        raw[0] = task.amplitude * std::sin(phase);
        if (n_active > 1) raw[1] = task.amplitude * std::sin(2.0 * phase);
        refs.push_back(space::project(raw, emb, layout));
      }
      break;
    }
    case TaskKind::bimodal_pick: {
      // two mirrored goal modes, seeded coin
      const bool mode_a = rng.uniform() < 0.5;
      Vec goal = Vec::Constant(n_active, mode_a ? task.amplitude : -task.amplitude);
      for (int n = 0; n < total_steps; ++n) {
        const double u = static_cast<double>(n) / std::max(1, total_steps - 1);
        const double s = u * u * (3.0 - 2.0 * u);
        refs.push_back(space::project(s * goal, emb, layout));
      }
      break;
    }
  }
  return refs;
}

ContinuityMetrics continuity_metrics(const std::vector<Vec>& executed_actions,
                                     const std::vector<bool>& underflow_flags) {
  if (executed_actions.empty())
    throw std::invalid_argument("continuity_metrics: empty action log");
  ContinuityMetrics m;
  for (size_t i = 1; i < executed_actions.size(); ++i) {
    const double jump = (executed_actions[i] - executed_actions[i - 1]).cwiseAbs().maxCoeff();
    m.max_step_jump = std::max(m.max_step_jump, jump);
  }
  if (executed_actions.size() >= 3) {
    double total = 0.0;
    for (size_t i = 2; i < executed_actions.size(); ++i)
      total += (executed_actions[i] - 2.0 * executed_actions[i - 1] + executed_actions[i - 2])
                   .norm();
    m.mean_jerk = total / static_cast<double>(executed_actions.size() - 2);
  }
  if (!underflow_flags.empty()) {
    long flagged = 0;
    for (const bool f : underflow_flags) flagged += f;
    m.underflow_rate = static_cast<double>(flagged) / static_cast<double>(underflow_flags.size());
  }
  return m;
}

double mwds(const std::vector<Vec>& predicted_states,
            const std::vector<Vec>& ground_truth_states,
            const std::vector<std::array<int, 3>>& wrist_slots) {
  if (predicted_states.size() < 2 || ground_truth_states.size() < 2)
    throw std::invalid_argument("mwds: trajectories need at least two states");
  if (wrist_slots.empty()) throw std::invalid_argument("mwds: no wrist slots given");

  auto displacement = [](const std::vector<Vec>& traj, const std::array<int, 3>& slots) {
    Eigen::Vector3d d;
    for (int k = 0; k < 3; ++k) d[k] = traj.back()[slots[static_cast<size_t>(k)]] -
                                       traj.front()[slots[static_cast<size_t>(k)]];
    return d;
  };

  double total = 0.0;
  for (const auto& slots : wrist_slots) {
    const Eigen::Vector3d dp = displacement(predicted_states, slots);
    const Eigen::Vector3d dg = displacement(ground_truth_states, slots);
    const double np = dp.norm(), ng = dg.norm();
    total += (np == 0.0 || ng == 0.0) ? 0.0 : dp.dot(dg) / (np * ng);
  }
  return total / static_cast<double>(wrist_slots.size());
}

void write_trajectory_csv(const std::string& path, const std::vector<Vec>& states) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  if (states.empty()) return;
  out << "step";
  for (int j = 0; j < states.front().size(); ++j) out << ",slot" << j;
  out << "\n";
  for (size_t i = 0; i < states.size(); ++i) {
    out << i;
    for (int j = 0; j < states[i].size(); ++j) out << "," << states[i][j];
    out << "\n";
  }
}

}  // namespace uniflow::sim
