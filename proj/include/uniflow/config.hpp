// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "uniflow/gating.hpp"
#include "uniflow/runtime.hpp"
#include "uniflow/sim.hpp"
#include "uniflow/space.hpp"

namespace uniflow::config {

enum class PolicyType { analytic, flow };
enum class TrainObjective { fm, uac, mpg };

struct MpgConfig {
  bool enabled = false;
  double lambda = 0.1;
  double tau = 1.0;
  int slices = 32;
  int d_emb = 32;
};

struct TrainSettings {
  double lr = 1e-2;
  long steps = 20000;
  int batch = 8;
  TrainObjective objective = TrainObjective::fm;
  int dataset_windows = 512;  // training windows sampled along the reference
};

struct PolicyConfig {
  PolicyType type = PolicyType::analytic;
  int chunk_len = 8;    // T
  int euler_steps = 8;  // K
  int d_model = 16;
  std::vector<int> hidden = {64, 64};
  int refine_rounds = 0;  // N_ref
  MpgConfig mpg;
  TrainSettings train;
  std::string params_file;  // optional pre-trained bundle
};

struct TaskConfig {
  sim::TaskParams params;
  sim::Dynamics dynamics = sim::Dynamics::integrator;
  double lag_alpha = 0.5;
};

struct RuntimeConfig {
  int capacity = 0;  // 0: exactly 2T
  runtime::FallbackPolicy fallback = runtime::FallbackPolicy::hold_last;
  int max_consecutive_underflows = 256;
};

struct UacConfig {
  bool enabled = true;
  int epsilon_safety = 1;
};

/// Whole-experiment description loaded from JSON; every artifact embeds the
/// hash of the originating config text plus the effective seed.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  long duration_steps = 1000;
  space::SpaceConfig space;
  std::string embodiment;          // session target
  std::vector<std::string> fleet;  // bench targets (defaults to all)
  PolicyConfig policy;
  UacConfig uac;
  TaskConfig task;
  sim::LatencyModel latency = sim::LatencyModel::constant(0.0);
  double corruption_sigma = 0.0;
  RuntimeConfig runtime;
  std::string config_hash;  // FNV-1a of the source text
};

ExperimentConfig load_experiment(const std::string& json_text);
ExperimentConfig load_experiment_file(const std::string& path);

/// A ready-to-run example configuration (three-embodiment fleet, tracking
/// task); also the base the built-in verification suite starts from.
std::string default_experiment_json();

}  // namespace uniflow::config
