// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <mutex>
#include <vector>

#include "uniflow/policy.hpp"
#include "uniflow/sim.hpp"

namespace uniflow::runtime {

using flow::Mat;
using flow::Vec;

/// Bounded ring of pending actions shared by one inference producer and one
/// control consumer. Slots are addressed by absolute control-step index;
/// capacity must be at least twice the chunk length. A mutex covers only the
/// cursor/slot updates, never an inference call.
class ExecutionBuffer {
 public:
  ExecutionBuffer(int capacity, int chunk_len, int dim);

  int capacity() const { return static_cast<int>(slots_.size()); }
  long read_cursor() const;
  long write_high() const;
  /// Pending window size (write_high - read_cursor).
  int occupancy() const;

  struct PopResult {
    Vec action;
    bool underflow = false;
    long cycle = -1;
  };
  /// Consumer side: the action stored for the current step, or the fallback
  /// with the underflow flag set. The read cursor advances either way, so
  /// executed step indices stay consecutive.
  PopResult pop_or_fallback(const Vec& fallback);

  /// Producer side: writes chunk rows [offset, T) at absolute steps
  /// [base_step + offset, base_step + T). Rows below the read cursor are
  /// dropped (stale); a second push with the same cycle id is rejected;
  /// writing past read_cursor + capacity is a backpressure error.
  /// Returns the number of rows actually written.
  int push_postfix(const Mat& chunk_rows, long base_step, int offset, long cycle);

  /// Snapshot of rows [from_step, from_step + count); missing rows are
  /// replaced by `pad` and counted in *padded.
  Mat committed_rows(long from_step, int count, const Vec& pad, int* padded) const;

 private:
  struct Slot {
    long step = -1;
    long cycle = -1;
    Vec action;
  };
  mutable std::mutex mu_;
  std::vector<Slot> slots_;
  int chunk_len_;
  int dim_;
  long read_ = 0;
  long write_high_ = 0;
  long last_cycle_pushed_ = -1;
};

enum class ClockMode { simulated, wall };
enum class FallbackPolicy { hold_last, safe_pose };

struct StepRecord {
  long step = 0;
  Vec action;
  long cycle = -1;  // -1 for fallback actions
  bool underflow = false;
  Vec state_after;
  double tick_time_s = 0.0;
};

struct CycleRecord {
  long cycle = 0;
  long base_step = 0;
  int committed = 0;  // d
  double latency_s = 0.0;       // sampled (simulated) latency
  double wall_s = 0.0;          // measured wall time of plan_chunk
  int rounds = 0;               // gating refinement rounds
  int padded_rows = 0;          // hold-padded committed rows (startup)
  bool commit_violation = false;  // actual latency exceeded the commitment
  int rows_written = 0;
  std::vector<std::pair<double, double>> gate_rounds;  // (mean D, mean g) per round
};

struct SessionLog {
  std::vector<StepRecord> steps;
  std::vector<CycleRecord> cycles;
  long underflow_count() const;
  std::vector<Vec> executed_actions() const;
  std::vector<bool> underflow_flags() const;
  std::vector<Vec> states() const;
  /// Step indices must be consecutive from zero.
  void check_invariants() const;
};

struct SessionConfig {
  long duration = 1000;
  ClockMode clock = ClockMode::simulated;
  FallbackPolicy fallback = FallbackPolicy::hold_last;
  Vec safe_pose;  // required for FallbackPolicy::safe_pose
  bool use_uac = true;
  int epsilon_safety = 1;
  int capacity = 0;  // 0: exactly 2T
  int max_consecutive_underflows = 256;
  std::uint64_t seed = 0;
};

/// Closed-loop execution of one policy on one simulated embodiment. In
/// simulated-clock mode producer and consumer interleave deterministically;
/// in wall-clock mode they run as real threads against the same buffer.
/// Aborts with a ProtocolError after cfg.max_consecutive_underflows
/// consecutive fallback steps.
SessionLog run_session(policy::ChunkPolicy& pol, sim::SimEmbodiment& emb,
                       const sim::LatencyModel& latency, const SessionConfig& cfg,
                       const std::vector<Vec>* reference);

}  // namespace uniflow::runtime
