// SPDX-License-Identifier: Apache-2.0
#include "uniflow/runtime.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

#include "uniflow/chunking.hpp"
#include "uniflow/errors.hpp"

namespace uniflow::runtime {

ExecutionBuffer::ExecutionBuffer(int capacity, int chunk_len, int dim)
    : chunk_len_(chunk_len), dim_(dim) {
  if (chunk_len < 1) throw std::invalid_argument("ExecutionBuffer: chunk length must be >= 1");
  if (capacity < 2 * chunk_len)
    throw std::invalid_argument("ExecutionBuffer: capacity must be at least 2x the chunk length (" +
                                std::to_string(capacity) + " < " + std::to_string(2 * chunk_len) +
                                ")");
  slots_.resize(static_cast<size_t>(capacity));
}

long ExecutionBuffer::read_cursor() const {
  std::lock_guard lock(mu_);
  return read_;
}

long ExecutionBuffer::write_high() const {
  std::lock_guard lock(mu_);
  return write_high_;
}

int ExecutionBuffer::occupancy() const {
  std::lock_guard lock(mu_);
  return static_cast<int>(write_high_ - read_);
}

ExecutionBuffer::PopResult ExecutionBuffer::pop_or_fallback(const Vec& fallback) {
  std::lock_guard lock(mu_);
  PopResult out;
  const Slot& slot = slots_[static_cast<size_t>(read_ % capacity())];
  if (slot.step == read_) {
    out.action = slot.action;
    out.cycle = slot.cycle;
  } else {
    out.action = fallback;
    out.underflow = true;
  }
  ++read_;
  if (write_high_ < read_) write_high_ = read_;
  return out;
}

int ExecutionBuffer::push_postfix(const Mat& chunk_rows, long base_step, int offset, long cycle) {
  if (chunk_rows.rows() != chunk_len_ || chunk_rows.cols() != dim_)
    throw std::invalid_argument("push_postfix: chunk shape mismatch");
  if (offset < 0 || offset > chunk_len_)
    throw std::invalid_argument("push_postfix: offset must lie in [0, T]");
  std::lock_guard lock(mu_);
  if (cycle == last_cycle_pushed_)
    throw ProtocolError("push_postfix: duplicate push for cycle " + std::to_string(cycle));
  last_cycle_pushed_ = cycle;
  if (base_step + chunk_len_ > read_ + capacity())
    throw ProtocolError("push_postfix: write would overrun the consumer by more than capacity");
  int written = 0;
  for (int i = offset; i < chunk_len_; ++i) {
    const long step = base_step + i;
    if (step < read_) continue;  // stale: the consumer already passed this step
    Slot& slot = slots_[static_cast<size_t>(step % capacity())];
    slot.step = step;
    slot.cycle = cycle;
    slot.action = chunk_rows.row(i).transpose();
    ++written;
  }
  write_high_ = std::max(write_high_, base_step + chunk_len_);
  return written;
}

Mat ExecutionBuffer::committed_rows(long from_step, int count, const Vec& pad, int* padded) const {
  std::lock_guard lock(mu_);
  Mat rows(count, dim_);
  int missing = 0;
  for (int i = 0; i < count; ++i) {
    const long step = from_step + i;
    const Slot& slot = slots_[static_cast<size_t>(step % capacity())];
    if (slot.step == step) {
      rows.row(i) = slot.action.transpose();
    } else {
      rows.row(i) = pad.transpose();
      ++missing;
    }
  }
  if (padded != nullptr) *padded = missing;
  return rows;
}

long SessionLog::underflow_count() const {
  long n = 0;
  for (const auto& s : steps) n += s.underflow;
  return n;
}

std::vector<Vec> SessionLog::executed_actions() const {
  std::vector<Vec> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.action);
  return out;
}

std::vector<bool> SessionLog::underflow_flags() const {
  std::vector<bool> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.underflow);
  return out;
}

std::vector<Vec> SessionLog::states() const {
  std::vector<Vec> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.state_after);
  return out;
}

void SessionLog::check_invariants() const {
  for (size_t i = 0; i < steps.size(); ++i)
    if (steps[i].step != static_cast<long>(i))
      throw std::logic_error("SessionLog: executed step indices must be consecutive from zero");
}

namespace {

struct Producer {
  policy::ChunkPolicy& pol;
  ExecutionBuffer& buf;
  const sim::LatencyModel& latency;
  const SessionConfig& cfg;
  const std::vector<Vec>* reference;
  const sim::SimEmbodiment& emb;
  Rng latency_rng;
  Rng cycle_rng_root;
  long next_cycle = 0;

  // one in-flight computation (simulated-clock mode)
  bool computing = false;
  double finish_time_s = 0.0;
  Mat pending_chunk;
  CycleRecord pending_record;

  int commit_steps() const {
    if (!cfg.use_uac) return 0;
    return chunking::commit_delay(emb.spec.latency_budget_s, emb.spec.control_period_s,
                                  cfg.epsilon_safety);
  }

  /// Plans a chunk from the current state snapshot. Returns the cycle record
  /// (sans completion fields) and the chunk itself.
  void start_cycle(double now_s, const Vec& state_snapshot) {
    const int T = pol.chunk_len();
    CycleRecord rec;
    rec.cycle = next_cycle++;
    rec.base_step = buf.read_cursor();
    rec.committed = std::min(commit_steps(), T);

    const Vec hold = Vec::Zero(state_snapshot.size());
    Mat committed = buf.committed_rows(rec.base_step, rec.committed, hold, &rec.padded_rows);

    policy::Observation obs;
    obs.state = state_snapshot;
    obs.step = rec.base_step;
    obs.reference = reference;

    policy::CycleDiagnostics diag;
    const auto wall_start = std::chrono::steady_clock::now();
    Mat chunk = pol.plan_chunk(obs, committed, rec.committed, cycle_rng_root.child(
                                   static_cast<std::uint64_t>(rec.cycle)), &diag);
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start)
                     .count();
    rec.rounds = static_cast<int>(diag.rounds.size());
    for (const auto& round : diag.rounds)
      rec.gate_rounds.emplace_back(round.mean_discrepancy(), round.mean_gate());

    rec.latency_s = latency.sample(latency_rng);
    pending_chunk = std::move(chunk);
    pending_record = std::move(rec);
    finish_time_s = now_s + pending_record.latency_s;
    computing = true;
  }

  /// Commits the finished chunk into the buffer; only postfix rows are
  /// admitted, stale rows are dropped.
  CycleRecord complete() {
    CycleRecord rec = std::move(pending_record);
    const long consumed = buf.read_cursor() - rec.base_step;
    int offset;
    if (cfg.use_uac) {
      rec.commit_violation = consumed > rec.committed;
      const long already_written = std::max(0L, buf.write_high() - rec.base_step);
      offset = static_cast<int>(std::min<long>(rec.committed, already_written));
      offset = static_cast<int>(std::max<long>(offset, consumed));
    } else {
      offset = static_cast<int>(std::max(0L, consumed));
    }
    offset = std::min(offset, pol.chunk_len());
    rec.rows_written = buf.push_postfix(pending_chunk, rec.base_step, offset, rec.cycle);
    computing = false;
    return rec;
  }
};

SessionLog run_simulated(policy::ChunkPolicy& pol, sim::SimEmbodiment& emb,
                         const sim::LatencyModel& latency, const SessionConfig& cfg,
                         const std::vector<Vec>* reference) {
  const int T = pol.chunk_len();
  const int capacity = cfg.capacity > 0 ? cfg.capacity : 2 * T;
  ExecutionBuffer buf(capacity, T, emb.layout->dim());
  Rng root(cfg.seed);

  Producer producer{pol,  buf, latency, cfg, reference, emb, root.child("latency"),
                    root.child("cycles")};
  SessionLog log;
  const double dt = emb.spec.control_period_s;

  // Warm start: the consumer clock begins once the first chunk is committed.
  producer.start_cycle(0.0, emb.state);
  producer.finish_time_s = 0.0;
  log.cycles.push_back(producer.complete());

  Vec last_action = emb.hold_action();
  long consecutive_underflows = 0;
  bool started_this_step = true;  // warm-start cycle counts for step 0

  for (long step = 0; step < cfg.duration; ++step) {
    const double now = static_cast<double>(step) * dt;

    if (producer.computing && producer.finish_time_s <= now)
      log.cycles.push_back(producer.complete());
    if (!producer.computing && !started_this_step && buf.occupancy() <= T) {
      producer.start_cycle(now, emb.state);
      if (producer.finish_time_s <= now) log.cycles.push_back(producer.complete());
    }

    const Vec fallback = cfg.fallback == FallbackPolicy::hold_last ? last_action : cfg.safe_pose;
    auto pop = buf.pop_or_fallback(fallback);
    emb.step(pop.action);

    StepRecord rec;
    rec.step = step;
    rec.action = pop.action;
    rec.cycle = pop.cycle;
    rec.underflow = pop.underflow;
    rec.state_after = emb.state;
    rec.tick_time_s = now;
    log.steps.push_back(std::move(rec));

    last_action = pop.action;
    consecutive_underflows = pop.underflow ? consecutive_underflows + 1 : 0;
    if (consecutive_underflows > cfg.max_consecutive_underflows)
      throw ProtocolError("run_session: producer starved the consumer for " +
                          std::to_string(consecutive_underflows) + " consecutive steps (cycle " +
                          std::to_string(producer.next_cycle) + ", step " + std::to_string(step) +
                          ")");
    started_this_step = false;
  }
  log.check_invariants();
  return log;
}

SessionLog run_wall_clock(policy::ChunkPolicy& pol, sim::SimEmbodiment& emb,
                          const sim::LatencyModel& latency, const SessionConfig& cfg,
                          const std::vector<Vec>* reference) {
  const int T = pol.chunk_len();
  const int capacity = cfg.capacity > 0 ? cfg.capacity : 2 * T;
  ExecutionBuffer buf(capacity, T, emb.layout->dim());
  Rng root(cfg.seed);

  SessionLog log;
  std::mutex log_mu;
  std::atomic<bool> stop{false};
  std::mutex state_mu;
  Vec state_snapshot = emb.state;

  std::thread producer_thread([&] {
    Producer producer{pol,  buf, latency, cfg, reference, emb, root.child("latency"),
                      root.child("cycles")};
    while (!stop.load(std::memory_order_acquire)) {
      if (buf.occupancy() <= T) {
        Vec snapshot;
        {
          std::lock_guard lock(state_mu);
          snapshot = state_snapshot;
        }
        producer.start_cycle(0.0, snapshot);
        // injected latency on top of the real planning time
        if (producer.pending_record.latency_s > 0.0)
          std::this_thread::sleep_for(
              std::chrono::duration<double>(producer.pending_record.latency_s));
        auto rec = producer.complete();
        std::lock_guard lock(log_mu);
        log.cycles.push_back(std::move(rec));
      } else {
        std::this_thread::sleep_for(std::chrono::microseconds(200));
      }
    }
  });

  const auto t0 = std::chrono::steady_clock::now();
  const auto period =
      std::chrono::duration_cast<std::chrono::steady_clock::duration>(
          std::chrono::duration<double>(emb.spec.control_period_s));
  Vec last_action = emb.hold_action();
  long consecutive_underflows = 0;
  for (long step = 0; step < cfg.duration; ++step) {
    std::this_thread::sleep_until(t0 + (step + 1) * period);
    const Vec fallback = cfg.fallback == FallbackPolicy::hold_last ? last_action : cfg.safe_pose;
    auto pop = buf.pop_or_fallback(fallback);
    emb.step(pop.action);
    {
      std::lock_guard lock(state_mu);
      state_snapshot = emb.state;
    }
    StepRecord rec;
    rec.step = step;
    rec.action = pop.action;
    rec.cycle = pop.cycle;
    rec.underflow = pop.underflow;
    rec.state_after = emb.state;
    rec.tick_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    {
      std::lock_guard lock(log_mu);
      log.steps.push_back(std::move(rec));
    }
    last_action = pop.action;
    consecutive_underflows = pop.underflow ? consecutive_underflows + 1 : 0;
    if (consecutive_underflows > cfg.max_consecutive_underflows) {
      stop.store(true, std::memory_order_release);
      producer_thread.join();
      throw ProtocolError("run_session: producer starved the consumer (wall clock)");
    }
  }
  stop.store(true, std::memory_order_release);
  producer_thread.join();
  log.check_invariants();
  return log;
}

}  // namespace

SessionLog run_session(policy::ChunkPolicy& pol, sim::SimEmbodiment& emb,
                       const sim::LatencyModel& latency, const SessionConfig& cfg,
                       const std::vector<Vec>* reference) {
  if (cfg.duration < 0) throw std::invalid_argument("run_session: negative duration");
  if (cfg.fallback == FallbackPolicy::safe_pose && cfg.safe_pose.size() != emb.layout->dim())
    throw std::invalid_argument("run_session: safe_pose must match the layout dimension");
  if (cfg.duration == 0) return {};
  return cfg.clock == ClockMode::simulated
             ? run_simulated(pol, emb, latency, cfg, reference)
             : run_wall_clock(pol, emb, latency, cfg, reference);
}

}  // namespace uniflow::runtime
