#pragma once

// Persistent worker pool: a fixed set of threads started once that claim task
// descriptors from the shared ring, dispatch through a version snapshot of the
// operator table, record telemetry, and exit only when a shutdown sentinel
// flows through the queue behind all real work.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "gpuos/errors.hpp"
#include "gpuos/optable.hpp"
#include "gpuos/queue.hpp"
#include "gpuos/telemetry.hpp"
#include "gpuos/tensor.hpp"

namespace gpuos {

struct WorkerConfig {
  size_t num_workers = 0;        // 0 = hardware parallelism
  uint64_t yield_every = 0;      // voluntary yield after this many tasks; 0 = never
  uint32_t spin_iterations = 64; // polls before the backoff ladder starts
  uint32_t backoff_max_exp = 8;  // pause ladder 1,2,4,... up to 2^exp microseconds
};

/// Worker loop per claim attempt:
///   1. publish epoch = stable table-version snapshot,
///   2. try_claim; on empty: spin, then quiesce the epoch and climb a timed
///      pause ladder, finally parking on the queue's publish doorbell,
///   3. shutdown sentinel: re-commit it if other workers remain, then exit,
///   4. lookup(version, op_id); failures complete the task with an error code
///      and never take the worker down,
///   5. execute, 6. record tracepoint, 7. mark_done, 8. honor yield_every.
///
/// Each dispatch runs under exactly one version snapshot; the published epoch
/// pins that bank until the task finishes, and a generation check on the entry
/// (the canary) asserts the bank was not retired mid-dispatch.
class Executor {
 public:
  /// Called once per real task, before mark_done; code is Ok on success.
  using CompletionFn = std::function<void(uint64_t seq, ErrorCode code)>;

  Executor(TaskQueue& queue, OperatorTable& table, BufferPool& pool, WorkerConfig cfg = {},
           Counters* counters = nullptr, TraceRing* trace = nullptr, CompletionFn on_complete = {})
      : queue_(queue),
        table_(table),
        pool_(pool),
        cfg_(cfg),
        counters_(counters),
        trace_(trace),
        on_complete_(std::move(on_complete)) {
    if (cfg_.num_workers == 0) {
      const unsigned hw = std::thread::hardware_concurrency();
      cfg_.num_workers = hw > 0 ? hw : 1;
    }
    if (cfg_.backoff_max_exp > 20) cfg_.backoff_max_exp = 20;
    yield_every_.store(cfg_.yield_every, std::memory_order_relaxed);
  }

  ~Executor() { stop(); }

  Executor(const Executor&) = delete;
  Executor& operator=(const Executor&) = delete;

  void start() {
    std::lock_guard lock(lifecycle_mu_);
    if (started_) throw Error(ErrorCode::AlreadyStarted, "executor already started on this queue");
    started_ = true;
    alive_count_.store(cfg_.num_workers, std::memory_order_release);
    live_workers_.store(cfg_.num_workers, std::memory_order_release);
    threads_.reserve(cfg_.num_workers);
    for (size_t i = 0; i < cfg_.num_workers; ++i) {
      threads_.emplace_back([this, i] { worker_main(static_cast<uint32_t>(i)); });
    }
  }

  /// Commits a shutdown sentinel behind all previously committed tasks, then
  /// joins. Every committed task completes before this returns (drain-then-
  /// exit through the same FIFO). Idempotent and thread-safe.
  void stop() {
    std::lock_guard lock(lifecycle_mu_);
    if (!started_ || joined_) return;
    commit_sentinel();
    for (std::thread& t : threads_) t.join();
    threads_.clear();
    joined_ = true;
  }

  bool started() const {
    std::lock_guard lock(lifecycle_mu_);
    return started_;
  }

  /// True while at least one worker has not exited.
  bool worker_alive() const { return alive_count_.load(std::memory_order_acquire) > 0; }

  size_t num_workers() const { return cfg_.num_workers; }

  /// Live yield cadence knob; each worker re-reads it before every task.
  void set_yield_every(uint64_t n) { yield_every_.store(n, std::memory_order_relaxed); }
  uint64_t yield_every() const { return yield_every_.load(std::memory_order_relaxed); }

  /// Real tasks dispatched across all workers (sentinels excluded).
  uint64_t tasks_executed() const { return tasks_executed_.load(std::memory_order_acquire); }

  /// Dispatches that observed an entry generation not matching their version
  /// snapshot. The epoch protocol keeps this at zero; nonzero means a worker
  /// read a bank while it was being rebuilt.
  uint64_t canary_hits() const { return canary_hits_.load(std::memory_order_acquire); }

 private:
  void commit_sentinel() {
    const TaskDescriptor sentinel = make_shutdown_descriptor();
    for (;;) {
      if (std::optional<uint64_t> slot = queue_.acquire_slot()) {
        queue_.commit(*slot, sentinel);
        return;
      }
      std::this_thread::yield();  // workers are draining; a slot will free up
    }
  }

  // Publish-then-revalidate: the epoch slot must hold the version actually
  // dispatched under before the table can be read. Re-reading until stable
  // closes the race where an install lands between the read and the publish.
  uint64_t stable_snapshot(size_t slot) {
    uint64_t v = table_.snapshot_version();
    for (;;) {
      table_.epochs().publish(slot, v);
      const uint64_t now = table_.snapshot_version();
      if (now == v) return v;
      v = now;
    }
  }

  void worker_main(uint32_t widx) {
    const size_t slot = table_.epochs().register_worker();
    uint32_t spins = 0;
    uint32_t escalation = 0;
    uint64_t executed = 0;

    for (;;) {
      const uint64_t version = stable_snapshot(slot);
      const uint64_t observed_tail = queue_.peek().tail;  // sampled before the claim
      std::optional<TaskDescriptor> desc = queue_.try_claim();

      if (!desc) {
        if (spins < cfg_.spin_iterations) {
          ++spins;
          if (spins > 4) std::this_thread::yield();
          continue;
        }
        // Parked workers must not pin a table version.
        table_.epochs().quiesce(slot);
        if (counters_) counters_->inc_stalls();
        if (escalation <= cfg_.backoff_max_exp) {
          std::this_thread::sleep_for(std::chrono::microseconds(uint64_t{1} << escalation));
          ++escalation;
        } else {
          // Ladder exhausted: park on the doorbell. The tail was sampled
          // before the failed claim, so a commit between the two moves the
          // cursor and the park returns immediately; no task is missed.
          queue_.wait_for_publish(observed_tail);
        }
        continue;
      }

      spins = 0;
      escalation = 0;

      if (desc->is_shutdown()) {
        table_.epochs().quiesce(slot);
        const size_t remaining = live_workers_.fetch_sub(1, std::memory_order_acq_rel) - 1;
        if (remaining > 0) commit_sentinel();  // cascade to the next worker
        alive_count_.fetch_sub(1, std::memory_order_acq_rel);
        return;
      }

      dispatch(*desc, version, widx, slot);
      queue_.mark_done();
      ++executed;
      tasks_executed_.fetch_add(1, std::memory_order_relaxed);
      const uint64_t ye = yield_every_.load(std::memory_order_relaxed);
      if (ye > 0 && executed % ye == 0) {
        std::this_thread::yield();
      }
    }
  }

  void dispatch(const TaskDescriptor& desc, uint64_t version, uint32_t widx, size_t slot) {
    const uint64_t dequeue_ns = monotonic_ns();
    ErrorCode code = ErrorCode::Ok;
    uint64_t exec_ns = 0;

    const OperatorEntry* entry = nullptr;
    uint64_t v = version;
    code = table_.lookup(v, desc.op_id, &entry);
    // Canary: an Active entry must carry the generation of the bank its
    // version published. A mismatch means the bank is being rebuilt under us;
    // re-snapshot and retry (bounded, the epoch protocol makes this dead code).
    for (int retry = 0; code == ErrorCode::Ok && entry->generation != v && retry < 4; ++retry) {
      canary_hits_.fetch_add(1, std::memory_order_relaxed);
      v = stable_snapshot(slot);
      code = table_.lookup(v, desc.op_id, &entry);
    }

    if (code == ErrorCode::Ok) {
      OpContext ctx;
      ctx.pool = &pool_;
      ctx.inputs = std::span<const TensorView>(desc.inputs.data(), desc.n_inputs);
      ctx.output = &desc.output;
      ctx.scalars = std::span<const double>(desc.scalars.data(), desc.n_scalars);
      ctx.size = desc.size;
      ctx.seq = desc.seq;

      const uint64_t t0 = monotonic_ns();
      try {
        entry->fn(ctx);
      } catch (const Error& e) {
        code = e.code();
      } catch (...) {
        code = ErrorCode::Internal;
      }
      const uint64_t t1 = monotonic_ns();
      exec_ns = t1 > t0 ? t1 - t0 : 1;  // clock granularity floor: report >= 1ns
    }

    if (code != ErrorCode::Ok && counters_) counters_->inc_failed();
    if (counters_) {
      counters_->inc_processed();
      counters_->inc_op(desc.op_id);
    }
    if (trace_) {
      Tracepoint tp;
      tp.seq = desc.seq;
      tp.op_id = desc.op_id;
      tp.worker = widx;
      tp.enqueue_ns = desc.enqueue_ns;
      tp.dequeue_ns = dequeue_ns >= desc.enqueue_ns ? dequeue_ns : desc.enqueue_ns;
      tp.exec_ns = exec_ns;
      tp.version = v;
      trace_->record(tp);
    }
    if (on_complete_) {
      try {
        on_complete_(desc.seq, code);
      } catch (...) {
        // Completion sinks must not throw; a worker never dies for one.
      }
    }
  }

  TaskQueue& queue_;
  OperatorTable& table_;
  BufferPool& pool_;
  WorkerConfig cfg_;
  Counters* counters_;
  TraceRing* trace_;
  CompletionFn on_complete_;

  mutable std::mutex lifecycle_mu_;
  bool started_ = false;
  bool joined_ = false;
  std::vector<std::thread> threads_;

  std::atomic<size_t> alive_count_{0};
  std::atomic<size_t> live_workers_{0};
  std::atomic<uint64_t> tasks_executed_{0};
  std::atomic<uint64_t> canary_hits_{0};
  std::atomic<uint64_t> yield_every_{0};
};

}  // namespace gpuos
