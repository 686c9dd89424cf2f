#pragma once

// Observability surface: per-task tracepoints in a wait-free overwriting ring,
// monotonic performance counters, and CSV/JSONL export with lossless parse.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpuos/errors.hpp"

namespace gpuos {

struct Tracepoint {
  uint64_t seq = 0;         // task sequence number
  uint64_t op_id = 0;
  uint32_t worker = 0;
  uint64_t enqueue_ns = 0;  // monotonic clock, set at commit
  uint64_t dequeue_ns = 0;  // monotonic clock, set at claim; >= enqueue_ns
  uint64_t exec_ns = 0;     // kernel wall time
  uint64_t version = 0;     // table version the dispatch ran under

  bool operator==(const Tracepoint&) const = default;
};

/// Fixed-capacity tracepoint ring. Writers are wait-free and overwrite the
/// oldest record when full; overwriting is not dropping, so dropped() stays 0
/// unless recording is rejected outright (never, in this design).
///
/// Each slot carries a seqlock-style stamp derived from the writer's ticket:
/// odd while the payload is being written, even once stable. snapshot() skips
/// slots whose stamp is odd or changes across the payload copy, yielding a
/// consistent prefix without ever stalling a writer. A writer would have to
/// stall for a full ring revolution for a same-slot overlap to arise; size the
/// ring well above the writer count.
class TraceRing {
 public:
  explicit TraceRing(size_t capacity) : capacity_(capacity), slots_(capacity) {
    if (capacity == 0) throw Error(ErrorCode::ZeroCapacity, "trace ring needs capacity >= 1");
  }

  size_t capacity() const { return capacity_; }

  bool enabled() const { return enabled_.load(std::memory_order_relaxed); }
  void set_enabled(bool on) { enabled_.store(on, std::memory_order_relaxed); }

  /// Wait-free append; a no-op while disabled.
  void record(const Tracepoint& tp) {
    if (!enabled()) return;
    const uint64_t ticket = head_.fetch_add(1, std::memory_order_relaxed);
    Slot& s = slots_[ticket % capacity_];
    s.stamp.store(ticket * 2 + 1, std::memory_order_release);
    s.tp = tp;
    // Publish only if no later writer lapped us mid-write; their record wins.
    uint64_t begun = ticket * 2 + 1;
    s.stamp.compare_exchange_strong(begun, ticket * 2 + 2, std::memory_order_release,
                                    std::memory_order_relaxed);
  }

  /// Total records ever written (including overwritten ones).
  uint64_t written() const { return head_.load(std::memory_order_acquire); }

  /// Records rejected without being written; always 0 under overwrite semantics.
  uint64_t dropped() const { return 0; }

  /// Stable records, oldest first. Concurrent in-progress writes are skipped.
  std::vector<Tracepoint> snapshot() const {
    const uint64_t head = head_.load(std::memory_order_acquire);
    const uint64_t n = std::min<uint64_t>(head, capacity_);
    std::vector<Tracepoint> out;
    out.reserve(n);
    for (uint64_t ticket = head - n; ticket < head; ++ticket) {
      const Slot& s = slots_[ticket % capacity_];
      const uint64_t s1 = s.stamp.load(std::memory_order_acquire);
      Tracepoint tp = s.tp;
      std::atomic_thread_fence(std::memory_order_acquire);
      const uint64_t s2 = s.stamp.load(std::memory_order_relaxed);
      if (s1 != s2 || s1 % 2 != 0 || s1 == 0) continue;  // torn or never written
      if (s1 / 2 - 1 != ticket) continue;                // already overwritten by a lap
      out.push_back(tp);
    }
    return out;
  }

 private:
  struct Slot {
    std::atomic<uint64_t> stamp{0};
    Tracepoint tp;
  };

  size_t capacity_;
  std::vector<Slot> slots_;
  std::atomic<uint64_t> head_{0};
  std::atomic<bool> enabled_{true};
};

/// Plain-value counter snapshot; printable as a key=value block.
struct CounterSnapshot {
  uint64_t submitted = 0;
  uint64_t committed = 0;
  uint64_t processed = 0;
  uint64_t inline_executions = 0;
  uint64_t queue_full_fallbacks = 0;
  uint64_t stalls = 0;
  uint64_t cache_hits = 0;
  uint64_t cache_misses = 0;
  uint64_t injections = 0;
  uint64_t failed = 0;
  std::vector<uint64_t> per_op;

  bool operator==(const CounterSnapshot&) const = default;

  std::string to_string() const {
    std::ostringstream os;
    os << "submitted=" << submitted << "\n"
       << "committed=" << committed << "\n"
       << "processed=" << processed << "\n"
       << "inline_executions=" << inline_executions << "\n"
       << "queue_full_fallbacks=" << queue_full_fallbacks << "\n"
       << "stalls=" << stalls << "\n"
       << "cache_hits=" << cache_hits << "\n"
       << "cache_misses=" << cache_misses << "\n"
       << "injections=" << injections << "\n"
       << "failed=" << failed << "\n";
    for (size_t i = 0; i < per_op.size(); ++i) {
      if (per_op[i] != 0) os << "op[" << i << "]=" << per_op[i] << "\n";
    }
    return os.str();
  }
};

/// Monotonic performance counters; increments are relaxed atomics, snapshots
/// are exact at quiescence and approximate mid-flight.
class Counters {
 public:
  explicit Counters(size_t tracked_ops = 64) : per_op_(tracked_ops ? tracked_ops : 1) {}

  void inc_submitted() { submitted_.fetch_add(1, std::memory_order_relaxed); }
  void inc_committed() { committed_.fetch_add(1, std::memory_order_relaxed); }
  void inc_processed() { processed_.fetch_add(1, std::memory_order_relaxed); }
  void inc_inline() { inline_executions_.fetch_add(1, std::memory_order_relaxed); }
  void inc_queue_full_fallback() { queue_full_fallbacks_.fetch_add(1, std::memory_order_relaxed); }
  void inc_stalls() { stalls_.fetch_add(1, std::memory_order_relaxed); }
  void inc_cache_hit() { cache_hits_.fetch_add(1, std::memory_order_relaxed); }
  void inc_cache_miss() { cache_misses_.fetch_add(1, std::memory_order_relaxed); }
  void inc_injections() { injections_.fetch_add(1, std::memory_order_relaxed); }
  void inc_failed() { failed_.fetch_add(1, std::memory_order_relaxed); }

  // Dispatches of ids past the tracked range share the final bucket.
  void inc_op(uint64_t op_id) {
    const size_t idx = op_id < per_op_.size() ? static_cast<size_t>(op_id) : per_op_.size() - 1;
    per_op_[idx].fetch_add(1, std::memory_order_relaxed);
  }

  size_t tracked_ops() const { return per_op_.size(); }

  CounterSnapshot snapshot() const {
    CounterSnapshot s;
    s.submitted = submitted_.load(std::memory_order_relaxed);
    s.committed = committed_.load(std::memory_order_relaxed);
    s.processed = processed_.load(std::memory_order_relaxed);
    s.inline_executions = inline_executions_.load(std::memory_order_relaxed);
    s.queue_full_fallbacks = queue_full_fallbacks_.load(std::memory_order_relaxed);
    s.stalls = stalls_.load(std::memory_order_relaxed);
    s.cache_hits = cache_hits_.load(std::memory_order_relaxed);
    s.cache_misses = cache_misses_.load(std::memory_order_relaxed);
    s.injections = injections_.load(std::memory_order_relaxed);
    s.failed = failed_.load(std::memory_order_relaxed);
    s.per_op.resize(per_op_.size());
    for (size_t i = 0; i < per_op_.size(); ++i) {
      s.per_op[i] = per_op_[i].load(std::memory_order_relaxed);
    }
    return s;
  }

 private:
  std::atomic<uint64_t> submitted_{0};
  std::atomic<uint64_t> committed_{0};
  std::atomic<uint64_t> processed_{0};
  std::atomic<uint64_t> inline_executions_{0};
  std::atomic<uint64_t> queue_full_fallbacks_{0};
  std::atomic<uint64_t> stalls_{0};
  std::atomic<uint64_t> cache_hits_{0};
  std::atomic<uint64_t> cache_misses_{0};
  std::atomic<uint64_t> injections_{0};
  std::atomic<uint64_t> failed_{0};
  std::vector<std::atomic<uint64_t>> per_op_;
};

// ---- Export / import ----

inline constexpr const char* kTraceCsvHeader = "seq,op_id,worker,enqueue_ns,dequeue_ns,exec_ns,version";

/// Writes a header plus one row per record; returns the record count.
inline size_t export_csv(const std::vector<Tracepoint>& records, std::ostream& os) {
  os << kTraceCsvHeader << "\n";
  for (const Tracepoint& t : records) {
    os << t.seq << ',' << t.op_id << ',' << t.worker << ',' << t.enqueue_ns << ','
       << t.dequeue_ns << ',' << t.exec_ns << ',' << t.version << "\n";
  }
  if (!os) throw Error(ErrorCode::IoError, "trace csv write failed");
  return records.size();
}

/// One JSON object per line, mirroring the CSV fields; returns the count.
inline size_t export_jsonl(const std::vector<Tracepoint>& records, std::ostream& os) {
  for (const Tracepoint& t : records) {
    nlohmann::json j;
    j["seq"] = t.seq;
    j["op_id"] = t.op_id;
    j["worker"] = t.worker;
    j["enqueue_ns"] = t.enqueue_ns;
    j["dequeue_ns"] = t.dequeue_ns;
    j["exec_ns"] = t.exec_ns;
    j["version"] = t.version;
    os << j.dump() << "\n";
  }
  if (!os) throw Error(ErrorCode::IoError, "trace jsonl write failed");
  return records.size();
}

inline std::vector<Tracepoint> parse_trace_csv(std::istream& is) {
  std::vector<Tracepoint> out;
  std::string line;
  if (!std::getline(is, line)) return out;
  if (line != kTraceCsvHeader) {
    throw Error(ErrorCode::IoError, "unexpected trace csv header: " + line);
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    Tracepoint t;
    uint64_t worker = 0;
    char c;
    std::istringstream ls(line);
    if (!(ls >> t.seq >> c >> t.op_id >> c >> worker >> c >> t.enqueue_ns >> c >> t.dequeue_ns >>
          c >> t.exec_ns >> c >> t.version)) {
      throw Error(ErrorCode::IoError, "malformed trace csv row: " + line);
    }
    t.worker = static_cast<uint32_t>(worker);
    out.push_back(t);
  }
  return out;
}

inline std::vector<Tracepoint> parse_trace_jsonl(std::istream& is) {
  std::vector<Tracepoint> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::IoError, "malformed trace jsonl row: " + line);
    Tracepoint t;
    t.seq = j.at("seq").get<uint64_t>();
    t.op_id = j.at("op_id").get<uint64_t>();
    t.worker = j.at("worker").get<uint32_t>();
    t.enqueue_ns = j.at("enqueue_ns").get<uint64_t>();
    t.dequeue_ns = j.at("dequeue_ns").get<uint64_t>();
    t.exec_ns = j.at("exec_ns").get<uint64_t>();
    t.version = j.at("version").get<uint64_t>();
    out.push_back(t);
  }
  return out;
}

inline size_t export_csv_file(const std::vector<Tracepoint>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot open " + path);
  return export_csv(records, os);
}

inline size_t export_jsonl_file(const std::vector<Tracepoint>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot open " + path);
  return export_jsonl(records, os);
}

// ---- Latency derivation ----

/// Queue latencies (dequeue - enqueue) in nanoseconds, ascending.
inline std::vector<uint64_t> latency_ns(const std::vector<Tracepoint>& records) {
  std::vector<uint64_t> out;
  out.reserve(records.size());
  for (const Tracepoint& t : records) {
    out.push_back(t.dequeue_ns >= t.enqueue_ns ? t.dequeue_ns - t.enqueue_ns : 0);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// p in [0, 1] over an ascending sample; nearest-rank.
inline uint64_t percentile(const std::vector<uint64_t>& sorted_ns, double p) {
  if (sorted_ns.empty()) return 0;
  if (p <= 0.0) return sorted_ns.front();
  if (p >= 1.0) return sorted_ns.back();
  const size_t rank = static_cast<size_t>(p * static_cast<double>(sorted_ns.size() - 1) + 0.5);
  return sorted_ns[rank];
}

}  // namespace gpuos
