// Versioned dual-bank operator dispatch table. One updater thread hot-swaps
// entries by rebuilding the inactive bank and flipping an atomic version;
// workers dispatch wait-free against the bank selected by their snapshot.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <istream>
#include <mutex>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gpuos/errors.hpp"
#include "gpuos/tensor.hpp"

namespace gpuos {

/// Operand bundle handed to an operator callable. Views stay valid for the
/// duration of the call; the callable reports failure by throwing Error.
struct OpContext {
  BufferPool* pool = nullptr;
  std::span<const TensorView> inputs;
  const TensorView* output = nullptr;
  std::span<const double> scalars;
  uint64_t size = 0;  // output element count
  uint64_t seq = 0;   // task sequence number of the dispatching descriptor
};

using OpFn = std::function<void(const OpContext&)>;

enum class OpStatus : uint8_t { Empty = 0, Active = 1, Killed = 2 };

struct OperatorEntry {
  OpFn fn;
  OpStatus status = OpStatus::Empty;
  // Version of the install that built this bank image; a dispatch that sees
  // generation != snapshot version caught a retired bank (canary condition).
  uint64_t generation = 0;
};

struct InjectionRecord {
  uint64_t ts_ns = 0;
  uint32_t op_id = 0;
  std::string template_name;
  std::vector<double> params;
  std::string signature;
  uint64_t version = 0;
};

/// Per-worker epoch slots used for bank reclamation. A worker publishes the
/// table version it dispatches under; kQuiescent means "not reading any
/// bank" (parked, or between registration and first dispatch).
class EpochRegistry {
 public:
  static constexpr uint64_t kQuiescent = UINT64_MAX;
  static constexpr size_t kMaxWorkers = 256;

  size_t register_worker() {
    const size_t idx = count_.fetch_add(1, std::memory_order_acq_rel);
    if (idx >= kMaxWorkers) {
      throw Error(ErrorCode::Internal, "worker epoch slots exhausted");
    }
    slots_[idx].store(kQuiescent, std::memory_order_seq_cst);
    return idx;
  }

  // seq_cst on publish/load: the updater's version bump, its epoch reads, and
  // the worker's publish/re-validate must share one total order or a worker
  // could re-arm a stale snapshot after the updater skipped its quiescent slot.
  void publish(size_t idx, uint64_t version) {
    slots_[idx].store(version, std::memory_order_seq_cst);
  }
  void quiesce(size_t idx) { slots_[idx].store(kQuiescent, std::memory_order_seq_cst); }
  uint64_t load(size_t idx) const { return slots_[idx].load(std::memory_order_seq_cst); }
  size_t count() const { return std::min(count_.load(std::memory_order_acquire), kMaxWorkers); }

 private:
  std::array<std::atomic<uint64_t>, kMaxWorkers> slots_{};
  std::atomic<size_t> count_{0};
};

/// Dispatch table with two full entry banks selected by version parity.
///
/// Install protocol: under the updater lock, wait until every non-quiescent
/// worker epoch has reached the current version (nobody can still be reading
/// the bank retired one flip ago), rebuild the inactive bank from the active
/// one, apply the mutation, then publish with a version store. Readers never
/// block and never observe a partially updated bank.
class OperatorTable {
 public:
  explicit OperatorTable(size_t n_slots) : n_slots_(n_slots) {
    if (n_slots == 0) throw Error(ErrorCode::ZeroSlots, "operator table needs at least one slot");
    banks_[0].resize(n_slots);
    banks_[1].resize(n_slots);
  }

  size_t slots() const { return n_slots_; }

  /// Acquire-load of the version; pairs with install's release store. Index
  /// bank (version mod 2) only while this snapshot is published as an epoch.
  uint64_t snapshot_version() const { return version_.load(std::memory_order_seq_cst); }

  /// Wait-free, total for any 64-bit id. On Ok, `*out` points into the bank
  /// image for `version`, valid while the caller's epoch pins that version.
  ErrorCode lookup(uint64_t version, uint64_t op_id, const OperatorEntry** out) const {
    if (op_id >= n_slots_) return ErrorCode::OutOfRange;
    const OperatorEntry& e = banks_[version % 2][op_id];
    switch (e.status) {
      case OpStatus::Empty: return ErrorCode::NotInstalled;
      case OpStatus::Killed: return ErrorCode::OperatorKilled;
      case OpStatus::Active: break;
    }
    *out = &e;
    return ErrorCode::Ok;
  }

  void install(uint32_t op_id, OpFn fn, InjectionRecord meta = {}) {
    mutate(op_id, [&](OperatorEntry& e) {
      e.fn = std::move(fn);
      e.status = OpStatus::Active;
    }, std::move(meta), /*record=*/true);
  }

  /// Replace an entry with a fail-fast stub under a new version. In-flight
  /// dispatches under older snapshots complete normally.
  void kill(uint32_t op_id) {
    mutate(op_id, [&](OperatorEntry& e) {
      e.fn = [op_id](const OpContext&) {
        throw Error(ErrorCode::OperatorKilled, "operator " + std::to_string(op_id) + " killed");
      };
      e.status = OpStatus::Killed;
    }, {}, /*record=*/false);
  }

  /// Entry copy from the active bank; for callers outside the worker epoch
  /// protocol (the inline execution path). The copied callable remains valid
  /// after any number of later installs.
  OperatorEntry latest_entry(uint64_t op_id) const {
    if (op_id >= n_slots_) {
      throw Error(ErrorCode::OutOfRange, "op id " + std::to_string(op_id) + " out of range");
    }
    std::lock_guard lock(updater_mu_);
    const uint64_t v = version_.load(std::memory_order_relaxed);
    return banks_[v % 2][op_id];
  }

  std::vector<InjectionRecord> audit() const {
    std::lock_guard lock(audit_mu_);
    return audit_;
  }

  /// One JSON object per line: ts_ns, op_id, template, params, signature,
  /// version.
  void export_audit_jsonl(std::ostream& os) const {
    for (const auto& r : audit()) {
      nlohmann::json j;
      j["ts_ns"] = r.ts_ns;
      j["op_id"] = r.op_id;
      j["template"] = r.template_name;
      j["params"] = r.params;
      j["signature"] = r.signature;
      j["version"] = r.version;
      os << j.dump() << '\n';
    }
  }

  static std::vector<InjectionRecord> parse_audit_jsonl(std::istream& is) {
    std::vector<InjectionRecord> out;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      InjectionRecord r;
      r.ts_ns = j.at("ts_ns").get<uint64_t>();
      r.op_id = j.at("op_id").get<uint32_t>();
      r.template_name = j.at("template").get<std::string>();
      r.params = j.at("params").get<std::vector<double>>();
      r.signature = j.at("signature").get<std::string>();
      r.version = j.at("version").get<uint64_t>();
      out.push_back(std::move(r));
    }
    return out;
  }

  EpochRegistry& epochs() { return epochs_; }

 private:
  template <typename Mutate>
  void mutate(uint32_t op_id, Mutate&& apply, InjectionRecord meta, bool record) {
    if (op_id >= n_slots_) {
      throw Error(ErrorCode::OutOfRange, "op id " + std::to_string(op_id) + " out of range");
    }
    std::lock_guard lock(updater_mu_);
    const uint64_t v = version_.load(std::memory_order_relaxed);
    wait_for_epochs(v);

    auto& dst = banks_[(v + 1) % 2];
    dst = banks_[v % 2];
    for (auto& e : dst) e.generation = v + 1;
    apply(dst[op_id]);

    if (record) {
      std::lock_guard alock(audit_mu_);
      meta.op_id = op_id;
      meta.version = v + 1;
      meta.ts_ns = std::max(monotonic_audit_ns(), last_ts_ + 1);
      last_ts_ = meta.ts_ns;
      audit_.push_back(std::move(meta));
    }
    version_.store(v + 1, std::memory_order_seq_cst);
  }

  // Block until no worker can still be dispatching from a snapshot older
  // than `required`; quiescent workers are skipped (they re-validate against
  // the version before re-entering a bank).
  void wait_for_epochs(uint64_t required) const {
    const size_t n = epochs_.count();
    for (size_t i = 0; i < n; ++i) {
      for (;;) {
        const uint64_t e = epochs_.load(i);
        if (e == EpochRegistry::kQuiescent || e >= required) break;
        std::this_thread::yield();
      }
    }
  }

  static uint64_t monotonic_audit_ns() {
    return static_cast<uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now().time_since_epoch())
            .count());
  }

  size_t n_slots_;
  std::vector<OperatorEntry> banks_[2];
  std::atomic<uint64_t> version_{0};
  mutable std::mutex updater_mu_;
  mutable std::mutex audit_mu_;
  std::vector<InjectionRecord> audit_;
  uint64_t last_ts_ = 0;
  EpochRegistry epochs_;
};

}  // namespace gpuos
