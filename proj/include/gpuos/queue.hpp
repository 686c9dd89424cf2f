// Bounded lock-free task ring: one producer publishes descriptors with
// release stores on per-slot sequence numbers, many workers claim them with
// a CAS on the claim cursor.
#pragma once

#include <array>
#include <atomic>
#include <cassert>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <vector>

#include "gpuos/errors.hpp"
#include "gpuos/tensor.hpp"

namespace gpuos {

inline constexpr uint16_t kFlagFusedComposite = 1u << 0;
inline constexpr uint16_t kFlagShutdown = 1u << 1;
// Internal: operand shapes/strides live in the spill table, not inline.
inline constexpr uint16_t kFlagSpilled = 1u << 15;

inline constexpr size_t kMaxInputs = 4;
inline constexpr size_t kMaxScalars = 8;
inline constexpr size_t kInlineRank = 4;

inline uint64_t monotonic_ns() {
  return static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                   std::chrono::steady_clock::now().time_since_epoch())
                                   .count());
}

/// One unit of work: which operator, its operands, and scalar parameters.
struct TaskDescriptor {
  uint64_t seq = 0;
  uint32_t op_id = 0;
  uint16_t flags = 0;
  uint8_t n_inputs = 0;
  uint8_t n_scalars = 0;
  uint64_t size = 0;  // output element count
  uint64_t enqueue_ns = 0;
  std::array<double, kMaxScalars> scalars{};
  std::array<TensorView, kMaxInputs> inputs;
  TensorView output;

  bool is_shutdown() const { return flags & kFlagShutdown; }
  bool is_fused() const { return flags & kFlagFusedComposite; }
};

inline TaskDescriptor make_shutdown_descriptor() {
  TaskDescriptor d;
  d.flags = kFlagShutdown;
  return d;
}

namespace detail {

struct PackedView {
  uint64_t buffer = 0;
  int64_t offset = 0;
  int32_t extents[kInlineRank] = {0, 0, 0, 0};
  int32_t strides[kInlineRank] = {0, 0, 0, 0};
  uint8_t dtype = 0;
  uint8_t rank = 0;
};

// Fixed-size wire form stored in ring slots. Shape/stride words are inlined
// for rank <= 4; everything else spills to a side table keyed by seq.
struct PackedDescriptor {
  uint64_t seq = 0;
  uint64_t size = 0;
  uint64_t enqueue_ns = 0;
  uint32_t op_id = 0;
  uint16_t flags = 0;
  uint8_t n_inputs = 0;
  uint8_t n_scalars = 0;
  double scalars[kMaxScalars] = {};
  PackedView views[1 + kMaxInputs];  // [0] = output
  uint64_t checksum = 0;
};

// Descriptor budget: everything except the inline extent/stride words.
inline constexpr size_t kShapeWords =
    sizeof(PackedView::extents) + sizeof(PackedView::strides);
static_assert(sizeof(PackedDescriptor) - (1 + kMaxInputs) * kShapeWords <= 256,
              "descriptor core exceeds the 256-byte budget");

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t descriptor_checksum(const PackedDescriptor& d) {
  PackedDescriptor tmp;
  std::memcpy(&tmp, &d, sizeof(tmp));
  tmp.checksum = 0;
  return fnv1a(&tmp, sizeof(tmp));
}

inline bool view_fits_inline(const TensorView& v) {
  if (v.rank() > kInlineRank) return false;
  for (int64_t e : v.shape) {
    if (e > INT32_MAX) return false;
  }
  for (int64_t s : v.strides) {
    if (s > INT32_MAX || s < INT32_MIN) return false;
  }
  return true;
}

inline void pack_view(PackedView& p, const TensorView& v) {
  p.buffer = v.buffer;
  p.offset = v.offset;
  p.dtype = static_cast<uint8_t>(v.dtype);
  p.rank = static_cast<uint8_t>(v.rank());
  for (size_t d = 0; d < v.rank(); ++d) {
    p.extents[d] = static_cast<int32_t>(v.shape[d]);
    p.strides[d] = static_cast<int32_t>(v.strides[d]);
  }
}

inline TensorView unpack_view(const PackedView& p) {
  TensorView v;
  v.buffer = p.buffer;
  v.offset = p.offset;
  v.dtype = static_cast<DType>(p.dtype);
  v.shape.resize(p.rank);
  v.strides.resize(p.rank);
  for (size_t d = 0; d < p.rank; ++d) {
    v.shape[d] = p.extents[d];
    v.strides[d] = p.strides[d];
  }
  return v;
}

}  // namespace detail

/// Single-producer / multi-consumer descriptor ring with per-slot publication
/// sequence numbers (slot sequence = lap-encoded counter).
///
/// Producer: acquire_slot() reserves the next position if its slot has been
/// consumed a full lap ago; commit() writes the descriptor and publishes it
/// with a release store of the slot sequence. Consumers race on a CAS of the
/// claim cursor and copy the descriptor out before freeing the slot for the
/// next lap.
class TaskQueue {
 public:
  struct Snapshot {
    uint64_t head = 0;       // claim cursor
    uint64_t tail = 0;       // write cursor
    uint64_t processed = 0;  // completed tasks
  };

  explicit TaskQueue(size_t capacity) {
    if (capacity == 0) throw Error(ErrorCode::ZeroCapacity, "queue capacity must be positive");
    size_t cap = 2;
    while (cap < capacity) cap <<= 1;
    capacity_ = cap;
    mask_ = cap - 1;
    cells_ = std::make_unique<Cell[]>(cap);
    for (size_t i = 0; i < cap; ++i) {
      cells_[i].sequence.store(i, std::memory_order_relaxed);
    }
  }

  size_t capacity() const { return capacity_; }

  /// Reserve the next write position. Nonblocking; nullopt when
  /// write − claim would exceed capacity (the slot one lap down has not been
  /// claimed yet). Producer side only.
  std::optional<uint64_t> acquire_slot() {
    const uint64_t pos = reserve_cursor_.load(std::memory_order_relaxed);
    Cell& cell = cells_[pos & mask_];
    if (cell.sequence.load(std::memory_order_acquire) != pos) {
      return std::nullopt;  // full
    }
    reserve_cursor_.store(pos + 1, std::memory_order_relaxed);
    return pos;
  }

  /// Publish a descriptor into a reserved slot. The payload is fully written
  /// before the slot sequence is stored with release ordering, so any
  /// consumer that observes the sequence observes the whole descriptor.
  void commit(uint64_t slot, const TaskDescriptor& desc) {
    Cell& cell = cells_[slot & mask_];
    assert(cell.sequence.load(std::memory_order_relaxed) == slot && "commit of unreserved slot");

    detail::PackedDescriptor& p = cell.payload;
    std::memset(&p, 0, sizeof(p));
    p.seq = desc.seq;
    p.size = desc.size;
    p.enqueue_ns = monotonic_ns();
    p.op_id = desc.op_id;
    p.flags = desc.flags;
    p.n_inputs = desc.n_inputs;
    p.n_scalars = desc.n_scalars;
    for (size_t i = 0; i < kMaxScalars; ++i) p.scalars[i] = desc.scalars[i];

    bool inline_ok = detail::view_fits_inline(desc.output);
    for (size_t i = 0; inline_ok && i < desc.n_inputs; ++i) {
      inline_ok = detail::view_fits_inline(desc.inputs[i]);
    }
    if (inline_ok) {
      detail::pack_view(p.views[0], desc.output);
      for (size_t i = 0; i < desc.n_inputs; ++i) detail::pack_view(p.views[1 + i], desc.inputs[i]);
    } else {
      p.flags |= kFlagSpilled;
      SpillEntry entry;
      entry.output = desc.output;
      entry.inputs.assign(desc.inputs.begin(), desc.inputs.begin() + desc.n_inputs);
      std::lock_guard lock(spill_mu_);
      spill_[desc.seq] = std::move(entry);
    }
    p.checksum = detail::descriptor_checksum(p);

    cell.sequence.store(slot + 1, std::memory_order_release);
    // seq_cst pairs with the waiter's counter-increment / cursor-load order in
    // wait_for_publish; release alone would allow a missed-wakeup reordering.
    write_cursor_.fetch_add(1, std::memory_order_seq_cst);
    if (publish_waiters_.load(std::memory_order_seq_cst) > 0) {
      write_cursor_.notify_all();
    }
  }

  /// Claim exactly one published descriptor. Nonblocking; nullopt when no
  /// published slot is claimable.
  std::optional<TaskDescriptor> try_claim() {
    uint64_t pos = claim_cursor_.load(std::memory_order_relaxed);
    for (;;) {
      Cell& cell = cells_[pos & mask_];
      const uint64_t seq = cell.sequence.load(std::memory_order_acquire);
      const int64_t diff = static_cast<int64_t>(seq) - static_cast<int64_t>(pos + 1);
      if (diff == 0) {
        if (claim_cursor_.compare_exchange_weak(pos, pos + 1, std::memory_order_acq_rel,
                                                std::memory_order_relaxed)) {
          detail::PackedDescriptor p;
          std::memcpy(&p, &cell.payload, sizeof(p));
          // Slot storage is free for the producer's next lap as soon as the
          // payload has been copied out.
          cell.sequence.store(pos + capacity_, std::memory_order_release);
          if (detail::descriptor_checksum(p) != p.checksum) {
            torn_count_.fetch_add(1, std::memory_order_relaxed);
          }
          return unpack(p);
        }
        // pos was refreshed by the failed CAS.
      } else if (diff < 0) {
        return std::nullopt;  // not yet published
      } else {
        pos = claim_cursor_.load(std::memory_order_relaxed);
      }
    }
  }

  /// Count one claimed task as completed.
  void mark_done() {
    processed_.fetch_add(1, std::memory_order_seq_cst);
    if (done_waiters_.load(std::memory_order_seq_cst) > 0) {
      processed_.notify_all();
    }
  }

  /// Monitoring snapshot; each counter is read atomically on its own.
  Snapshot peek() const {
    Snapshot s;
    s.processed = processed_.load(std::memory_order_acquire);
    s.head = claim_cursor_.load(std::memory_order_acquire);
    s.tail = write_cursor_.load(std::memory_order_acquire);
    return s;
  }

  uint64_t torn_count() const { return torn_count_.load(std::memory_order_relaxed); }

  /// Park until the write cursor moves past `last_seen`; may return
  /// spuriously, callers re-check and loop. Worker backoff ends here; every
  /// commit rings the doorbell when waiters are registered.
  void wait_for_publish(uint64_t last_seen) {
    publish_waiters_.fetch_add(1, std::memory_order_seq_cst);
    if (write_cursor_.load(std::memory_order_seq_cst) == last_seen) {
      write_cursor_.wait(last_seen, std::memory_order_acquire);
    }
    publish_waiters_.fetch_sub(1, std::memory_order_seq_cst);
  }

  /// Park until the processed counter moves past `last_seen`; may return
  /// spuriously, callers re-check and loop.
  void wait_for_processed(uint64_t last_seen) {
    done_waiters_.fetch_add(1, std::memory_order_seq_cst);
    if (processed_.load(std::memory_order_seq_cst) == last_seen) {
      processed_.wait(last_seen, std::memory_order_acquire);
    }
    done_waiters_.fetch_sub(1, std::memory_order_seq_cst);
  }

  size_t spill_entries() const {
    std::lock_guard lock(spill_mu_);
    return spill_.size();
  }

 private:
  struct SpillEntry {
    TensorView output;
    std::vector<TensorView> inputs;
  };

  struct alignas(64) Cell {
    std::atomic<uint64_t> sequence{0};
    detail::PackedDescriptor payload;
  };

  TaskDescriptor unpack(const detail::PackedDescriptor& p) {
    TaskDescriptor d;
    d.seq = p.seq;
    d.size = p.size;
    d.enqueue_ns = p.enqueue_ns;
    d.op_id = p.op_id;
    d.flags = p.flags & ~kFlagSpilled;
    d.n_inputs = p.n_inputs;
    d.n_scalars = p.n_scalars;
    for (size_t i = 0; i < kMaxScalars; ++i) d.scalars[i] = p.scalars[i];
    if (p.flags & kFlagSpilled) {
      std::lock_guard lock(spill_mu_);
      auto it = spill_.find(p.seq);
      assert(it != spill_.end() && "spill entry missing for claimed descriptor");
      if (it != spill_.end()) {
        d.output = std::move(it->second.output);
        for (size_t i = 0; i < it->second.inputs.size() && i < kMaxInputs; ++i) {
          d.inputs[i] = std::move(it->second.inputs[i]);
        }
        spill_.erase(it);
      }
    } else {
      d.output = detail::unpack_view(p.views[0]);
      for (size_t i = 0; i < p.n_inputs; ++i) d.inputs[i] = detail::unpack_view(p.views[1 + i]);
    }
    return d;
  }

  size_t capacity_ = 0;
  size_t mask_ = 0;
  std::unique_ptr<Cell[]> cells_;

  // Producer-local reservation. Atomic with relaxed ordering so the shutdown
  // sentinel relay (which runs strictly after the producer's last commit, with
  // a happens-before edge through the claimed sentinel) can reuse it.
  alignas(64) std::atomic<uint64_t> reserve_cursor_{0};
  alignas(64) std::atomic<uint64_t> write_cursor_{0};
  alignas(64) std::atomic<uint64_t> claim_cursor_{0};
  alignas(64) std::atomic<uint64_t> processed_{0};
  std::atomic<uint64_t> torn_count_{0};
  std::atomic<uint32_t> publish_waiters_{0};
  std::atomic<uint32_t> done_waiters_{0};

  mutable std::mutex spill_mu_;
  std::unordered_map<uint64_t, SpillEntry> spill_;
};

}  // namespace gpuos
