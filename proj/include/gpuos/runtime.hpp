// Host-facing runtime. Owns the buffer pool, operator table, task queue,
// worker pool, module cache, and telemetry, and routes each submission
// between the persistent-worker fast path and the inline conventional path.
//
// Threading contract: submissions, fusion control, injection, and shutdown
// belong to one producer thread. Handles may be waited on from any thread.
// Completion order across tasks is only defined through handle waits: wait on
// the producing handle before submitting a task that reads its output.
// Inline executions are synchronous, so their results are ready on return.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gpuos/errors.hpp"
#include "gpuos/executor.hpp"
#include "gpuos/expr.hpp"
#include "gpuos/opcompiler.hpp"
#include "gpuos/ops.hpp"
#include "gpuos/optable.hpp"
#include "gpuos/queue.hpp"
#include "gpuos/telemetry.hpp"
#include "gpuos/tensor.hpp"

namespace gpuos {

/// Reserved id dispatching fused composite descriptors; sits between the
/// builtin block and the first injected id.
inline constexpr uint32_t kCompositeOpId = 31;

enum class TaskState : uint8_t { Pending = 0, Done = 1, Failed = 2 };

inline const char* task_state_name(TaskState s) {
  switch (s) {
    case TaskState::Pending: return "Pending";
    case TaskState::Done: return "Done";
    case TaskState::Failed: return "Failed";
  }
  return "unknown";
}

namespace detail {

/// Shared completion cell behind a TaskHandle. The CAS in complete() makes
/// the Pending -> Done/Failed transition exactly-once; late completers lose
/// and change nothing.
struct HandleState {
  uint64_t id = 0;
  std::atomic<uint8_t> state{static_cast<uint8_t>(TaskState::Pending)};
  std::atomic<int> code{static_cast<int>(ErrorCode::Ok)};

  void complete(ErrorCode c) {
    // The code store is ordered before the state flip; a reader that acquires
    // the terminal state therefore sees the matching code.
    code.store(static_cast<int>(c), std::memory_order_relaxed);
    uint8_t expected = static_cast<uint8_t>(TaskState::Pending);
    const uint8_t next =
        static_cast<uint8_t>(c == ErrorCode::Ok ? TaskState::Done : TaskState::Failed);
    if (state.compare_exchange_strong(expected, next, std::memory_order_acq_rel)) {
      state.notify_all();
    }
  }

  TaskState wait_terminal() const {
    uint8_t s = state.load(std::memory_order_acquire);
    for (int spin = 0; s == static_cast<uint8_t>(TaskState::Pending) && spin < 256; ++spin) {
      std::this_thread::yield();
      s = state.load(std::memory_order_acquire);
    }
    while (s == static_cast<uint8_t>(TaskState::Pending)) {
      state.wait(s, std::memory_order_acquire);
      s = state.load(std::memory_order_acquire);
    }
    return static_cast<TaskState>(s);
  }
};

/// Canonical text of an expression; cache key for fused composites so chains
/// with distinct dataflow never share a compiled module.
inline void canonical_expr(const Expr& e, std::string& out) {
  switch (e.kind) {
    case ExprKind::Const: {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "c%.17g", e.value);
      out += buf;
      return;
    }
    case ExprKind::In:
      out += 'i';
      out += std::to_string(e.index);
      return;
    case ExprKind::Param:
      out += 'p';
      out += std::to_string(e.index);
      return;
    case ExprKind::Narrow:
      out += "nw";
      out += std::to_string(static_cast<int>(e.narrow_dtype));
      out += '(';
      canonical_expr(*e.a, out);
      out += ')';
      return;
    default:
      break;
  }
  out += std::to_string(static_cast<int>(e.kind));
  out += '(';
  if (e.a) canonical_expr(*e.a, out);
  if (e.b) {
    out += ',';
    canonical_expr(*e.b, out);
  }
  out += ')';
}

}  // namespace detail

/// Completion token for one submission. Default-constructed handles are
/// invalid; handles from submit() are always valid and reach Done or Failed
/// exactly once.
class TaskHandle {
 public:
  TaskHandle() = default;

  bool valid() const { return static_cast<bool>(st_); }
  uint64_t id() const { return check().id; }
  TaskState state() const {
    return static_cast<TaskState>(check().state.load(std::memory_order_acquire));
  }
  /// Ok while Pending or Done; the failure code once Failed.
  ErrorCode error() const {
    const detail::HandleState& s = check();
    if (static_cast<TaskState>(s.state.load(std::memory_order_acquire)) != TaskState::Failed) {
      return ErrorCode::Ok;
    }
    return static_cast<ErrorCode>(s.code.load(std::memory_order_relaxed));
  }
  /// Block until terminal. Prefer Runtime::wait, which also flushes a pending
  /// fusion chain that might still hold this task.
  TaskState wait() const { return check().wait_terminal(); }

 private:
  friend class Runtime;
  explicit TaskHandle(std::shared_ptr<detail::HandleState> st) : st_(std::move(st)) {}
  detail::HandleState& check() const {
    if (!st_) throw Error(ErrorCode::Internal, "operation on an invalid task handle");
    return *st_;
  }
  std::shared_ptr<detail::HandleState> st_;
};

/// One operator invocation; the unit submit() and fuse() accept.
struct OpCall {
  uint64_t op_id = 0;
  std::vector<TensorView> inputs;
  TensorView output;
  std::vector<double> scalars;
};

struct RuntimeConfig {
  size_t capacity = 4096;          // task queue slots
  WorkerConfig workers;            // worker count, yield cadence, backoff
  uint64_t max_elements = 65536;   // per-task work ceiling for queue routing
  int64_t max_sdpa_context = 2048; // attention context ceiling for queue routing
  bool fusion_enabled = false;     // accumulate elementwise chains on submit
  size_t max_chain = 8;            // auto-flush threshold for fusion chains
  size_t table_slots = 1024;       // operator table size (builtin + injected)
  size_t trace_capacity = 65536;   // tracepoint ring slots
  bool telemetry_enabled = true;

  /// Defaults overridden by GPUOS_CAPACITY, GPUOS_WORKERS, GPUOS_YIELD_EVERY,
  /// and GPUOS_MAX_ELEMS when set to valid integers.
  static RuntimeConfig from_env() {
    RuntimeConfig c;
    c.capacity = static_cast<size_t>(env_u64("GPUOS_CAPACITY", c.capacity));
    c.workers.num_workers = static_cast<size_t>(env_u64("GPUOS_WORKERS", c.workers.num_workers));
    c.workers.yield_every = env_u64("GPUOS_YIELD_EVERY", c.workers.yield_every);
    c.max_elements = env_u64("GPUOS_MAX_ELEMS", c.max_elements);
    return c;
  }

 private:
  static uint64_t env_u64(const char* name, uint64_t dflt) {
    const char* s = std::getenv(name);
    if (!s || !*s) return dflt;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') return dflt;
    return static_cast<uint64_t>(v);
  }
};

class Runtime {
 public:
  explicit Runtime(RuntimeConfig cfg = {})
      : cfg_(normalize(std::move(cfg))),
        table_(cfg_.table_slots),
        queue_(cfg_.capacity),
        counters_(cfg_.table_slots < 256 ? cfg_.table_slots : 256),
        trace_(cfg_.trace_capacity) {
    trace_.set_enabled(cfg_.telemetry_enabled);
    install_builtins(table_);
    install_composite_handler();
    executor_ = std::make_unique<Executor>(
        queue_, table_, pool_, cfg_.workers, &counters_, &trace_,
        [this](uint64_t seq, ErrorCode code) { on_task_complete(seq, code); });
    executor_->start();
    fusion_on_ = cfg_.fusion_enabled;
  }

  ~Runtime() { shutdown(); }

  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  // ---- tensors ----

  BufferPool& pool() { return pool_; }

  /// Contiguous tensor backed by a fresh pool buffer.
  TensorView alloc_tensor(DType dtype, Shape shape) {
    TensorView v;
    v.dtype = dtype;
    v.shape = std::move(shape);
    v.strides = contiguous_strides(v.shape);
    int64_t n = 1;
    for (int64_t e : v.shape) n *= e;
    v.buffer = pool_.allocate(dtype, static_cast<size_t>(n));
    return v;
  }

  // ---- submission ----

  /// Route one operator call. Eligible work is published to the persistent
  /// workers; everything else (and any overflow when the queue is full) runs
  /// inline on the calling thread. The handle is terminal on return for the
  /// inline path. Failures surface on the handle, never as exceptions.
  TaskHandle submit(uint64_t op_id, std::vector<TensorView> inputs, TensorView output,
                    std::vector<double> scalars = {}) {
    auto st = std::make_shared<detail::HandleState>();
    st->id = next_id_++;
    TaskHandle h(st);

    if (stopped_) {
      counters_.inc_failed();
      st->complete(ErrorCode::RuntimeStopped);
      return h;
    }
    if (const ErrorCode v = validate(inputs, output, scalars); v != ErrorCode::Ok) {
      counters_.inc_failed();
      st->complete(v);
      return h;
    }

    counters_.inc_submitted();
    const bool elig = eligible(op_id, inputs, output);

    if (fusion_on_ && elig && scalars.empty() && chainable(op_id, inputs, output)) {
      if (chain_try_append(op_id, inputs, output, st)) {
        if (chain_.size() >= cfg_.max_chain) flush_chain();
        return h;
      }
      flush_chain();
      if (chain_try_append(op_id, inputs, output, st)) {
        if (chain_.size() >= cfg_.max_chain) flush_chain();
        return h;
      }
    }
    if (!chain_.empty()) flush_chain();  // later work must observe chained writes
    route(op_id, inputs, output, scalars, st, elig);
    return h;
  }

  TaskHandle submit(OpKind kind, std::vector<TensorView> inputs, TensorView output,
                    std::vector<double> scalars = {}) {
    return submit(static_cast<uint64_t>(kind), std::move(inputs), std::move(output),
                  std::move(scalars));
  }

  TaskHandle submit(const OpCall& call) {
    return submit(call.op_id, call.inputs, call.output, call.scalars);
  }

  // ---- fusion ----

  /// Accumulate elementwise chains on submit instead of publishing each step.
  /// Turning fusion off flushes whatever is pending.
  void set_fusion(bool on) {
    if (!on) flush_chain();
    fusion_on_ = on;
  }
  bool fusion() const { return fusion_on_; }

  /// Flush the pending chain; a no-op when nothing is chained.
  void fuse() { flush_chain(); }

  /// Submit a whole chain and flush it as one unit. Intermediate results are
  /// elided; use fusion mode with retained handles to materialize them.
  std::vector<TaskHandle> fuse(std::span<const OpCall> calls) {
    const bool prev_on = fusion_on_;
    const long prev_base = chain_handle_baseline_;
    fusion_on_ = true;
    chain_handle_baseline_ = 2;  // our return vector holds the second reference
    std::vector<TaskHandle> out;
    out.reserve(calls.size());
    for (const OpCall& c : calls) out.push_back(submit(c));
    flush_chain();
    chain_handle_baseline_ = prev_base;
    fusion_on_ = prev_on;
    return out;
  }

  /// Submissions folded into already-counted composite descriptors; the
  /// accounting identity is submitted == inline + committed + absorbed.
  uint64_t fusion_absorbed() const { return fusion_absorbed_; }

  // ---- injection ----

  /// Compile a template instance (signature-cached) and install it at the
  /// next free injected id. Returns the id; throws on compile errors or a
  /// full table. Safe while workers are live.
  uint64_t inject_operator(const std::string& template_name, std::span<const double> params = {},
                           DType dtype = DType::F32) {
    if (next_injected_id_ >= table_.slots()) {
      throw Error(ErrorCode::TableFull, "no free injected op ids");
    }
    return inject_operator_at(static_cast<uint32_t>(next_injected_id_), template_name, params,
                              dtype);
  }

  /// Same, at a caller-chosen id at or past kFirstInjectedId.
  uint64_t inject_operator_at(uint32_t op_id, const std::string& template_name,
                              std::span<const double> params = {}, DType dtype = DType::F32) {
    if (stopped_) throw Error(ErrorCode::RuntimeStopped, "inject after shutdown");
    if (op_id < kFirstInjectedId) {
      throw Error(ErrorCode::OutOfRange,
                  "injected ids start at " + std::to_string(kFirstInjectedId));
    }
    if (op_id >= table_.slots()) {
      throw Error(ErrorCode::OutOfRange, "op id " + std::to_string(op_id) + " past table size");
    }
    const OperatorTemplate tmpl = registry_.get(template_name);
    const uint64_t h0 = cache_.hits(), m0 = cache_.misses();
    ModulePtr mod;
    try {
      mod = cache_.compile_or_get(tmpl, params, dtype);
    } catch (...) {
      sync_cache_counters(h0, m0);
      throw;
    }
    sync_cache_counters(h0, m0);

    InjectionRecord meta;
    meta.template_name = template_name;
    meta.params.assign(params.begin(), params.end());
    meta.signature = signature_key(mod->signature);
    table_.install(op_id, load_module(mod), std::move(meta));
    modules_by_id_[op_id] = mod;
    counters_.inc_injections();
    if (op_id >= next_injected_id_) next_injected_id_ = static_cast<uint64_t>(op_id) + 1;
    return op_id;
  }

  /// Replace an operator with a fail-fast stub; in-flight dispatches under
  /// older table versions finish normally.
  void kill_operator(uint32_t op_id) {
    if (stopped_) throw Error(ErrorCode::RuntimeStopped, "kill after shutdown");
    table_.kill(op_id);
    modules_by_id_.erase(op_id);  // killed ops leave the fusion-eligible set
  }

  TemplateRegistry& templates() { return registry_; }
  OperatorTable& table() { return table_; }
  ModuleCache& module_cache() { return cache_; }

  // ---- completion / introspection ----

  /// Block until the handle is terminal, flushing the fusion chain first in
  /// case the task is still chained.
  TaskState wait(const TaskHandle& h) {
    if (h.state() == TaskState::Pending) flush_chain();
    return h.wait();
  }

  /// Block until every committed task has been processed; flushes the fusion
  /// chain first.
  void wait_all() {
    flush_chain();
    for (;;) {
      const TaskQueue::Snapshot s = queue_.peek();
      if (s.processed >= committed_tasks_) return;
      queue_.wait_for_processed(s.processed);
    }
  }

  TaskQueue::Snapshot peek_queue() const { return queue_.peek(); }
  CounterSnapshot counters() const { return counters_.snapshot(); }
  std::vector<Tracepoint> trace() const { return trace_.snapshot(); }
  TraceRing& trace_ring() { return trace_; }

  bool worker_alive() const { return executor_ && executor_->worker_alive(); }
  size_t num_workers() const { return executor_ ? executor_->num_workers() : 0; }
  uint64_t canary_hits() const { return executor_ ? executor_->canary_hits() : 0; }

  /// Live yield cadence; workers pick the new value up before their next task.
  void set_yield_every(uint64_t n) {
    if (executor_) executor_->set_yield_every(n);
  }

  bool stopped() const { return stopped_; }

  /// Count of compiled-but-unclaimed fused composites; zero at quiescence.
  size_t pending_composites() const {
    std::lock_guard lock(composites_mu_);
    return composites_.size();
  }

  /// Drain the queue, stop the workers, then release all buffers. Idempotent;
  /// later submissions fail with RuntimeStopped.
  void shutdown() {
    if (stopped_) return;
    flush_chain();
    wait_all();
    stopped_ = true;
    executor_->stop();
    {
      std::lock_guard lock(inflight_mu_);
      for (auto& [seq, hs] : inflight_) {
        for (auto& h : hs) h->complete(ErrorCode::RuntimeStopped);
      }
      inflight_.clear();
    }
    {
      std::lock_guard lock(composites_mu_);
      composites_.clear();
    }
    pool_.clear();
  }

 private:
  struct ChainStep {
    uint64_t op_id = 0;
    std::vector<TensorView> inputs;
    TensorView output;
    std::shared_ptr<detail::HandleState> handle;
  };

  static RuntimeConfig normalize(RuntimeConfig cfg) {
    if (cfg.max_chain == 0) cfg.max_chain = 1;
    if (cfg.table_slots < kFirstInjectedId + 1) cfg.table_slots = kFirstInjectedId + 1;
    return cfg;
  }

  // ---- validation & eligibility ----

  static ErrorCode validate(std::span<const TensorView> inputs, const TensorView& output,
                            std::span<const double> scalars) {
    if (inputs.size() > kMaxInputs || scalars.size() > kMaxScalars) return ErrorCode::ArityError;
    if (output.buffer == kInvalidBuffer) return ErrorCode::InvalidBuffer;
    if (output.strides.size() != output.shape.size()) return ErrorCode::IncompatibleShapes;
    for (const TensorView& v : inputs) {
      if (v.buffer == kInvalidBuffer) return ErrorCode::InvalidBuffer;
      if (v.strides.size() != v.shape.size()) return ErrorCode::IncompatibleShapes;
    }
    return ErrorCode::Ok;
  }

  /// Work estimate in elements: what the task reads or writes, whichever
  /// dominates for its kind.
  static uint64_t work_elements(uint64_t op_id, std::span<const TensorView> inputs,
                                const TensorView& output) {
    if (op_id < kNumBuiltinOps) {
      switch (static_cast<OpKind>(op_id)) {
        case OpKind::ReduceSum:
        case OpKind::ReduceMax:
        case OpKind::ReduceMin:
          return inputs.empty() ? 0 : static_cast<uint64_t>(inputs[0].numel());
        case OpKind::Sdpa:
          return inputs.size() >= 2 ? static_cast<uint64_t>(inputs[1].numel()) : 0;
        case OpKind::KvAppend:
          return inputs.size() >= 2
                     ? static_cast<uint64_t>(inputs[0].numel() + inputs[1].numel())
                     : 0;
        default:
          break;
      }
    }
    return static_cast<uint64_t>(output.numel());
  }

  /// The routing filter: which calls belong on the persistent workers.
  /// Elementwise, normalization, reduction, rope, kv-append, bounded-context
  /// attention, and injected ops qualify up to the work ceiling; matmuls take
  /// the conventional inline path regardless of size.
  bool eligible(uint64_t op_id, std::span<const TensorView> inputs,
                const TensorView& output) const {
    bool kind_ok = false;
    if (op_id >= kFirstInjectedId) {
      kind_ok = modules_by_id_.count(static_cast<uint32_t>(op_id)) != 0;
    } else if (op_id < kNumBuiltinOps) {
      switch (static_cast<OpKind>(op_id)) {
        case OpKind::Add:
        case OpKind::Mul:
        case OpKind::Relu:
        case OpKind::Gelu:
        case OpKind::Softmax:
        case OpKind::LayerNorm:
        case OpKind::ReduceSum:
        case OpKind::ReduceMax:
        case OpKind::ReduceMin:
        case OpKind::Rope:
        case OpKind::KvAppend:
          kind_ok = true;
          break;
        case OpKind::Sdpa:
          kind_ok = inputs.size() >= 2 && inputs[1].rank() == 3 &&
                    inputs[1].shape[1] <= cfg_.max_sdpa_context;
          break;
        case OpKind::MatMulSmall:
        case OpKind::VecMat:
          kind_ok = false;
          break;
      }
    }
    return kind_ok && work_elements(op_id, inputs, output) <= cfg_.max_elements;
  }

  // ---- routing ----

  void route(uint64_t op_id, const std::vector<TensorView>& inputs, const TensorView& output,
             const std::vector<double>& scalars,
             const std::shared_ptr<detail::HandleState>& st, bool elig) {
    if (elig) {
      if (const std::optional<uint64_t> slot = queue_.acquire_slot()) {
        TaskDescriptor d;
        d.seq = st->id;
        d.op_id = static_cast<uint32_t>(op_id);
        d.n_inputs = static_cast<uint8_t>(inputs.size());
        for (size_t i = 0; i < inputs.size(); ++i) d.inputs[i] = inputs[i];
        d.output = output;
        d.n_scalars = static_cast<uint8_t>(scalars.size());
        for (size_t i = 0; i < scalars.size(); ++i) d.scalars[i] = scalars[i];
        d.size = static_cast<uint64_t>(output.numel());
        attach(d.seq, st);  // before commit: a worker may finish instantly
        queue_.commit(*slot, d);
        counters_.inc_committed();
        ++committed_tasks_;
        return;
      }
      counters_.inc_queue_full_fallback();
    }
    execute_inline(op_id, inputs, output, scalars, st);
  }

  void execute_inline(uint64_t op_id, std::span<const TensorView> inputs,
                      const TensorView& output, std::span<const double> scalars,
                      const std::shared_ptr<detail::HandleState>& st) {
    OpContext ctx;
    ctx.pool = &pool_;
    ctx.inputs = inputs;
    ctx.output = &output;
    ctx.scalars = scalars;
    ctx.size = static_cast<uint64_t>(output.numel());
    ctx.seq = st->id;

    counters_.inc_inline();
    const uint64_t t0 = monotonic_ns();
    ErrorCode code = ErrorCode::Ok;
    try {
      const OperatorEntry entry = table_.latest_entry(op_id);
      if (entry.status == OpStatus::Empty) {
        throw Error(ErrorCode::NotInstalled, "op " + std::to_string(op_id) + " not installed");
      }
      if (entry.status == OpStatus::Killed) {
        throw Error(ErrorCode::OperatorKilled, "op " + std::to_string(op_id) + " killed");
      }
      // Matmuls run uncapped here: this is the conventional large-op path.
      if (op_id == static_cast<uint64_t>(OpKind::MatMulSmall)) {
        matmul(ctx, 0);
      } else if (op_id == static_cast<uint64_t>(OpKind::VecMat)) {
        vecmat(ctx, 0);
      } else {
        entry.fn(ctx);
      }
    } catch (const Error& e) {
      code = e.code();
    } catch (...) {
      code = ErrorCode::Internal;
    }
    uint64_t t1 = monotonic_ns();
    if (t1 <= t0) t1 = t0 + 1;

    if (code != ErrorCode::Ok) counters_.inc_failed();
    counters_.inc_op(op_id);
    if (trace_.enabled()) {
      Tracepoint tp;
      tp.seq = st->id;
      tp.op_id = op_id;
      tp.worker = kInlineWorker;
      tp.enqueue_ns = t0;
      tp.dequeue_ns = t0;
      tp.exec_ns = t1 - t0;
      tp.version = table_.snapshot_version();
      trace_.record(tp);
    }
    st->complete(code);
  }

  // ---- handle registry ----

  void attach(uint64_t seq, const std::shared_ptr<detail::HandleState>& st) {
    std::lock_guard lock(inflight_mu_);
    inflight_[seq].push_back(st);
  }

  void on_task_complete(uint64_t seq, ErrorCode code) {
    std::vector<std::shared_ptr<detail::HandleState>> hs;
    {
      std::lock_guard lock(inflight_mu_);
      const auto it = inflight_.find(seq);
      if (it != inflight_.end()) {
        hs = std::move(it->second);
        inflight_.erase(it);
      }
    }
    for (auto& h : hs) h->complete(code);
  }

  // ---- fusion ----

  /// Structural screen before appending to the chain; shape compatibility
  /// with the current chain is checked separately in chain_try_append.
  bool chainable(uint64_t op_id, std::span<const TensorView> inputs,
                 const TensorView& output) const {
    if (output.dtype != DType::F32 && output.dtype != DType::F64) return false;
    for (const TensorView& v : inputs) {
      if (v.dtype != output.dtype) return false;
    }
    size_t want = 0;
    if (op_id >= kFirstInjectedId) {
      const auto it = modules_by_id_.find(static_cast<uint32_t>(op_id));
      if (it == modules_by_id_.end()) return false;
      want = static_cast<size_t>(it->second->signature.arity);
      if (it->second->signature.dtype != output.dtype) return false;
    } else {
      switch (static_cast<OpKind>(op_id)) {
        case OpKind::Add:
        case OpKind::Mul:
          want = 2;
          break;
        case OpKind::Relu:
        case OpKind::Gelu:
          want = 1;
          break;
        default:
          return false;
      }
      if (table_.latest_entry(op_id).status != OpStatus::Active) return false;
    }
    return inputs.size() == want;
  }

  /// An input that aliases a pending chain output must match its view
  /// exactly (it resolves symbolically); writes over chain externals or
  /// mismatched aliases force a flush first.
  bool chain_try_append(uint64_t op_id, const std::vector<TensorView>& inputs,
                        const TensorView& output,
                        const std::shared_ptr<detail::HandleState>& st) {
    if (!chain_.empty()) {
      const TensorView& head = chain_.front().output;
      if (output.dtype != head.dtype || output.shape != head.shape) return false;
    }
    size_t fresh = 0;
    for (const TensorView& in : inputs) {
      bool inter = false, mismatch = false;
      for (const ChainStep& s : chain_) {
        if (in.buffer != s.output.buffer) continue;
        if (in.same_layout(s.output)) {
          inter = true;
        } else {
          mismatch = true;
        }
      }
      if (mismatch && !inter) return false;
      if (inter) continue;
      bool known = false;
      for (const TensorView& e : chain_externals_) {
        if (in.same_layout(e)) {
          known = true;
          break;
        }
      }
      if (!known) ++fresh;
    }
    if (chain_externals_.size() + fresh > kMaxInputs) return false;
    for (const TensorView& e : chain_externals_) {
      if (output.buffer == e.buffer) return false;  // would invalidate a folded read
    }
    for (const ChainStep& s : chain_) {
      if (output.buffer == s.output.buffer && !output.same_layout(s.output)) return false;
    }

    for (const TensorView& in : inputs) {
      bool inter = false;
      for (const ChainStep& s : chain_) {
        if (in.same_layout(s.output)) inter = true;
      }
      if (inter) continue;
      bool known = false;
      for (const TensorView& e : chain_externals_) {
        if (in.same_layout(e)) known = true;
      }
      if (!known) chain_externals_.push_back(in);
    }
    chain_.push_back(ChainStep{op_id, inputs, output, st});
    return true;
  }

  /// AST of one step with In indices matching its input positions. Builtin
  /// trees mirror the kernels' evaluation order exactly; with FP contraction
  /// off, interpretation reproduces the kernels bit for bit.
  ExprPtr step_ast(const ChainStep& s) const {
    if (s.op_id >= kFirstInjectedId) {
      return clone(*modules_by_id_.at(static_cast<uint32_t>(s.op_id))->folded_ast);
    }
    switch (static_cast<OpKind>(s.op_id)) {
      case OpKind::Add:
        return make_binary(ExprKind::Add, make_in(0), make_in(1));
      case OpKind::Mul:
        return make_binary(ExprKind::Mul, make_in(0), make_in(1));
      case OpKind::Relu:
        return make_binary(ExprKind::Max, make_in(0), make_const(0.0));
      case OpKind::Gelu: {
        const double c = std::sqrt(2.0 / std::numbers::pi);
        ExprPtr x3 = make_binary(
            ExprKind::Mul,
            make_binary(ExprKind::Mul, make_binary(ExprKind::Mul, make_const(0.044715), make_in(0)),
                        make_in(0)),
            make_in(0));
        ExprPtr inner = make_binary(ExprKind::Mul, make_const(c),
                                    make_binary(ExprKind::Add, make_in(0), std::move(x3)));
        ExprPtr outer = make_binary(ExprKind::Add, make_const(1.0),
                                    make_unary(ExprKind::Tanh, std::move(inner)));
        return make_binary(ExprKind::Mul, make_binary(ExprKind::Mul, make_const(0.5), make_in(0)),
                           std::move(outer));
      }
      default:
        throw Error(ErrorCode::Internal, "unfusable op in chain");
    }
  }

  bool retained(const ChainStep& s) const {
    return s.handle.use_count() > chain_handle_baseline_;
  }

  void flush_chain() {
    if (chain_.empty()) return;
    std::vector<ChainStep> steps = std::move(chain_);
    chain_.clear();
    chain_externals_.clear();
    size_t i = 0;
    while (i < steps.size()) {
      size_t j = i;
      while (j + 1 < steps.size() && !retained(steps[j])) ++j;
      publish_segment(steps, i, j, /*blocking=*/j + 1 < steps.size());
      i = j + 1;
    }
  }

  /// Compile steps [i..j] into one composite and publish it; `blocking`
  /// waits for completion so a later segment can read the materialized
  /// boundary tensor safely.
  void publish_segment(std::vector<ChainStep>& steps, size_t i, size_t j, bool blocking) {
    if (i == j) {
      // Single step: publish it as itself, no composite indirection.
      route(steps[i].op_id, steps[i].inputs, steps[i].output, {}, steps[i].handle, true);
      if (blocking) steps[i].handle->wait_terminal();
      return;
    }

    const DType dtype = steps[j].output.dtype;
    std::vector<TensorView> ext;
    std::vector<std::pair<TensorView, ExprPtr>> inter;  // produced within this segment
    ExprPtr cur;
    for (size_t k = i; k <= j; ++k) {
      const ChainStep& s = steps[k];
      const ExprPtr base = step_ast(s);
      cur = rewrite_inputs(*base, [&](int idx) -> ExprPtr {
        const TensorView& v = s.inputs[static_cast<size_t>(idx)];
        for (const auto& [iv, ie] : inter) {
          if (v.same_layout(iv)) return clone(*ie);
        }
        for (size_t e = 0; e < ext.size(); ++e) {
          if (v.same_layout(ext[e])) return make_in(static_cast<int>(e));
        }
        ext.push_back(v);
        return make_in(static_cast<int>(ext.size() - 1));
      });
      if (k < j) {
        ExprPtr narrowed = make_narrow(dtype, clone(*cur));
        bool replaced = false;
        for (auto& [iv, ie] : inter) {
          if (iv.same_layout(s.output)) {
            ie = std::move(narrowed);
            replaced = true;
            break;
          }
        }
        if (!replaced) inter.emplace_back(s.output, std::move(narrowed));
      }
    }

    if (ext.size() > kMaxInputs) {
      // Materialization boundaries widened the operand set past the
      // descriptor limit; fall back to running the steps one by one.
      for (size_t k = i; k <= j; ++k) {
        execute_inline(steps[k].op_id, steps[k].inputs, steps[k].output, {}, steps[k].handle);
      }
      return;
    }

    OperatorSignature sig;
    {
      std::string canon;
      detail::canonical_expr(*cur, canon);
      sig.template_name = "fused_" + canon;
    }
    sig.dtype = dtype;
    sig.arity = static_cast<int>(ext.size());

    const uint64_t h0 = cache_.hits(), m0 = cache_.misses();
    ErrorCode code = ErrorCode::Ok;
    OpFn fn;
    try {
      const ModulePtr mod = cache_.compile_or_get_ast(sig, [&] { return clone(*cur); });
      fn = load_module(mod);
    } catch (...) {
      code = ErrorCode::Internal;
    }
    sync_cache_counters(h0, m0);
    if (code != ErrorCode::Ok) {
      // A composite that will not compile (for example a chain deeper than
      // the verifier's stack bound) still owes sequential semantics.
      for (size_t k = i; k <= j; ++k) {
        execute_inline(steps[k].op_id, steps[k].inputs, steps[k].output, {}, steps[k].handle);
      }
      return;
    }

    fusion_absorbed_ += j - i;  // j-i+1 steps behind one descriptor

    TaskDescriptor d;
    d.seq = next_id_++;
    d.op_id = kCompositeOpId;
    d.flags = kFlagFusedComposite;
    d.n_inputs = static_cast<uint8_t>(ext.size());
    for (size_t e = 0; e < ext.size(); ++e) d.inputs[e] = ext[e];
    d.output = steps[j].output;
    d.size = static_cast<uint64_t>(d.output.numel());

    if (const std::optional<uint64_t> slot = queue_.acquire_slot()) {
      {
        std::lock_guard lock(composites_mu_);
        composites_[d.seq] = fn;
      }
      {
        std::lock_guard lock(inflight_mu_);
        auto& hs = inflight_[d.seq];
        for (size_t k = i; k <= j; ++k) hs.push_back(steps[k].handle);
      }
      queue_.commit(*slot, d);
      counters_.inc_committed();
      ++committed_tasks_;
      if (blocking) steps[j].handle->wait_terminal();
      return;
    }

    counters_.inc_queue_full_fallback();
    counters_.inc_inline();
    OpContext ctx;
    ctx.pool = &pool_;
    ctx.inputs = std::span<const TensorView>(ext.data(), ext.size());
    ctx.output = &d.output;
    ctx.size = d.size;
    ctx.seq = d.seq;
    try {
      fn(ctx);
    } catch (const Error& e) {
      code = e.code();
    } catch (...) {
      code = ErrorCode::Internal;
    }
    if (code != ErrorCode::Ok) counters_.inc_failed();
    counters_.inc_op(kCompositeOpId);
    for (size_t k = i; k <= j; ++k) steps[k].handle->complete(code);
  }

  // ---- composite dispatch ----

  void install_composite_handler() {
    InjectionRecord meta;
    meta.template_name = "builtin";
    meta.signature = "composite";
    table_.install(
        kCompositeOpId,
        [this](const OpContext& ctx) {
          OpFn fn;
          {
            std::lock_guard lock(composites_mu_);
            const auto it = composites_.find(ctx.seq);
            if (it == composites_.end()) {
              throw Error(ErrorCode::Internal,
                          "no composite registered for seq " + std::to_string(ctx.seq));
            }
            fn = std::move(it->second);
            composites_.erase(it);
          }
          fn(ctx);
        },
        std::move(meta));
  }

  void sync_cache_counters(uint64_t h0, uint64_t m0) {
    for (uint64_t k = cache_.hits() - h0; k > 0; --k) counters_.inc_cache_hit();
    for (uint64_t k = cache_.misses() - m0; k > 0; --k) counters_.inc_cache_miss();
  }

  static constexpr uint32_t kInlineWorker = 0xFFFFFFFFu;

  RuntimeConfig cfg_;
  BufferPool pool_;
  OperatorTable table_;
  TaskQueue queue_;
  Counters counters_;
  TraceRing trace_;
  ModuleCache cache_;
  TemplateRegistry registry_ = TemplateRegistry::with_defaults();
  std::unique_ptr<Executor> executor_;

  std::atomic<bool> stopped_{false};
  uint64_t next_id_ = 1;
  uint64_t committed_tasks_ = 0;  // producer-side; sentinels never count
  uint64_t next_injected_id_ = kFirstInjectedId;
  std::unordered_map<uint32_t, ModulePtr> modules_by_id_;  // producer thread only

  bool fusion_on_ = false;
  std::vector<ChainStep> chain_;
  std::vector<TensorView> chain_externals_;
  long chain_handle_baseline_ = 1;
  uint64_t fusion_absorbed_ = 0;

  std::mutex inflight_mu_;
  std::unordered_map<uint64_t, std::vector<std::shared_ptr<detail::HandleState>>> inflight_;

  mutable std::mutex composites_mu_;
  std::unordered_map<uint64_t, OpFn> composites_;
};

}  // namespace gpuos
