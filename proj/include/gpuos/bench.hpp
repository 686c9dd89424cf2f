#pragma once

// Desk-scale benchmark driver. Each workload runs in two modes over identical
// seeded data: a baseline that spawns and joins a fresh thread per operator
// (the launch-overhead analog) and a persistent mode that submits through the
// worker runtime. Outputs are checksummed bit-for-bit so the two modes can be
// compared for correctness as well as speed. Reports serialize to CSV (one
// row per workload/mode/config point) and to a simple SVG chart.

#include "gpuos/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <latch>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace gpuos {

// ---- Spec ----

enum class BenchWorkload { Elementwise, Attention, Mixed, Injection, Contention };
enum class BenchMode { Baseline, Persistent, Both };

inline const char* bench_workload_name(BenchWorkload w) {
  switch (w) {
    case BenchWorkload::Elementwise: return "elementwise";
    case BenchWorkload::Attention: return "attention";
    case BenchWorkload::Mixed: return "mixed";
    case BenchWorkload::Injection: return "injection";
    case BenchWorkload::Contention: return "contention";
  }
  return "unknown";
}

inline BenchWorkload parse_bench_workload(const std::string& s) {
  if (s == "elementwise") return BenchWorkload::Elementwise;
  if (s == "attention") return BenchWorkload::Attention;
  if (s == "mixed") return BenchWorkload::Mixed;
  if (s == "injection") return BenchWorkload::Injection;
  if (s == "contention") return BenchWorkload::Contention;
  throw Error(ErrorCode::UnknownIdentifier, "unknown workload '" + s + "'");
}

inline const char* bench_mode_name(BenchMode m) {
  switch (m) {
    case BenchMode::Baseline: return "baseline";
    case BenchMode::Persistent: return "persistent";
    case BenchMode::Both: return "both";
  }
  return "unknown";
}

inline BenchMode parse_bench_mode(const std::string& s) {
  if (s == "baseline") return BenchMode::Baseline;
  if (s == "persistent") return BenchMode::Persistent;
  if (s == "both") return BenchMode::Both;
  throw Error(ErrorCode::UnknownIdentifier, "unknown mode '" + s + "'");
}

/// Largest element count still routed to the workers under the default
/// runtime config; persistent-mode comparisons stay at or below it.
inline constexpr uint64_t kBenchEligibleElems = 65536;

struct BenchSpec {
  BenchWorkload workload = BenchWorkload::Elementwise;
  uint64_t ops = 100;    // operators per sequence (tokens for attention)
  uint64_t reps = 1000;  // repetitions of the sequence
  std::vector<uint64_t> elems = {1024, 4096, 16384};
  std::vector<uint64_t> submitters = {1, 2, 4, 8, 16, 32, 64, 128};
  size_t workers = 0;  // 0 = hardware parallelism
  size_t capacity = 4096;
  uint64_t seed = 42;
  BenchMode mode = BenchMode::Both;
  std::string template_file;  // extra operator templates for injection
};

inline void validate_bench_spec(const BenchSpec& spec) {
  if (spec.ops < 1) throw Error(ErrorCode::OutOfRange, "bench: ops must be at least 1");
  if (spec.reps < 1) throw Error(ErrorCode::OutOfRange, "bench: reps must be at least 1");
  if (spec.elems.empty()) throw Error(ErrorCode::OutOfRange, "bench: elems list is empty");
  for (uint64_t e : spec.elems) {
    if (e < 1 || e > kBenchEligibleElems) {
      throw Error(ErrorCode::OutOfRange,
                  "bench: elems " + std::to_string(e) + " outside [1, " +
                      std::to_string(kBenchEligibleElems) + "]");
    }
  }
  if (spec.submitters.empty()) {
    throw Error(ErrorCode::OutOfRange, "bench: submitters list is empty");
  }
  for (uint64_t n : spec.submitters) {
    if (n < 1 || n > 1024) {
      throw Error(ErrorCode::OutOfRange, "bench: submitter count " + std::to_string(n) +
                                             " outside [1, 1024]");
    }
  }
  if (spec.capacity < 2) throw Error(ErrorCode::OutOfRange, "bench: capacity must be at least 2");
}

// ---- Report ----

// Column semantics shared by every workload: config is the sweep point
// (element count, context length, or submitter count; 0 marks the plain
// unserialized contention reference), ops counts operator invocations,
// total_ns/p50_ns/p99_ns are wall times, checksum hashes every output
// bit-for-bit, and extra counts failures (always 0 on a healthy run).
// aux is workload-specific:
//   elementwise  inline executions (persistent; 0 when everything routes)
//   attention    final cache length
//   mixed        matmul branch executions (the inline-op count)
//   injection    median injection latency in ns (timing)
//   contention   mean front-stage wait in ns (timing)
// Under a fixed seed, workload/mode/config/ops/checksum are deterministic
// for every workload, and aux is too except where marked timing.
struct BenchRow {
  std::string workload;
  std::string mode;
  uint64_t config = 0;
  uint64_t ops = 0;
  uint64_t total_ns = 0;
  uint64_t p50_ns = 0;
  uint64_t p99_ns = 0;
  uint64_t checksum = 0;
  uint64_t aux = 0;
  uint64_t extra = 0;

  bool operator==(const BenchRow&) const = default;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  bool checksums_match = true;

  // Report-level metrics, printed but not serialized to CSV.
  uint64_t spawn_cost_p50_ns = 0;     // measured no-op thread spawn+join cost
  uint64_t queue_latency_p50_ns = 0;  // enqueue -> dequeue median (persistent)
  uint64_t saturation_n = 0;          // contention: submitter count of peak throughput
  double injection_dip = 0.0;         // submit-wall p50 near injections / steady p50
};

inline const BenchRow* find_bench_row(const BenchReport& r, const std::string& workload,
                                      const std::string& mode, uint64_t config) {
  for (const BenchRow& row : r.rows) {
    if (row.workload == workload && row.mode == mode && row.config == config) return &row;
  }
  return nullptr;
}

/// Baseline wall over persistent wall at one config point; 0 when either
/// side is missing.
inline double speedup_for(const BenchReport& r, const std::string& workload, uint64_t config) {
  const BenchRow* b = find_bench_row(r, workload, "baseline", config);
  const BenchRow* p = find_bench_row(r, workload, "persistent", config);
  if (!b || !p || p->total_ns == 0) return 0.0;
  return static_cast<double>(b->total_ns) / static_cast<double>(p->total_ns);
}

// ---- Checksums and data ----

namespace detail {

inline constexpr uint64_t kFnvOffset = 1469598103934665603ull;
inline constexpr uint64_t kFnvPrime = 1099511628211ull;

inline uint64_t fnv1a_accum(uint64_t h, const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t checksum_value(uint64_t h, double v) {
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  return fnv1a_accum(h, &bits, sizeof(bits));
}

/// Folds every element of a contiguous view into the running hash.
inline uint64_t checksum_view(uint64_t h, BufferPool& pool, const TensorView& v) {
  BoundView b(pool, v);
  int64_t n = 1;
  for (int64_t e : v.shape) n *= e;
  for (int64_t i = 0; i < n; ++i) h = checksum_value(h, b.load(v.offset + i));
  return h;
}

inline TensorView bench_alloc(BufferPool& pool, DType dtype, Shape shape) {
  TensorView v;
  v.dtype = dtype;
  v.shape = std::move(shape);
  v.strides = contiguous_strides(v.shape);
  int64_t n = 1;
  for (int64_t e : v.shape) n *= e;
  v.buffer = pool.allocate(dtype, static_cast<size_t>(n));
  return v;
}

inline std::vector<double> uniform_vals(std::mt19937_64& rng, size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (double& v : out) v = dist(rng);
  return out;
}

inline void fill_view(BufferPool& pool, const TensorView& v, const std::vector<double>& vals) {
  BoundView b(pool, v);
  for (size_t i = 0; i < vals.size(); ++i) {
    b.store(v.offset + static_cast<int64_t>(i), vals[i]);
  }
}

inline uint64_t sorted_percentile(std::vector<uint64_t>& samples, double p) {
  std::sort(samples.begin(), samples.end());
  return percentile(samples, p);
}

// ---- Baseline execution ----

/// Runs one operator on a fresh short-lived thread and joins it, mirroring a
/// per-op kernel launch. Returns the spawn-to-join wall time.
inline uint64_t run_spawned(BufferPool& pool, const OpFn& fn, std::span<const TensorView> inputs,
                            const TensorView& output, std::span<const double> scalars = {}) {
  OpContext ctx;
  ctx.pool = &pool;
  ctx.inputs = inputs;
  ctx.output = &output;
  ctx.scalars = scalars;
  int64_t n = 1;
  for (int64_t e : output.shape) n *= e;
  ctx.size = static_cast<uint64_t>(n);

  const uint64_t t0 = monotonic_ns();
  std::exception_ptr err;
  std::thread worker([&] {
    try {
      fn(ctx);
    } catch (...) {
      err = std::current_exception();
    }
  });
  worker.join();
  if (err) std::rethrow_exception(err);
  return monotonic_ns() - t0;
}

/// Median cost of spawning and joining a thread that does nothing.
inline uint64_t measure_spawn_cost(size_t samples = 513) {
  std::vector<uint64_t> lat;
  lat.reserve(samples);
  for (size_t i = 0; i < samples; ++i) {
    const uint64_t t0 = monotonic_ns();
    std::thread t([] {});
    t.join();
    lat.push_back(monotonic_ns() - t0);
  }
  return sorted_percentile(lat, 0.50);
}

inline RuntimeConfig bench_runtime_config(const BenchSpec& spec,
                                          uint64_t max_elements = kBenchEligibleElems) {
  RuntimeConfig c;
  c.capacity = spec.capacity;
  c.workers.num_workers = spec.workers;
  c.max_elements = max_elements;
  return c;
}

inline uint64_t config_seed(const BenchSpec& spec, uint64_t config) {
  return spec.seed ^ (config * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
}

}  // namespace detail

// ---- Elementwise workload ----
//
// Per repetition, `ops` independent small elementwise operators over their
// own buffers. The baseline launches each on a fresh thread, serially; the
// persistent mode submits the whole repetition and then drains it, which is
// where pipelining across workers pays off. Outputs are identical every
// repetition, so the final checksum is mode- and schedule-independent.

inline void run_elementwise(const BenchSpec& spec, BenchMode mode, BenchReport& report) {
  for (uint64_t E : spec.elems) {
    std::mt19937_64 rng(detail::config_seed(spec, E));
    struct Step {
      OpKind kind;
      bool binary;
    };
    std::vector<Step> prog(spec.ops);
    std::vector<std::vector<double>> in_vals(spec.ops), b_vals(spec.ops);
    for (uint64_t i = 0; i < spec.ops; ++i) {
      const OpKind kinds[] = {OpKind::Add, OpKind::Mul, OpKind::Relu, OpKind::Gelu};
      const OpKind k = kinds[rng() % 4];
      prog[i] = {k, k == OpKind::Add || k == OpKind::Mul};
      in_vals[i] = detail::uniform_vals(rng, E, -1.0, 1.0);
      if (prog[i].binary) b_vals[i] = detail::uniform_vals(rng, E, -1.0, 1.0);
    }

    const auto run_mode = [&](BenchMode m) {
      BenchRow row;
      row.workload = bench_workload_name(spec.workload);
      row.mode = bench_mode_name(m);
      row.config = E;
      row.ops = spec.ops * spec.reps;
      std::vector<uint64_t> lat;
      lat.reserve(spec.ops * spec.reps);

      if (m == BenchMode::Baseline) {
        BufferPool pool;
        std::vector<TensorView> ins(spec.ops), bs(spec.ops), outs(spec.ops);
        for (uint64_t i = 0; i < spec.ops; ++i) {
          ins[i] = detail::bench_alloc(pool, DType::F32, {static_cast<int64_t>(E)});
          outs[i] = detail::bench_alloc(pool, DType::F32, {static_cast<int64_t>(E)});
          detail::fill_view(pool, ins[i], in_vals[i]);
          if (prog[i].binary) {
            bs[i] = detail::bench_alloc(pool, DType::F32, {static_cast<int64_t>(E)});
            detail::fill_view(pool, bs[i], b_vals[i]);
          }
        }
        if (report.spawn_cost_p50_ns == 0) report.spawn_cost_p50_ns = detail::measure_spawn_cost();
        const uint64_t w0 = monotonic_ns();
        for (uint64_t r = 0; r < spec.reps; ++r) {
          for (uint64_t i = 0; i < spec.ops; ++i) {
            const OpFn fn = builtin_fn(prog[i].kind);
            std::vector<TensorView> inputs{ins[i]};
            if (prog[i].binary) inputs.push_back(bs[i]);
            lat.push_back(detail::run_spawned(pool, fn, inputs, outs[i]));
          }
        }
        row.total_ns = monotonic_ns() - w0;
        uint64_t h = detail::kFnvOffset;
        for (uint64_t i = 0; i < spec.ops; ++i) h = detail::checksum_view(h, pool, outs[i]);
        row.checksum = h;
      } else {
        Runtime rt(detail::bench_runtime_config(spec));
        std::vector<TensorView> ins(spec.ops), bs(spec.ops), outs(spec.ops);
        for (uint64_t i = 0; i < spec.ops; ++i) {
          ins[i] = rt.alloc_tensor(DType::F32, {static_cast<int64_t>(E)});
          outs[i] = rt.alloc_tensor(DType::F32, {static_cast<int64_t>(E)});
          detail::fill_view(rt.pool(), ins[i], in_vals[i]);
          if (prog[i].binary) {
            bs[i] = rt.alloc_tensor(DType::F32, {static_cast<int64_t>(E)});
            detail::fill_view(rt.pool(), bs[i], b_vals[i]);
          }
        }
        std::vector<TaskHandle> handles;
        handles.reserve(spec.ops);
        const uint64_t w0 = monotonic_ns();
        for (uint64_t r = 0; r < spec.reps; ++r) {
          handles.clear();
          for (uint64_t i = 0; i < spec.ops; ++i) {
            std::vector<TensorView> inputs{ins[i]};
            if (prog[i].binary) inputs.push_back(bs[i]);
            handles.push_back(rt.submit(prog[i].kind, std::move(inputs), outs[i]));
          }
          for (TaskHandle& h : handles) {
            if (rt.wait(h) != TaskState::Done) ++row.extra;
          }
        }
        row.total_ns = monotonic_ns() - w0;
        // Per-op latency through the queue: enqueue -> end of execution.
        for (const Tracepoint& t : rt.trace()) {
          lat.push_back(t.dequeue_ns + t.exec_ns - t.enqueue_ns);
        }
        // Dispatch latency against an idle pool: single waited submissions,
        // so enqueue -> dequeue measures the doorbell-to-claim cost rather
        // than time spent behind other queued work. Each probe rewrites
        // outs[0] with its existing value, leaving the checksum unchanged.
        {
          std::vector<TensorView> probe_inputs{ins[0]};
          if (prog[0].binary) probe_inputs.push_back(bs[0]);
          constexpr size_t kProbes = 512;
          for (size_t i = 0; i < kProbes; ++i) {
            TaskHandle ph = rt.submit(prog[0].kind, probe_inputs, outs[0]);
            rt.wait(ph);
          }
          const std::vector<Tracepoint> all_tr = rt.trace();
          const size_t n = std::min(kProbes, all_tr.size());
          std::vector<uint64_t> qlat;
          qlat.reserve(n);
          for (size_t i = all_tr.size() - n; i < all_tr.size(); ++i) {
            const Tracepoint& t = all_tr[i];
            qlat.push_back(t.dequeue_ns >= t.enqueue_ns ? t.dequeue_ns - t.enqueue_ns : 0);
          }
          report.queue_latency_p50_ns = detail::sorted_percentile(qlat, 0.50);
        }
        const CounterSnapshot c = rt.counters();
        row.aux = c.inline_executions;
        uint64_t h = detail::kFnvOffset;
        for (uint64_t i = 0; i < spec.ops; ++i) h = detail::checksum_view(h, rt.pool(), outs[i]);
        row.checksum = h;
      }
      if (!lat.empty()) {
        row.p50_ns = detail::sorted_percentile(lat, 0.50);
        row.p99_ns = detail::sorted_percentile(lat, 0.99);
      }
      report.rows.push_back(std::move(row));
    };

    if (mode != BenchMode::Persistent) run_mode(BenchMode::Baseline);
    if (mode != BenchMode::Baseline) run_mode(BenchMode::Persistent);
  }
}

// ---- Attention workload ----
//
// Decode loop per token: rotary embedding, key/value projection, cache
// append, single-query attention over the cache so far, layernorm, residual
// add. Context length sweeps {128, 512, 2048}; the cache is prefilled so the
// attention span tracks the configured context.

inline constexpr int64_t kBenchAttnHeads = 4;
inline constexpr int64_t kBenchAttnHeadDim = 64;
inline constexpr uint64_t kBenchAttnContexts[] = {128, 512, 2048};

inline void run_attention(const BenchSpec& spec, BenchMode mode, BenchReport& report) {
  constexpr int64_t h = kBenchAttnHeads, d = kBenchAttnHeadDim;
  for (uint64_t C : kBenchAttnContexts) {
    const int64_t cap = static_cast<int64_t>(C);
    const int64_t tokens = static_cast<int64_t>(std::min<uint64_t>(spec.ops, C));
    const int64_t prefill = cap - tokens;

    std::mt19937_64 rng(detail::config_seed(spec, C));
    const std::vector<double> x0 = detail::uniform_vals(rng, h * d, -1.0, 1.0);
    const std::vector<double> wk = detail::uniform_vals(rng, h * d, -1.0, 1.0);
    const std::vector<double> wv = detail::uniform_vals(rng, h * d, -1.0, 1.0);
    const std::vector<double> gamma = detail::uniform_vals(rng, d, 0.5, 1.5);
    const std::vector<double> beta = detail::uniform_vals(rng, d, -0.5, 0.5);
    const std::vector<double> kc0 =
        detail::uniform_vals(rng, static_cast<size_t>(h * cap * d), -1.0, 1.0);
    const std::vector<double> vc0 =
        detail::uniform_vals(rng, static_cast<size_t>(h * cap * d), -1.0, 1.0);

    const auto run_mode = [&](BenchMode m) {
      BenchRow row;
      row.workload = bench_workload_name(spec.workload);
      row.mode = bench_mode_name(m);
      row.config = C;
      row.ops = static_cast<uint64_t>(tokens) * spec.reps * 7;
      row.extra = 0;
      std::vector<uint64_t> lat;
      lat.reserve(static_cast<size_t>(tokens) * spec.reps);

      BufferPool own_pool;
      std::unique_ptr<Runtime> rt;
      if (m == BenchMode::Persistent) {
        rt = std::make_unique<Runtime>(detail::bench_runtime_config(spec, 1u << 20));
      }
      BufferPool& pool = rt ? rt->pool() : own_pool;
      const auto alloc = [&](Shape shape) {
        return rt ? rt->alloc_tensor(DType::F32, shape)
                  : detail::bench_alloc(pool, DType::F32, shape);
      };

      TensorView x = alloc({h, d}), xr = alloc({h, d});
      TensorView kn = alloc({h, d}), vn = alloc({h, d});
      TensorView wkv_k = alloc({h, d}), wkv_v = alloc({h, d});
      TensorView g = alloc({d}), b = alloc({d});
      TensorView attn = alloc({h, d}), normed = alloc({h, d});
      TensorView kcache = alloc({h, cap, d}), vcache = alloc({h, cap, d});
      TensorView pos = alloc({h});
      detail::fill_view(pool, x, x0);
      detail::fill_view(pool, wkv_k, wk);
      detail::fill_view(pool, wkv_v, wv);
      detail::fill_view(pool, g, gamma);
      detail::fill_view(pool, b, beta);
      detail::fill_view(pool, kcache, kc0);
      detail::fill_view(pool, vcache, vc0);

      // Sequenced through handle waits in persistent mode: each op reads the
      // previous op's output.
      const auto step = [&](OpKind kind, std::vector<TensorView> inputs, const TensorView& out,
                            std::vector<double> scalars = {}) {
        if (rt) {
          TaskHandle hd = rt->submit(kind, std::move(inputs), out, std::move(scalars));
          if (rt->wait(hd) != TaskState::Done) ++row.extra;
        } else {
          detail::run_spawned(pool, builtin_fn(kind), inputs, out, scalars);
        }
      };

      const uint64_t w0 = monotonic_ns();
      for (uint64_t r = 0; r < spec.reps; ++r) {
        int64_t len = prefill;
        for (int64_t t = 0; t < tokens; ++t) {
          const uint64_t t0 = monotonic_ns();
          {
            BoundView bp(pool, pos);
            for (int64_t i = 0; i < h; ++i) {
              bp.store(pos.offset + i, static_cast<double>(len));
            }
          }
          step(OpKind::Rope, {x, pos}, xr);
          step(OpKind::Mul, {xr, wkv_k}, kn);
          step(OpKind::Mul, {xr, wkv_v}, vn);
          step(OpKind::KvAppend, {kn, vn, vcache}, kcache, {static_cast<double>(len)});
          ++len;
          TensorView kv = kcache, vv = vcache;
          kv.shape[1] = len;
          vv.shape[1] = len;
          step(OpKind::Sdpa, {xr, kv, vv}, attn);
          step(OpKind::LayerNorm, {attn, g, b}, normed);
          step(OpKind::Add, {normed, xr}, x);
          lat.push_back(monotonic_ns() - t0);
        }
      }
      row.total_ns = monotonic_ns() - w0;

      uint64_t hsh = detail::kFnvOffset;
      hsh = detail::checksum_view(hsh, pool, x);
      hsh = detail::checksum_view(hsh, pool, kcache);
      hsh = detail::checksum_view(hsh, pool, vcache);
      row.checksum = hsh;
      row.aux = static_cast<uint64_t>(prefill + tokens);
      if (!lat.empty()) {
        row.p50_ns = detail::sorted_percentile(lat, 0.50);
        row.p99_ns = detail::sorted_percentile(lat, 0.99);
      }
      report.rows.push_back(std::move(row));
    };

    if (mode != BenchMode::Persistent) run_mode(BenchMode::Baseline);
    if (mode != BenchMode::Baseline) run_mode(BenchMode::Persistent);
  }
}

// ---- Mixed workload ----
//
// Data-dependent pipeline: each iteration reduces the hidden state, hashes
// the reduced bits to decide a branch, then either runs a matmul block
// (matmul stays on the conventional inline path by op kind) or a micro-op
// block (relu/softmax/add through the workers). Both modes see bit-identical
// data, so they take identical branches.

inline void run_mixed(const BenchSpec& spec, BenchMode mode, BenchReport& report) {
  for (uint64_t E : spec.elems) {
    int64_t m = 128;
    while (m * m < static_cast<int64_t>(E)) m *= 2;  // flat view of the matmul block covers E

    std::mt19937_64 rng(detail::config_seed(spec, E));
    const std::vector<double> h0 = detail::uniform_vals(rng, E, -1.0, 1.0);
    const std::vector<double> bias = detail::uniform_vals(rng, E, -0.5, 0.5);
    const std::vector<double> w0 =
        detail::uniform_vals(rng, static_cast<size_t>(m * m), -0.1, 0.1);
    const std::vector<double> m0 =
        detail::uniform_vals(rng, static_cast<size_t>(m * m), -1.0, 1.0);
    const std::vector<double> gamma = detail::uniform_vals(rng, static_cast<size_t>(m), 0.5, 1.5);
    const std::vector<double> beta = detail::uniform_vals(rng, static_cast<size_t>(m), -0.5, 0.5);

    const auto run_mode = [&](BenchMode bm) {
      BenchRow row;
      row.workload = bench_workload_name(spec.workload);
      row.mode = bench_mode_name(bm);
      row.config = E;
      row.ops = spec.ops * spec.reps * 4;
      std::vector<uint64_t> lat;
      lat.reserve(row.ops);

      BufferPool own_pool;
      std::unique_ptr<Runtime> rt;
      if (bm == BenchMode::Persistent) {
        rt = std::make_unique<Runtime>(detail::bench_runtime_config(spec));
      }
      BufferPool& pool = rt ? rt->pool() : own_pool;
      const auto alloc = [&](Shape shape) {
        return rt ? rt->alloc_tensor(DType::F32, shape)
                  : detail::bench_alloc(pool, DType::F32, shape);
      };

      const int64_t n = static_cast<int64_t>(E);
      TensorView ha = alloc({n}), hb = alloc({n}), t1 = alloc({n}), t2 = alloc({n});
      TensorView bvec = alloc({n}), red = alloc({});
      TensorView ma = alloc({m, m}), mb = alloc({m, m}), w = alloc({m, m});
      TensorView g = alloc({m}), be = alloc({m});
      detail::fill_view(pool, ha, h0);
      detail::fill_view(pool, bvec, bias);
      detail::fill_view(pool, w, w0);
      detail::fill_view(pool, ma, m0);
      detail::fill_view(pool, g, gamma);
      detail::fill_view(pool, be, beta);

      const auto step = [&](OpKind kind, std::vector<TensorView> inputs, const TensorView& out) {
        const uint64_t t0 = monotonic_ns();
        if (rt) {
          TaskHandle hd = rt->submit(kind, std::move(inputs), out);
          if (rt->wait(hd) != TaskState::Done) ++row.extra;
        } else {
          detail::run_spawned(pool, builtin_fn(kind), inputs, out);
        }
        lat.push_back(monotonic_ns() - t0);
      };

      TensorView hsrc = ha, hdst = hb;
      TensorView msrc = ma, mdst = mb;
      uint64_t taken = 0;
      const uint64_t w0ns = monotonic_ns();
      for (uint64_t r = 0; r < spec.reps; ++r) {
        for (uint64_t i = 0; i < spec.ops; ++i) {
          step(OpKind::ReduceSum, {hsrc}, red);
          const double rv = BoundView(pool, red).load(red.offset);
          uint64_t bits;
          std::memcpy(&bits, &rv, sizeof(bits));
          const bool branch = (detail::fnv1a_accum(detail::kFnvOffset, &bits, 8) & 1) != 0;
          if (branch) {
            ++taken;
            step(OpKind::MatMulSmall, {msrc, w}, mdst);
            step(OpKind::LayerNorm, {mdst, g, be}, mdst);
            TensorView flat;  // first E entries of the matmul block
            flat.dtype = DType::F32;
            flat.shape = {n};
            flat.strides = {1};
            flat.buffer = mdst.buffer;
            step(OpKind::Add, {hsrc, flat}, hdst);
            std::swap(msrc, mdst);
          } else {
            step(OpKind::Relu, {hsrc}, t1);
            step(OpKind::Softmax, {t1}, t2);
            step(OpKind::Add, {t2, bvec}, hdst);
          }
          std::swap(hsrc, hdst);
        }
      }
      row.total_ns = monotonic_ns() - w0ns;

      uint64_t hsh = detail::kFnvOffset;
      hsh = detail::checksum_view(hsh, pool, hsrc);
      hsh = detail::checksum_view(hsh, pool, ma);
      hsh = detail::checksum_view(hsh, pool, mb);
      row.checksum = hsh;
      row.aux = taken;
      if (!lat.empty()) {
        row.p50_ns = detail::sorted_percentile(lat, 0.50);
        row.p99_ns = detail::sorted_percentile(lat, 0.99);
      }
      report.rows.push_back(std::move(row));
    };

    if (mode != BenchMode::Persistent) run_mode(BenchMode::Baseline);
    if (mode != BenchMode::Baseline) run_mode(BenchMode::Persistent);
  }
}

// ---- Injection workload ----
//
// A sustained elementwise stream with K operator injections spread through
// it. Injection latency is compile start to first successful dispatch of the
// new id. Slots keep fixed operators and inputs, so the stream's final state
// is schedule-independent.

inline void run_injection(const BenchSpec& spec, BenchMode mode, BenchReport& report) {
  const uint64_t tasks = spec.ops * spec.reps;
  const uint64_t K = std::min<uint64_t>(100, std::max<uint64_t>(1, tasks / 100));
  const uint64_t interval = std::max<uint64_t>(1, tasks / K);
  const uint64_t E = spec.elems.front();
  constexpr size_t kSlots = 8;

  std::mt19937_64 rng(detail::config_seed(spec, 0xbead));
  std::vector<std::vector<double>> slot_a(kSlots), slot_b(kSlots);
  for (size_t j = 0; j < kSlots; ++j) {
    slot_a[j] = detail::uniform_vals(rng, E, -1.0, 1.0);
    slot_b[j] = detail::uniform_vals(rng, E, -1.0, 1.0);
  }
  const std::vector<double> probe_vals = detail::uniform_vals(rng, E, -1.0, 1.0);

  TemplateRegistry base_registry = TemplateRegistry::with_defaults();
  if (!spec.template_file.empty()) base_registry.load_file(spec.template_file);
  std::vector<std::string> names = base_registry.names();
  std::sort(names.begin(), names.end());

  const auto run_mode = [&](BenchMode m) {
    BenchRow row;
    row.workload = bench_workload_name(spec.workload);
    row.mode = bench_mode_name(m);
    row.config = K;
    // Stream tasks, one probe per injection, plus the kill/reinject probe.
    row.ops = tasks + K + (K >= 2 ? 1 : 0);
    std::vector<uint64_t> submit_wall;
    submit_wall.reserve(tasks);
    std::vector<uint64_t> inject_lat;
    inject_lat.reserve(K);
    std::vector<size_t> inject_marks;
    inject_marks.reserve(K);

    BufferPool own_pool;
    std::unique_ptr<Runtime> rt;
    if (m == BenchMode::Persistent) {
      rt = std::make_unique<Runtime>(detail::bench_runtime_config(spec));
      if (!spec.template_file.empty()) rt->templates().load_file(spec.template_file);
    }
    BufferPool& pool = rt ? rt->pool() : own_pool;
    const auto alloc = [&](Shape shape) {
      return rt ? rt->alloc_tensor(DType::F32, shape)
                : detail::bench_alloc(pool, DType::F32, shape);
    };

    const int64_t n = static_cast<int64_t>(E);
    std::vector<TensorView> sa(kSlots), sb(kSlots), so(kSlots);
    for (size_t j = 0; j < kSlots; ++j) {
      sa[j] = alloc({n});
      sb[j] = alloc({n});
      so[j] = alloc({n});
      detail::fill_view(pool, sa[j], slot_a[j]);
      detail::fill_view(pool, sb[j], slot_b[j]);
    }
    TensorView probe_in = alloc({n});
    detail::fill_view(pool, probe_in, probe_vals);
    std::vector<TensorView> probe_out(K + 1);
    for (uint64_t k = 0; k <= K; ++k) probe_out[k] = alloc({n});

    ModuleCache local_cache;  // baseline-side compiles
    uint64_t last_id = 0;

    // Compile one template instance and dispatch it once; returns wall ns.
    const auto inject_and_probe = [&](uint64_t k, const TensorView& out, bool reinstall) {
      const std::string& nm = names[k % names.size()];
      const OperatorTemplate tmpl = base_registry.get(nm);
      const std::vector<double> params = {1.0 + 0.25 * static_cast<double>(k),
                                          0.5 + (reinstall ? 1000.0 : 0.0)};
      const std::vector<TensorView> inputs(static_cast<size_t>(tmpl.arity), probe_in);
      const uint64_t t0 = monotonic_ns();
      try {
        if (rt) {
          uint64_t id;
          if (reinstall) {
            rt->kill_operator(static_cast<uint32_t>(last_id));
            id = rt->inject_operator_at(static_cast<uint32_t>(last_id), nm, params);
          } else {
            id = rt->inject_operator(nm, params);
          }
          TaskHandle hd = rt->submit(id, inputs, out);
          if (rt->wait(hd) != TaskState::Done) ++row.extra;
          last_id = id;
        } else {
          ModulePtr mod = local_cache.compile_or_get(tmpl, params, DType::F32);
          detail::run_spawned(pool, load_module(mod), inputs, out);
        }
      } catch (const Error&) {
        ++row.extra;
      }
      return monotonic_ns() - t0;
    };

    const uint64_t w0 = monotonic_ns();
    uint64_t injected = 0;
    for (uint64_t i = 0; i < tasks; ++i) {
      if (injected < K && i == injected * interval) {
        inject_marks.push_back(submit_wall.size());
        inject_lat.push_back(inject_and_probe(injected, probe_out[injected], false));
        ++injected;
        if (injected == K / 2 + 1 && K >= 2) {
          // Mid-stream kill and reinstall at the same id; the probe proves
          // recovery.
          inject_lat.push_back(inject_and_probe(injected - 1, probe_out[K], true));
        }
      }
      const size_t j = i % kSlots;
      const OpKind kind = (j % 2 == 0) ? OpKind::Add : OpKind::Relu;
      const uint64_t t0 = monotonic_ns();
      if (rt) {
        std::vector<TensorView> inputs{sa[j]};
        if (kind == OpKind::Add) inputs.push_back(sb[j]);
        rt->submit(kind, std::move(inputs), so[j]);
        if ((i & 63) == 0) {
          // Backpressure: cap in-flight tasks at half the queue.
          for (;;) {
            const TaskQueue::Snapshot s = rt->peek_queue();
            if (s.tail - s.processed <= spec.capacity / 2) break;
            std::this_thread::yield();
          }
        }
      } else {
        std::vector<TensorView> inputs{sa[j]};
        if (kind == OpKind::Add) inputs.push_back(sb[j]);
        detail::run_spawned(pool, builtin_fn(kind), inputs, so[j]);
      }
      submit_wall.push_back(monotonic_ns() - t0);
    }
    if (rt) rt->wait_all();
    row.total_ns = monotonic_ns() - w0;

    if (rt) {
      const CounterSnapshot c = rt->counters();
      row.extra += c.failed;
    }

    uint64_t hsh = detail::kFnvOffset;
    for (size_t j = 0; j < kSlots; ++j) hsh = detail::checksum_view(hsh, pool, so[j]);
    for (uint64_t k = 0; k <= K; ++k) hsh = detail::checksum_view(hsh, pool, probe_out[k]);
    row.checksum = hsh;
    row.aux = detail::sorted_percentile(inject_lat, 0.50);

    // Throughput dip: submit wall right after an injection vs overall.
    if (m == BenchMode::Persistent && !submit_wall.empty()) {
      std::vector<uint64_t> near;
      for (size_t mark : inject_marks) {
        for (size_t i = mark; i < std::min(submit_wall.size(), mark + 64); ++i) {
          near.push_back(submit_wall[i]);
        }
      }
      std::vector<uint64_t> all = submit_wall;
      const uint64_t steady = detail::sorted_percentile(all, 0.50);
      if (!near.empty() && steady > 0) {
        report.injection_dip =
            static_cast<double>(detail::sorted_percentile(near, 0.50)) /
            static_cast<double>(steady);
      }
    }
    if (!submit_wall.empty()) {
      row.p50_ns = detail::sorted_percentile(submit_wall, 0.50);
      row.p99_ns = detail::sorted_percentile(submit_wall, 0.99);
    }
    report.rows.push_back(std::move(row));
  };

  if (mode != BenchMode::Persistent) run_mode(BenchMode::Baseline);
  if (mode != BenchMode::Baseline) run_mode(BenchMode::Persistent);
}

// ---- Contention workload ----
//
// N submitter threads funnel through a serializing front stage (a mutex)
// into one runtime. Config 0 is the plain single-thread reference without
// the front stage. Each submitter owns its buffers, so output state is
// schedule-independent.

inline void run_contention(const BenchSpec& spec, BenchMode mode, BenchReport& report) {
  const uint64_t tasks_total = spec.ops * spec.reps;
  const uint64_t E = spec.elems.front();

  std::vector<uint64_t> sweep;
  sweep.push_back(0);  // plain unserialized reference
  for (uint64_t n : spec.submitters) sweep.push_back(n);

  double best_rate = 0.0;
  for (uint64_t N : sweep) {
    const size_t threads = N == 0 ? 1 : static_cast<size_t>(N);
    const uint64_t per_thread = std::max<uint64_t>(1, tasks_total / threads);

    std::vector<std::vector<double>> xv(threads), bv(threads);
    for (size_t s = 0; s < threads; ++s) {
      std::mt19937_64 rng(detail::config_seed(spec, N * 131 + s));
      xv[s] = detail::uniform_vals(rng, E, -1.0, 1.0);
      bv[s] = detail::uniform_vals(rng, E, -1.0, 1.0);
    }

    const auto run_mode = [&](BenchMode m) {
      BenchRow row;
      row.workload = bench_workload_name(spec.workload);
      row.mode = bench_mode_name(m);
      row.config = N;
      row.ops = per_thread * threads;

      BufferPool own_pool;
      std::unique_ptr<Runtime> rt;
      if (m == BenchMode::Persistent) {
        rt = std::make_unique<Runtime>(detail::bench_runtime_config(spec));
      }
      BufferPool& pool = rt ? rt->pool() : own_pool;

      const int64_t n = static_cast<int64_t>(E);
      std::vector<TensorView> xs(threads), bs(threads), outs(threads);
      for (size_t s = 0; s < threads; ++s) {
        xs[s] = rt ? rt->alloc_tensor(DType::F32, {n}) : detail::bench_alloc(pool, DType::F32, {n});
        bs[s] = rt ? rt->alloc_tensor(DType::F32, {n}) : detail::bench_alloc(pool, DType::F32, {n});
        outs[s] =
            rt ? rt->alloc_tensor(DType::F32, {n}) : detail::bench_alloc(pool, DType::F32, {n});
        detail::fill_view(pool, xs[s], xv[s]);
        detail::fill_view(pool, bs[s], bv[s]);
      }

      std::mutex front;  // the serializing front stage
      const bool serialize = (m == BenchMode::Persistent) && N >= 1;
      std::vector<uint64_t> wait_ns(threads, 0);
      std::vector<std::vector<uint64_t>> wall(threads);
      std::latch start(static_cast<ptrdiff_t>(threads + 1));

      std::vector<std::thread> pool_threads;
      pool_threads.reserve(threads);
      for (size_t s = 0; s < threads; ++s) {
        pool_threads.emplace_back([&, s] {
          wall[s].reserve(per_thread);
          start.arrive_and_wait();
          for (uint64_t t = 0; t < per_thread; ++t) {
            const uint64_t t0 = monotonic_ns();
            if (rt) {
              if (serialize) {
                front.lock();
                wait_ns[s] += monotonic_ns() - t0;
                rt->submit(OpKind::Add, {xs[s], bs[s]}, outs[s]);
                front.unlock();
              } else {
                rt->submit(OpKind::Add, {xs[s], bs[s]}, outs[s]);
              }
            } else {
              const TensorView inputs[] = {xs[s], bs[s]};
              detail::run_spawned(pool, op_add, inputs, outs[s]);
            }
            wall[s].push_back(monotonic_ns() - t0);
          }
        });
      }
      start.arrive_and_wait();
      const uint64_t w0 = monotonic_ns();
      for (std::thread& t : pool_threads) t.join();
      if (rt) rt->wait_all();
      row.total_ns = monotonic_ns() - w0;

      if (rt) {
        const CounterSnapshot c = rt->counters();
        row.extra += c.failed;
        if (c.submitted != c.committed + c.inline_executions) ++row.extra;
        if (c.processed != c.committed) ++row.extra;
      }

      uint64_t hsh = detail::kFnvOffset;
      for (size_t s = 0; s < threads; ++s) hsh = detail::checksum_view(hsh, pool, outs[s]);
      row.checksum = hsh;

      uint64_t wait_total = 0, wait_count = 0;
      std::vector<uint64_t> all_wall;
      for (size_t s = 0; s < threads; ++s) {
        wait_total += wait_ns[s];
        wait_count += per_thread;
        all_wall.insert(all_wall.end(), wall[s].begin(), wall[s].end());
      }
      row.aux = serialize && wait_count ? wait_total / wait_count : 0;
      if (!all_wall.empty()) {
        row.p50_ns = detail::sorted_percentile(all_wall, 0.50);
        row.p99_ns = detail::sorted_percentile(all_wall, 0.99);
      }

      if (m == BenchMode::Persistent && N >= 1 && row.total_ns > 0) {
        const double rate = static_cast<double>(row.ops) / static_cast<double>(row.total_ns);
        if (rate > best_rate) {
          best_rate = rate;
          report.saturation_n = N;
        }
      }
      report.rows.push_back(std::move(row));
    };

    if (mode != BenchMode::Persistent) run_mode(BenchMode::Baseline);
    if (mode != BenchMode::Baseline) run_mode(BenchMode::Persistent);
  }
}

// ---- Driver ----

/// Runs the spec's workload in the requested mode(s) and cross-checks the
/// per-config checksums when both modes ran.
inline BenchReport run_bench(const BenchSpec& spec) {
  validate_bench_spec(spec);
  BenchReport report;
  switch (spec.workload) {
    case BenchWorkload::Elementwise: run_elementwise(spec, spec.mode, report); break;
    case BenchWorkload::Attention: run_attention(spec, spec.mode, report); break;
    case BenchWorkload::Mixed: run_mixed(spec, spec.mode, report); break;
    case BenchWorkload::Injection: run_injection(spec, spec.mode, report); break;
    case BenchWorkload::Contention: run_contention(spec, spec.mode, report); break;
  }
  for (const BenchRow& row : report.rows) {
    if (row.mode != "baseline") continue;
    const BenchRow* p = find_bench_row(report, row.workload, "persistent", row.config);
    if (p && p->checksum != row.checksum) report.checksums_match = false;
  }
  return report;
}

// ---- CSV ----

inline constexpr const char* kBenchCsvHeader =
    "workload,mode,config,ops,total_ns,p50_ns,p99_ns,checksum,aux,extra";

inline void emit_csv(const BenchReport& report, std::ostream& os) {
  os << kBenchCsvHeader << "\n";
  for (const BenchRow& r : report.rows) {
    os << r.workload << ',' << r.mode << ',' << r.config << ',' << r.ops << ',' << r.total_ns
       << ',' << r.p50_ns << ',' << r.p99_ns << ',' << r.checksum << ',' << r.aux << ','
       << r.extra << "\n";
  }
}

inline std::vector<BenchRow> parse_bench_csv(std::istream& is) {
  std::vector<BenchRow> out;
  std::string line;
  if (!std::getline(is, line)) return out;
  if (line != kBenchCsvHeader) {
    throw Error(ErrorCode::SyntaxError, "unexpected benchmark CSV header: " + line);
  }
  size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 10) {
      throw Error(ErrorCode::SyntaxError,
                  "line " + std::to_string(lineno) + ": expected 10 fields, got " +
                      std::to_string(fields.size()));
    }
    const auto num = [&](const std::string& s) -> uint64_t {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
      if (end == s.c_str() || *end != '\0') {
        throw Error(ErrorCode::SyntaxError,
                    "line " + std::to_string(lineno) + ": bad number '" + s + "'");
      }
      return static_cast<uint64_t>(v);
    };
    BenchRow r;
    r.workload = fields[0];
    r.mode = fields[1];
    r.config = num(fields[2]);
    r.ops = num(fields[3]);
    r.total_ns = num(fields[4]);
    r.p50_ns = num(fields[5]);
    r.p99_ns = num(fields[6]);
    r.checksum = num(fields[7]);
    r.aux = num(fields[8]);
    r.extra = num(fields[9]);
    out.push_back(std::move(r));
  }
  return out;
}

inline void emit_csv_file(const BenchReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot open " + path);
  emit_csv(report, os);
}

// ---- SVG plot ----

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

}  // namespace detail

/// Two-panel chart: per-op p50 latency by config for each mode (lines), and
/// the baseline/persistent speedup per config (bars).
inline void emit_svg(const BenchReport& report, std::ostream& os) {
  constexpr double W = 720, H = 420, pad = 48;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  os << "  <rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H
     << "\" fill=\"#ffffff\"/>\n";

  std::vector<uint64_t> configs;
  for (const BenchRow& r : report.rows) {
    if (std::find(configs.begin(), configs.end(), r.config) == configs.end()) {
      configs.push_back(r.config);
    }
  }
  std::sort(configs.begin(), configs.end());

  if (configs.empty()) {
    os << "  <text x=\"" << W / 2 << "\" y=\"" << H / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\">no data</text>\n";
    os << "</svg>\n";
    return;
  }

  const double panel_w = (W - 3 * pad) / 2;
  const double plot_h = H - 2 * pad;
  const auto x_at = [&](double x0, size_t idx) {
    const double span = configs.size() > 1 ? static_cast<double>(configs.size() - 1) : 1.0;
    return x0 + (static_cast<double>(idx) / span) * panel_w;
  };

  // Panel 1: p50 latency lines.
  uint64_t max_lat = 1;
  for (const BenchRow& r : report.rows) max_lat = std::max(max_lat, r.p50_ns);
  const double lx = pad, ly = pad;
  os << "  <line x1=\"" << lx << "\" y1=\"" << ly + plot_h << "\" x2=\"" << lx + panel_w
     << "\" y2=\"" << ly + plot_h << "\" stroke=\"#333333\"/>\n";
  os << "  <line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx << "\" y2=\""
     << ly + plot_h << "\" stroke=\"#333333\"/>\n";
  os << "  <text x=\"" << lx << "\" y=\"" << ly - 12
     << "\" font-family=\"sans-serif\" font-size=\"13\">per-op p50 latency (max "
     << max_lat << " ns)</text>\n";
  const char* colors[] = {"#c0392b", "#2980b9"};
  const char* modes[] = {"baseline", "persistent"};
  for (int mi = 0; mi < 2; ++mi) {
    std::string pts;
    for (size_t ci = 0; ci < configs.size(); ++ci) {
      const BenchRow* r = nullptr;
      for (const BenchRow& row : report.rows) {
        if (row.mode == modes[mi] && row.config == configs[ci]) {
          r = &row;
          break;
        }
      }
      if (!r) continue;
      const double y =
          ly + plot_h - (static_cast<double>(r->p50_ns) / static_cast<double>(max_lat)) * plot_h;
      pts += detail::svg_num(x_at(lx, ci)) + "," + detail::svg_num(y) + " ";
    }
    if (!pts.empty()) {
      os << "  <polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << colors[mi]
         << "\" stroke-width=\"2\"/>\n";
    }
    os << "  <text x=\"" << lx + 8 + 110 * mi << "\" y=\"" << H - 16
       << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << colors[mi] << "\">"
       << modes[mi] << "</text>\n";
  }

  // Panel 2: speedup bars with a 1x reference line.
  const double bx = 2 * pad + panel_w, by = pad;
  double max_speedup = 1.0;
  std::vector<double> speedups(configs.size(), 0.0);
  for (size_t ci = 0; ci < configs.size(); ++ci) {
    for (const BenchRow& row : report.rows) {
      if (row.mode != "baseline" || row.config != configs[ci]) continue;
      const double s = speedup_for(report, row.workload, configs[ci]);
      if (s > 0) {
        speedups[ci] = s;
        max_speedup = std::max(max_speedup, s);
      }
    }
  }
  os << "  <line x1=\"" << bx << "\" y1=\"" << by + plot_h << "\" x2=\"" << bx + panel_w
     << "\" y2=\"" << by + plot_h << "\" stroke=\"#333333\"/>\n";
  os << "  <text x=\"" << bx << "\" y=\"" << by - 12
     << "\" font-family=\"sans-serif\" font-size=\"13\">speedup (baseline / persistent)</text>\n";
  const double ref_y = by + plot_h - (1.0 / max_speedup) * plot_h;
  os << "  <line x1=\"" << bx << "\" y1=\"" << ref_y << "\" x2=\"" << bx + panel_w << "\" y2=\""
     << ref_y << "\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>\n";
  const double bar_w = panel_w / (2.0 * static_cast<double>(configs.size()));
  for (size_t ci = 0; ci < configs.size(); ++ci) {
    if (speedups[ci] <= 0) continue;
    const double bh = (speedups[ci] / max_speedup) * plot_h;
    const double x = bx + (static_cast<double>(ci) + 0.25) * 2.0 * bar_w;
    os << "  <rect x=\"" << detail::svg_num(x) << "\" y=\"" << detail::svg_num(by + plot_h - bh)
       << "\" width=\"" << detail::svg_num(bar_w) << "\" height=\"" << detail::svg_num(bh)
       << "\" fill=\"#27ae60\"/>\n";
    os << "  <text x=\"" << detail::svg_num(x) << "\" y=\""
       << detail::svg_num(by + plot_h - bh - 4) << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << detail::svg_num(speedups[ci]) << "x</text>\n";
  }
  for (size_t ci = 0; ci < configs.size(); ++ci) {
    os << "  <text x=\"" << detail::svg_num(x_at(bx, ci)) << "\" y=\"" << by + plot_h + 16
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << configs[ci] << "</text>\n";
    os << "  <text x=\"" << detail::svg_num(x_at(lx, ci)) << "\" y=\"" << ly + plot_h + 16
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << configs[ci] << "</text>\n";
  }
  os << "</svg>\n";
}

inline void emit_svg_file(const BenchReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot open " + path);
  emit_svg(report, os);
}

// ---- Human-readable summary ----

inline void print_report(const BenchReport& report, std::ostream& os) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-12s %-10s %9s %9s %12s %10s %10s %20s %12s %6s",
                "workload", "mode", "config", "ops", "total_ns", "p50_ns", "p99_ns", "checksum",
                "aux", "extra");
  os << buf << "\n";
  for (const BenchRow& r : report.rows) {
    std::snprintf(buf, sizeof(buf),
                  "%-12s %-10s %9llu %9llu %12llu %10llu %10llu %20llu %12llu %6llu",
                  r.workload.c_str(), r.mode.c_str(), static_cast<unsigned long long>(r.config),
                  static_cast<unsigned long long>(r.ops),
                  static_cast<unsigned long long>(r.total_ns),
                  static_cast<unsigned long long>(r.p50_ns),
                  static_cast<unsigned long long>(r.p99_ns),
                  static_cast<unsigned long long>(r.checksum),
                  static_cast<unsigned long long>(r.aux),
                  static_cast<unsigned long long>(r.extra));
    os << buf << "\n";
  }
  for (const BenchRow& r : report.rows) {
    if (r.mode != "baseline") continue;
    const double s = speedup_for(report, r.workload, r.config);
    if (s > 0) {
      std::snprintf(buf, sizeof(buf), "speedup @%llu: %.2fx",
                    static_cast<unsigned long long>(r.config), s);
      os << buf << "\n";
    }
  }
  if (report.spawn_cost_p50_ns) {
    os << "spawn cost p50: " << report.spawn_cost_p50_ns << " ns\n";
  }
  if (report.queue_latency_p50_ns) {
    os << "queue latency p50 (enqueue->dequeue): " << report.queue_latency_p50_ns << " ns\n";
  }
  if (report.saturation_n) {
    os << "saturation at " << report.saturation_n << " submitters\n";
  }
  if (report.injection_dip > 0) {
    std::snprintf(buf, sizeof(buf), "injection dip (near/steady submit p50): %.2f",
                  report.injection_dip);
    os << buf << "\n";
  }
  os << "cross-mode checksums: " << (report.checksums_match ? "match" : "MISMATCH") << "\n";
}

}  // namespace gpuos
