#pragma once

// Builtin operator kernels: elementwise math, row-wise normalizations,
// reductions, small matrix products, attention, rotary embedding and KV-cache
// append.  Every kernel runs on the host against BufferPool storage, reads and
// writes through TensorView layouts (arbitrary strides, broadcast inputs) and
// accumulates in double before narrowing to the output dtype.
//
// Kernels are exposed three ways:
//   - free functions taking explicit views (convenient for direct calls),
//   - OpFn wrappers over OpContext (what the dispatch table stores),
//   - install_builtins(), which populates an OperatorTable at fixed ids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gpuos/errors.hpp"
#include "gpuos/optable.hpp"
#include "gpuos/tensor.hpp"

namespace gpuos {

// Fixed id registry.  Ids below kFirstInjectedId are reserved for builtins;
// runtime-injected operators are assigned ids starting at kFirstInjectedId.
enum class OpKind : uint32_t {
  Add = 0,
  Mul = 1,
  Relu = 2,
  Gelu = 3,
  Softmax = 4,
  LayerNorm = 5,
  ReduceSum = 6,
  ReduceMax = 7,
  ReduceMin = 8,
  MatMulSmall = 9,
  VecMat = 10,
  Sdpa = 11,
  Rope = 12,
  KvAppend = 13,
};

inline constexpr uint32_t kNumBuiltinOps = 14;
inline constexpr uint64_t kFirstInjectedId = 32;

// Largest dimension the queue-dispatched matmul kernels accept; bigger
// products belong on the conventional path.
inline constexpr int64_t kSmallMatmulMaxDim = 256;

inline const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::ReduceSum: return "reduce_sum";
    case OpKind::ReduceMax: return "reduce_max";
    case OpKind::ReduceMin: return "reduce_min";
    case OpKind::MatMulSmall: return "matmul_small";
    case OpKind::VecMat: return "vecmat";
    case OpKind::Sdpa: return "sdpa";
    case OpKind::Rope: return "rope";
    case OpKind::KvAppend: return "kv_append";
  }
  return "unknown";
}

inline bool is_builtin_id(uint64_t op_id) { return op_id < kNumBuiltinOps; }

namespace detail {

inline double gelu_scalar(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline void require_output(const OpContext& ctx) {
  if (ctx.output == nullptr) throw Error(ErrorCode::InvalidBuffer, "kernel requires an output view");
}

inline void require_inputs(const OpContext& ctx, size_t n, const char* op) {
  if (ctx.inputs.size() != n) {
    throw Error(ErrorCode::ArityError, std::string(op) + ": expected " + std::to_string(n) +
                                           " inputs, got " + std::to_string(ctx.inputs.size()));
  }
}

inline void require_float(const TensorView& v, const char* op) {
  if (v.dtype == DType::I32) {
    throw Error(ErrorCode::DTypeMismatch, std::string(op) + ": integer tensors are not supported");
  }
}

inline void require_same_dtype(const TensorView& a, const TensorView& b, const char* op) {
  if (a.dtype != b.dtype) {
    throw Error(ErrorCode::DTypeMismatch, std::string(op) + ": mixed dtypes " +
                                              std::string(dtype_name(a.dtype)) + " vs " +
                                              std::string(dtype_name(b.dtype)));
  }
}

inline void require_same_shape(const TensorView& a, const TensorView& b, const char* op) {
  if (a.shape != b.shape) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": shape " + shape_to_string(a.shape) +
                                              " vs " + shape_to_string(b.shape));
  }
}

// Strips the last (row) axis, leaving the outer iteration space.
inline TensorView drop_last_dim(const TensorView& v) {
  TensorView outer = v;
  outer.shape.pop_back();
  outer.strides.pop_back();
  return outer;
}

inline void require_row_axis(const TensorView& v, const char* op) {
  if (v.rank() == 0 || v.shape.back() == 0) {
    throw Error(ErrorCode::EmptyAxis, std::string(op) + ": last axis is empty");
  }
}

// Shared elementwise driver: broadcasts each input to the output shape, then
// walks either the contiguous fast path (all layouts identical and dense) or a
// generic strided iteration.  F maps an array of Arity doubles to a double.
template <size_t Arity, typename F>
void elementwise_kernel(const OpContext& ctx, const char* op, bool allow_int, F&& f) {
  require_output(ctx);
  require_inputs(ctx, Arity, op);
  const TensorView& out = *ctx.output;
  if (!allow_int) require_float(out, op);
  for (const TensorView& in : ctx.inputs) require_same_dtype(in, out, op);

  const int64_t n = out.numel();
  if (n == 0) return;

  // bcast owns the broadcast views; BoundView keeps a pointer into it.
  std::vector<TensorView> bcast(Arity);
  BoundView bviews[Arity == 0 ? 1 : Arity];
  bool uniform = out.is_contiguous() && out.offset == 0;
  for (size_t i = 0; i < Arity; ++i) {
    bcast[i] = broadcast_view(ctx.inputs[i], out.shape);
    bviews[i] = BoundView(*ctx.pool, bcast[i]);
    uniform = uniform && bcast[i].strides == out.strides && bcast[i].offset == 0;
  }
  BoundView bout(*ctx.pool, out);

  double vals[Arity == 0 ? 1 : Arity];
  if (uniform) {
    for (int64_t e = 0; e < n; ++e) {
      for (size_t i = 0; i < Arity; ++i) vals[i] = bviews[i].load(e);
      bout.store(e, f(vals));
    }
    return;
  }
  const TensorView* operands[Arity + 1];
  for (size_t i = 0; i < Arity; ++i) operands[i] = &bcast[i];
  operands[Arity] = &out;
  IndexIterator it(out.shape, std::span<const TensorView* const>(operands, Arity + 1));
  for (int64_t e = 0; e < n; ++e) {
    for (size_t i = 0; i < Arity; ++i) vals[i] = bviews[i].load(it.offset(i));
    bout.store(it.offset(Arity), f(vals));
    it.next();
  }
}

}  // namespace detail

// ---- Elementwise ----

inline void op_add(const OpContext& ctx) {
  detail::elementwise_kernel<2>(ctx, "add", true, [](const double* v) { return v[0] + v[1]; });
}

inline void op_mul(const OpContext& ctx) {
  detail::elementwise_kernel<2>(ctx, "mul", true, [](const double* v) { return v[0] * v[1]; });
}

inline void op_relu(const OpContext& ctx) {
  detail::elementwise_kernel<1>(ctx, "relu", true,
                                [](const double* v) { return v[0] < 0.0 ? 0.0 : v[0]; });
}

inline void op_gelu(const OpContext& ctx) {
  detail::elementwise_kernel<1>(ctx, "gelu", false,
                                [](const double* v) { return detail::gelu_scalar(v[0]); });
}

// ---- Row-wise kernels (operate along the last axis) ----

// Numerically stabilized softmax: subtracts the row max before exponentiation,
// so rows of large equal values still normalize exactly.
inline void op_softmax(const OpContext& ctx) {
  detail::require_output(ctx);
  detail::require_inputs(ctx, 1, "softmax");
  const TensorView& in = ctx.inputs[0];
  const TensorView& out = *ctx.output;
  detail::require_float(out, "softmax");
  detail::require_same_dtype(in, out, "softmax");
  detail::require_same_shape(in, out, "softmax");
  detail::require_row_axis(in, "softmax");

  const int64_t cols = in.shape.back();
  const int64_t in_step = in.strides.back();
  const int64_t out_step = out.strides.back();
  TensorView in_outer = detail::drop_last_dim(in);
  TensorView out_outer = detail::drop_last_dim(out);
  BoundView bin(*ctx.pool, in);
  BoundView bout(*ctx.pool, out);

  const TensorView* operands[] = {&in_outer, &out_outer};
  IndexIterator it(in_outer.shape, operands);
  for (int64_t r = 0; r < it.count(); ++r) {
    const int64_t base_in = it.offset(0);
    const int64_t base_out = it.offset(1);
    double row_max = bin.load(base_in);
    for (int64_t j = 1; j < cols; ++j) {
      const double x = bin.load(base_in + j * in_step);
      if (row_max < x) row_max = x;
    }
    double denom = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      denom += std::exp(bin.load(base_in + j * in_step) - row_max);
    }
    for (int64_t j = 0; j < cols; ++j) {
      const double e = std::exp(bin.load(base_in + j * in_step) - row_max);
      bout.store(base_out + j * out_step, e / denom);
    }
    it.next();
  }
}

// Normalizes each row to zero mean and unit variance (population variance,
// denominator N), then applies an affine transform: gamma * x_hat + beta.
// gamma and beta broadcast against the row length.  scalars[0], when present,
// overrides the default epsilon of 1e-5.
inline void op_layernorm(const OpContext& ctx) {
  detail::require_output(ctx);
  detail::require_inputs(ctx, 3, "layernorm");
  const TensorView& in = ctx.inputs[0];
  const TensorView& out = *ctx.output;
  detail::require_float(out, "layernorm");
  detail::require_same_dtype(in, out, "layernorm");
  detail::require_same_shape(in, out, "layernorm");
  detail::require_row_axis(in, "layernorm");
  detail::require_same_dtype(ctx.inputs[1], out, "layernorm");
  detail::require_same_dtype(ctx.inputs[2], out, "layernorm");

  const double eps = ctx.scalars.empty() ? 1e-5 : ctx.scalars[0];
  const int64_t cols = in.shape.back();
  const Shape row_shape{cols};
  TensorView gamma = broadcast_view(ctx.inputs[1], row_shape);
  TensorView beta = broadcast_view(ctx.inputs[2], row_shape);

  const int64_t in_step = in.strides.back();
  const int64_t out_step = out.strides.back();
  TensorView in_outer = detail::drop_last_dim(in);
  TensorView out_outer = detail::drop_last_dim(out);
  BoundView bin(*ctx.pool, in);
  BoundView bout(*ctx.pool, out);
  BoundView bgamma(*ctx.pool, gamma);
  BoundView bbeta(*ctx.pool, beta);

  const TensorView* operands[] = {&in_outer, &out_outer};
  IndexIterator it(in_outer.shape, operands);
  for (int64_t r = 0; r < it.count(); ++r) {
    const int64_t base_in = it.offset(0);
    const int64_t base_out = it.offset(1);
    double mean = 0.0;
    for (int64_t j = 0; j < cols; ++j) mean += bin.load(base_in + j * in_step);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double d = bin.load(base_in + j * in_step) - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j) {
      const double xhat = (bin.load(base_in + j * in_step) - mean) * inv;
      const double g = bgamma.load(gamma.offset + j * gamma.strides[0]);
      const double b = bbeta.load(beta.offset + j * beta.strides[0]);
      bout.store(base_out + j * out_step, xhat * g + b);
    }
    it.next();
  }
}

namespace detail {

enum class ReduceMode { Sum, Max, Min };

// Reduces the last axis.  The output shape must equal the input shape minus
// its last dimension.  Sum of an empty axis is 0; Max/Min of an empty axis has
// no identity and reports EmptyAxis.  Accumulation is strictly left to right.
inline void reduce_kernel(const OpContext& ctx, ReduceMode mode, const char* op) {
  require_output(ctx);
  require_inputs(ctx, 1, op);
  const TensorView& in = ctx.inputs[0];
  const TensorView& out = *ctx.output;
  require_same_dtype(in, out, op);
  if (in.rank() == 0) throw Error(ErrorCode::EmptyAxis, std::string(op) + ": input has rank 0");

  TensorView in_outer = drop_last_dim(in);
  if (out.shape != in_outer.shape) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(op) + ": output shape " + shape_to_string(out.shape) +
                    " does not match reduced shape " + shape_to_string(in_outer.shape));
  }
  const int64_t cols = in.shape.back();
  if (cols == 0 && mode != ReduceMode::Sum) {
    throw Error(ErrorCode::EmptyAxis, std::string(op) + ": empty axis has no identity");
  }

  const int64_t in_step = in.strides.back();
  BoundView bin(*ctx.pool, in);
  BoundView bout(*ctx.pool, out);
  const TensorView* operands[] = {&in_outer, &out};
  IndexIterator it(in_outer.shape, operands);
  for (int64_t r = 0; r < it.count(); ++r) {
    const int64_t base_in = it.offset(0);
    double acc;
    if (mode == ReduceMode::Sum) {
      acc = 0.0;
      for (int64_t j = 0; j < cols; ++j) acc += bin.load(base_in + j * in_step);
    } else {
      acc = bin.load(base_in);
      for (int64_t j = 1; j < cols; ++j) {
        const double x = bin.load(base_in + j * in_step);
        if (mode == ReduceMode::Max ? (acc < x) : (x < acc)) acc = x;
      }
    }
    bout.store(it.offset(1), acc);
    it.next();
  }
}

}  // namespace detail

inline void op_reduce_sum(const OpContext& ctx) {
  detail::reduce_kernel(ctx, detail::ReduceMode::Sum, "reduce_sum");
}
inline void op_reduce_max(const OpContext& ctx) {
  detail::reduce_kernel(ctx, detail::ReduceMode::Max, "reduce_max");
}
inline void op_reduce_min(const OpContext& ctx) {
  detail::reduce_kernel(ctx, detail::ReduceMode::Min, "reduce_min");
}

// ---- Matrix products ----

// a: (m, k), b: (k, n), out: (m, n).  Double accumulation over the inner
// dimension in ascending order.  max_dim == 0 disables the size cap (the
// conventional execution path); otherwise any dimension above the cap reports
// TooLarge so callers can divert to that path.
inline void matmul(const OpContext& ctx, int64_t max_dim) {
  detail::require_output(ctx);
  detail::require_inputs(ctx, 2, "matmul");
  const TensorView& a = ctx.inputs[0];
  const TensorView& b = ctx.inputs[1];
  const TensorView& out = *ctx.output;
  detail::require_same_dtype(a, out, "matmul");
  detail::require_same_dtype(b, out, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || out.rank() != 2) {
    throw Error(ErrorCode::ShapeMismatch, "matmul: all operands must be rank 2");
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k) {
    throw Error(ErrorCode::ShapeMismatch, "matmul: inner dimensions " + std::to_string(k) +
                                              " vs " + std::to_string(b.shape[0]));
  }
  if (out.shape[0] != m || out.shape[1] != n) {
    throw Error(ErrorCode::ShapeMismatch, "matmul: output shape " + shape_to_string(out.shape) +
                                              " does not match (" + std::to_string(m) + ", " +
                                              std::to_string(n) + ")");
  }
  if (max_dim > 0 && (m > max_dim || k > max_dim || n > max_dim)) {
    throw Error(ErrorCode::TooLarge, "matmul: a dimension exceeds " + std::to_string(max_dim));
  }

  BoundView ba(*ctx.pool, a), bb(*ctx.pool, b), bout(*ctx.pool, out);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) {
        acc += ba.load(a.offset + i * a.strides[0] + p * a.strides[1]) *
               bb.load(b.offset + p * b.strides[0] + j * b.strides[1]);
      }
      bout.store(out.offset + i * out.strides[0] + j * out.strides[1], acc);
    }
  }
}

// v: (k), m: (k, n), out: (n).  Same accumulation and cap rules as matmul.
inline void vecmat(const OpContext& ctx, int64_t max_dim) {
  detail::require_output(ctx);
  detail::require_inputs(ctx, 2, "vecmat");
  const TensorView& v = ctx.inputs[0];
  const TensorView& mat = ctx.inputs[1];
  const TensorView& out = *ctx.output;
  detail::require_same_dtype(v, out, "vecmat");
  detail::require_same_dtype(mat, out, "vecmat");
  if (v.rank() != 1 || mat.rank() != 2 || out.rank() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "vecmat: expected v(k), m(k, n), out(n)");
  }
  const int64_t k = v.shape[0], n = mat.shape[1];
  if (mat.shape[0] != k || out.shape[0] != n) {
    throw Error(ErrorCode::ShapeMismatch, "vecmat: dimensions disagree");
  }
  if (max_dim > 0 && (k > max_dim || n > max_dim)) {
    throw Error(ErrorCode::TooLarge, "vecmat: a dimension exceeds " + std::to_string(max_dim));
  }

  BoundView bv(*ctx.pool, v), bm(*ctx.pool, mat), bout(*ctx.pool, out);
  for (int64_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int64_t p = 0; p < k; ++p) {
      acc += bv.load(v.offset + p * v.strides[0]) *
             bm.load(mat.offset + p * mat.strides[0] + j * mat.strides[1]);
    }
    bout.store(out.offset + j * out.strides[0], acc);
  }
}

inline void op_matmul_small(const OpContext& ctx) { matmul(ctx, kSmallMatmulMaxDim); }
inline void op_vecmat(const OpContext& ctx) { vecmat(ctx, kSmallMatmulMaxDim); }

// ---- Attention ----

// Single-query scaled dot-product attention over a KV cache.
// q: (h, d), k: (h, t, d), v: (h, t, d), out: (h, d).
// scores = scale * q . k_row, softmax over t (stabilized), out = sum w * v.
// scalars[0] > 0 overrides the default scale 1/sqrt(d).
inline void op_sdpa(const OpContext& ctx) {
  detail::require_output(ctx);
  detail::require_inputs(ctx, 3, "sdpa");
  const TensorView& q = ctx.inputs[0];
  const TensorView& k = ctx.inputs[1];
  const TensorView& v = ctx.inputs[2];
  const TensorView& out = *ctx.output;
  detail::require_float(out, "sdpa");
  detail::require_same_dtype(q, out, "sdpa");
  detail::require_same_dtype(k, out, "sdpa");
  detail::require_same_dtype(v, out, "sdpa");
  if (q.rank() != 2 || k.rank() != 3 || v.rank() != 3) {
    throw Error(ErrorCode::ShapeMismatch, "sdpa: expected q(h, d), k(h, t, d), v(h, t, d)");
  }
  const int64_t h = q.shape[0], d = q.shape[1], t = k.shape[1];
  if (k.shape[0] != h || k.shape[2] != d || v.shape != k.shape) {
    throw Error(ErrorCode::ShapeMismatch, "sdpa: k/v shapes do not match q");
  }
  detail::require_same_shape(out, q, "sdpa");
  if (t == 0) throw Error(ErrorCode::EmptyAxis, "sdpa: empty cache");

  const double scale = (!ctx.scalars.empty() && ctx.scalars[0] > 0.0)
                           ? ctx.scalars[0]
                           : 1.0 / std::sqrt(static_cast<double>(d));
  BoundView bq(*ctx.pool, q), bk(*ctx.pool, k), bv(*ctx.pool, v), bout(*ctx.pool, out);
  std::vector<double> scores(static_cast<size_t>(t));
  std::vector<double> accum(static_cast<size_t>(d));
  for (int64_t head = 0; head < h; ++head) {
    const int64_t qb = q.offset + head * q.strides[0];
    const int64_t kb = k.offset + head * k.strides[0];
    const int64_t vb = v.offset + head * v.strides[0];
    const int64_t ob = out.offset + head * out.strides[0];
    double max_score = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < t; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        dot += bq.load(qb + j * q.strides[1]) * bk.load(kb + i * k.strides[1] + j * k.strides[2]);
      }
      scores[static_cast<size_t>(i)] = scale * dot;
      if (max_score < scores[static_cast<size_t>(i)]) max_score = scores[static_cast<size_t>(i)];
    }
    double denom = 0.0;
    for (int64_t i = 0; i < t; ++i) {
      scores[static_cast<size_t>(i)] = std::exp(scores[static_cast<size_t>(i)] - max_score);
      denom += scores[static_cast<size_t>(i)];
    }
    std::fill(accum.begin(), accum.end(), 0.0);
    for (int64_t i = 0; i < t; ++i) {
      const double w = scores[static_cast<size_t>(i)] / denom;
      for (int64_t j = 0; j < d; ++j) {
        accum[static_cast<size_t>(j)] += w * bv.load(vb + i * v.strides[1] + j * v.strides[2]);
      }
    }
    for (int64_t j = 0; j < d; ++j) {
      bout.store(ob + j * out.strides[1], accum[static_cast<size_t>(j)]);
    }
  }
}

// Rotary position embedding.  x: (t, d) with d even, positions: (t), out: (t, d).
// Pair (2i, 2i+1) of row r rotates by theta = pos[r] * base^(-2i/d); base
// defaults to 10000 and can be overridden by scalars[0] > 0.
inline void op_rope(const OpContext& ctx) {
  detail::require_output(ctx);
  detail::require_inputs(ctx, 2, "rope");
  const TensorView& x = ctx.inputs[0];
  const TensorView& pos = ctx.inputs[1];
  const TensorView& out = *ctx.output;
  detail::require_float(out, "rope");
  detail::require_same_dtype(x, out, "rope");
  if (x.rank() != 2 || pos.rank() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "rope: expected x(t, d) and positions(t)");
  }
  detail::require_same_shape(out, x, "rope");
  const int64_t t = x.shape[0], d = x.shape[1];
  if (pos.shape[0] != t) {
    throw Error(ErrorCode::ShapeMismatch, "rope: positions length does not match rows");
  }
  if (d % 2 != 0) throw Error(ErrorCode::OddDim, "rope: feature dimension must be even");

  const double base = (!ctx.scalars.empty() && ctx.scalars[0] > 0.0) ? ctx.scalars[0] : 10000.0;
  BoundView bx(*ctx.pool, x), bpos(*ctx.pool, pos), bout(*ctx.pool, out);
  for (int64_t r = 0; r < t; ++r) {
    const double p = bpos.load(pos.offset + r * pos.strides[0]);
    const int64_t xb = x.offset + r * x.strides[0];
    const int64_t ob = out.offset + r * out.strides[0];
    for (int64_t i = 0; i < d / 2; ++i) {
      const double theta =
          p * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double c = std::cos(theta), s = std::sin(theta);
      const double x0 = bx.load(xb + (2 * i) * x.strides[1]);
      const double x1 = bx.load(xb + (2 * i + 1) * x.strides[1]);
      bout.store(ob + (2 * i) * out.strides[1], x0 * c - x1 * s);
      bout.store(ob + (2 * i + 1) * out.strides[1], x0 * s + x1 * c);
    }
  }
}

// ---- KV-cache append ----

// Writes one (h, d) key/value row pair into position `cursor` of the caches
// (h, capacity, d) and returns the advanced cursor.  A full cache (cursor at
// or past capacity) reports CacheFull and writes nothing.
inline int64_t kv_append(BufferPool& pool, const TensorView& k_cache, const TensorView& v_cache,
                         const TensorView& new_k, const TensorView& new_v, int64_t cursor) {
  if (k_cache.rank() != 3 || v_cache.rank() != 3 || new_k.rank() != 2 || new_v.rank() != 2) {
    throw Error(ErrorCode::ShapeMismatch, "kv_append: expected caches(h, cap, d) and rows(h, d)");
  }
  const int64_t h = k_cache.shape[0], cap = k_cache.shape[1], d = k_cache.shape[2];
  if (v_cache.shape != k_cache.shape) {
    throw Error(ErrorCode::ShapeMismatch, "kv_append: k and v caches disagree");
  }
  if (new_k.shape != Shape{h, d} || new_v.shape != Shape{h, d}) {
    throw Error(ErrorCode::ShapeMismatch, "kv_append: new rows must be (h, d)");
  }
  detail::require_same_dtype(new_k, k_cache, "kv_append");
  detail::require_same_dtype(new_v, v_cache, "kv_append");
  detail::require_same_dtype(v_cache, k_cache, "kv_append");
  if (cursor < 0 || cursor >= cap) {
    throw Error(ErrorCode::CacheFull, "kv_append: cursor " + std::to_string(cursor) +
                                          " outside capacity " + std::to_string(cap));
  }

  BoundView bkc(pool, k_cache), bvc(pool, v_cache), bnk(pool, new_k), bnv(pool, new_v);
  for (int64_t head = 0; head < h; ++head) {
    const int64_t kc = k_cache.offset + head * k_cache.strides[0] + cursor * k_cache.strides[1];
    const int64_t vc = v_cache.offset + head * v_cache.strides[0] + cursor * v_cache.strides[1];
    const int64_t nk = new_k.offset + head * new_k.strides[0];
    const int64_t nv = new_v.offset + head * new_v.strides[0];
    for (int64_t j = 0; j < d; ++j) {
      bkc.store(kc + j * k_cache.strides[2], bnk.load(nk + j * new_k.strides[1]));
      bvc.store(vc + j * v_cache.strides[2], bnv.load(nv + j * new_v.strides[1]));
    }
  }
  return cursor + 1;
}

// Descriptor form: inputs = {new_k, new_v, v_cache}, output = k_cache,
// scalars[0] = cursor.  The advanced cursor is scalars[0] + 1 by construction;
// callers track it themselves since descriptors carry no return channel.
inline void op_kv_append(const OpContext& ctx) {
  detail::require_output(ctx);
  detail::require_inputs(ctx, 3, "kv_append");
  if (ctx.scalars.empty()) {
    throw Error(ErrorCode::ArityError, "kv_append: scalars[0] must hold the cursor");
  }
  kv_append(*ctx.pool, *ctx.output, ctx.inputs[2], ctx.inputs[0], ctx.inputs[1],
            static_cast<int64_t>(ctx.scalars[0]));
}

// ---- Registration ----

inline OpFn builtin_fn(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return op_add;
    case OpKind::Mul: return op_mul;
    case OpKind::Relu: return op_relu;
    case OpKind::Gelu: return op_gelu;
    case OpKind::Softmax: return op_softmax;
    case OpKind::LayerNorm: return op_layernorm;
    case OpKind::ReduceSum: return op_reduce_sum;
    case OpKind::ReduceMax: return op_reduce_max;
    case OpKind::ReduceMin: return op_reduce_min;
    case OpKind::MatMulSmall: return op_matmul_small;
    case OpKind::VecMat: return op_vecmat;
    case OpKind::Sdpa: return op_sdpa;
    case OpKind::Rope: return op_rope;
    case OpKind::KvAppend: return op_kv_append;
  }
  throw Error(ErrorCode::NotInstalled, "unknown builtin op kind");
}

// Installs every builtin at its fixed id.  Audit records carry template name
// "builtin" with the op name as the signature.
inline void install_builtins(OperatorTable& table) {
  for (uint32_t i = 0; i < kNumBuiltinOps; ++i) {
    const OpKind kind = static_cast<OpKind>(i);
    InjectionRecord meta;
    meta.template_name = "builtin";
    meta.signature = op_kind_name(kind);
    table.install(i, builtin_fn(kind), std::move(meta));
  }
}

}  // namespace gpuos
