// Generic tensor abstraction: dtypes, strided views with broadcasting, and the
// buffer pool that owns element storage.
#pragma once

#include <atomic>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <mutex>
#include <numeric>
#include <shared_mutex>
#include <span>
#include <sstream>
#include <unordered_map>
#include <vector>

#include "gpuos/errors.hpp"

namespace gpuos {

enum class DType : uint8_t { F32 = 0, F64 = 1, I32 = 2 };

inline constexpr size_t dtype_width(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::I32: return 4;
  }
  return 0;
}

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::I32: return "i32";
  }
  return "?";
}

using BufferId = uint64_t;
inline constexpr BufferId kInvalidBuffer = 0;

using Shape = std::vector<int64_t>;
using Strides = std::vector<int64_t>;

/// Row-major strides for a shape: last dimension has stride 1, empty shape
/// yields an empty list.
inline Strides contiguous_strides(std::span<const int64_t> shape) {
  Strides s(shape.size());
  int64_t acc = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

/// Immutable strided view of a buffer. Offsets and strides are in elements,
/// not bytes. A zero extent anywhere means the view addresses no elements.
struct TensorView {
  BufferId buffer = kInvalidBuffer;
  int64_t offset = 0;
  Shape shape;
  Strides strides;
  DType dtype = DType::F32;

  size_t rank() const { return shape.size(); }

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
  }

  bool is_contiguous() const {
    int64_t acc = 1;
    for (size_t i = shape.size(); i-- > 0;) {
      if (shape[i] != 1 && strides[i] != acc) return false;
      acc *= shape[i];
    }
    return true;
  }

  bool same_layout(const TensorView& o) const {
    return buffer == o.buffer && offset == o.offset && dtype == o.dtype &&
           shape == o.shape && strides == o.strides;
  }
};

inline std::string shape_to_string(std::span<const int64_t> s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

/// Right-aligned broadcast of two shapes. Dimensions must agree or one must
/// be 1; the result takes the max of each pair.
inline Shape broadcast_shapes(std::span<const int64_t> a, std::span<const int64_t> b) {
  const size_t ra = a.size(), rb = b.size();
  const size_t r = ra > rb ? ra : rb;
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < ra ? a[ra - 1 - i] : 1;
    const int64_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw Error(ErrorCode::IncompatibleShapes,
                  shape_to_string(a) + " vs " + shape_to_string(b));
    }
    out[r - 1 - i] = da > db ? da : db;
  }
  return out;
}

/// Expand a view to a target shape. Broadcast dimensions get stride 0; the
/// result aliases the same buffer.
inline TensorView broadcast_view(const TensorView& v, std::span<const int64_t> target) {
  const size_t rv = v.rank(), rt = target.size();
  if (rv > rt) {
    throw Error(ErrorCode::IncompatibleShapes,
                shape_to_string(v.shape) + " to " + shape_to_string(target));
  }
  TensorView out;
  out.buffer = v.buffer;
  out.offset = v.offset;
  out.dtype = v.dtype;
  out.shape.assign(target.begin(), target.end());
  out.strides.assign(rt, 0);
  for (size_t i = 0; i < rv; ++i) {
    const int64_t dv = v.shape[rv - 1 - i];
    const int64_t dt = target[rt - 1 - i];
    if (dv == dt) {
      out.strides[rt - 1 - i] = v.strides[rv - 1 - i];
    } else if (dv == 1) {
      out.strides[rt - 1 - i] = 0;
    } else {
      throw Error(ErrorCode::IncompatibleShapes,
                  shape_to_string(v.shape) + " to " + shape_to_string(target));
    }
  }
  return out;
}

/// Element index of a multi-index: offset + sum(idx[d] * strides[d]).
inline int64_t element_offset(const TensorView& v, std::span<const int64_t> idx) {
  if (idx.size() != v.rank()) {
    throw Error(ErrorCode::OutOfBounds, "index rank " + std::to_string(idx.size()) +
                                            " vs view rank " + std::to_string(v.rank()));
  }
  int64_t off = v.offset;
  for (size_t d = 0; d < idx.size(); ++d) {
    if (idx[d] < 0 || idx[d] >= v.shape[d]) {
      throw Error(ErrorCode::OutOfBounds,
                  "index " + std::to_string(idx[d]) + " out of extent " +
                      std::to_string(v.shape[d]) + " at dim " + std::to_string(d));
    }
    off += idx[d] * v.strides[d];
  }
  return off;
}

inline int64_t element_offset(const TensorView& v, std::initializer_list<int64_t> idx) {
  return element_offset(v, std::span<const int64_t>(idx.begin(), idx.size()));
}

/// Owns element storage. Ids are never reused within a pool's lifetime and
/// lookups of released ids fail.
class BufferPool {
 public:
  struct Buffer {
    DType dtype;
    size_t length;  // elements
    std::unique_ptr<std::byte[]> data;
  };

  BufferId allocate(DType dtype, size_t length) {
    auto buf = std::make_unique<Buffer>();
    buf->dtype = dtype;
    buf->length = length;
    const size_t bytes = length * dtype_width(dtype);
    buf->data = std::make_unique<std::byte[]>(bytes ? bytes : 1);
    std::memset(buf->data.get(), 0, bytes ? bytes : 1);
    std::unique_lock lock(mu_);
    const BufferId id = next_id_++;
    buffers_.emplace(id, std::move(buf));
    return id;
  }

  void release(BufferId id) {
    std::unique_lock lock(mu_);
    if (buffers_.erase(id) == 0) {
      throw Error(ErrorCode::InvalidBuffer, "release of unknown buffer " + std::to_string(id));
    }
  }

  // Buffer objects are heap-stable: the returned reference survives later
  // allocations, but not release() of the same id.
  const Buffer& lookup(BufferId id) const {
    std::shared_lock lock(mu_);
    auto it = buffers_.find(id);
    if (it == buffers_.end()) {
      throw Error(ErrorCode::InvalidBuffer, "lookup of unknown buffer " + std::to_string(id));
    }
    return *it->second;
  }

  bool contains(BufferId id) const {
    std::shared_lock lock(mu_);
    return buffers_.count(id) != 0;
  }

  size_t length(BufferId id) const { return lookup(id).length; }
  DType dtype(BufferId id) const { return lookup(id).dtype; }

  template <typename T>
  T* data(BufferId id) {
    return reinterpret_cast<T*>(const_cast<std::byte*>(lookup(id).data.get()));
  }

  void* raw(BufferId id) { return const_cast<std::byte*>(lookup(id).data.get()); }

  size_t size() const {
    std::shared_lock lock(mu_);
    return buffers_.size();
  }

  void clear() {
    std::unique_lock lock(mu_);
    buffers_.clear();
  }

 private:
  mutable std::shared_mutex mu_;
  std::unordered_map<BufferId, std::unique_ptr<Buffer>> buffers_;
  BufferId next_id_ = 1;
};

/// Resolved view: buffer pointer bound once so element access needs no pool
/// lock. load/store convert through double, which every kernel and module
/// uses as its accumulation type.
struct BoundView {
  void* base = nullptr;
  const TensorView* view = nullptr;

  BoundView() = default;
  BoundView(BufferPool& pool, const TensorView& v) : view(&v) {
    const auto& buf = pool.lookup(v.buffer);
    if (buf.dtype != v.dtype) {
      throw Error(ErrorCode::DTypeMismatch, "view dtype does not match buffer dtype");
    }
    base = const_cast<std::byte*>(buf.data.get());
  }

  double load(int64_t elem) const {
    switch (view->dtype) {
      case DType::F32: return static_cast<double>(static_cast<const float*>(base)[elem]);
      case DType::F64: return static_cast<const double*>(base)[elem];
      case DType::I32: return static_cast<double>(static_cast<const int32_t*>(base)[elem]);
    }
    return 0.0;
  }

  void store(int64_t elem, double value) const {
    switch (view->dtype) {
      case DType::F32: static_cast<float*>(base)[elem] = static_cast<float>(value); break;
      case DType::F64: static_cast<double*>(base)[elem] = value; break;
      case DType::I32: static_cast<int32_t*>(base)[elem] = static_cast<int32_t>(value); break;
    }
  }
};

/// Narrow a double to what a store into `d` followed by a load would yield.
inline double narrow_to(DType d, double v) {
  switch (d) {
    case DType::F32: return static_cast<double>(static_cast<float>(v));
    case DType::F64: return v;
    case DType::I32: return static_cast<double>(static_cast<int32_t>(v));
  }
  return v;
}

/// Odometer over a shape, tracking one running element offset per operand.
/// Offsets advance incrementally; empty shapes visit a single (scalar) index.
class IndexIterator {
 public:
  IndexIterator(std::span<const int64_t> shape, std::span<const TensorView* const> operands)
      : shape_(shape.begin(), shape.end()), idx_(shape.size(), 0) {
    offsets_.reserve(operands.size());
    strides_.reserve(operands.size());
    for (const TensorView* v : operands) {
      offsets_.push_back(v->offset);
      strides_.push_back(v->strides);
    }
    count_ = 1;
    for (int64_t e : shape_) count_ *= e;
  }

  int64_t count() const { return count_; }
  int64_t offset(size_t operand) const { return offsets_[operand]; }
  std::span<const int64_t> index() const { return idx_; }

  // Advance to the next row-major index; returns false after the last one.
  bool next() {
    for (size_t d = shape_.size(); d-- > 0;) {
      ++idx_[d];
      for (size_t o = 0; o < offsets_.size(); ++o) offsets_[o] += strides_[o][d];
      if (idx_[d] < shape_[d]) return true;
      for (size_t o = 0; o < offsets_.size(); ++o) offsets_[o] -= strides_[o][d] * shape_[d];
      idx_[d] = 0;
    }
    return false;
  }

 private:
  Shape shape_;
  Shape idx_;
  std::vector<int64_t> offsets_;
  std::vector<Strides> strides_;
  int64_t count_;
};

}  // namespace gpuos
