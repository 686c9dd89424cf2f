// Builtin kernel tests. Every kernel is checked against the independent
// scalar oracles in reference.hpp: pinned example values first, then
// randomized sweeps (>= 1000 element comparisons per builtin), then layout
// properties (strided/broadcast inputs must match contiguous runs exactly).

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "gpuos/errors.hpp"
#include "gpuos/ops.hpp"
#include "gpuos/optable.hpp"
#include "gpuos/reference.hpp"
#include "gpuos/tensor.hpp"

using namespace gpuos;

namespace {

auto ErrorCodeIs(ErrorCode c) {
  return Catch::Matchers::Predicate<Error>(
      [c](const Error& e) { return e.code() == c; },
      "error code is " + std::string(error_name(c)));
}

// Relative tolerance with an absolute floor: |got - want| <= tol * max(1, |want|).
// Probabilities and normalized values live in [0, 1] where a pure relative
// bound is meaningless after f32 narrowing.
bool close_tol(double got, double want, double tol) {
  if (std::isnan(got) || std::isnan(want)) return std::isnan(got) && std::isnan(want);
  return std::abs(got - want) <= tol * std::max(1.0, std::abs(want));
}

struct Fixture {
  BufferPool pool;

  TensorView make(const Shape& shape, DType dtype = DType::F32) {
    TensorView v;
    v.shape = shape;
    v.strides = contiguous_strides(shape);
    v.dtype = dtype;
    v.offset = 0;
    v.buffer = pool.allocate(dtype, static_cast<size_t>(v.numel()));
    return v;
  }

  TensorView make_filled(const Shape& shape, const std::vector<double>& vals,
                         DType dtype = DType::F32) {
    TensorView v = make(shape, dtype);
    REQUIRE(static_cast<int64_t>(vals.size()) == v.numel());
    BoundView b(pool, v);
    for (size_t i = 0; i < vals.size(); ++i) b.store(static_cast<int64_t>(i), vals[i]);
    return v;
  }

  // Reads elements in row-major logical order regardless of layout.
  std::vector<double> read(const TensorView& v) {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(v.numel()));
    BoundView b(pool, v);
    const TensorView* ops[] = {&v};
    IndexIterator it(v.shape, ops);
    for (int64_t e = 0; e < it.count(); ++e) {
      out.push_back(b.load(it.offset(0)));
      it.next();
    }
    return out;
  }

  void run(OpKind kind, const std::vector<TensorView>& inputs, const TensorView& out,
           const std::vector<double>& scalars = {}) {
    OpContext ctx;
    ctx.pool = &pool;
    ctx.inputs = inputs;
    ctx.output = &out;
    ctx.scalars = scalars;
    ctx.size = static_cast<uint64_t>(out.numel());
    builtin_fn(kind)(ctx);
  }
};

std::vector<double> random_vals(std::mt19937_64& rng, size_t n, double lo = -4.0,
                                double hi = 4.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

// The oracle sees exactly what the kernel read: values already narrowed to
// the tensor dtype.
std::vector<double> narrowed(const std::vector<double>& vals, DType dtype) {
  std::vector<double> out(vals.size());
  for (size_t i = 0; i < vals.size(); ++i) out[i] = narrow_to(dtype, vals[i]);
  return out;
}

}  // namespace

TEST_CASE("relu: pinned examples and randomized oracle sweep") {
  Fixture f;
  for (DType dt : {DType::F32, DType::F64, DType::I32}) {
    TensorView in = f.make_filled({2}, {-1.0, 2.0}, dt);
    TensorView out = f.make({2}, dt);
    f.run(OpKind::Relu, {in}, out);
    CHECK(f.read(out) == std::vector<double>{0.0, 2.0});
  }

  std::mt19937_64 rng(101);
  for (int round = 0; round < 8; ++round) {
    const std::vector<double> vals = random_vals(rng, 160, -6.0, 6.0);
    TensorView in = f.make_filled({160}, vals, DType::F32);
    TensorView out = f.make({160}, DType::F32);
    f.run(OpKind::Relu, {in}, out);
    const std::vector<double> got = f.read(out);
    const std::vector<double> seen = narrowed(vals, DType::F32);
    for (size_t i = 0; i < seen.size(); ++i) {
      REQUIRE(got[i] == narrow_to(DType::F32, reference::relu(seen[i])));
    }
  }
}

TEST_CASE("gelu: zero fixed point, pinned 1.0, randomized oracle sweep") {
  Fixture f;
  TensorView in = f.make_filled({2}, {0.0, 1.0}, DType::F64);
  TensorView out = f.make({2}, DType::F64);
  f.run(OpKind::Gelu, {in}, out);
  const std::vector<double> got = f.read(out);
  CHECK(got[0] == 0.0);
  CHECK(close_tol(got[1], reference::gelu(1.0), 1e-6));

  std::mt19937_64 rng(102);
  for (int round = 0; round < 8; ++round) {
    const std::vector<double> vals = random_vals(rng, 160, -5.0, 5.0);
    TensorView rin = f.make_filled({160}, vals, DType::F32);
    TensorView rout = f.make({160}, DType::F32);
    f.run(OpKind::Gelu, {rin}, rout);
    const std::vector<double> rgot = f.read(rout);
    const std::vector<double> seen = narrowed(vals, DType::F32);
    for (size_t i = 0; i < seen.size(); ++i) {
      REQUIRE(close_tol(rgot[i], reference::gelu(seen[i]), 1e-6));
    }
  }

  TensorView iin = f.make({4}, DType::I32);
  TensorView iout = f.make({4}, DType::I32);
  CHECK_THROWS_MATCHES(f.run(OpKind::Gelu, {iin}, iout), Error,
                       ErrorCodeIs(ErrorCode::DTypeMismatch));
}

TEST_CASE("add: broadcast ones (3,1)+(1,4) gives (3,4) of 2s") {
  Fixture f;
  TensorView a = f.make_filled({3, 1}, {1.0, 1.0, 1.0});
  TensorView b = f.make_filled({1, 4}, {1.0, 1.0, 1.0, 1.0});
  TensorView out = f.make({3, 4});
  f.run(OpKind::Add, {a, b}, out);
  for (double v : f.read(out)) CHECK(v == 2.0);
}

TEST_CASE("add/mul: dtype and shape error reporting") {
  Fixture f;
  TensorView a = f.make({4}, DType::F32);
  TensorView b64 = f.make({4}, DType::F64);
  TensorView out = f.make({4}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::Add, {a, b64}, out), Error,
                       ErrorCodeIs(ErrorCode::DTypeMismatch));

  TensorView c = f.make({3, 2});
  TensorView d = f.make({1, 4});
  TensorView out2 = f.make({3, 4});
  CHECK_THROWS_MATCHES(f.run(OpKind::Mul, {c, d}, out2), Error,
                       ErrorCodeIs(ErrorCode::IncompatibleShapes));

  CHECK_THROWS_MATCHES(f.run(OpKind::Add, {a}, out), Error, ErrorCodeIs(ErrorCode::ArityError));
}

TEST_CASE("add/mul: randomized exact agreement with scalar arithmetic") {
  Fixture f;
  std::mt19937_64 rng(103);
  for (int round = 0; round < 8; ++round) {
    const std::vector<double> av = random_vals(rng, 160);
    const std::vector<double> bv = random_vals(rng, 160);
    for (DType dt : {DType::F32, DType::F64}) {
      TensorView a = f.make_filled({160}, av, dt);
      TensorView b = f.make_filled({160}, bv, dt);
      TensorView sum = f.make({160}, dt);
      TensorView prod = f.make({160}, dt);
      f.run(OpKind::Add, {a, b}, sum);
      f.run(OpKind::Mul, {a, b}, prod);
      const std::vector<double> gs = f.read(sum), gp = f.read(prod);
      const std::vector<double> an = narrowed(av, dt), bn = narrowed(bv, dt);
      for (size_t i = 0; i < an.size(); ++i) {
        REQUIRE(gs[i] == narrow_to(dt, an[i] + bn[i]));
        REQUIRE(gp[i] == narrow_to(dt, an[i] * bn[i]));
      }
    }
  }

  // Integer add/mul narrows by truncation like any store.
  TensorView ia = f.make_filled({3}, {1.0, -2.0, 7.0}, DType::I32);
  TensorView ib = f.make_filled({3}, {10.0, 3.0, -4.0}, DType::I32);
  TensorView io = f.make({3}, DType::I32);
  f.run(OpKind::Add, {ia, ib}, io);
  CHECK(f.read(io) == std::vector<double>{11.0, 1.0, 3.0});
}

TEST_CASE("softmax: symmetry, overflow safety, randomized oracle, row sums") {
  Fixture f;
  TensorView flat = f.make_filled({2}, {0.0, 0.0}, DType::F64);
  TensorView out = f.make({2}, DType::F64);
  f.run(OpKind::Softmax, {flat}, out);
  CHECK(f.read(out) == std::vector<double>{0.5, 0.5});

  TensorView big = f.make_filled({2}, {1000.0, 1000.0}, DType::F64);
  f.run(OpKind::Softmax, {big}, out);
  CHECK(f.read(out) == std::vector<double>{0.5, 0.5});

  std::mt19937_64 rng(104);
  const std::vector<double> vals = random_vals(rng, 8 * 32, -8.0, 8.0);
  TensorView rin = f.make_filled({8, 32}, vals, DType::F32);
  TensorView rout = f.make({8, 32}, DType::F32);
  f.run(OpKind::Softmax, {rin}, rout);
  const std::vector<double> want = reference::softmax_rows(narrowed(vals, DType::F32), 8, 32);
  const std::vector<double> got = f.read(rout);
  for (size_t i = 0; i < want.size(); ++i) REQUIRE(close_tol(got[i], want[i], 1e-5));

  // Rows sum to 1 within 1e-6 across many random shapes (>= 1000 elements).
  for (int round = 0; round < 24; ++round) {
    std::uniform_int_distribution<int64_t> rdist(1, 12), cdist(1, 24);
    const int64_t rows = rdist(rng), cols = cdist(rng);
    const std::vector<double> rv = random_vals(rng, static_cast<size_t>(rows * cols), -30.0, 30.0);
    TensorView in2 = f.make_filled({rows, cols}, rv, DType::F64);
    TensorView out2 = f.make({rows, cols}, DType::F64);
    f.run(OpKind::Softmax, {in2}, out2);
    const std::vector<double> g = f.read(out2);
    const std::vector<double> w = reference::softmax_rows(rv, static_cast<size_t>(rows),
                                                          static_cast<size_t>(cols));
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < cols; ++c) {
        s += g[static_cast<size_t>(r * cols + c)];
        REQUIRE(close_tol(g[static_cast<size_t>(r * cols + c)],
                          w[static_cast<size_t>(r * cols + c)], 1e-12));
      }
      REQUIRE(std::abs(s - 1.0) <= 1e-6);
    }
  }

  TensorView empty = f.make({3, 0}, DType::F32);
  TensorView eout = f.make({3, 0}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::Softmax, {empty}, eout), Error,
                       ErrorCodeIs(ErrorCode::EmptyAxis));
}

TEST_CASE("layernorm: pinned rows, randomized oracle, normalization property") {
  Fixture f;
  TensorView gamma1 = f.make_filled({3}, {1.0, 1.0, 1.0}, DType::F64);
  TensorView beta0 = f.make_filled({3}, {0.0, 0.0, 0.0}, DType::F64);

  // Exactly summable constant row: zero variance, eps keeps the divide sane,
  // output is exactly zero.
  TensorView constant = f.make_filled({1, 4}, {2.5, 2.5, 2.5, 2.5}, DType::F64);
  TensorView gamma4 = f.make_filled({4}, {1.0, 1.0, 1.0, 1.0}, DType::F64);
  TensorView beta4 = f.make_filled({4}, {0.0, 0.0, 0.0, 0.0}, DType::F64);
  TensorView out = f.make({1, 4}, DType::F64);
  f.run(OpKind::LayerNorm, {constant, gamma4, beta4}, out);
  CHECK(f.read(out) == std::vector<double>(4, 0.0));

  // A constant row whose mean rounds is still finite and ~0 (no 0/0).
  TensorView constant2 = f.make_filled({1, 3}, {3.7, 3.7, 3.7}, DType::F64);
  TensorView out2a = f.make({1, 3}, DType::F64);
  f.run(OpKind::LayerNorm, {constant2, gamma1, beta0}, out2a);
  for (double v : f.read(out2a)) {
    CHECK(std::isfinite(v));
    CHECK(std::abs(v) <= 1e-9);
  }

  TensorView gamma0 = f.make_filled({3}, {0.0, 0.0, 0.0}, DType::F64);
  TensorView beta = f.make_filled({3}, {1.5, -2.0, 0.25}, DType::F64);
  TensorView vary = f.make_filled({2, 3}, {1.0, 2.0, 3.0, -1.0, 0.0, 4.0}, DType::F64);
  TensorView out2 = f.make({2, 3}, DType::F64);
  f.run(OpKind::LayerNorm, {vary, gamma0, beta}, out2);
  CHECK(f.read(out2) == std::vector<double>{1.5, -2.0, 0.25, 1.5, -2.0, 0.25});

  std::mt19937_64 rng(105);
  const std::vector<double> xv = random_vals(rng, 4 * 64);
  const std::vector<double> gv = random_vals(rng, 64, 0.5, 2.0);
  const std::vector<double> bv = random_vals(rng, 64, -1.0, 1.0);
  TensorView x = f.make_filled({4, 64}, xv, DType::F32);
  TensorView g = f.make_filled({64}, gv, DType::F32);
  TensorView b = f.make_filled({64}, bv, DType::F32);
  TensorView rout = f.make({4, 64}, DType::F32);
  f.run(OpKind::LayerNorm, {x, g, b}, rout, {1e-5});
  const std::vector<double> want = reference::layernorm_rows(
      narrowed(xv, DType::F32), narrowed(gv, DType::F32), narrowed(bv, DType::F32), 4, 64, 1e-5);
  const std::vector<double> got = f.read(rout);
  for (size_t i = 0; i < want.size(); ++i) REQUIRE(close_tol(got[i], want[i], 1e-5));

  // gamma=1, beta=0: rows come out with mean ~0 and variance ~1.
  for (int round = 0; round < 16; ++round) {
    const int64_t cols = 48;
    const std::vector<double> rv = random_vals(rng, static_cast<size_t>(cols), -9.0, 9.0);
    TensorView rin = f.make_filled({1, cols}, rv, DType::F64);
    TensorView nout = f.make({1, cols}, DType::F64);
    TensorView g1 = f.make_filled({1}, {1.0}, DType::F64);
    TensorView b0 = f.make_filled({1}, {0.0}, DType::F64);
    f.run(OpKind::LayerNorm, {rin, g1, b0}, nout);
    const std::vector<double> vals = f.read(nout);
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    REQUIRE(std::abs(mean) <= 1e-5);
    REQUIRE(std::abs(var - 1.0) <= 1e-3);
  }

  TensorView empty = f.make({2, 0}, DType::F64);
  TensorView eout = f.make({2, 0}, DType::F64);
  CHECK_THROWS_MATCHES(f.run(OpKind::LayerNorm, {empty, gamma1, beta0}, eout), Error,
                       ErrorCodeIs(ErrorCode::EmptyAxis));
}

TEST_CASE("reduce: pinned examples, empty-axis rules, randomized oracles") {
  Fixture f;
  TensorView v = f.make_filled({3}, {1.0, 2.0, 3.0}, DType::F64);
  TensorView scalar = f.make({}, DType::F64);
  f.run(OpKind::ReduceSum, {v}, scalar);
  CHECK(f.read(scalar) == std::vector<double>{6.0});

  TensorView single = f.make_filled({1, 1}, {42.5}, DType::F64);
  TensorView sout = f.make({1}, DType::F64);
  f.run(OpKind::ReduceMax, {single}, sout);
  CHECK(f.read(sout) == std::vector<double>{42.5});

  // Sum over an empty axis is 0; Max/Min report EmptyAxis.
  TensorView empty = f.make({4, 0}, DType::F32);
  TensorView zout = f.make({4}, DType::F32);
  f.run(OpKind::ReduceSum, {empty}, zout);
  CHECK(f.read(zout) == std::vector<double>(4, 0.0));
  CHECK_THROWS_MATCHES(f.run(OpKind::ReduceMax, {empty}, zout), Error,
                       ErrorCodeIs(ErrorCode::EmptyAxis));
  CHECK_THROWS_MATCHES(f.run(OpKind::ReduceMin, {empty}, zout), Error,
                       ErrorCodeIs(ErrorCode::EmptyAxis));

  std::mt19937_64 rng(106);
  const std::vector<double> big = random_vals(rng, 16384, -1.0, 1.0);
  TensorView bin = f.make_filled({16384}, big, DType::F32);
  TensorView bout = f.make({}, DType::F32);
  f.run(OpKind::ReduceSum, {bin}, bout);
  const double want = reference::sum_rows(narrowed(big, DType::F32), 1, 16384)[0];
  CHECK(close_tol(f.read(bout)[0], want, 1e-6));

  for (int round = 0; round < 30; ++round) {
    std::uniform_int_distribution<int64_t> rdist(1, 8), cdist(1, 24);
    const int64_t rows = rdist(rng), cols = cdist(rng);
    const std::vector<double> rv = random_vals(rng, static_cast<size_t>(rows * cols));
    const std::vector<double> rn = narrowed(rv, DType::F32);
    TensorView rin = f.make_filled({rows, cols}, rv, DType::F32);
    TensorView rsum = f.make({rows}, DType::F32);
    TensorView rmax = f.make({rows}, DType::F32);
    TensorView rmin = f.make({rows}, DType::F32);
    f.run(OpKind::ReduceSum, {rin}, rsum);
    f.run(OpKind::ReduceMax, {rin}, rmax);
    f.run(OpKind::ReduceMin, {rin}, rmin);
    const auto wsum = reference::sum_rows(rn, static_cast<size_t>(rows), static_cast<size_t>(cols));
    const auto wmax = reference::max_rows(rn, static_cast<size_t>(rows), static_cast<size_t>(cols));
    const auto wmin = reference::min_rows(rn, static_cast<size_t>(rows), static_cast<size_t>(cols));
    const auto gsum = f.read(rsum);
    const auto gmax = f.read(rmax);
    const auto gmin = f.read(rmin);
    for (int64_t r = 0; r < rows; ++r) {
      REQUIRE(close_tol(gsum[static_cast<size_t>(r)], wsum[static_cast<size_t>(r)], 1e-6));
      REQUIRE(gmax[static_cast<size_t>(r)] ==
              narrow_to(DType::F32, wmax[static_cast<size_t>(r)]));
      REQUIRE(gmin[static_cast<size_t>(r)] ==
              narrow_to(DType::F32, wmin[static_cast<size_t>(r)]));
    }
  }
}

TEST_CASE("matmul: identity, scalar product, randomized oracle, size cap") {
  Fixture f;
  TensorView eye = f.make_filled({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, DType::F64);
  TensorView x = f.make_filled({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, DType::F64);
  TensorView out = f.make({3, 3}, DType::F64);
  f.run(OpKind::MatMulSmall, {eye, x}, out);
  CHECK(f.read(out) == f.read(x));

  TensorView a1 = f.make_filled({1, 1}, {3.0}, DType::F64);
  TensorView b1 = f.make_filled({1, 1}, {-2.5}, DType::F64);
  TensorView o1 = f.make({1, 1}, DType::F64);
  f.run(OpKind::MatMulSmall, {a1, b1}, o1);
  CHECK(f.read(o1) == std::vector<double>{-7.5});

  std::mt19937_64 rng(107);
  for (int round = 0; round < 16; ++round) {
    const std::vector<double> av = random_vals(rng, 8 * 16);
    const std::vector<double> bv = random_vals(rng, 16 * 8);
    TensorView a = f.make_filled({8, 16}, av, DType::F32);
    TensorView b = f.make_filled({16, 8}, bv, DType::F32);
    TensorView o = f.make({8, 8}, DType::F32);
    f.run(OpKind::MatMulSmall, {a, b}, o);
    const auto want = reference::matmul(narrowed(av, DType::F32), 8, 16,
                                        narrowed(bv, DType::F32), 8);
    const auto got = f.read(o);
    for (size_t i = 0; i < want.size(); ++i) REQUIRE(close_tol(got[i], want[i], 1e-6));
  }

  TensorView wide = f.make({1, 257}, DType::F32);
  TensorView tall = f.make({257, 1}, DType::F32);
  TensorView tiny = f.make({1, 1}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::MatMulSmall, {wide, tall}, tiny), Error,
                       ErrorCodeIs(ErrorCode::TooLarge));

  // The uncapped entry point accepts the same product (conventional path).
  OpContext ctx;
  ctx.pool = &f.pool;
  std::vector<TensorView> ins{wide, tall};
  ctx.inputs = ins;
  ctx.output = &tiny;
  matmul(ctx, 0);

  TensorView bad = f.make({5, 3}, DType::F32);
  TensorView bad2 = f.make({4, 2}, DType::F32);
  TensorView bout = f.make({5, 2}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::MatMulSmall, {bad, bad2}, bout), Error,
                       ErrorCodeIs(ErrorCode::ShapeMismatch));
}

TEST_CASE("vecmat: randomized oracle, matmul row equivalence, size cap") {
  Fixture f;
  std::mt19937_64 rng(108);
  for (int round = 0; round < 24; ++round) {
    const std::vector<double> vv = random_vals(rng, 16);
    const std::vector<double> mv = random_vals(rng, 16 * 8);
    TensorView v = f.make_filled({16}, vv, DType::F32);
    TensorView m = f.make_filled({16, 8}, mv, DType::F32);
    TensorView o = f.make({8}, DType::F32);
    f.run(OpKind::VecMat, {v, m}, o);
    const auto want = reference::vecmat(narrowed(vv, DType::F32), 16,
                                        narrowed(mv, DType::F32), 8);
    const auto got = f.read(o);
    for (size_t i = 0; i < want.size(); ++i) REQUIRE(close_tol(got[i], want[i], 1e-6));

    // vecmat(v, m) is matmul((1,k), (k,n)) flattened; same kernel arithmetic
    // means exact agreement.
    TensorView vrow = f.make_filled({1, 16}, vv, DType::F32);
    TensorView orow = f.make({1, 8}, DType::F32);
    f.run(OpKind::MatMulSmall, {vrow, m}, orow);
    REQUIRE(f.read(orow) == got);
  }

  TensorView big = f.make({257}, DType::F32);
  TensorView bigm = f.make({257, 1}, DType::F32);
  TensorView bout = f.make({1}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::VecMat, {big, bigm}, bout), Error,
                       ErrorCodeIs(ErrorCode::TooLarge));
}

TEST_CASE("sdpa: singleton cache, uniform weights, randomized oracle") {
  Fixture f;
  std::mt19937_64 rng(109);

  // t = 1: the softmax over one score is 1, so out copies v regardless of q.
  const std::vector<double> qv = random_vals(rng, 2 * 4);
  const std::vector<double> kv = random_vals(rng, 2 * 1 * 4);
  const std::vector<double> vv = random_vals(rng, 2 * 1 * 4);
  TensorView q = f.make_filled({2, 4}, qv, DType::F64);
  TensorView k = f.make_filled({2, 1, 4}, kv, DType::F64);
  TensorView v = f.make_filled({2, 1, 4}, vv, DType::F64);
  TensorView out = f.make({2, 4}, DType::F64);
  f.run(OpKind::Sdpa, {q, k, v}, out);
  CHECK(f.read(out) == vv);

  // Identical keys: every position gets weight 1/t, out is the value mean.
  const int64_t t = 4, d = 3;
  std::vector<double> krep(static_cast<size_t>(t * d));
  const std::vector<double> onekey = random_vals(rng, static_cast<size_t>(d));
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      krep[static_cast<size_t>(i * d + j)] = onekey[static_cast<size_t>(j)];
    }
  }
  const std::vector<double> vals = random_vals(rng, static_cast<size_t>(t * d));
  TensorView q1 = f.make_filled({1, d}, random_vals(rng, static_cast<size_t>(d)), DType::F64);
  TensorView k1 = f.make_filled({1, t, d}, krep, DType::F64);
  TensorView v1 = f.make_filled({1, t, d}, vals, DType::F64);
  TensorView o1 = f.make({1, d}, DType::F64);
  f.run(OpKind::Sdpa, {q1, k1, v1}, o1);
  const auto got = f.read(o1);
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < t; ++i) mean += vals[static_cast<size_t>(i * d + j)];
    mean /= static_cast<double>(t);
    REQUIRE(close_tol(got[static_cast<size_t>(j)], mean, 1e-12));
  }

  // Random h=2, t=128, d=16 against the oracle at the default 1/sqrt(d) scale.
  const std::vector<double> rq = random_vals(rng, 2 * 16, -1.0, 1.0);
  const std::vector<double> rk = random_vals(rng, 2 * 128 * 16, -1.0, 1.0);
  const std::vector<double> rv = random_vals(rng, 2 * 128 * 16, -1.0, 1.0);
  TensorView tq = f.make_filled({2, 16}, rq, DType::F32);
  TensorView tk = f.make_filled({2, 128, 16}, rk, DType::F32);
  TensorView tv = f.make_filled({2, 128, 16}, rv, DType::F32);
  TensorView to = f.make({2, 16}, DType::F32);
  f.run(OpKind::Sdpa, {tq, tk, tv}, to);
  const auto want = reference::sdpa(narrowed(rq, DType::F32), narrowed(rk, DType::F32),
                                    narrowed(rv, DType::F32), 2, 128, 16, 1.0 / std::sqrt(16.0));
  const auto tgot = f.read(to);
  for (size_t i = 0; i < want.size(); ++i) REQUIRE(close_tol(tgot[i], want[i], 1e-5));

  // Explicit scale scalar overrides the default.
  TensorView so = f.make({2, 16}, DType::F32);
  f.run(OpKind::Sdpa, {tq, tk, tv}, so, {0.5});
  const auto want2 = reference::sdpa(narrowed(rq, DType::F32), narrowed(rk, DType::F32),
                                     narrowed(rv, DType::F32), 2, 128, 16, 0.5);
  const auto sgot = f.read(so);
  for (size_t i = 0; i < want2.size(); ++i) REQUIRE(close_tol(sgot[i], want2[i], 1e-5));

  TensorView badk = f.make({2, 8, 5}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::Sdpa, {tq, badk, tv}, to), Error,
                       ErrorCodeIs(ErrorCode::ShapeMismatch));
  TensorView ek = f.make({2, 0, 16}, DType::F32);
  TensorView ev = f.make({2, 0, 16}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::Sdpa, {tq, ek, ev}, to), Error,
                       ErrorCodeIs(ErrorCode::EmptyAxis));
}

TEST_CASE("sdpa: randomized small-shape sweep against oracle") {
  Fixture f;
  std::mt19937_64 rng(110);
  std::uniform_int_distribution<int64_t> hd(1, 3), td(1, 24), dd(1, 12);
  for (int round = 0; round < 40; ++round) {
    const int64_t h = hd(rng), t = td(rng), d = dd(rng);
    const auto qv = random_vals(rng, static_cast<size_t>(h * d), -2.0, 2.0);
    const auto kv = random_vals(rng, static_cast<size_t>(h * t * d), -2.0, 2.0);
    const auto vv = random_vals(rng, static_cast<size_t>(h * t * d), -2.0, 2.0);
    TensorView q = f.make_filled({h, d}, qv, DType::F64);
    TensorView k = f.make_filled({h, t, d}, kv, DType::F64);
    TensorView v = f.make_filled({h, t, d}, vv, DType::F64);
    TensorView o = f.make({h, d}, DType::F64);
    f.run(OpKind::Sdpa, {q, k, v}, o);
    const auto want = reference::sdpa(qv, kv, vv, static_cast<size_t>(h), static_cast<size_t>(t),
                                      static_cast<size_t>(d),
                                      1.0 / std::sqrt(static_cast<double>(d)));
    const auto got = f.read(o);
    for (size_t i = 0; i < want.size(); ++i) REQUIRE(close_tol(got[i], want[i], 1e-12));
  }
}

TEST_CASE("rope: position-0 identity, known angle, norm preservation, oracle sweep") {
  Fixture f;
  std::mt19937_64 rng(111);

  const std::vector<double> xv = random_vals(rng, 3 * 6);
  TensorView x = f.make_filled({3, 6}, xv, DType::F64);
  TensorView zero_pos = f.make_filled({3}, {0.0, 0.0, 0.0}, DType::F64);
  TensorView out = f.make({3, 6}, DType::F64);
  f.run(OpKind::Rope, {x, zero_pos}, out);
  CHECK(f.read(out) == xv);

  // d=2 puts theta = p exactly; a unit x-vector lands on (cos p, sin p).
  const double p = 0.7853981633974483;
  TensorView unit = f.make_filled({1, 2}, {1.0, 0.0}, DType::F64);
  TensorView pos = f.make_filled({1}, {p}, DType::F64);
  TensorView rout = f.make({1, 2}, DType::F64);
  f.run(OpKind::Rope, {unit, pos}, rout);
  const auto rgot = f.read(rout);
  CHECK(std::abs(rgot[0] - std::cos(p)) <= 1e-14);
  CHECK(std::abs(rgot[1] - std::sin(p)) <= 1e-14);

  // Norm preservation per pair within 1e-6 on f32 data.
  const std::vector<double> nv = random_vals(rng, 16 * 8);
  const std::vector<double> np = random_vals(rng, 16, 0.0, 500.0);
  TensorView nx = f.make_filled({16, 8}, nv, DType::F32);
  TensorView npos = f.make_filled({16}, np, DType::F32);
  TensorView nout = f.make({16, 8}, DType::F32);
  f.run(OpKind::Rope, {nx, npos}, nout);
  const auto ngot = f.read(nout);
  const auto nin = narrowed(nv, DType::F32);
  for (size_t r = 0; r < 16; ++r) {
    for (size_t i = 0; i < 4; ++i) {
      const double in0 = nin[r * 8 + 2 * i], in1 = nin[r * 8 + 2 * i + 1];
      const double o0 = ngot[r * 8 + 2 * i], o1 = ngot[r * 8 + 2 * i + 1];
      REQUIRE(std::abs(std::hypot(o0, o1) - std::hypot(in0, in1)) <= 1e-6);
    }
  }

  // Randomized oracle sweep, default and custom theta bases.
  for (int round = 0; round < 24; ++round) {
    std::uniform_int_distribution<int64_t> tdist(1, 10), ddist(1, 8);
    const int64_t t = tdist(rng), d = 2 * ddist(rng);
    const auto rv = random_vals(rng, static_cast<size_t>(t * d));
    const auto pv = random_vals(rng, static_cast<size_t>(t), 0.0, 1000.0);
    TensorView rx = f.make_filled({t, d}, rv, DType::F64);
    TensorView rp = f.make_filled({t}, pv, DType::F64);
    TensorView ro = f.make({t, d}, DType::F64);
    const double base = (round % 2 == 0) ? 10000.0 : 500.0;
    f.run(OpKind::Rope, {rx, rp}, ro, (round % 2 == 0) ? std::vector<double>{}
                                                       : std::vector<double>{base});
    const auto want = reference::rope(rv, pv, static_cast<size_t>(t), static_cast<size_t>(d), base);
    const auto got = f.read(ro);
    for (size_t i = 0; i < want.size(); ++i) REQUIRE(close_tol(got[i], want[i], 1e-12));
  }

  TensorView odd = f.make({2, 3}, DType::F32);
  TensorView opos = f.make({2}, DType::F32);
  TensorView oout = f.make({2, 3}, DType::F32);
  CHECK_THROWS_MATCHES(f.run(OpKind::Rope, {odd, opos}, oout), Error,
                       ErrorCodeIs(ErrorCode::OddDim));
}

TEST_CASE("kv_append: cursor semantics, prior rows untouched, sdpa equivalence") {
  Fixture f;
  const int64_t h = 2, cap = 8, d = 4;
  TensorView kc = f.make({h, cap, d}, DType::F64);
  TensorView vc = f.make({h, cap, d}, DType::F64);
  {
    BoundView bk(f.pool, kc), bv(f.pool, vc);
    for (int64_t e = 0; e < kc.numel(); ++e) {
      bk.store(e, -7.0);
      bv.store(e, -7.0);
    }
  }

  std::mt19937_64 rng(112);
  const auto k0 = random_vals(rng, static_cast<size_t>(h * d));
  const auto v0 = random_vals(rng, static_cast<size_t>(h * d));
  TensorView nk = f.make_filled({h, d}, k0, DType::F64);
  TensorView nv = f.make_filled({h, d}, v0, DType::F64);

  const int64_t next = kv_append(f.pool, kc, vc, nk, nv, 0);
  CHECK(next == 1);
  const auto kread = f.read(kc);
  const auto vread = f.read(vc);
  for (int64_t head = 0; head < h; ++head) {
    for (int64_t j = 0; j < d; ++j) {
      CHECK(kread[static_cast<size_t>((head * cap + 0) * d + j)] ==
            k0[static_cast<size_t>(head * d + j)]);
      CHECK(vread[static_cast<size_t>((head * cap + 0) * d + j)] ==
            v0[static_cast<size_t>(head * d + j)]);
    }
    for (int64_t row = 1; row < cap; ++row) {
      for (int64_t j = 0; j < d; ++j) {
        CHECK(kread[static_cast<size_t>((head * cap + row) * d + j)] == -7.0);
      }
    }
  }

  CHECK_THROWS_MATCHES(kv_append(f.pool, kc, vc, nk, nv, cap), Error,
                       ErrorCodeIs(ErrorCode::CacheFull));

  // Descriptor-form wrapper writes the same rows.
  TensorView kc2 = f.make({h, cap, d}, DType::F64);
  TensorView vc2 = f.make({h, cap, d}, DType::F64);
  f.run(OpKind::KvAppend, {nk, nv, vc2}, kc2, {0.0});
  for (int64_t head = 0; head < h; ++head) {
    for (int64_t j = 0; j < d; ++j) {
      CHECK(f.read(kc2)[static_cast<size_t>((head * cap + 0) * d + j)] ==
            k0[static_cast<size_t>(head * d + j)]);
    }
  }

  // Append t rows, then attend over a view of the filled prefix; must equal
  // sdpa over a cache built directly from the same rows.
  const int64_t steps = 6;
  TensorView kc3 = f.make({h, cap, d}, DType::F64);
  TensorView vc3 = f.make({h, cap, d}, DType::F64);
  TensorView direct_k = f.make({h, steps, d}, DType::F64);
  TensorView direct_v = f.make({h, steps, d}, DType::F64);
  BoundView bdk(f.pool, direct_k), bdv(f.pool, direct_v);
  int64_t cursor = 0;
  for (int64_t s = 0; s < steps; ++s) {
    const auto ks = random_vals(rng, static_cast<size_t>(h * d));
    const auto vs = random_vals(rng, static_cast<size_t>(h * d));
    TensorView tk = f.make_filled({h, d}, ks, DType::F64);
    TensorView tv = f.make_filled({h, d}, vs, DType::F64);
    cursor = kv_append(f.pool, kc3, vc3, tk, tv, cursor);
    for (int64_t head = 0; head < h; ++head) {
      for (int64_t j = 0; j < d; ++j) {
        bdk.store(direct_k.offset + head * direct_k.strides[0] + s * direct_k.strides[1] +
                      j * direct_k.strides[2],
                  ks[static_cast<size_t>(head * d + j)]);
        bdv.store(direct_v.offset + head * direct_v.strides[0] + s * direct_v.strides[1] +
                      j * direct_v.strides[2],
                  vs[static_cast<size_t>(head * d + j)]);
      }
    }
  }
  CHECK(cursor == steps);

  // A (h, steps, d) window into the larger cache: same buffer, cache strides.
  TensorView kwin = kc3;
  kwin.shape = {h, steps, d};
  TensorView vwin = vc3;
  vwin.shape = {h, steps, d};

  const auto qv = random_vals(rng, static_cast<size_t>(h * d));
  TensorView q = f.make_filled({h, d}, qv, DType::F64);
  TensorView out_win = f.make({h, d}, DType::F64);
  TensorView out_direct = f.make({h, d}, DType::F64);
  f.run(OpKind::Sdpa, {q, kwin, vwin}, out_win);
  f.run(OpKind::Sdpa, {q, direct_k, direct_v}, out_direct);
  CHECK(f.read(out_win) == f.read(out_direct));
}

TEST_CASE("kv_append: randomized fill sweep") {
  Fixture f;
  std::mt19937_64 rng(113);
  for (int round = 0; round < 16; ++round) {
    std::uniform_int_distribution<int64_t> hd(1, 3), capd(1, 8), dd(1, 6);
    const int64_t h = hd(rng), cap = capd(rng), d = dd(rng);
    TensorView kc = f.make({h, cap, d}, DType::F32);
    TensorView vc = f.make({h, cap, d}, DType::F32);
    std::vector<double> mirror_k(static_cast<size_t>(h * cap * d), 0.0);
    std::vector<double> mirror_v(static_cast<size_t>(h * cap * d), 0.0);
    int64_t cursor = 0;
    for (int64_t s = 0; s < cap; ++s) {
      const auto ks = random_vals(rng, static_cast<size_t>(h * d));
      const auto vs = random_vals(rng, static_cast<size_t>(h * d));
      TensorView tk = f.make_filled({h, d}, ks, DType::F32);
      TensorView tv = f.make_filled({h, d}, vs, DType::F32);
      cursor = kv_append(f.pool, kc, vc, tk, tv, cursor);
      REQUIRE(cursor == s + 1);
      for (int64_t head = 0; head < h; ++head) {
        for (int64_t j = 0; j < d; ++j) {
          mirror_k[static_cast<size_t>((head * cap + s) * d + j)] =
              narrow_to(DType::F32, ks[static_cast<size_t>(head * d + j)]);
          mirror_v[static_cast<size_t>((head * cap + s) * d + j)] =
              narrow_to(DType::F32, vs[static_cast<size_t>(head * d + j)]);
        }
      }
    }
    CHECK_THROWS_MATCHES(kv_append(f.pool, kc, vc, f.make({h, d}, DType::F32),
                                   f.make({h, d}, DType::F32), cursor),
                         Error, ErrorCodeIs(ErrorCode::CacheFull));
    REQUIRE(f.read(kc) == mirror_k);
    REQUIRE(f.read(vc) == mirror_v);
  }
}

TEST_CASE("strided and broadcast inputs match contiguous runs exactly") {
  Fixture f;
  std::mt19937_64 rng(114);
  const std::vector<double> base = random_vals(rng, 64);

  // Reversed (negative-stride) slice vs its contiguous copy, elementwise.
  TensorView store = f.make_filled({64}, base, DType::F32);
  TensorView reversed = store;
  reversed.shape = {16};
  reversed.strides = {-3};
  reversed.offset = 60;
  TensorView contig = f.make_filled({16}, f.read(reversed), DType::F32);

  for (OpKind kind : {OpKind::Relu, OpKind::Gelu}) {
    TensorView o1 = f.make({16}, DType::F32);
    TensorView o2 = f.make({16}, DType::F32);
    f.run(kind, {reversed}, o1);
    f.run(kind, {contig}, o2);
    REQUIRE(f.read(o1) == f.read(o2));
  }
  {
    TensorView o1 = f.make({16}, DType::F32);
    TensorView o2 = f.make({16}, DType::F32);
    f.run(OpKind::Add, {reversed, contig}, o1);
    f.run(OpKind::Add, {contig, contig}, o2);
    REQUIRE(f.read(o1) == f.read(o2));
  }

  // Transposed matrix view vs contiguous transpose copy through softmax,
  // layernorm, reduce and matmul.
  const std::vector<double> mat = random_vals(rng, 6 * 8);
  TensorView m = f.make_filled({6, 8}, mat, DType::F32);
  TensorView mt = m;
  mt.shape = {8, 6};
  mt.strides = {m.strides[1], m.strides[0]};
  TensorView mt_copy = f.make_filled({8, 6}, f.read(mt), DType::F32);

  for (OpKind kind : {OpKind::Softmax, OpKind::ReduceSum, OpKind::ReduceMax}) {
    const Shape oshape = (kind == OpKind::Softmax) ? Shape{8, 6} : Shape{8};
    TensorView o1 = f.make(oshape, DType::F32);
    TensorView o2 = f.make(oshape, DType::F32);
    f.run(kind, {mt}, o1);
    f.run(kind, {mt_copy}, o2);
    REQUIRE(f.read(o1) == f.read(o2));
  }
  {
    TensorView g = f.make_filled({6}, random_vals(rng, 6), DType::F32);
    TensorView b = f.make_filled({6}, random_vals(rng, 6), DType::F32);
    TensorView o1 = f.make({8, 6}, DType::F32);
    TensorView o2 = f.make({8, 6}, DType::F32);
    f.run(OpKind::LayerNorm, {mt, g, b}, o1);
    f.run(OpKind::LayerNorm, {mt_copy, g, b}, o2);
    REQUIRE(f.read(o1) == f.read(o2));
  }
  {
    const std::vector<double> rhs = random_vals(rng, 6 * 5);
    TensorView r = f.make_filled({6, 5}, rhs, DType::F32);
    TensorView o1 = f.make({8, 5}, DType::F32);
    TensorView o2 = f.make({8, 5}, DType::F32);
    f.run(OpKind::MatMulSmall, {mt, r}, o1);
    f.run(OpKind::MatMulSmall, {mt_copy, r}, o2);
    REQUIRE(f.read(o1) == f.read(o2));
  }

  // Broadcast scalar against materialized full tensor.
  TensorView scalar = f.make_filled({}, {2.5}, DType::F32);
  TensorView full = f.make_filled({4, 4}, std::vector<double>(16, 2.5), DType::F32);
  TensorView big = f.make_filled({4, 4}, random_vals(rng, 16), DType::F32);
  TensorView o1 = f.make({4, 4}, DType::F32);
  TensorView o2 = f.make({4, 4}, DType::F32);
  f.run(OpKind::Mul, {big, scalar}, o1);
  f.run(OpKind::Mul, {big, full}, o2);
  REQUIRE(f.read(o1) == f.read(o2));

  // Strided output region: interleaved halves of one buffer.
  TensorView wide = f.make({32}, DType::F32);
  TensorView even = wide;
  even.shape = {16};
  even.strides = {2};
  TensorView plain = f.make({16}, DType::F32);
  f.run(OpKind::Relu, {contig}, even);
  f.run(OpKind::Relu, {contig}, plain);
  REQUIRE(f.read(even) == f.read(plain));
}

TEST_CASE("zero-extent elementwise outputs are no-ops") {
  Fixture f;
  TensorView in = f.make({0, 5}, DType::F32);
  TensorView out = f.make({0, 5}, DType::F32);
  f.run(OpKind::Relu, {in}, out);
  f.run(OpKind::Gelu, {in}, out);
  CHECK(f.read(out).empty());
}

TEST_CASE("install_builtins: fixed ids, audit trail, registry naming") {
  BufferPool pool;
  OperatorTable table(64);
  install_builtins(table);

  CHECK(table.snapshot_version() == kNumBuiltinOps);
  const uint64_t v = table.snapshot_version();
  for (uint32_t i = 0; i < kNumBuiltinOps; ++i) {
    const OperatorEntry* e = nullptr;
    REQUIRE(table.lookup(v, i, &e) == ErrorCode::Ok);
    CHECK(is_builtin_id(i));
  }
  const OperatorEntry* e = nullptr;
  CHECK(table.lookup(v, kNumBuiltinOps, &e) == ErrorCode::NotInstalled);
  CHECK(table.lookup(v, kFirstInjectedId, &e) == ErrorCode::NotInstalled);
  CHECK_FALSE(is_builtin_id(kFirstInjectedId));

  const auto records = table.audit();
  REQUIRE(records.size() == kNumBuiltinOps);
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].template_name == "builtin");
    CHECK(records[i].op_id == i);
    CHECK(records[i].signature == op_kind_name(static_cast<OpKind>(i)));
  }

  // Dispatch through the table matches a direct kernel call.
  Fixture f;
  TensorView a = f.make_filled({4}, {1.0, -2.0, 3.0, -4.0}, DType::F32);
  TensorView out = f.make({4}, DType::F32);
  OpContext ctx;
  ctx.pool = &f.pool;
  std::vector<TensorView> ins{a};
  ctx.inputs = ins;
  ctx.output = &out;
  ctx.size = 4;
  const OperatorEntry* relu_entry = nullptr;
  REQUIRE(table.lookup(v, static_cast<uint64_t>(OpKind::Relu), &relu_entry) == ErrorCode::Ok);
  relu_entry->fn(ctx);
  CHECK(f.read(out) == std::vector<double>{1.0, 0.0, 3.0, 0.0});

  CHECK(std::string(op_kind_name(OpKind::KvAppend)) == "kv_append");
}
