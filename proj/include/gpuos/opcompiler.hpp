// Operator injection pipeline: template text is parameter-substituted,
// parsed, lowered to verified bytecode, and loaded as a module callable.
// Modules are cached by signature (template, parameter values, dtype,
// arity); compilation is single-flight per signature.
#pragma once

#include <array>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <future>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gpuos/bytecode.hpp"
#include "gpuos/expr.hpp"
#include "gpuos/optable.hpp"

namespace gpuos {

struct OperatorTemplate {
  std::string name;
  std::string source;
  int arity = 1;
};

struct OperatorSignature {
  std::string template_name;
  std::array<double, kMaxScalars> params{};  // unused slots stay 0
  DType dtype = DType::F32;
  int arity = 0;

  bool operator==(const OperatorSignature&) const = default;
};

/// Canonical text form; cache key and audit-log signature field.
inline std::string signature_key(const OperatorSignature& s) {
  std::string key = s.template_name + "|";
  char buf[40];
  for (size_t i = 0; i < s.params.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", s.params[i]);
    key += buf;
    key += i + 1 < s.params.size() ? ',' : '|';
  }
  key += dtype_name(s.dtype);
  key += '|';
  key += std::to_string(s.arity);
  return key;
}

struct CompiledModule {
  Bytecode bytecode;
  std::string entry;
  int max_stack = 0;
  OperatorSignature signature;
  ExprPtr folded_ast;  // params already folded; reused when composing fusions
};

using ModulePtr = std::shared_ptr<const CompiledModule>;

/// Resolve a verified module into an elementwise callable: broadcast the
/// inputs to the output shape and run the program once per element. Valid
/// for the process lifetime.
inline OpFn load_module(ModulePtr m) {
  if (!m) throw Error(ErrorCode::VerifyError, "null module");
  return [m](const OpContext& ctx) {
    const auto& sig = m->signature;
    if (static_cast<int>(ctx.inputs.size()) != sig.arity) {
      throw Error(ErrorCode::ArityError, m->entry + ": expected " + std::to_string(sig.arity) +
                                             " inputs, got " + std::to_string(ctx.inputs.size()));
    }
    const TensorView& out = *ctx.output;
    if (out.dtype != sig.dtype) {
      throw Error(ErrorCode::DTypeMismatch, m->entry + ": module dtype " +
                                                dtype_name(sig.dtype) + " vs output " +
                                                dtype_name(out.dtype));
    }
    const int64_t n = out.numel();
    if (n == 0) return;

    std::array<TensorView, kMaxInputs> bviews;
    std::array<BoundView, kMaxInputs> bound;
    std::array<const TensorView*, kMaxInputs + 1> operands;
    bool fast = out.is_contiguous();
    for (int i = 0; i < sig.arity; ++i) {
      if (ctx.inputs[i].dtype != out.dtype) {
        throw Error(ErrorCode::DTypeMismatch, m->entry + ": mixed operand dtypes");
      }
      bviews[i] = broadcast_view(ctx.inputs[i], out.shape);
      bound[i] = BoundView(*ctx.pool, bviews[i]);
      operands[i] = &bviews[i];
      fast = fast && bviews[i].strides == out.strides && bviews[i].offset == 0;
    }
    operands[sig.arity] = &out;
    BoundView out_bound(*ctx.pool, out);

    double stack[kMaxStackDepth];
    double in_vals[kMaxInputs];

    if (fast && out.offset == 0) {
      for (int64_t e = 0; e < n; ++e) {
        for (int i = 0; i < sig.arity; ++i) in_vals[i] = bound[i].load(e);
        out_bound.store(e, run_bytecode(m->bytecode, {in_vals, static_cast<size_t>(sig.arity)},
                                        stack));
      }
      return;
    }

    IndexIterator it(out.shape, {operands.data(), static_cast<size_t>(sig.arity) + 1});
    for (int64_t e = 0; e < n; ++e, it.next()) {
      for (int i = 0; i < sig.arity; ++i) in_vals[i] = bound[i].load(it.offset(i));
      out_bound.store(it.offset(sig.arity),
                      run_bytecode(m->bytecode, {in_vals, static_cast<size_t>(sig.arity)}, stack));
    }
  };
}

/// Signature-keyed module cache. A signature compiles at most once per
/// process; concurrent first requests share one compilation, and a failed
/// compile is cached as the failure it raised.
class ModuleCache {
 public:
  ModulePtr compile_or_get(const OperatorTemplate& tmpl, std::span<const double> params,
                           DType dtype) {
    OperatorSignature sig;
    sig.template_name = tmpl.name;
    for (size_t i = 0; i < params.size() && i < sig.params.size(); ++i) sig.params[i] = params[i];
    sig.dtype = dtype;
    sig.arity = tmpl.arity;
    return compile_or_get_ast(sig, [&tmpl, &sig] {
      ExprPtr ast = parse_expression(tmpl.source);
      return substitute_params(*ast, sig.params);
    });
  }

  /// Generic entry point: `build` returns a parameter-free expression for
  /// the signature. Used directly by fused composites.
  ModulePtr compile_or_get_ast(const OperatorSignature& sig,
                               const std::function<ExprPtr()>& build) {
    const std::string key = signature_key(sig);
    std::shared_future<ModulePtr> fut;
    std::promise<ModulePtr> mine;
    bool miss = false;
    {
      std::lock_guard lock(mu_);
      auto it = map_.find(key);
      if (it == map_.end()) {
        fut = mine.get_future().share();
        map_.emplace(key, fut);
        miss = true;
      } else {
        fut = it->second;
      }
    }
    if (miss) {
      misses_.fetch_add(1, std::memory_order_relaxed);
      compiles_.fetch_add(1, std::memory_order_relaxed);
      try {
        mine.set_value(compile(sig, build()));
      } catch (...) {
        mine.set_exception(std::current_exception());
      }
    } else {
      hits_.fetch_add(1, std::memory_order_relaxed);
    }
    return fut.get();
  }

  uint64_t hits() const { return hits_.load(std::memory_order_relaxed); }
  uint64_t misses() const { return misses_.load(std::memory_order_relaxed); }
  uint64_t compiles() const { return compiles_.load(std::memory_order_relaxed); }

 private:
  ModulePtr compile(const OperatorSignature& sig, ExprPtr folded) {
    auto m = std::make_shared<CompiledModule>();
    m->signature = sig;
    m->bytecode = lower(*folded, {});
    m->max_stack = verify(m->bytecode, sig.arity);
    m->folded_ast = std::move(folded);
    m->entry = "gpuos_" + sig.template_name + "_" +
               std::to_string(detail::fnv1a(signature_key(sig).data(), signature_key(sig).size()));
    return m;
  }

  std::mutex mu_;
  std::unordered_map<std::string, std::shared_future<ModulePtr>> map_;
  std::atomic<uint64_t> hits_{0};
  std::atomic<uint64_t> misses_{0};
  std::atomic<uint64_t> compiles_{0};
};

/// Named template set. Templates are validated on add: the source must
/// parse and reference only inputs below the declared arity. Populate at
/// startup, then share freely: const access is safe once writes stop.
class TemplateRegistry {
 public:
  void add(OperatorTemplate t) {
    if (t.arity < 0 || t.arity > static_cast<int>(kMaxInputs)) {
      throw Error(ErrorCode::ArityError,
                  "template " + t.name + " arity " + std::to_string(t.arity) + " out of range");
    }
    ExprPtr ast = parse_expression(t.source);
    if (max_input_index(*ast) >= t.arity) {
      throw Error(ErrorCode::ArityError, "template " + t.name + " references in" +
                                             std::to_string(max_input_index(*ast)) +
                                             " beyond arity " + std::to_string(t.arity));
    }
    templates_[t.name] = std::move(t);
  }

  OperatorTemplate get(const std::string& name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) {
      throw Error(ErrorCode::UnknownIdentifier, "no template named '" + name + "'");
    }
    return it->second;
  }

  bool contains(const std::string& name) const { return templates_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : templates_) out.push_back(name);
    return out;
  }

  /// Block format, one template per block:
  ///   template <name> arity <k>
  ///   expr: <source>
  /// Blank lines separate blocks; '#' starts a comment line.
  void load_stream(std::istream& is) {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string trimmed = trim(line);
      if (trimmed.empty() || trimmed[0] == '#') continue;

      std::istringstream head(trimmed);
      std::string kw, name, arity_kw;
      int arity = 0;
      head >> kw >> name >> arity_kw >> arity;
      if (kw != "template" || arity_kw != "arity" || head.fail()) {
        throw Error(ErrorCode::SyntaxError,
                    "expected 'template <name> arity <k>' at line " + std::to_string(lineno));
      }

      std::string expr_line;
      if (!std::getline(is, expr_line)) {
        throw Error(ErrorCode::SyntaxError,
                    "missing 'expr:' line after template " + name);
      }
      ++lineno;
      const std::string etrimmed = trim(expr_line);
      if (etrimmed.rfind("expr:", 0) != 0) {
        throw Error(ErrorCode::SyntaxError,
                    "expected 'expr: <source>' at line " + std::to_string(lineno));
      }
      OperatorTemplate t;
      t.name = name;
      t.arity = arity;
      t.source = trim(etrimmed.substr(5));
      add(std::move(t));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::IoError, "cannot open template file " + path);
    load_stream(f);
  }

  /// Shipped template set; exercises every opcode of the bytecode machine.
  static TemplateRegistry with_defaults() {
    TemplateRegistry r;
    r.add({"scale_add", "in0 * $p0 + $p1", 1});
    r.add({"clamp", "min(max(in0, $p0), $p1)", 1});
    r.add({"sigmoid", "1 / (1 + exp(-in0))", 1});
    r.add({"silu", "in0 / (1 + exp(-in0))", 1});
    r.add({"leaky_relu", "max(in0, 0) + $p0 * min(in0, 0)", 1});
    r.add({"tanh_gate", "tanh(in0) * in1", 2});
    r.add({"abs_diff", "abs(in0 - in1)", 2});
    r.add({"fma", "in0 * in1 + in2", 3});
    r.add({"inv_sqrt_scale", "in0 / sqrt($p0 + in0 * in0)", 1});
    return r;
  }

 private:
  static std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, OperatorTemplate> templates_;
};

}  // namespace gpuos
