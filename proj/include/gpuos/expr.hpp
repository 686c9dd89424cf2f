// Elementwise expression language for injected operators.
//
// Grammar:
//   expr  := term (('+'|'-') term)*
//   term  := unary (('*'|'/') unary)*
//   unary := '-' unary | atom
//   atom  := number | in<k> | $p<k> | func '(' expr (',' expr)? ')' | '(' expr ')'
//   funcs: exp, tanh, max, min, abs, sqrt
//
// The grammar is the whole sandbox: no loops, no state, no out-of-arity
// access survives parsing and verification.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "gpuos/errors.hpp"
#include "gpuos/tensor.hpp"

namespace gpuos {

enum class ExprKind : uint8_t {
  Const,
  In,
  Param,
  Neg,
  Add,
  Sub,
  Mul,
  Div,
  Exp,
  Tanh,
  Abs,
  Sqrt,
  Max,
  Min,
  Narrow,  // internal: round to a dtype at a fusion boundary; not parseable
};

struct Expr;
using ExprPtr = std::unique_ptr<Expr>;

struct Expr {
  ExprKind kind = ExprKind::Const;
  double value = 0.0;              // Const
  int index = 0;                   // In / Param
  DType narrow_dtype = DType::F64; // Narrow
  ExprPtr a;
  ExprPtr b;
};

inline ExprPtr make_const(double v) {
  auto e = std::make_unique<Expr>();
  e->kind = ExprKind::Const;
  e->value = v;
  return e;
}

inline ExprPtr make_in(int k) {
  auto e = std::make_unique<Expr>();
  e->kind = ExprKind::In;
  e->index = k;
  return e;
}

inline ExprPtr make_param(int k) {
  auto e = std::make_unique<Expr>();
  e->kind = ExprKind::Param;
  e->index = k;
  return e;
}

inline ExprPtr make_unary(ExprKind kind, ExprPtr a) {
  auto e = std::make_unique<Expr>();
  e->kind = kind;
  e->a = std::move(a);
  return e;
}

inline ExprPtr make_binary(ExprKind kind, ExprPtr a, ExprPtr b) {
  auto e = std::make_unique<Expr>();
  e->kind = kind;
  e->a = std::move(a);
  e->b = std::move(b);
  return e;
}

inline ExprPtr make_narrow(DType d, ExprPtr a) {
  auto e = std::make_unique<Expr>();
  e->kind = ExprKind::Narrow;
  e->narrow_dtype = d;
  e->a = std::move(a);
  return e;
}

inline ExprPtr clone(const Expr& e) {
  auto out = std::make_unique<Expr>();
  out->kind = e.kind;
  out->value = e.value;
  out->index = e.index;
  out->narrow_dtype = e.narrow_dtype;
  if (e.a) out->a = clone(*e.a);
  if (e.b) out->b = clone(*e.b);
  return out;
}

inline bool expr_equal(const Expr& x, const Expr& y) {
  if (x.kind != y.kind) return false;
  switch (x.kind) {
    case ExprKind::Const: return x.value == y.value;
    case ExprKind::In:
    case ExprKind::Param: return x.index == y.index;
    case ExprKind::Narrow:
      return x.narrow_dtype == y.narrow_dtype && expr_equal(*x.a, *y.a);
    default: break;
  }
  if (static_cast<bool>(x.a) != static_cast<bool>(y.a)) return false;
  if (static_cast<bool>(x.b) != static_cast<bool>(y.b)) return false;
  if (x.a && !expr_equal(*x.a, *y.a)) return false;
  if (x.b && !expr_equal(*x.b, *y.b)) return false;
  return true;
}

// Shared by the AST evaluator and the bytecode interpreter so both routes
// compute bit-identical results, including NaN propagation.
inline double binop_max(double a, double b) { return a < b ? b : a; }
inline double binop_min(double a, double b) { return b < a ? b : a; }

/// Recursive evaluation in double precision; this is the reference
/// semantics every compiled module must match exactly.
inline double eval_expr(const Expr& e, std::span<const double> inputs,
                        std::span<const double> params) {
  switch (e.kind) {
    case ExprKind::Const: return e.value;
    case ExprKind::In: return inputs[static_cast<size_t>(e.index)];
    case ExprKind::Param: return params[static_cast<size_t>(e.index)];
    case ExprKind::Neg: return -eval_expr(*e.a, inputs, params);
    case ExprKind::Add: return eval_expr(*e.a, inputs, params) + eval_expr(*e.b, inputs, params);
    case ExprKind::Sub: return eval_expr(*e.a, inputs, params) - eval_expr(*e.b, inputs, params);
    case ExprKind::Mul: return eval_expr(*e.a, inputs, params) * eval_expr(*e.b, inputs, params);
    case ExprKind::Div: return eval_expr(*e.a, inputs, params) / eval_expr(*e.b, inputs, params);
    case ExprKind::Exp: return std::exp(eval_expr(*e.a, inputs, params));
    case ExprKind::Tanh: return std::tanh(eval_expr(*e.a, inputs, params));
    case ExprKind::Abs: return std::fabs(eval_expr(*e.a, inputs, params));
    case ExprKind::Sqrt: return std::sqrt(eval_expr(*e.a, inputs, params));
    case ExprKind::Max:
      return binop_max(eval_expr(*e.a, inputs, params), eval_expr(*e.b, inputs, params));
    case ExprKind::Min:
      return binop_min(eval_expr(*e.a, inputs, params), eval_expr(*e.b, inputs, params));
    case ExprKind::Narrow: return narrow_to(e.narrow_dtype, eval_expr(*e.a, inputs, params));
  }
  return 0.0;
}

namespace detail {

class Parser {
 public:
  explicit Parser(std::string_view src) : src_(src) {}

  ExprPtr parse() {
    ExprPtr e = parse_expr();
    skip_ws();
    if (pos_ != src_.size()) fail("unexpected trailing input");
    return e;
  }

 private:
  ExprPtr parse_expr() {
    ExprPtr lhs = parse_term();
    for (;;) {
      skip_ws();
      if (accept('+')) {
        lhs = make_binary(ExprKind::Add, std::move(lhs), parse_term());
      } else if (accept('-')) {
        lhs = make_binary(ExprKind::Sub, std::move(lhs), parse_term());
      } else {
        return lhs;
      }
    }
  }

  ExprPtr parse_term() {
    ExprPtr lhs = parse_unary();
    for (;;) {
      skip_ws();
      if (accept('*')) {
        lhs = make_binary(ExprKind::Mul, std::move(lhs), parse_unary());
      } else if (accept('/')) {
        lhs = make_binary(ExprKind::Div, std::move(lhs), parse_unary());
      } else {
        return lhs;
      }
    }
  }

  ExprPtr parse_unary() {
    skip_ws();
    if (accept('-')) return make_unary(ExprKind::Neg, parse_unary());
    return parse_atom();
  }

  ExprPtr parse_atom() {
    skip_ws();
    if (pos_ >= src_.size()) fail("unexpected end of input");
    const char c = src_[pos_];

    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();

    if (c == '$') return parse_param();

    if (c == '(') {
      ++pos_;
      ExprPtr e = parse_expr();
      skip_ws();
      if (!accept(')')) fail("expected ')'");
      return e;
    }

    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_identifier();

    fail(std::string("unexpected character '") + c + "'");
    return nullptr;
  }

  ExprPtr parse_number() {
    const size_t start = pos_;
    while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    if (pos_ < src_.size() && src_[pos_] == '.') {
      ++pos_;
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    }
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      size_t save = pos_;
      ++pos_;
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
      if (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) {
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
      } else {
        pos_ = save;  // 'e' belongs to something else; not a valid exponent
      }
    }
    if (pos_ == start) fail("expected number");
    return make_const(std::strtod(std::string(src_.substr(start, pos_ - start)).c_str(), nullptr));
  }

  ExprPtr parse_param() {
    const size_t start = pos_;
    ++pos_;  // '$'
    if (pos_ >= src_.size() || src_[pos_] != 'p') fail("expected 'p' after '$'");
    ++pos_;
    const size_t digits = pos_;
    while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    if (pos_ == digits) fail("expected parameter index after '$p'");
    const long k = std::strtol(std::string(src_.substr(digits, pos_ - digits)).c_str(), nullptr, 10);
    if (k < 0 || k >= static_cast<long>(kMaxScalarParams)) {
      throw Error(ErrorCode::UnknownIdentifier,
                  "parameter " + std::string(src_.substr(start, pos_ - start)) +
                      " out of range at " + std::to_string(start));
    }
    return make_param(static_cast<int>(k));
  }

  ExprPtr parse_identifier() {
    const size_t start = pos_;
    while (pos_ < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[pos_])) ||
                                  src_[pos_] == '_')) {
      ++pos_;
    }
    const std::string_view name = src_.substr(start, pos_ - start);

    if (name.size() > 2 && name.substr(0, 2) == "in") {
      bool all_digits = true;
      for (char d : name.substr(2)) all_digits &= std::isdigit(static_cast<unsigned char>(d)) != 0;
      if (all_digits) {
        const long k = std::strtol(std::string(name.substr(2)).c_str(), nullptr, 10);
        if (k < 0 || k >= static_cast<long>(kMaxExprInputs)) {
          throw Error(ErrorCode::UnknownIdentifier,
                      "input " + std::string(name) + " out of range at " + std::to_string(start));
        }
        return make_in(static_cast<int>(k));
      }
    }

    ExprKind fn;
    int arity;
    if (name == "exp") {
      fn = ExprKind::Exp, arity = 1;
    } else if (name == "tanh") {
      fn = ExprKind::Tanh, arity = 1;
    } else if (name == "abs") {
      fn = ExprKind::Abs, arity = 1;
    } else if (name == "sqrt") {
      fn = ExprKind::Sqrt, arity = 1;
    } else if (name == "max") {
      fn = ExprKind::Max, arity = 2;
    } else if (name == "min") {
      fn = ExprKind::Min, arity = 2;
    } else {
      throw Error(ErrorCode::UnknownIdentifier,
                  "unknown identifier '" + std::string(name) + "' at " + std::to_string(start));
    }

    skip_ws();
    if (!accept('(')) fail("expected '(' after function name");
    ExprPtr first = parse_expr();
    skip_ws();
    if (accept(',')) {
      ExprPtr second = parse_expr();
      skip_ws();
      if (!accept(')')) fail("expected ')'");
      if (arity != 2) {
        throw Error(ErrorCode::ArityError,
                    std::string(name) + " takes 1 argument, got 2, at " + std::to_string(start));
      }
      return make_binary(fn, std::move(first), std::move(second));
    }
    if (!accept(')')) fail("expected ')' or ','");
    if (arity != 1) {
      throw Error(ErrorCode::ArityError,
                  std::string(name) + " takes 2 arguments, got 1, at " + std::to_string(start));
    }
    return make_unary(fn, std::move(first));
  }

  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCode::SyntaxError, what + " at " + std::to_string(pos_));
  }

  std::string_view src_;
  size_t pos_ = 0;

 public:
  static constexpr size_t kMaxExprInputs = 4;
  static constexpr size_t kMaxScalarParams = 8;
};

}  // namespace detail

inline ExprPtr parse_expression(std::string_view source) {
  return detail::Parser(source).parse();
}

inline std::string expr_to_string(const Expr& e) {
  char buf[40];
  switch (e.kind) {
    case ExprKind::Const:
      std::snprintf(buf, sizeof(buf), "%.17g", e.value);
      return buf;
    case ExprKind::In: return "in" + std::to_string(e.index);
    case ExprKind::Param: return "$p" + std::to_string(e.index);
    case ExprKind::Neg: return "-" + expr_to_string(*e.a);
    case ExprKind::Add: return "(" + expr_to_string(*e.a) + " + " + expr_to_string(*e.b) + ")";
    case ExprKind::Sub: return "(" + expr_to_string(*e.a) + " - " + expr_to_string(*e.b) + ")";
    case ExprKind::Mul: return "(" + expr_to_string(*e.a) + " * " + expr_to_string(*e.b) + ")";
    case ExprKind::Div: return "(" + expr_to_string(*e.a) + " / " + expr_to_string(*e.b) + ")";
    case ExprKind::Exp: return "exp(" + expr_to_string(*e.a) + ")";
    case ExprKind::Tanh: return "tanh(" + expr_to_string(*e.a) + ")";
    case ExprKind::Abs: return "abs(" + expr_to_string(*e.a) + ")";
    case ExprKind::Sqrt: return "sqrt(" + expr_to_string(*e.a) + ")";
    case ExprKind::Max:
      return "max(" + expr_to_string(*e.a) + ", " + expr_to_string(*e.b) + ")";
    case ExprKind::Min:
      return "min(" + expr_to_string(*e.a) + ", " + expr_to_string(*e.b) + ")";
    case ExprKind::Narrow:
      // Debug form only; Narrow nodes are synthesized, never parsed.
      return std::string("narrow_") + dtype_name(e.narrow_dtype) + "(" + expr_to_string(*e.a) +
             ")";
  }
  return "?";
}

/// Fold every Param k to a constant; the basis of parameter substitution.
inline ExprPtr substitute_params(const Expr& e, std::span<const double> params) {
  if (e.kind == ExprKind::Param) return make_const(params[static_cast<size_t>(e.index)]);
  auto out = std::make_unique<Expr>();
  out->kind = e.kind;
  out->value = e.value;
  out->index = e.index;
  out->narrow_dtype = e.narrow_dtype;
  if (e.a) out->a = substitute_params(*e.a, params);
  if (e.b) out->b = substitute_params(*e.b, params);
  return out;
}

/// Replace every In k with a clone of `sub`; used when fusing a producer
/// expression into its consumer.
inline ExprPtr substitute_input(const Expr& e, int k, const Expr& sub) {
  if (e.kind == ExprKind::In && e.index == k) return clone(sub);
  auto out = std::make_unique<Expr>();
  out->kind = e.kind;
  out->value = e.value;
  out->index = e.index;
  out->narrow_dtype = e.narrow_dtype;
  if (e.a) out->a = substitute_input(*e.a, k, sub);
  if (e.b) out->b = substitute_input(*e.b, k, sub);
  return out;
}

/// Renumber In k to In mapping[k].
inline ExprPtr remap_inputs(const Expr& e, std::span<const int> mapping) {
  if (e.kind == ExprKind::In) return make_in(mapping[static_cast<size_t>(e.index)]);
  auto out = std::make_unique<Expr>();
  out->kind = e.kind;
  out->value = e.value;
  out->index = e.index;
  out->narrow_dtype = e.narrow_dtype;
  if (e.a) out->a = remap_inputs(*e.a, mapping);
  if (e.b) out->b = remap_inputs(*e.b, mapping);
  return out;
}

/// Replace every In k by rewrite(k) in a single pass. Unlike repeated
/// substitute_input calls this never revisits freshly inserted subtrees, so
/// source and target input index spaces may overlap.
inline ExprPtr rewrite_inputs(const Expr& e, const std::function<ExprPtr(int)>& rewrite) {
  if (e.kind == ExprKind::In) return rewrite(e.index);
  auto out = std::make_unique<Expr>();
  out->kind = e.kind;
  out->value = e.value;
  out->index = e.index;
  out->narrow_dtype = e.narrow_dtype;
  if (e.a) out->a = rewrite_inputs(*e.a, rewrite);
  if (e.b) out->b = rewrite_inputs(*e.b, rewrite);
  return out;
}

/// Largest In index referenced, or -1 when none.
inline int max_input_index(const Expr& e) {
  int m = e.kind == ExprKind::In ? e.index : -1;
  if (e.a) m = std::max(m, max_input_index(*e.a));
  if (e.b) m = std::max(m, max_input_index(*e.b));
  return m;
}

}  // namespace gpuos
