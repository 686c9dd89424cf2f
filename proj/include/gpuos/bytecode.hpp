// Stack-machine bytecode: the load target of the injection pipeline. An
// expression is lowered once, verified (exact stack bound, in-arity loads),
// and then interpreted per element by the loaded module callable.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gpuos/expr.hpp"
#include "gpuos/optable.hpp"
#include "gpuos/queue.hpp"
#include "gpuos/tensor.hpp"

namespace gpuos {

enum class OpCode : uint8_t {
  PushConst,
  LoadIn,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Tanh,
  Max,
  Min,
  Abs,
  Sqrt,
  Narrow,
  StoreOut,
};

struct Instr {
  OpCode op;
  int32_t k = 0;      // LoadIn index; Narrow dtype
  double value = 0;   // PushConst payload
};

using Bytecode = std::vector<Instr>;

inline const char* opcode_name(OpCode c) {
  switch (c) {
    case OpCode::PushConst: return "PUSH_CONST";
    case OpCode::LoadIn: return "LOAD_IN";
    case OpCode::Add: return "ADD";
    case OpCode::Sub: return "SUB";
    case OpCode::Mul: return "MUL";
    case OpCode::Div: return "DIV";
    case OpCode::Neg: return "NEG";
    case OpCode::Exp: return "EXP";
    case OpCode::Tanh: return "TANH";
    case OpCode::Max: return "MAX";
    case OpCode::Min: return "MIN";
    case OpCode::Abs: return "ABS";
    case OpCode::Sqrt: return "SQRT";
    case OpCode::Narrow: return "NARROW";
    case OpCode::StoreOut: return "STORE_OUT";
  }
  return "?";
}

namespace detail {

inline void emit(const Expr& e, std::span<const double> params, Bytecode& out) {
  switch (e.kind) {
    case ExprKind::Const:
      out.push_back({OpCode::PushConst, 0, e.value});
      return;
    case ExprKind::In:
      out.push_back({OpCode::LoadIn, e.index, 0});
      return;
    case ExprKind::Param:
      // Parameters are constant-folded at lowering; the signature carries
      // their values, so a module is specific to its bindings.
      if (static_cast<size_t>(e.index) >= params.size()) {
        throw Error(ErrorCode::VerifyError,
                    "parameter $p" + std::to_string(e.index) + " has no binding");
      }
      out.push_back({OpCode::PushConst, 0, params[static_cast<size_t>(e.index)]});
      return;
    case ExprKind::Neg:
      emit(*e.a, params, out);
      out.push_back({OpCode::Neg});
      return;
    case ExprKind::Exp:
      emit(*e.a, params, out);
      out.push_back({OpCode::Exp});
      return;
    case ExprKind::Tanh:
      emit(*e.a, params, out);
      out.push_back({OpCode::Tanh});
      return;
    case ExprKind::Abs:
      emit(*e.a, params, out);
      out.push_back({OpCode::Abs});
      return;
    case ExprKind::Sqrt:
      emit(*e.a, params, out);
      out.push_back({OpCode::Sqrt});
      return;
    case ExprKind::Narrow:
      emit(*e.a, params, out);
      out.push_back({OpCode::Narrow, static_cast<int32_t>(e.narrow_dtype)});
      return;
    case ExprKind::Add:
    case ExprKind::Sub:
    case ExprKind::Mul:
    case ExprKind::Div:
    case ExprKind::Max:
    case ExprKind::Min: {
      emit(*e.a, params, out);
      emit(*e.b, params, out);
      OpCode op = OpCode::Add;
      switch (e.kind) {
        case ExprKind::Sub: op = OpCode::Sub; break;
        case ExprKind::Mul: op = OpCode::Mul; break;
        case ExprKind::Div: op = OpCode::Div; break;
        case ExprKind::Max: op = OpCode::Max; break;
        case ExprKind::Min: op = OpCode::Min; break;
        default: break;
      }
      out.push_back({op});
      return;
    }
  }
}

}  // namespace detail

/// Lower an expression to bytecode with Param k folded to params[k]. The
/// program ends with exactly one STORE_OUT.
inline Bytecode lower(const Expr& ast, std::span<const double> params) {
  Bytecode out;
  detail::emit(ast, params, out);
  out.push_back({OpCode::StoreOut});
  return out;
}

inline constexpr int kMaxStackDepth = 256;

/// Static verification: stack-balanced, loads in-arity, single trailing
/// STORE_OUT. Returns the exact maximum stack depth.
inline int verify(const Bytecode& code, int arity) {
  if (code.empty() || code.back().op != OpCode::StoreOut) {
    throw Error(ErrorCode::VerifyError, "program must end with STORE_OUT");
  }
  int depth = 0;
  int max_depth = 0;
  for (size_t i = 0; i < code.size(); ++i) {
    const Instr& ins = code[i];
    switch (ins.op) {
      case OpCode::PushConst:
        ++depth;
        break;
      case OpCode::LoadIn:
        if (ins.k < 0 || ins.k >= arity) {
          throw Error(ErrorCode::VerifyError,
                      "LOAD_IN " + std::to_string(ins.k) + " outside arity " +
                          std::to_string(arity));
        }
        ++depth;
        break;
      case OpCode::Neg:
      case OpCode::Exp:
      case OpCode::Tanh:
      case OpCode::Abs:
      case OpCode::Sqrt:
      case OpCode::Narrow:
        if (depth < 1) throw Error(ErrorCode::VerifyError, "stack underflow at " + std::to_string(i));
        break;
      case OpCode::Add:
      case OpCode::Sub:
      case OpCode::Mul:
      case OpCode::Div:
      case OpCode::Max:
      case OpCode::Min:
        if (depth < 2) throw Error(ErrorCode::VerifyError, "stack underflow at " + std::to_string(i));
        --depth;
        break;
      case OpCode::StoreOut:
        if (i + 1 != code.size()) {
          throw Error(ErrorCode::VerifyError, "STORE_OUT before end at " + std::to_string(i));
        }
        if (depth != 1) {
          throw Error(ErrorCode::VerifyError,
                      "STORE_OUT with stack depth " + std::to_string(depth));
        }
        --depth;
        break;
    }
    if (depth > max_depth) max_depth = depth;
    if (max_depth > kMaxStackDepth) {
      throw Error(ErrorCode::VerifyError, "stack depth exceeds " + std::to_string(kMaxStackDepth));
    }
  }
  if (depth != 0) throw Error(ErrorCode::VerifyError, "unbalanced program");
  return max_depth;
}

/// One element through the program. `inputs` holds the already-loaded
/// operand values for this element.
inline double run_bytecode(const Bytecode& code, std::span<const double> inputs,
                           std::span<double> stack) {
  size_t sp = 0;
  for (const Instr& ins : code) {
    switch (ins.op) {
      case OpCode::PushConst: stack[sp++] = ins.value; break;
      case OpCode::LoadIn: stack[sp++] = inputs[static_cast<size_t>(ins.k)]; break;
      case OpCode::Add: --sp; stack[sp - 1] = stack[sp - 1] + stack[sp]; break;
      case OpCode::Sub: --sp; stack[sp - 1] = stack[sp - 1] - stack[sp]; break;
      case OpCode::Mul: --sp; stack[sp - 1] = stack[sp - 1] * stack[sp]; break;
      case OpCode::Div: --sp; stack[sp - 1] = stack[sp - 1] / stack[sp]; break;
      case OpCode::Neg: stack[sp - 1] = -stack[sp - 1]; break;
      case OpCode::Exp: stack[sp - 1] = std::exp(stack[sp - 1]); break;
      case OpCode::Tanh: stack[sp - 1] = std::tanh(stack[sp - 1]); break;
      case OpCode::Max: --sp; stack[sp - 1] = binop_max(stack[sp - 1], stack[sp]); break;
      case OpCode::Min: --sp; stack[sp - 1] = binop_min(stack[sp - 1], stack[sp]); break;
      case OpCode::Abs: stack[sp - 1] = std::fabs(stack[sp - 1]); break;
      case OpCode::Sqrt: stack[sp - 1] = std::sqrt(stack[sp - 1]); break;
      case OpCode::Narrow:
        stack[sp - 1] = narrow_to(static_cast<DType>(ins.k), stack[sp - 1]);
        break;
      case OpCode::StoreOut: return stack[--sp];
    }
  }
  return 0.0;  // unreachable for verified programs
}

}  // namespace gpuos
