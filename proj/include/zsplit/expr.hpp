#pragma once

// Small expression language over a single variable `x`, used to define model
// coefficients from configuration files. Supports literals, + - * /, unary
// minus, parentheses, and the functions sin, cos, exp, sqr, sqrt, abs and
// clamp(e, lo, hi). Expressions can be differentiated symbolically.

#include <cctype>
#include <charconv>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace zsplit {

class ExprError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Expr {
 public:
  enum class Op {
    Const, Var, Neg, Add, Sub, Mul, Div,
    Sin, Cos, Exp, Sqr, Sqrt, Abs,
    Clamp,
    // internal: derivative helpers
    Sign,  // sign(a)
    Gate,  // a if lo < arg < hi else 0; args = {arg, lo, hi, a}
  };

  Expr() : Expr(0.0) {}
  Expr(double value) : node_(std::make_shared<Node>(Node{Op::Const, value, {}})) {}

  static Expr variable() { return Expr(std::make_shared<Node>(Node{Op::Var, 0.0, {}})); }

  static Expr parse(std::string_view text);

  double operator()(double x) const { return eval(*node_, x); }

  Expr derivative() const;

  bool is_constant() const { return node_->op == Op::Const; }
  double constant_value() const { return node_->value; }

  std::string str() const { return print(*node_); }

  friend Expr operator+(const Expr& a, const Expr& b) { return make(Op::Add, {a, b}); }
  friend Expr operator-(const Expr& a, const Expr& b) { return make(Op::Sub, {a, b}); }
  friend Expr operator*(const Expr& a, const Expr& b) { return make(Op::Mul, {a, b}); }
  friend Expr operator/(const Expr& a, const Expr& b) { return make(Op::Div, {a, b}); }
  friend Expr operator-(const Expr& a) { return make(Op::Neg, {a}); }

  static Expr make(Op op, std::vector<Expr> args);

 private:
  struct Node {
    Op op;
    double value;
    std::vector<Expr> args;
  };

  explicit Expr(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

  static double eval(const Node& n, double x);
  static std::string print(const Node& n);

  std::shared_ptr<const Node> node_;

  friend class ExprParser;
};

namespace detail {

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline Expr Expr::make(Op op, std::vector<Expr> args) {
  // constant folding keeps derivatives readable
  bool all_const = !args.empty();
  for (const auto& a : args) all_const = all_const && a.is_constant();
  if (all_const) {
    auto tmp = std::make_shared<Node>(Node{op, 0.0, args});
    return Expr(eval(*tmp, 0.0));
  }
  auto is = [](const Expr& e, double v) { return e.is_constant() && e.constant_value() == v; };
  switch (op) {
    case Op::Add:
      if (is(args[0], 0.0)) return args[1];
      if (is(args[1], 0.0)) return args[0];
      break;
    case Op::Sub:
      if (is(args[1], 0.0)) return args[0];
      if (is(args[0], 0.0)) return make(Op::Neg, {args[1]});
      break;
    case Op::Mul:
      if (is(args[0], 0.0) || is(args[1], 0.0)) return Expr(0.0);
      if (is(args[0], 1.0)) return args[1];
      if (is(args[1], 1.0)) return args[0];
      break;
    case Op::Div:
      if (is(args[0], 0.0)) return Expr(0.0);
      if (is(args[1], 1.0)) return args[0];
      break;
    case Op::Gate:
      if (is(args[3], 0.0)) return Expr(0.0);
      break;
    default:
      break;
  }
  return Expr(std::make_shared<Node>(Node{op, 0.0, std::move(args)}));
}

inline double Expr::eval(const Node& n, double x) {
  auto arg = [&](std::size_t i) { return eval(*n.args[i].node_, x); };
  switch (n.op) {
    case Op::Const: return n.value;
    case Op::Var: return x;
    case Op::Neg: return -arg(0);
    case Op::Add: return arg(0) + arg(1);
    case Op::Sub: return arg(0) - arg(1);
    case Op::Mul: return arg(0) * arg(1);
    case Op::Div: return arg(0) / arg(1);
    case Op::Sin: return std::sin(arg(0));
    case Op::Cos: return std::cos(arg(0));
    case Op::Exp: return std::exp(arg(0));
    case Op::Sqr: { double a = arg(0); return a * a; }
    case Op::Sqrt: return std::sqrt(arg(0));
    case Op::Abs: return std::abs(arg(0));
    case Op::Clamp: {
      double a = arg(0), lo = arg(1), hi = arg(2);
      return a < lo ? lo : (a > hi ? hi : a);
    }
    case Op::Sign: { double a = arg(0); return a > 0 ? 1.0 : (a < 0 ? -1.0 : 0.0); }
    case Op::Gate: {
      double a = arg(0), lo = arg(1), hi = arg(2);
      return (a > lo && a < hi) ? arg(3) : 0.0;
    }
  }
  return 0.0;
}

inline Expr Expr::derivative() const {
  const Node& n = *node_;
  const auto& a = n.args;
  switch (n.op) {
    case Op::Const: return Expr(0.0);
    case Op::Var: return Expr(1.0);
    case Op::Neg: return -a[0].derivative();
    case Op::Add: return a[0].derivative() + a[1].derivative();
    case Op::Sub: return a[0].derivative() - a[1].derivative();
    case Op::Mul: return a[0].derivative() * a[1] + a[0] * a[1].derivative();
    case Op::Div:
      return (a[0].derivative() * a[1] - a[0] * a[1].derivative()) / make(Op::Sqr, {a[1]});
    case Op::Sin: return make(Op::Cos, {a[0]}) * a[0].derivative();
    case Op::Cos: return -(make(Op::Sin, {a[0]}) * a[0].derivative());
    case Op::Exp: return make(Op::Exp, {a[0]}) * a[0].derivative();
    case Op::Sqr: return Expr(2.0) * a[0] * a[0].derivative();
    case Op::Sqrt: return a[0].derivative() / (Expr(2.0) * make(Op::Sqrt, {a[0]}));
    case Op::Abs: return make(Op::Sign, {a[0]}) * a[0].derivative();
    case Op::Clamp:
      // bounds are treated as constants in x
      return make(Op::Gate, {a[0], a[1], a[2], a[0].derivative()});
    case Op::Sign: return Expr(0.0);
    case Op::Gate:
      return make(Op::Gate, {a[0], a[1], a[2], a[3].derivative()});
  }
  return Expr(0.0);
}

inline std::string Expr::print(const Node& n) {
  const auto& a = n.args;
  auto fn = [&](const char* name) {
    std::string s = std::string(name) + "(";
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (i) s += ", ";
      s += a[i].str();
    }
    return s + ")";
  };
  switch (n.op) {
    case Op::Const: return detail::format_number(n.value);
    case Op::Var: return "x";
    case Op::Neg: return "(-" + a[0].str() + ")";
    case Op::Add: return "(" + a[0].str() + " + " + a[1].str() + ")";
    case Op::Sub: return "(" + a[0].str() + " - " + a[1].str() + ")";
    case Op::Mul: return "(" + a[0].str() + " * " + a[1].str() + ")";
    case Op::Div: return "(" + a[0].str() + " / " + a[1].str() + ")";
    case Op::Sin: return fn("sin");
    case Op::Cos: return fn("cos");
    case Op::Exp: return fn("exp");
    case Op::Sqr: return fn("sqr");
    case Op::Sqrt: return fn("sqrt");
    case Op::Abs: return fn("abs");
    case Op::Clamp: return fn("clamp");
    case Op::Sign: return fn("sign");
    case Op::Gate: return fn("gate");
  }
  return "?";
}

// Recursive-descent parser:
//   expr   := term (('+'|'-') term)*
//   term   := unary (('*'|'/') unary)*
//   unary  := '-' unary | primary
//   primary:= number | 'x' | ident '(' expr (',' expr)* ')' | '(' expr ')'
class ExprParser {
 public:
  explicit ExprParser(std::string_view text) : s_(text) {}

  Expr parse() {
    Expr e = expr();
    skip_ws();
    if (pos_ != s_.size()) fail("unexpected trailing input");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ExprError("expression '" + std::string(s_) + "': " + what + " at position " +
                    std::to_string(pos_));
  }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  Expr expr() {
    Expr lhs = term();
    for (;;) {
      if (accept('+')) lhs = Expr::make(Expr::Op::Add, {lhs, term()});
      else if (accept('-')) lhs = Expr::make(Expr::Op::Sub, {lhs, term()});
      else return lhs;
    }
  }

  Expr term() {
    Expr lhs = unary();
    for (;;) {
      if (accept('*')) lhs = Expr::make(Expr::Op::Mul, {lhs, unary()});
      else if (accept('/')) lhs = Expr::make(Expr::Op::Div, {lhs, unary()});
      else return lhs;
    }
  }

  Expr unary() {
    if (accept('-')) return Expr::make(Expr::Op::Neg, {unary()});
    if (accept('+')) return unary();
    return primary();
  }

  Expr primary() {
    skip_ws();
    if (pos_ >= s_.size()) fail("unexpected end of input");
    char c = s_[pos_];
    if (c == '(') {
      ++pos_;
      Expr e = expr();
      if (!accept(')')) fail("expected ')'");
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      double v = 0.0;
      auto res = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), v);
      if (res.ec != std::errc()) fail("malformed number");
      pos_ = static_cast<std::size_t>(res.ptr - s_.data());
      return Expr(v);
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      std::size_t start = pos_;
      while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_'))
        ++pos_;
      std::string_view name = s_.substr(start, pos_ - start);
      if (name == "x") return Expr::variable();
      if (name == "pi") return Expr(3.14159265358979323846);
      struct Fn { std::string_view name; Expr::Op op; std::size_t arity; };
      static constexpr Fn fns[] = {
          {"sin", Expr::Op::Sin, 1},   {"cos", Expr::Op::Cos, 1},   {"exp", Expr::Op::Exp, 1},
          {"sqr", Expr::Op::Sqr, 1},   {"sqrt", Expr::Op::Sqrt, 1}, {"abs", Expr::Op::Abs, 1},
          {"clamp", Expr::Op::Clamp, 3},
      };
      for (const auto& f : fns) {
        if (f.name != name) continue;
        if (!accept('(')) fail("expected '(' after " + std::string(name));
        std::vector<Expr> args{expr()};
        while (accept(',')) args.push_back(expr());
        if (!accept(')')) fail("expected ')'");
        if (args.size() != f.arity)
          fail(std::string(name) + " takes " + std::to_string(f.arity) + " argument(s)");
        if (f.op == Expr::Op::Clamp && !(args[1].is_constant() && args[2].is_constant()))
          fail("clamp bounds must be constants");
        return Expr::make(f.op, std::move(args));
      }
      fail("unknown identifier '" + std::string(name) + "'");
    }
    fail(std::string("unexpected character '") + c + "'");
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline Expr Expr::parse(std::string_view text) { return ExprParser(text).parse(); }

}  // namespace zsplit
