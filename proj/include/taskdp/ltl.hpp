#pragma once
// Syntactically co-safe linear temporal logic over finite traces.
//
// Design notes
// ------------
// * Formula is an immutable value: a shared handle to a structurally hashed
//   node. Equality is structural, so formulas can be used directly as keys
//   in hash containers (progression closures, embedding caches).
// * Negation is restricted to propositions. The progression rules rely on
//   that normal form; both the parser and the constructors enforce it.
// * simplify() sorts commutative pairs by a total structural order and
//   drops subsumed branches, so the many equivalent shapes produced by
//   progression collapse to one representative.
// * progress() consumes one label and returns what still has to hold from
//   the next step on. A formula that progresses to the True literal has
//   been satisfied by the prefix consumed so far; False means no
//   continuation can satisfy it. evaluate() gives the direct finite-trace
//   semantics and serves as the independent oracle for progression.

#include <cstdint>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace taskdp::ltl {

enum class Op : std::uint8_t {
  True,
  False,
  Atom,
  Not,
  And,
  Or,
  Next,
  Eventually,
  Until,
};

// The set of propositions that hold in one state.
using Label = std::set<std::string>;

class Formula {
 public:
  // Default-constructed formulas are the True literal.
  Formula();

  static Formula truth();
  static Formula falsity();
  static Formula atom(std::string_view name);  // name must match [a-z][a-z0-9_]*
  static Formula negation(const Formula& f);   // f must be an atom
  static Formula conj(const Formula& l, const Formula& r);
  static Formula disj(const Formula& l, const Formula& r);
  static Formula next(const Formula& f);
  static Formula eventually(const Formula& f);
  static Formula until(const Formula& l, const Formula& r);

  Op op() const;
  bool is_true() const { return op() == Op::True; }
  bool is_false() const { return op() == Op::False; }
  bool is_terminal() const { return is_true() || is_false(); }

  // Atom name; valid only on Atom nodes (a Not node holds its atom in lhs()).
  const std::string& name() const;
  Formula lhs() const;  // unary operand, or left operand of And/Or/Until
  Formula rhs() const;

  std::size_t hash() const;
  // Maximum nesting depth of temporal operators (X, F, U); 0 if Boolean.
  int temporal_depth() const;
  std::size_t size() const;  // node count

  bool operator==(const Formula& other) const;
  bool operator!=(const Formula& other) const { return !(*this == other); }

  // Implementation node; defined in ltl.cpp only.
  struct Node;

 private:
  explicit Formula(std::shared_ptr<const Node> node);
  std::shared_ptr<const Node> node_;

  friend int compare(const Formula& a, const Formula& b);
};

// Total structural order (negative/zero/positive, strcmp-style). Used for
// the canonical ordering of commutative operands.
int compare(const Formula& a, const Formula& b);

struct FormulaHash {
  std::size_t operator()(const Formula& f) const { return f.hash(); }
};
using FormulaSet = std::unordered_set<Formula, FormulaHash>;

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t offset, const std::string& message);
  // Byte offset into the source text where the error was detected.
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ClosureOverflowError : public std::runtime_error {
 public:
  explicit ClosureOverflowError(std::size_t cap);
  std::size_t cap() const { return cap_; }

 private:
  std::size_t cap_;
};

// Grammar (lowest precedence first):
//   or     := and ('|' and)*
//   and    := until ('&' until)*
//   until  := unary ('U' until)?          right-associative
//   unary  := '!' IDENT | 'X' unary | 'F' unary | primary
//   primary:= 'true' | 'false' | IDENT | '(' or ')'
// IDENT matches [a-z][a-z0-9_]*. Throws ParseError with a byte offset.
Formula parse(std::string_view text);

// Inverse of parse up to whitespace: parse(format(f)) == f, with minimal
// parenthesization.
std::string format(const Formula& f);

// Sorted unique proposition names occurring in f.
std::vector<std::string> propositions(const Formula& f);

// Boolean absorption (True/False units, idempotence, subsumed branches) and
// canonical ordering of commutative pairs. Idempotent and semantics
// preserving.
Formula simplify(const Formula& f);

// One-step progression through `label`; the result is simplified.
Formula progress(const Formula& f, const Label& label);

// All formulas reachable from f (inclusive) by progressing over every
// subset of `alphabet`. Throws ClosureOverflowError if more than `cap`
// formulas appear; throws std::invalid_argument if the alphabet is too
// large to enumerate (over 20 propositions).
FormulaSet closure(const Formula& f, const std::vector<std::string>& alphabet,
                   std::size_t cap = 4096);

// Finite-trace satisfaction of f by `word`. Strong end-of-trace semantics:
// Next is false at the last position, and atoms (negated or not) are false
// past the end, so the empty word satisfies only the True literal.
bool evaluate(const Formula& f, const std::vector<Label>& word);

}  // namespace taskdp::ltl
