#include "taskdp/ltl.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace taskdp::ltl {

// ═══════════════════════════════════════════════════════════════════════════
// Formula nodes
// ═══════════════════════════════════════════════════════════════════════════

struct Formula::Node {
  Op op;
  std::string name;  // Atom only
  std::shared_ptr<const Node> a;
  std::shared_ptr<const Node> b;
  std::size_t hash = 0;
  int tdepth = 0;
  std::uint32_t size = 1;
};

namespace {

inline std::size_t hash_combine(std::size_t seed, std::size_t v) {
  return seed ^ (v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
}

using NodePtr = std::shared_ptr<const Formula::Node>;

NodePtr make_node(Op op, std::string name, NodePtr a, NodePtr b) {
  auto n = std::make_shared<Formula::Node>();
  n->op = op;
  n->name = std::move(name);
  n->a = std::move(a);
  n->b = std::move(b);

  std::size_t h = hash_combine(0x51ab7cd1u, static_cast<std::size_t>(op));
  h = hash_combine(h, std::hash<std::string>{}(n->name));
  int child_depth = 0;
  std::uint32_t sz = 1;
  if (n->a) {
    h = hash_combine(h, n->a->hash);
    child_depth = std::max(child_depth, n->a->tdepth);
    sz += n->a->size;
  }
  if (n->b) {
    h = hash_combine(h, n->b->hash);
    child_depth = std::max(child_depth, n->b->tdepth);
    sz += n->b->size;
  }
  const bool temporal = op == Op::Next || op == Op::Eventually || op == Op::Until;
  n->tdepth = child_depth + (temporal ? 1 : 0);
  n->hash = h;
  n->size = sz;
  return n;
}

const NodePtr& true_node() {
  static const NodePtr n = make_node(Op::True, "", nullptr, nullptr);
  return n;
}

const NodePtr& false_node() {
  static const NodePtr n = make_node(Op::False, "", nullptr, nullptr);
  return n;
}

bool valid_proposition_name(std::string_view s) {
  // "true" and "false" are literals in the grammar, so a proposition with
  // either name could not survive a format/parse round trip.
  if (s == "true" || s == "false") return false;
  if (s.empty() || s[0] < 'a' || s[0] > 'z') return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
  });
}

bool node_equal(const Formula::Node* x, const Formula::Node* y) {
  if (x == y) return true;
  if (x->hash != y->hash || x->op != y->op || x->name != y->name) return false;
  if ((x->a == nullptr) != (y->a == nullptr)) return false;
  if ((x->b == nullptr) != (y->b == nullptr)) return false;
  if (x->a && !node_equal(x->a.get(), y->a.get())) return false;
  if (x->b && !node_equal(x->b.get(), y->b.get())) return false;
  return true;
}

int node_compare(const Formula::Node* x, const Formula::Node* y) {
  if (x == y) return 0;
  if (x->op != y->op) {
    return static_cast<int>(x->op) < static_cast<int>(y->op) ? -1 : 1;
  }
  if (int c = x->name.compare(y->name); c != 0) return c < 0 ? -1 : 1;
  const bool xa = x->a != nullptr, ya = y->a != nullptr;
  if (xa != ya) return xa ? 1 : -1;
  if (xa) {
    if (int c = node_compare(x->a.get(), y->a.get()); c != 0) return c;
  }
  const bool xb = x->b != nullptr, yb = y->b != nullptr;
  if (xb != yb) return xb ? 1 : -1;
  if (xb) {
    if (int c = node_compare(x->b.get(), y->b.get()); c != 0) return c;
  }
  return 0;
}

}  // namespace

Formula::Formula() : node_(true_node()) {}
Formula::Formula(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

Formula Formula::truth() { return Formula(true_node()); }
Formula Formula::falsity() { return Formula(false_node()); }

Formula Formula::atom(std::string_view name) {
  if (!valid_proposition_name(name)) {
    throw std::invalid_argument("invalid proposition name: '" + std::string(name) + "'");
  }
  return Formula(make_node(Op::Atom, std::string(name), nullptr, nullptr));
}

Formula Formula::negation(const Formula& f) {
  if (f.op() != Op::Atom) {
    throw std::invalid_argument("negation is only permitted on propositions");
  }
  return Formula(make_node(Op::Not, "", f.node_, nullptr));
}

Formula Formula::conj(const Formula& l, const Formula& r) {
  return Formula(make_node(Op::And, "", l.node_, r.node_));
}

Formula Formula::disj(const Formula& l, const Formula& r) {
  return Formula(make_node(Op::Or, "", l.node_, r.node_));
}

Formula Formula::next(const Formula& f) {
  return Formula(make_node(Op::Next, "", f.node_, nullptr));
}

Formula Formula::eventually(const Formula& f) {
  return Formula(make_node(Op::Eventually, "", f.node_, nullptr));
}

Formula Formula::until(const Formula& l, const Formula& r) {
  return Formula(make_node(Op::Until, "", l.node_, r.node_));
}

Op Formula::op() const { return node_->op; }

const std::string& Formula::name() const {
  if (node_->op != Op::Atom) {
    throw std::logic_error("name() called on a non-atom formula");
  }
  return node_->name;
}

Formula Formula::lhs() const {
  if (!node_->a) throw std::logic_error("lhs() called on a leaf formula");
  return Formula(node_->a);
}

Formula Formula::rhs() const {
  if (!node_->b) throw std::logic_error("rhs() called on a formula without a right operand");
  return Formula(node_->b);
}

std::size_t Formula::hash() const { return node_->hash; }
int Formula::temporal_depth() const { return node_->tdepth; }
std::size_t Formula::size() const { return node_->size; }

bool Formula::operator==(const Formula& other) const {
  return node_equal(node_.get(), other.node_.get());
}

int compare(const Formula& a, const Formula& b) {
  return node_compare(a.node_.get(), b.node_.get());
}

// ═══════════════════════════════════════════════════════════════════════════
// Parsing
// ═══════════════════════════════════════════════════════════════════════════

ParseError::ParseError(std::size_t offset, const std::string& message)
    : std::runtime_error("syntax error at byte " + std::to_string(offset) + ": " + message),
      offset_(offset) {}

ClosureOverflowError::ClosureOverflowError(std::size_t cap)
    : std::runtime_error("progression closure exceeds cap of " + std::to_string(cap) +
                         " formulas"),
      cap_(cap) {}

namespace {

struct Token {
  enum Kind {
    LParen,
    RParen,
    AndOp,
    OrOp,
    NotOp,
    NextOp,
    EventuallyOp,
    UntilOp,
    TrueLit,
    FalseLit,
    Ident,
    End,
  };
  Kind kind;
  std::string text;
  std::size_t offset;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  Token next() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    const std::size_t at = pos_;
    if (pos_ >= src_.size()) return {Token::End, "", at};
    const char c = src_[pos_];
    switch (c) {
      case '(': ++pos_; return {Token::LParen, "(", at};
      case ')': ++pos_; return {Token::RParen, ")", at};
      case '&': ++pos_; return {Token::AndOp, "&", at};
      case '|': ++pos_; return {Token::OrOp, "|", at};
      case '!': ++pos_; return {Token::NotOp, "!", at};
      case 'X': ++pos_; return {Token::NextOp, "X", at};
      case 'F': ++pos_; return {Token::EventuallyOp, "F", at};
      case 'U': ++pos_; return {Token::UntilOp, "U", at};
      default: break;
    }
    if (c >= 'a' && c <= 'z') {
      std::size_t end = pos_;
      while (end < src_.size()) {
        const char d = src_[end];
        if ((d >= 'a' && d <= 'z') || (d >= '0' && d <= '9') || d == '_') {
          ++end;
        } else {
          break;
        }
      }
      std::string word(src_.substr(pos_, end - pos_));
      pos_ = end;
      if (word == "true") return {Token::TrueLit, word, at};
      if (word == "false") return {Token::FalseLit, word, at};
      return {Token::Ident, word, at};
    }
    throw ParseError(at, std::string("unexpected character '") + c + "'");
  }

 private:
  std::string_view src_;
  std::size_t pos_ = 0;
};

class Parser {
 public:
  explicit Parser(std::string_view src) : lexer_(src) { advance(); }

  Formula parse_all() {
    Formula f = parse_or();
    if (cur_.kind != Token::End) {
      throw ParseError(cur_.offset, "unexpected trailing input '" + cur_.text + "'");
    }
    return f;
  }

 private:
  void advance() { cur_ = lexer_.next(); }

  Formula parse_or() {
    Formula f = parse_and();
    while (cur_.kind == Token::OrOp) {
      advance();
      f = Formula::disj(f, parse_and());
    }
    return f;
  }

  Formula parse_and() {
    Formula f = parse_until();
    while (cur_.kind == Token::AndOp) {
      advance();
      f = Formula::conj(f, parse_until());
    }
    return f;
  }

  Formula parse_until() {
    Formula f = parse_unary();
    if (cur_.kind == Token::UntilOp) {
      advance();
      return Formula::until(f, parse_until());
    }
    return f;
  }

  Formula parse_unary() {
    switch (cur_.kind) {
      case Token::NotOp: {
        advance();
        if (cur_.kind != Token::Ident) {
          throw ParseError(cur_.offset, "negation is only permitted on propositions");
        }
        Formula a = Formula::atom(cur_.text);
        advance();
        return Formula::negation(a);
      }
      case Token::NextOp:
        advance();
        return Formula::next(parse_unary());
      case Token::EventuallyOp:
        advance();
        return Formula::eventually(parse_unary());
      default:
        return parse_primary();
    }
  }

  Formula parse_primary() {
    switch (cur_.kind) {
      case Token::TrueLit:
        advance();
        return Formula::truth();
      case Token::FalseLit:
        advance();
        return Formula::falsity();
      case Token::Ident: {
        Formula a = Formula::atom(cur_.text);
        advance();
        return a;
      }
      case Token::LParen: {
        advance();
        Formula f = parse_or();
        if (cur_.kind != Token::RParen) {
          throw ParseError(cur_.offset, "expected ')'");
        }
        advance();
        return f;
      }
      case Token::End:
        throw ParseError(cur_.offset, "unexpected end of input");
      default:
        throw ParseError(cur_.offset, "unexpected token '" + cur_.text + "'");
    }
  }

  Lexer lexer_;
  Token cur_{Token::End, "", 0};
};

}  // namespace

Formula parse(std::string_view text) { return Parser(text).parse_all(); }

// ═══════════════════════════════════════════════════════════════════════════
// Formatting
// ═══════════════════════════════════════════════════════════════════════════

namespace {

// Precedence levels: Or < And < Until < unary < leaf.
int precedence(Op op) {
  switch (op) {
    case Op::Or: return 1;
    case Op::And: return 2;
    case Op::Until: return 3;
    case Op::Not:
    case Op::Next:
    case Op::Eventually: return 4;
    default: return 5;
  }
}

void format_rec(const Formula& f, std::string& out);

// Appends the child, parenthesized when its precedence demands it.
// `need_parens_at_eq` handles associativity: the right operand of the
// left-associative & and |, and the left operand of the right-associative U.
void format_child(const Formula& child, int parent_prec, bool need_parens_at_eq,
                  std::string& out) {
  const int cp = precedence(child.op());
  const bool parens = cp < parent_prec || (cp == parent_prec && need_parens_at_eq);
  if (parens) out += '(';
  format_rec(child, out);
  if (parens) out += ')';
}

void format_unary(char symbol, const Formula& operand, std::string& out) {
  const bool parens = precedence(operand.op()) < 4;
  out += symbol;
  if (parens) {
    out += '(';
    format_rec(operand, out);
    out += ')';
  } else {
    out += ' ';
    format_rec(operand, out);
  }
}

void format_rec(const Formula& f, std::string& out) {
  switch (f.op()) {
    case Op::True: out += "true"; return;
    case Op::False: out += "false"; return;
    case Op::Atom: out += f.name(); return;
    case Op::Not:
      out += '!';
      out += f.lhs().name();
      return;
    case Op::Next: format_unary('X', f.lhs(), out); return;
    case Op::Eventually: format_unary('F', f.lhs(), out); return;
    case Op::And:
      format_child(f.lhs(), 2, false, out);
      out += " & ";
      format_child(f.rhs(), 2, true, out);
      return;
    case Op::Or:
      format_child(f.lhs(), 1, false, out);
      out += " | ";
      format_child(f.rhs(), 1, true, out);
      return;
    case Op::Until:
      format_child(f.lhs(), 3, true, out);
      out += " U ";
      format_child(f.rhs(), 3, false, out);
      return;
  }
}

}  // namespace

std::string format(const Formula& f) {
  std::string out;
  format_rec(f, out);
  return out;
}

std::vector<std::string> propositions(const Formula& f) {
  std::set<std::string> names;
  std::vector<Formula> stack{f};
  while (!stack.empty()) {
    Formula cur = stack.back();
    stack.pop_back();
    switch (cur.op()) {
      case Op::Atom: names.insert(cur.name()); break;
      case Op::Not: names.insert(cur.lhs().name()); break;
      case Op::And:
      case Op::Or:
      case Op::Until:
        stack.push_back(cur.lhs());
        stack.push_back(cur.rhs());
        break;
      case Op::Next:
      case Op::Eventually:
        stack.push_back(cur.lhs());
        break;
      default: break;
    }
  }
  return {names.begin(), names.end()};
}

// ═══════════════════════════════════════════════════════════════════════════
// Simplification
// ═══════════════════════════════════════════════════════════════════════════

namespace {

// Sound structural entailment check: implies(a, b) returning true guarantees
// that every position of every finite word satisfying a also satisfies b,
// including positions past the end of the word (where only the True literal
// holds). Incomplete by design: it proves exactly the containments needed to
// keep progression results in their shortest form. Every rule strictly
// shrinks size(a) + size(b), so recursion terminates.
bool implies(const Formula& a, const Formula& b) {
  if (a == b) return true;
  if (a.is_false()) return true;  // no position satisfies a
  if (b.is_true()) return true;   // every position satisfies b
  // True holds on an empty remainder while every other reduced formula does
  // not, so True entails nothing else.
  if (a.is_true() || b.is_false()) return false;

  // Complete decompositions.
  if (a.op() == Op::Or) return implies(a.lhs(), b) && implies(a.rhs(), b);
  if (b.op() == Op::And) return implies(a, b.lhs()) && implies(a, b.rhs());
  // Sufficient decompositions.
  if (a.op() == Op::And && (implies(a.lhs(), b) || implies(a.rhs(), b))) return true;
  if (b.op() == Op::Or && (implies(a, b.lhs()) || implies(a, b.rhs()))) return true;

  switch (b.op()) {
    case Op::Eventually: {
      const Formula want = b.lhs();
      if (implies(a, want)) return true;  // holds now, hence eventually
      if (a.op() == Op::Eventually &&
          (implies(a.lhs(), want) || implies(a.lhs(), b))) {
        return true;
      }
      if (a.op() == Op::Until && (implies(a.rhs(), want) || implies(a.rhs(), b))) {
        return true;
      }
      if (a.op() == Op::Next && implies(a.lhs(), b)) return true;
      break;
    }
    case Op::Until:
      // b's right side holding now satisfies the until immediately.
      if (implies(a, b.rhs())) return true;
      if (a.op() == Op::Until && implies(a.lhs(), b.lhs()) && implies(a.rhs(), b.rhs())) {
        return true;
      }
      break;
    case Op::Next:
      if (a.op() == Op::Next && implies(a.lhs(), b.lhs())) return true;
      break;
    default:
      break;
  }
  return false;
}

}  // namespace

Formula simplify(const Formula& f) {
  switch (f.op()) {
    case Op::True:
    case Op::False:
    case Op::Atom:
    case Op::Not:
      return f;
    case Op::Next:
      return Formula::next(simplify(f.lhs()));
    case Op::Eventually:
      return Formula::eventually(simplify(f.lhs()));
    case Op::Until:
      return Formula::until(simplify(f.lhs()), simplify(f.rhs()));
    case Op::And: {
      const Formula l = simplify(f.lhs());
      const Formula r = simplify(f.rhs());
      if (implies(l, r)) return l;  // r redundant (covers the True unit, l == r)
      if (implies(r, l)) return r;  // covers the False unit
      return compare(l, r) <= 0 ? Formula::conj(l, r) : Formula::conj(r, l);
    }
    case Op::Or: {
      const Formula l = simplify(f.lhs());
      const Formula r = simplify(f.rhs());
      if (implies(l, r)) return r;  // l subsumed (covers the False unit, l == r)
      if (implies(r, l)) return l;  // covers the True unit
      return compare(l, r) <= 0 ? Formula::disj(l, r) : Formula::disj(r, l);
    }
  }
  return f;  // unreachable
}

// ═══════════════════════════════════════════════════════════════════════════
// Progression, closure, finite-trace evaluation
// ═══════════════════════════════════════════════════════════════════════════

namespace {

Formula progress_raw(const Formula& f, const Label& label) {
  switch (f.op()) {
    case Op::True: return Formula::truth();
    case Op::False: return Formula::falsity();
    case Op::Atom:
      return label.count(f.name()) ? Formula::truth() : Formula::falsity();
    case Op::Not:
      return label.count(f.lhs().name()) ? Formula::falsity() : Formula::truth();
    case Op::And:
      return Formula::conj(progress_raw(f.lhs(), label), progress_raw(f.rhs(), label));
    case Op::Or:
      return Formula::disj(progress_raw(f.lhs(), label), progress_raw(f.rhs(), label));
    case Op::Next:
      return f.lhs();
    case Op::Eventually:
      return Formula::disj(progress_raw(f.lhs(), label), f);
    case Op::Until:
      return Formula::disj(progress_raw(f.rhs(), label),
                           Formula::conj(progress_raw(f.lhs(), label), f));
  }
  return f;  // unreachable
}

}  // namespace

Formula progress(const Formula& f, const Label& label) {
  return simplify(progress_raw(f, label));
}

FormulaSet closure(const Formula& f, const std::vector<std::string>& alphabet,
                   std::size_t cap) {
  if (alphabet.size() > 20) {
    throw std::invalid_argument("closure alphabet too large to enumerate (" +
                                std::to_string(alphabet.size()) + " propositions)");
  }
  std::vector<Label> labels;
  labels.reserve(std::size_t{1} << alphabet.size());
  for (std::size_t mask = 0; mask < (std::size_t{1} << alphabet.size()); ++mask) {
    Label l;
    for (std::size_t i = 0; i < alphabet.size(); ++i) {
      if (mask & (std::size_t{1} << i)) l.insert(alphabet[i]);
    }
    labels.push_back(std::move(l));
  }

  FormulaSet out;
  std::vector<Formula> work;
  out.insert(f);
  work.push_back(f);
  while (!work.empty()) {
    const Formula cur = work.back();
    work.pop_back();
    for (const Label& l : labels) {
      Formula nxt = progress(cur, l);
      if (out.insert(nxt).second) {
        if (out.size() > cap) throw ClosureOverflowError(cap);
        work.push_back(std::move(nxt));
      }
    }
  }
  return out;
}

namespace {

bool eval_at(const Formula& f, const std::vector<Label>& w, std::size_t i) {
  switch (f.op()) {
    case Op::True: return true;
    case Op::False: return false;
    case Op::Atom: return i < w.size() && w[i].count(f.name()) > 0;
    case Op::Not: return i < w.size() && w[i].count(f.lhs().name()) == 0;
    case Op::And: return eval_at(f.lhs(), w, i) && eval_at(f.rhs(), w, i);
    case Op::Or: return eval_at(f.lhs(), w, i) || eval_at(f.rhs(), w, i);
    case Op::Next: return i + 1 < w.size() && eval_at(f.lhs(), w, i + 1);
    case Op::Eventually:
      for (std::size_t j = i; j < w.size(); ++j) {
        if (eval_at(f.lhs(), w, j)) return true;
      }
      return false;
    case Op::Until:
      for (std::size_t j = i; j < w.size(); ++j) {
        if (eval_at(f.rhs(), w, j)) return true;
        if (!eval_at(f.lhs(), w, j)) return false;
      }
      return false;
  }
  return false;  // unreachable
}

}  // namespace

bool evaluate(const Formula& f, const std::vector<Label>& word) {
  return eval_at(f, word, 0);
}

}  // namespace taskdp::ltl
