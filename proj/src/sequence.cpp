#include "nvtwin/sequence.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

namespace nvtwin::seq {

namespace {

// ---------------------------------------------------------------------------
// Lexer

enum class Tok { ident, number, semi, newline, lbrace, rbrace, colon, equals, dotdot, at, end };

struct Token {
  Tok kind = Tok::end;
  std::string text;  // identifier, or number literal
  std::string unit;  // unit suffix attached to a number
  Position pos;
};

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  std::vector<Token> run() {
    std::vector<Token> out;
    while (true) {
      skip_blanks();
      Token t;
      t.pos = {line_, col_};
      if (i_ >= src_.size()) {
        t.kind = Tok::end;
        out.push_back(t);
        return out;
      }
      const char c = src_[i_];
      if (c == '\n') {
        advance();
        t.kind = Tok::newline;
      } else if (c == ';') {
        advance();
        t.kind = Tok::semi;
      } else if (c == '{') {
        advance();
        t.kind = Tok::lbrace;
      } else if (c == '}') {
        advance();
        t.kind = Tok::rbrace;
      } else if (c == ':') {
        advance();
        t.kind = Tok::colon;
      } else if (c == '=') {
        advance();
        t.kind = Tok::equals;
      } else if (c == '@') {
        advance();
        t.kind = Tok::at;
      } else if (c == '.' && peek(1) == '.') {
        advance();
        advance();
        t.kind = Tok::dotdot;
      } else if (is_digit(c) || (c == '.' && is_digit(peek(1)))) {
        t.kind = Tok::number;
        lex_number(t);
      } else if (is_ident_start(c)) {
        t.kind = Tok::ident;
        while (i_ < src_.size() && is_ident_char(src_[i_])) t.text += take();
      } else {
        throw SequenceError(line_, col_, std::string("unexpected character '") + c + "'");
      }
      out.push_back(std::move(t));
    }
  }

 private:
  char peek(std::size_t k) const { return i_ + k < src_.size() ? src_[i_ + k] : '\0'; }

  char take() {
    const char c = src_[i_];
    advance();
    return c;
  }

  void advance() {
    if (src_[i_] == '\n') {
      ++line_;
      col_ = 1;
    } else if ((static_cast<unsigned char>(src_[i_]) & 0xC0) != 0x80) {
      ++col_;
    }
    ++i_;
  }

  void skip_blanks() {
    while (i_ < src_.size()) {
      const char c = src_[i_];
      if (c == ' ' || c == '\t' || c == '\r') {
        advance();
      } else if (c == '#') {
        while (i_ < src_.size() && src_[i_] != '\n') advance();
      } else {
        break;
      }
    }
  }

  // Micro sign (U+00B5) or Greek mu (U+03BC) in UTF-8.
  std::size_t mu_length() const {
    const auto b0 = static_cast<unsigned char>(peek(0));
    const auto b1 = static_cast<unsigned char>(peek(1));
    if ((b0 == 0xC2 && b1 == 0xB5) || (b0 == 0xCE && b1 == 0xBC)) return 2;
    return 0;
  }

  void lex_number(Token& t) {
    while (is_digit(peek(0))) t.text += take();
    if (peek(0) == '.' && peek(1) != '.') {
      t.text += take();
      while (is_digit(peek(0))) t.text += take();
    }
    if ((peek(0) == 'e' || peek(0) == 'E') &&
        (is_digit(peek(1)) || ((peek(1) == '+' || peek(1) == '-') && is_digit(peek(2))))) {
      t.text += take();
      if (peek(0) == '+' || peek(0) == '-') t.text += take();
      while (is_digit(peek(0))) t.text += take();
    }
    while (i_ < src_.size()) {
      if (const auto n = mu_length()) {
        t.unit += 'u';
        for (std::size_t k = 0; k < n; ++k) advance();
      } else if (std::isalpha(static_cast<unsigned char>(src_[i_]))) {
        t.unit += take();
      } else {
        break;
      }
    }
  }

  std::string_view src_;
  std::size_t i_ = 0;
  int line_ = 1;
  int col_ = 1;
};

// ---------------------------------------------------------------------------
// Units

struct UnitInfo {
  const char* name;
  Dimension dimension;
  int exponent;  // power of ten to SI; for time: to nanoseconds. kNoExponent for deg.
};

constexpr int kNoExponent = 1000;
constexpr double kDegree = 0.017453292519943295;

constexpr UnitInfo kUnits[] = {
    {"ps", Dimension::time, -3},        {"ns", Dimension::time, 0},
    {"us", Dimension::time, 3},         {"ms", Dimension::time, 6},
    {"s", Dimension::time, 9},          {"Hz", Dimension::frequency, 0},
    {"kHz", Dimension::frequency, 3},   {"MHz", Dimension::frequency, 6},
    {"GHz", Dimension::frequency, 9},   {"rad", Dimension::phase, 0},
    {"deg", Dimension::phase, kNoExponent}, {"uW", Dimension::power, -6},
    {"mW", Dimension::power, -3},       {"W", Dimension::power, 0},
};

const UnitInfo* find_unit(const std::string& u) {
  for (const auto& info : kUnits)
    if (u == info.name) return &info;
  return nullptr;
}

// The small offset makes decimal ties (12.125 ns) round up despite binary
// representation error.
constexpr double kTieSlack = 1e-7;

Ticks snap_ns(double ns) { return static_cast<Ticks>(std::floor(ns * 4.0 + 0.5 + kTieSlack)); }

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

// Decimal text times a unit, shifting the exponent in the text so the
// result is the correctly rounded SI value (2.87GHz == 2.87e9 exactly).
double scaled_value(const std::string& text, const UnitInfo* unit) {
  if (!unit || unit->exponent == 0) return parse_double(text);
  if (unit->exponent == kNoExponent) return parse_double(text) * kDegree;
  std::string mantissa = text;
  long exponent = unit->exponent;
  if (const auto e = text.find_first_of("eE"); e != std::string::npos) {
    mantissa = text.substr(0, e);
    exponent += std::stol(text.substr(e + 1));
  }
  return parse_double(mantissa + "e" + std::to_string(exponent));
}

std::string render_ticks(Ticks t) {
  if (t == 0) return "0ns";
  if (t % 4'000'000'000LL == 0) return std::to_string(t / 4'000'000'000LL) + "s";
  if (t % 4'000'000 == 0) return std::to_string(t / 4'000'000) + "ms";
  if (t % 4000 == 0) return std::to_string(t / 4000) + "us";
  const Ticks whole = t / 4;
  const Ticks frac = std::abs(t % 4);
  std::string s = (t < 0 && whole == 0 ? "-" : "") + std::to_string(whole);
  static const char* kFrac[] = {"", ".25", ".5", ".75"};
  return s + kFrac[frac] + "ns";
}

std::string render_scaled(double v, Dimension d) {
  if (v == 0.0) {
    switch (d) {
      case Dimension::frequency:
        return "0Hz";
      case Dimension::phase:
        return "0rad";
      case Dimension::power:
        return "0W";
      case Dimension::time:
        break;
    }
  }
  // Largest unit whose decimal text reparses to exactly the same double.
  std::vector<const UnitInfo*> candidates;
  for (const auto& info : kUnits)
    if (info.dimension == d && info.exponent != kNoExponent) candidates.push_back(&info);
  std::sort(candidates.begin(), candidates.end(),
            [](const UnitInfo* a, const UnitInfo* b) { return a->exponent > b->exponent; });
  for (const UnitInfo* u : candidates) {
    const std::string text = shortest(v / std::pow(10.0, u->exponent));
    if (scaled_value(text, u) == v) return text + u->name;
  }
  const UnitInfo* base = candidates.back();
  return shortest(v / std::pow(10.0, base->exponent)) + base->name;
}

std::string render_value(const Value& v) {
  if (v.is_variable()) return v.variable();
  if (const auto* t = std::get_if<Ticks>(&v.content)) return render_ticks(*t);
  return render_scaled(std::get<double>(v.content), v.dimension);
}

// ---------------------------------------------------------------------------
// Parser

struct VarRef {
  std::string name;
  Dimension dimension;
  Position pos;
};

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : toks_(std::move(toks)) {}

  PulseSequence run(std::vector<VarRef>& refs, std::vector<Position>& var_pos) {
    PulseSequence seq;
    bool has_statement = false;
    bool named = false;
    skip_separators();
    if (at(Tok::end)) throw SequenceError(cur().pos.line, cur().pos.column, "empty sequence");
    while (!at(Tok::end)) {
      const Token& head = cur();
      if (head.kind != Tok::ident) error("expected a statement keyword");
      if (head.text == "sequence") {
        if (named) error("duplicate 'sequence' name");
        next();
        seq.name = expect_ident("sequence name");
        named = true;
      } else if (head.text == "var") {
        var_pos.push_back(head.pos);
        seq.variables.push_back(parse_var());
      } else {
        seq.program.push_back(parse_node());
        has_statement = true;
      }
      end_statement();
    }
    if (!has_statement) throw SequenceError(cur().pos.line, cur().pos.column, "sequence has no pulses");
    refs = std::move(refs_);
    return seq;
  }

 private:
  const Token& cur() const { return toks_[k_]; }
  bool at(Tok t) const { return cur().kind == t; }
  void next() {
    if (!at(Tok::end)) ++k_;
  }
  bool at_keyword(const char* kw) const { return at(Tok::ident) && cur().text == kw; }

  [[noreturn]] void error(const std::string& msg) const {
    throw SequenceError(cur().pos.line, cur().pos.column, msg);
  }

  void skip_separators() {
    while (at(Tok::semi) || at(Tok::newline)) next();
  }

  void end_statement() {
    if (at(Tok::semi) || at(Tok::newline)) {
      skip_separators();
    } else if (!at(Tok::end) && !at(Tok::rbrace)) {
      error("expected ';' or end of line");
    }
  }

  std::string expect_ident(const char* what) {
    if (!at(Tok::ident)) error(std::string("expected ") + what);
    std::string s = cur().text;
    next();
    return s;
  }

  Variable parse_var() {
    next();
    Variable v;
    v.name = expect_ident("variable name");
    if (!at(Tok::colon)) error("expected ':' after variable name");
    next();
    const std::string dim = expect_ident("dimension");
    if (dim == "time") {
      v.dimension = Dimension::time;
    } else if (dim == "frequency") {
      v.dimension = Dimension::frequency;
    } else if (dim == "phase") {
      v.dimension = Dimension::phase;
    } else if (dim == "power") {
      v.dimension = Dimension::power;
    } else {
      throw SequenceError(toks_[k_ - 1].pos.line, toks_[k_ - 1].pos.column,
                          "unknown dimension '" + dim + "'");
    }
    if (at(Tok::equals)) {
      next();
      v.initial = parse_literal(v.dimension);
    }
    if (at_keyword("in")) {
      next();
      Range r;
      r.lo = parse_literal(v.dimension, true);
      if (!at(Tok::dotdot)) error("expected '..' in range");
      next();
      r.hi = parse_literal(v.dimension);
      v.range = r;
    }
    return v;
  }

  Node parse_node() {
    if (at_keyword("repeat")) {
      Block b;
      b.pos = cur().pos;
      next();
      if (!at(Tok::number) || !cur().unit.empty()) error("expected repeat count");
      double count = 0.0;
      try {
        count = parse_double(cur().text);
      } catch (const std::exception&) {
        error("malformed repeat count");
      }
      if (count < 1 || count != std::floor(count) || count > 1e6) error("repeat count must be a positive integer");
      b.count = static_cast<int>(count);
      next();
      while (at(Tok::newline)) next();
      if (!at(Tok::lbrace)) error("expected '{'");
      next();
      skip_separators();
      while (!at(Tok::rbrace)) {
        if (at(Tok::end)) error("unterminated repeat block");
        if (at_keyword("var") || at_keyword("sequence")) error("declarations are not allowed inside repeat");
        b.body.push_back(parse_node());
        end_statement();
      }
      next();
      if (b.body.empty()) throw SequenceError(b.pos.line, b.pos.column, "empty repeat block");
      return b;
    }
    return parse_statement();
  }

  Statement parse_statement() {
    Statement s;
    s.pos = cur().pos;
    const std::string kw = cur().text;
    if (kw == "laser") {
      s.kind = StatementKind::laser;
    } else if (kw == "mw") {
      s.kind = StatementKind::mw;
    } else if (kw == "wait") {
      s.kind = StatementKind::wait;
    } else {
      error("unknown statement '" + kw + "'");
    }
    next();
    s.duration = parse_value(Dimension::time);
    while (at(Tok::at) || at(Tok::ident)) {
      if (at(Tok::at)) {
        if (s.kind == StatementKind::wait) error("'@' is not allowed on wait");
        if (s.at) error("duplicate '@'");
        next();
        s.at = parse_value(Dimension::time);
        continue;
      }
      const std::string attr = cur().text;
      const Position apos = cur().pos;
      auto dup = [&](bool present) {
        if (present) throw SequenceError(apos.line, apos.column, "duplicate attribute '" + attr + "'");
      };
      auto only = [&](StatementKind k) {
        if (s.kind != k)
          throw SequenceError(apos.line, apos.column, "attribute '" + attr + "' not allowed here");
      };
      if (attr == "power") {
        only(StatementKind::laser);
        dup(s.power.has_value());
        next();
        s.power = parse_value(Dimension::power);
      } else if (attr == "freq") {
        only(StatementKind::mw);
        dup(s.frequency.has_value());
        next();
        s.frequency = parse_value(Dimension::frequency);
      } else if (attr == "amp") {
        only(StatementKind::mw);
        dup(s.amplitude.has_value());
        next();
        s.amplitude = parse_value(Dimension::frequency);
      } else if (attr == "phase") {
        only(StatementKind::mw);
        dup(s.phase.has_value());
        next();
        s.phase = parse_value(Dimension::phase);
      } else if (attr == "target") {
        only(StatementKind::mw);
        dup(s.target.has_value());
        next();
        const std::string t = expect_ident("target transition");
        if (t != "plus" && t != "minus" && t != "both")
          throw SequenceError(apos.line, apos.column, "target must be plus, minus or both");
        s.target = physics::transition_from_string(t);
      } else if (attr == "readout") {
        if (s.kind == StatementKind::mw)
          throw SequenceError(apos.line, apos.column, "readout windows belong to laser or wait");
        dup(s.readout.has_value());
        next();
        Readout r;
        r.window.lo = parse_value(Dimension::time, true);
        if (!at(Tok::dotdot)) error("expected '..' in readout window");
        next();
        r.window.hi = parse_value(Dimension::time);
        if (at_keyword("tagged")) {
          r.tagged = true;
          next();
        }
        s.readout = r;
      } else {
        error("unknown attribute '" + attr + "'");
      }
    }
    return s;
  }

  Value parse_value(Dimension d, bool allow_bare = false) {
    if (at(Tok::ident)) {
      Value v = Value::ref(d, cur().text);
      refs_.push_back({cur().text, d, cur().pos});
      next();
      return v;
    }
    return parse_literal(d, allow_bare);
  }

  // allow_bare: a unitless number takes its unit from the following range end.
  Value parse_literal(Dimension d, bool allow_bare = false) {
    if (!at(Tok::number)) error("expected a " + to_string(d) + " value");
    const Token t = cur();
    next();
    std::string unit = t.unit;
    auto number_of = [&](const UnitInfo* info) {
      try {
        return scaled_value(t.text, info);
      } catch (const std::exception&) {
        throw SequenceError(t.pos.line, t.pos.column, "malformed number '" + t.text + "'");
      }
    };
    if (unit.empty()) {
      if (allow_bare && at(Tok::dotdot) && k_ + 1 < toks_.size() && toks_[k_ + 1].kind == Tok::number) {
        unit = toks_[k_ + 1].unit;
      } else if (number_of(nullptr) != 0.0) {
        throw SequenceError(t.pos.line, t.pos.column, "missing unit on " + to_string(d) + " value");
      }
    }
    const UnitInfo* info = nullptr;
    if (!unit.empty()) {
      info = find_unit(unit);
      if (!info) throw SequenceError(t.pos.line, t.pos.column, "unknown unit '" + unit + "'");
      if (info->dimension != d)
        throw SequenceError(t.pos.line, t.pos.column,
                            "expected a " + to_string(d) + " unit, got '" + unit + "'");
    }
    const double v = number_of(info);
    if (!std::isfinite(v)) throw SequenceError(t.pos.line, t.pos.column, "value out of range");
    if (d == Dimension::time) {
      if (std::abs(v) > 1e15) throw SequenceError(t.pos.line, t.pos.column, "time value out of range");
      return Value::time(snap_ns(v));
    }
    return Value::literal(d, v);
  }

  std::vector<Token> toks_;
  std::size_t k_ = 0;
  std::vector<VarRef> refs_;
};

// ---------------------------------------------------------------------------
// Resolution

constexpr double kMaxSeconds = 1e6;
constexpr Ticks kMaxTicks = 4'000'000'000'000'000LL;  // 1e6 s
constexpr std::size_t kMaxStatements = 1'000'000;

struct Resolved {
  StatementKind kind;
  Ticks start;
  Ticks duration;
  const Statement* stmt;
};

class Resolver {
 public:
  Resolver(const PulseSequence& seq, const std::map<std::string, double>& bindings)
      : seq_(seq), bindings_(bindings) {}

  std::vector<Resolved> run() {
    Ticks cursor = 0;
    walk(seq_.program, cursor);
    return std::move(items_);
  }

  Ticks ticks(const Value& v, const Position& pos) const {
    if (const auto* t = std::get_if<Ticks>(&v.content)) return *t;
    const double seconds = std::holds_alternative<double>(v.content) ? std::get<double>(v.content)
                                                                       : lookup(v.variable(), pos);
    if (std::abs(seconds) > kMaxSeconds) throw SequenceError(pos.line, pos.column, "time value out of range");
    return snap(seconds);
  }

  double number(const Value& v, const Position& pos) const {
    if (const auto* d = std::get_if<double>(&v.content)) return *d;
    if (const auto* t = std::get_if<Ticks>(&v.content)) return to_seconds(*t);
    return lookup(v.variable(), pos);
  }

 private:
  double lookup(const std::string& name, const Position& pos) const {
    const auto it = bindings_.find(name);
    if (it == bindings_.end()) throw SequenceError(pos.line, pos.column, "no value bound for '" + name + "'");
    if (!std::isfinite(it->second))
      throw SequenceError(pos.line, pos.column, "non-finite value for '" + name + "'");
    return it->second;
  }

  void walk(const std::vector<Node>& nodes, Ticks& cursor) {
    for (const Node& n : nodes) {
      if (const auto* b = std::get_if<Block>(&n)) {
        for (int r = 0; r < b->count; ++r) walk(b->body, cursor);
        continue;
      }
      const auto& s = std::get<Statement>(n);
      const Ticks dur = ticks(s.duration, s.pos);
      if (dur < 0) throw SequenceError(s.pos.line, s.pos.column, "negative duration");
      const Ticks start = s.at ? ticks(*s.at, s.pos) : cursor;
      if (start < 0) throw SequenceError(s.pos.line, s.pos.column, "negative start time");
      if (start + dur > kMaxTicks) throw SequenceError(s.pos.line, s.pos.column, "sequence too long");
      if (items_.size() >= kMaxStatements)
        throw SequenceError(s.pos.line, s.pos.column, "too many statements after repeat expansion");
      items_.push_back({s.kind, start, dur, &s});
      cursor = std::max(cursor, start + dur);
    }
  }

  const PulseSequence& seq_;
  const std::map<std::string, double>& bindings_;
  std::vector<Resolved> items_;
};

struct ResolvedWindow {
  Ticks start;
  Ticks duration;
  bool tagged;
};

std::vector<ResolvedWindow> check_resolved(const Resolver& res, const std::vector<Resolved>& items) {
  for (StatementKind ch : {StatementKind::laser, StatementKind::mw}) {
    std::vector<const Resolved*> pulses;
    for (const auto& it : items)
      if (it.kind == ch && it.duration > 0) pulses.push_back(&it);
    std::stable_sort(pulses.begin(), pulses.end(),
                     [](const Resolved* a, const Resolved* b) { return a->start < b->start; });
    for (std::size_t k = 1; k < pulses.size(); ++k) {
      if (pulses[k]->start < pulses[k - 1]->start + pulses[k - 1]->duration) {
        const Position& p = pulses[k]->stmt->pos;
        throw SequenceError(p.line, p.column,
                            std::string("overlapping ") + (ch == StatementKind::laser ? "laser" : "mw") +
                                " pulses");
      }
    }
  }
  std::vector<ResolvedWindow> windows;
  for (const auto& it : items) {
    if (!it.stmt->readout) continue;
    const auto& w = it.stmt->readout->window;
    const Ticks lo = res.ticks(w.lo, it.stmt->pos);
    const Ticks hi = res.ticks(w.hi, it.stmt->pos);
    if (lo < 0 || hi <= lo || hi > it.duration)
      throw SequenceError(it.stmt->pos.line, it.stmt->pos.column,
                          "readout window must satisfy 0 <= start < stop <= duration");
    windows.push_back({it.start + lo, hi - lo, it.stmt->readout->tagged});
  }
  if (windows.empty()) throw SequenceError(1, 1, "missing readout window");
  Ticks total = 0;
  for (const auto& it : items) total = std::max(total, it.start + it.duration);
  if (total <= 0) throw SequenceError(1, 1, "sequence has zero total duration");
  return windows;
}

void render_nodes(std::ostringstream& out, const std::vector<Node>& nodes, int indent) {
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  for (const Node& n : nodes) {
    if (const auto* b = std::get_if<Block>(&n)) {
      out << pad << "repeat " << b->count << " {\n";
      render_nodes(out, b->body, indent + 1);
      out << pad << "}\n";
      continue;
    }
    const auto& s = std::get<Statement>(n);
    static const char* kNames[] = {"laser", "mw", "wait"};
    out << pad << kNames[static_cast<int>(s.kind)] << ' ' << render_value(s.duration);
    if (s.at) out << " @" << render_value(*s.at);
    if (s.power) out << " power " << render_value(*s.power);
    if (s.frequency) out << " freq " << render_value(*s.frequency);
    if (s.amplitude) out << " amp " << render_value(*s.amplitude);
    if (s.phase) out << " phase " << render_value(*s.phase);
    if (s.target) out << " target " << physics::to_string(*s.target);
    if (s.readout) {
      out << " readout " << render_value(s.readout->window.lo) << ".." << render_value(s.readout->window.hi);
      if (s.readout->tagged) out << " tagged";
    }
    out << ";\n";
  }
}

void collect_mw_frequencies(const std::vector<Node>& nodes, std::vector<const Value*>& out) {
  for (const Node& n : nodes) {
    if (const auto* b = std::get_if<Block>(&n)) {
      collect_mw_frequencies(b->body, out);
    } else {
      const auto& s = std::get<Statement>(n);
      if (s.kind == StatementKind::mw && s.frequency) out.push_back(&*s.frequency);
    }
  }
}

Statement make_stmt(StatementKind kind, Value duration) {
  Statement s;
  s.kind = kind;
  s.duration = std::move(duration);
  return s;
}

Statement mw_pulse(Value duration, const char* freq, const char* amp) {
  Statement s = make_stmt(StatementKind::mw, std::move(duration));
  s.frequency = Value::ref(Dimension::frequency, freq);
  s.amplitude = Value::ref(Dimension::frequency, amp);
  return s;
}

Statement readout_laser(double length, double window) {
  Statement s = make_stmt(StatementKind::laser, Value::time(snap(length)));
  s.readout = Readout{{Value::time(0), Value::time(snap(window))}, false};
  return s;
}

Variable time_var(const char* name, double seconds) {
  return {name, Dimension::time, Value::time(snap(seconds)), std::nullopt};
}

Variable freq_var(const char* name, double hz) {
  return {name, Dimension::frequency, Value::literal(Dimension::frequency, hz), std::nullopt};
}

}  // namespace

// ---------------------------------------------------------------------------

Ticks snap(double seconds) {
  if (!std::isfinite(seconds)) throw std::invalid_argument("time must be finite");
  return static_cast<Ticks>(std::floor(seconds / kGridSeconds + 0.5 + kTieSlack));
}

SequenceError::SequenceError(int line, int column, const std::string& message)
    : std::runtime_error(std::to_string(line) + ":" + std::to_string(column) + ": " + message),
      line_(line),
      column_(column),
      message_(message) {}

std::string to_string(Dimension d) {
  switch (d) {
    case Dimension::time:
      return "time";
    case Dimension::frequency:
      return "frequency";
    case Dimension::phase:
      return "phase";
    case Dimension::power:
      return "power";
  }
  return "time";
}

bool Statement::operator==(const Statement& o) const {
  return kind == o.kind && duration == o.duration && at == o.at && power == o.power &&
         frequency == o.frequency && amplitude == o.amplitude && phase == o.phase && target == o.target &&
         readout == o.readout;
}

const Variable* PulseSequence::find_variable(std::string_view n) const {
  for (const auto& v : variables)
    if (v.name == n) return &v;
  return nullptr;
}

std::map<std::string, double> PulseSequence::default_bindings() const {
  std::map<std::string, double> b;
  for (const auto& v : variables) {
    const Value* src = v.initial ? &*v.initial : (v.range ? &v.range->lo : nullptr);
    double value = 0.0;
    if (src) {
      if (const auto* t = std::get_if<Ticks>(&src->content)) {
        value = to_seconds(*t);
      } else {
        value = std::get<double>(src->content);
      }
    }
    b[v.name] = value;
  }
  return b;
}

void SweepSpec::validate() const {
  if (variable.empty()) throw std::invalid_argument("sweep variable missing");
  if (points < 2) throw std::invalid_argument("sweep needs at least 2 points");
  if (!std::isfinite(start) || !std::isfinite(stop)) throw std::invalid_argument("sweep endpoints must be finite");
  if (start == stop) throw std::invalid_argument("sweep start and stop must differ");
  if (spacing == Spacing::log && (start <= 0.0 || stop <= 0.0))
    throw std::invalid_argument("log sweep needs positive endpoints");
}

std::vector<double> SweepSpec::values() const {
  validate();
  std::vector<double> v(static_cast<std::size_t>(points));
  const double n = points - 1;
  for (int i = 0; i < points; ++i) {
    if (spacing == Spacing::linear) {
      v[i] = start + (stop - start) * (i / n);
    } else {
      v[i] = start * std::pow(stop / start, i / n);
    }
  }
  v.front() = start;
  v.back() = stop;
  return v;
}

PulseSequence parse_sequence(std::string_view text) {
  std::vector<Token> toks = Lexer(text).run();
  std::vector<VarRef> refs;
  std::vector<Position> var_pos;
  PulseSequence seq = Parser(std::move(toks)).run(refs, var_pos);

  // Without any 'var' line, variables are declared implicitly by use.
  if (seq.variables.empty()) {
    for (const auto& r : refs) {
      if (!seq.find_variable(r.name)) {
        seq.variables.push_back({r.name, r.dimension, std::nullopt, std::nullopt});
        var_pos.push_back(r.pos);
      }
    }
  }
  std::set<std::string> seen;
  for (std::size_t k = 0; k < seq.variables.size(); ++k) {
    const auto& v = seq.variables[k];
    if (!seen.insert(v.name).second)
      throw SequenceError(var_pos[k].line, var_pos[k].column, "duplicate variable '" + v.name + "'");
  }
  std::set<std::string> used;
  for (const auto& r : refs) {
    const Variable* v = seq.find_variable(r.name);
    if (!v) throw SequenceError(r.pos.line, r.pos.column, "undeclared variable '" + r.name + "'");
    if (v->dimension != r.dimension)
      throw SequenceError(r.pos.line, r.pos.column,
                          "variable '" + r.name + "' is " + to_string(v->dimension) + ", expected " +
                              to_string(r.dimension));
    used.insert(r.name);
  }
  for (std::size_t k = 0; k < seq.variables.size(); ++k) {
    if (!used.count(seq.variables[k].name))
      throw SequenceError(var_pos[k].line, var_pos[k].column,
                          "variable '" + seq.variables[k].name + "' is never used");
  }
  validate(seq, seq.default_bindings());
  return seq;
}

std::string render(const PulseSequence& seq) {
  std::ostringstream out;
  out << "sequence " << seq.name << ";\n";
  for (const auto& v : seq.variables) {
    out << "var " << v.name << ": " << to_string(v.dimension);
    if (v.initial) out << " = " << render_value(*v.initial);
    if (v.range) out << " in " << render_value(v.range->lo) << ".." << render_value(v.range->hi);
    out << ";\n";
  }
  render_nodes(out, seq.program, 0);
  return out.str();
}

void validate(const PulseSequence& seq, const std::map<std::string, double>& bindings) {
  Resolver res(seq, bindings);
  check_resolved(res, res.run());
}

Timeline make_timeline(const PulseSequence& seq, const std::map<std::string, double>& bindings,
                       const ChannelDefaults& defaults) {
  Resolver res(seq, bindings);
  const auto items = res.run();
  const auto windows = check_resolved(res, items);

  // Rotating frame used while the drive is off: the first explicit MW
  // frequency in program order, else the instrument default.
  double frame = defaults.mw_frequency;
  {
    std::vector<const Value*> freqs;
    collect_mw_frequencies(seq.program, freqs);
    if (!freqs.empty()) frame = res.number(*freqs.front(), {});
  }

  std::vector<Ticks> edges;
  for (const auto& it : items) {
    edges.push_back(it.start);
    edges.push_back(it.start + it.duration);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  auto pulse_segment = [&](Ticks a, Ticks b) {
    physics::ControlSegment seg;
    seg.duration = to_seconds(b - a);
    seg.mw_frequency = frame;
    for (const auto& it : items) {
      bool covers = false;
      if (it.duration > 0) {
        covers = a == b ? (it.start <= a && a < it.start + it.duration)
                        : (it.start <= a && b <= it.start + it.duration);
      } else {
        covers = a == b && it.start == a;
      }
      if (!covers) continue;
      const Statement& s = *it.stmt;
      if (it.kind == StatementKind::laser) {
        seg.laser_power = s.power ? res.number(*s.power, s.pos) : defaults.laser_power;
      } else if (it.kind == StatementKind::mw) {
        seg.mw_on = true;
        seg.mw_frequency = s.frequency ? res.number(*s.frequency, s.pos) : defaults.mw_frequency;
        seg.mw_rabi = s.amplitude ? res.number(*s.amplitude, s.pos) : defaults.mw_rabi;
        seg.mw_phase = s.phase ? res.number(*s.phase, s.pos) : 0.0;
        seg.target_transition = s.target.value_or(physics::Transition::zero_to_plus);
      }
    }
    return seg;
  };

  Timeline tl;
  for (std::size_t e = 0; e + 1 < edges.size(); ++e) {
    const Ticks a = edges[e];
    // zero-length statements starting here come first, in program order
    for (const auto& it : items)
      if (it.duration == 0 && it.start == a) tl.segments.push_back(pulse_segment(a, a));
    tl.segments.push_back(pulse_segment(a, edges[e + 1]));
  }
  for (const auto& it : items)
    if (it.duration == 0 && it.start == edges.back()) tl.segments.push_back(pulse_segment(it.start, it.start));

  for (const auto& w : windows) tl.windows.push_back({to_seconds(w.start), to_seconds(w.duration), w.tagged});
  tl.total_duration = to_seconds(edges.back());
  return tl;
}

std::vector<Timeline> expand_sweep(const PulseSequence& seq, const SweepSpec& sweep,
                                   const ChannelDefaults& defaults) {
  sweep.validate();
  if (!seq.find_variable(sweep.variable))
    throw SequenceError(1, 1, "sweep variable '" + sweep.variable + "' is not declared");
  auto bindings = seq.default_bindings();
  std::vector<Timeline> out;
  for (double v : sweep.values()) {
    bindings[sweep.variable] = v;
    out.push_back(make_timeline(seq, bindings, defaults));
  }
  return out;
}

PulseSequence build_rabi(double tau, double mw_frequency, double omega) {
  if (!(tau >= 0.0)) throw std::invalid_argument("tau must be >= 0");
  PulseSequence s;
  s.name = "rabi";
  s.variables = {time_var("tau", tau), freq_var("f0", mw_frequency), freq_var("omega", omega)};
  s.program = {make_stmt(StatementKind::laser, Value::time(snap(kInitLaser))),
               make_stmt(StatementKind::wait, Value::time(snap(kInitWait))),
               mw_pulse(Value::ref(Dimension::time, "tau"), "f0", "omega"),
               make_stmt(StatementKind::wait, Value::time(snap(kPreReadoutWait))),
               readout_laser(kReadoutLaser, kReadoutWindow)};
  return s;
}

PulseSequence build_hahn(double tau, double omega, double mw_frequency) {
  if (!(tau >= 0.0)) throw std::invalid_argument("tau must be >= 0");
  if (!(omega > 0.0)) throw std::invalid_argument("omega must be > 0");
  PulseSequence s;
  s.name = "hahn";
  s.variables = {time_var("tau", tau), time_var("pi2", 1.0 / (4.0 * omega)), time_var("pi", 1.0 / (2.0 * omega)),
                 freq_var("f0", mw_frequency), freq_var("omega", omega)};
  const Value tau_ref = Value::ref(Dimension::time, "tau");
  s.program = {make_stmt(StatementKind::laser, Value::time(snap(kInitLaser))),
               make_stmt(StatementKind::wait, Value::time(snap(kInitWait))),
               mw_pulse(Value::ref(Dimension::time, "pi2"), "f0", "omega"),
               make_stmt(StatementKind::wait, tau_ref),
               mw_pulse(Value::ref(Dimension::time, "pi"), "f0", "omega"),
               make_stmt(StatementKind::wait, tau_ref),
               mw_pulse(Value::ref(Dimension::time, "pi2"), "f0", "omega"),
               make_stmt(StatementKind::wait, Value::time(snap(kPreReadoutWait))),
               readout_laser(kReadoutLaser, kReadoutWindow)};
  return s;
}

PulseSequence build_ramsey(double tau, double omega, double mw_frequency) {
  if (!(tau >= 0.0)) throw std::invalid_argument("tau must be >= 0");
  if (!(omega > 0.0)) throw std::invalid_argument("omega must be > 0");
  PulseSequence s;
  s.name = "ramsey";
  s.variables = {time_var("tau", tau), time_var("pi2", 1.0 / (4.0 * omega)), freq_var("f0", mw_frequency),
                 freq_var("omega", omega)};
  s.program = {make_stmt(StatementKind::laser, Value::time(snap(kInitLaser))),
               make_stmt(StatementKind::wait, Value::time(snap(kInitWait))),
               mw_pulse(Value::ref(Dimension::time, "pi2"), "f0", "omega"),
               make_stmt(StatementKind::wait, Value::ref(Dimension::time, "tau")),
               mw_pulse(Value::ref(Dimension::time, "pi2"), "f0", "omega"),
               make_stmt(StatementKind::wait, Value::time(snap(kPreReadoutWait))),
               readout_laser(kReadoutLaser, kReadoutWindow)};
  return s;
}

std::pair<PulseSequence, SweepSpec> build_odmr_cw(double f_start, double f_stop, int points, double dwell) {
  if (!(f_start < f_stop)) throw std::invalid_argument("f_start must be below f_stop");
  if (points < 2) throw std::invalid_argument("ODMR sweep needs at least 2 points");
  if (!(dwell > 0.0)) throw std::invalid_argument("dwell must be > 0");
  PulseSequence s;
  s.name = "odmr_cw";
  Variable f{"f", Dimension::frequency, std::nullopt,
             Range{Value::literal(Dimension::frequency, f_start), Value::literal(Dimension::frequency, f_stop)}};
  s.variables = {f};
  Statement laser = make_stmt(StatementKind::laser, Value::time(snap(dwell)));
  laser.at = Value::time(0);
  laser.readout = Readout{{Value::time(0), Value::time(snap(dwell))}, false};
  Statement mw = make_stmt(StatementKind::mw, Value::time(snap(dwell)));
  mw.at = Value::time(0);
  mw.frequency = Value::ref(Dimension::frequency, "f");
  mw.target = physics::Transition::both;
  s.program = {laser, mw};
  return {s, SweepSpec{"f", f_start, f_stop, points, Spacing::linear}};
}

PulseSequence build_lifetime(double excitation, double dark_window, double bin) {
  if (!(excitation > 0.0)) throw std::invalid_argument("excitation must be > 0");
  if (!(bin > 0.0)) throw std::invalid_argument("bin must be > 0");
  if (!(dark_window >= bin)) throw std::invalid_argument("dark window shorter than one histogram bin");
  PulseSequence s;
  s.name = "lifetime";
  Statement dark = make_stmt(StatementKind::wait, Value::time(snap(dark_window)));
  dark.readout = Readout{{Value::time(0), Value::time(snap(dark_window))}, true};
  s.program = {make_stmt(StatementKind::laser, Value::time(snap(excitation))), dark};
  return s;
}

PulseSequence build_readout(double pi_duration, double mw_frequency, double omega, double readout) {
  if (!(pi_duration >= 0.0)) throw std::invalid_argument("pi duration must be >= 0");
  PulseSequence s;
  s.name = "readout";
  s.variables = {time_var("pi", pi_duration), freq_var("f0", mw_frequency), freq_var("omega", omega)};
  s.program = {make_stmt(StatementKind::laser, Value::time(snap(kInitLaser))),
               make_stmt(StatementKind::wait, Value::time(snap(kInitWait))),
               mw_pulse(Value::ref(Dimension::time, "pi"), "f0", "omega"),
               make_stmt(StatementKind::wait, Value::time(snap(kPreReadoutWait))),
               readout_laser(readout, readout)};
  return s;
}

}  // namespace nvtwin::seq
