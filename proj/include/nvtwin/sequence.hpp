#pragma once

// Pulse-sequence DSL: parsing, validation, canonical rendering, builders
// for the standard experiments, and expansion of sweeps into concrete
// control timelines.
//
// Grammar (line oriented; ';' or newline ends a statement; '#' starts a
// comment):
//
//   program    = { statement } ;
//   statement  = "sequence" IDENT
//              | "var" IDENT ":" dimension [ "=" quantity ] [ "in" range ]
//              | "laser" value { laser_attr } [ readout ]
//              | "mw" value { mw_attr }
//              | "wait" value [ readout ]
//              | "repeat" INT "{" { statement } "}" ;
//   dimension  = "time" | "frequency" | "phase" | "power" ;
//   laser_attr = "@" value | "power" value ;
//   mw_attr    = "@" value | "freq" value | "amp" value | "phase" value
//              | "target" ( "plus" | "minus" | "both" ) ;
//   readout    = "readout" range [ "tagged" ] ;
//   range      = value ".." value ;
//   value      = quantity | IDENT ;
//   quantity   = NUMBER [ unit ] ;   (ps ns us µs ms s | Hz kHz MHz GHz |
//                                     rad deg | uW mW W)
//
// Statements run back to back on a shared cursor; "@ t" pins a statement
// to an absolute start time so laser and MW can overlap. Times snap to a
// 0.25 ns grid (nearest, ties up).

#include "nvtwin/physics.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace nvtwin::seq {

/// Time on the sequencer grid, in units of kGridSeconds.
using Ticks = std::int64_t;
inline constexpr double kGridSeconds = 0.25e-9;

Ticks snap(double seconds);
inline double to_seconds(Ticks t) { return static_cast<double>(t) * kGridSeconds; }

class SequenceError : public std::runtime_error {
 public:
  SequenceError(int line, int column, const std::string& message);
  int line() const { return line_; }
  int column() const { return column_; }
  const std::string& message() const { return message_; }

 private:
  int line_;
  int column_;
  std::string message_;
};

enum class Dimension { time, frequency, phase, power };

std::string to_string(Dimension d);

/// A literal (SI units; times in ticks) or a reference to a declared variable.
struct Value {
  Dimension dimension = Dimension::time;
  std::variant<double, Ticks, std::string> content = 0.0;

  static Value time(Ticks t) { return {Dimension::time, t}; }
  static Value literal(Dimension d, double v) { return {d, v}; }
  static Value ref(Dimension d, std::string name) { return {d, std::move(name)}; }

  bool is_variable() const { return std::holds_alternative<std::string>(content); }
  const std::string& variable() const { return std::get<std::string>(content); }
  bool operator==(const Value&) const = default;
};

struct Range {
  Value lo;
  Value hi;
  bool operator==(const Range&) const = default;
};

struct Readout {
  Range window;  // relative to the start of the owning statement
  bool tagged = false;
  bool operator==(const Readout&) const = default;
};

enum class StatementKind { laser, mw, wait };

struct Position {
  int line = 0;
  int column = 0;
};

struct Statement {
  StatementKind kind = StatementKind::wait;
  Value duration;
  std::optional<Value> at;
  std::optional<Value> power;
  std::optional<Value> frequency;
  std::optional<Value> amplitude;
  std::optional<Value> phase;
  std::optional<physics::Transition> target;
  std::optional<Readout> readout;
  Position pos;  // not part of structural equality

  bool operator==(const Statement& o) const;
};

struct Block;
using Node = std::variant<Statement, Block>;

struct Block {
  int count = 1;
  std::vector<Node> body;
  Position pos;
  bool operator==(const Block& o) const { return count == o.count && body == o.body; }
};

struct Variable {
  std::string name;
  Dimension dimension = Dimension::time;
  std::optional<Value> initial;
  std::optional<Range> range;
  bool operator==(const Variable&) const = default;
};

struct PulseSequence {
  std::string name = "unnamed";
  std::vector<Variable> variables;
  std::vector<Node> program;

  const Variable* find_variable(std::string_view name) const;
  /// Default binding: each variable's initial value, else its range start.
  std::map<std::string, double> default_bindings() const;
  bool operator==(const PulseSequence&) const = default;
};

enum class Spacing { linear, log };

struct SweepSpec {
  std::string variable;
  double start = 0.0;
  double stop = 0.0;
  int points = 2;
  Spacing spacing = Spacing::linear;

  void validate() const;
  std::vector<double> values() const;
};

/// Instrument-side values used where a statement leaves an attribute out.
struct ChannelDefaults {
  double laser_power = 1e-3;
  double mw_frequency = 2.87e9;
  double mw_rabi = 20.4e6;
};

struct Window {
  double start = 0.0;
  double duration = 0.0;
  bool tagged = false;
  bool operator==(const Window&) const = default;
};

/// A fully substituted timeline. Segments tile [0, total_duration) in
/// order; zero-length pulses (e.g. a tau = 0 sweep point) stay in the list
/// with duration 0 so every sweep point has the same structure.
struct Timeline {
  std::vector<physics::ControlSegment> segments;
  std::vector<Window> windows;
  double total_duration = 0.0;
};

PulseSequence parse_sequence(std::string_view text);

/// Canonical, deterministic source text. parse_sequence(render(s)) == s.
std::string render(const PulseSequence& seq);

/// Validate against a specific binding (overlaps, windows, durations).
void validate(const PulseSequence& seq, const std::map<std::string, double>& bindings);

Timeline make_timeline(const PulseSequence& seq, const std::map<std::string, double>& bindings,
                       const ChannelDefaults& defaults = {});

std::vector<Timeline> expand_sweep(const PulseSequence& seq, const SweepSpec& sweep,
                                   const ChannelDefaults& defaults = {});

inline constexpr double kInitLaser = 3e-6;
inline constexpr double kInitWait = 1e-6;
inline constexpr double kReadoutLaser = 3e-6;
inline constexpr double kPreReadoutWait = 500e-9;
inline constexpr double kReadoutWindow = 800e-9;

/// laser 3us; wait 1us; mw tau freq f0 amp omega; wait 500ns;
/// laser 3us readout 0ns..800ns
PulseSequence build_rabi(double tau, double mw_frequency, double omega);

/// laser 3us; wait 1us; mw pi2; wait tau; mw pi; wait tau; mw pi2;
/// wait 500ns; laser 3us readout 0ns..800ns, with pi = 1/(2 omega) and
/// pi2 = 1/(4 omega) snapped to the grid.
PulseSequence build_hahn(double tau, double omega, double mw_frequency);

/// laser 3us; wait 1us; mw pi2; wait tau; mw pi2; wait 500ns; readout laser.
PulseSequence build_ramsey(double tau, double omega, double mw_frequency);

/// Continuous laser and MW of length `dwell` with a frequency variable f.
std::pair<PulseSequence, SweepSpec> build_odmr_cw(double f_start, double f_stop, int points,
                                                  double dwell = 1e-3);

/// Excitation pulse followed by a dark window carrying a time-tagged readout.
PulseSequence build_lifetime(double excitation, double dark_window = 200e-9,
                             double bin = 250e-12);

/// Readout-trace pair: polarize, optional MW pi pulse, long readout laser.
PulseSequence build_readout(double pi_duration, double mw_frequency, double omega,
                            double readout = 3e-6);

}  // namespace nvtwin::seq
