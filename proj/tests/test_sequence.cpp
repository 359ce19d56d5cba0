#include <doctest.h>

#include "nvtwin/sequence.hpp"

#include <cmath>
#include <random>

using namespace nvtwin::seq;
using nvtwin::physics::ControlSegment;
using nvtwin::physics::Transition;

namespace {

constexpr const char* kRabiSource =
    "laser 3us; wait 1us; mw tau freq f0 amp omega; wait 500ns; laser 3us readout 0..800ns";

constexpr const char* kRabiTemplate = R"(sequence rabi
var tau: time = 24.5ns
var f0: frequency = 2.87GHz
var omega: frequency = 20.4MHz
laser 3us; wait 1us; mw tau freq f0 amp omega; wait 500ns; laser 3us readout 0..800ns
)";

constexpr const char* kHahnTemplate = R"(sequence hahn
var tau: time = 300ns
var pi2: time = 12.25ns
var pi: time = 24.5ns
var f0: frequency = 2.87GHz
var omega: frequency = 20.4MHz
laser 3us; wait 1us
mw pi2 freq f0 amp omega; wait tau
mw pi freq f0 amp omega; wait tau
mw pi2 freq f0 amp omega
wait 500ns; laser 3us readout 0..800ns
)";

SequenceError parse_error(const std::string& src) {
  try {
    parse_sequence(src);
  } catch (const SequenceError& e) {
    return e;
  }
  FAIL("expected a SequenceError for: " << src);
  return SequenceError(0, 0, "");
}

std::vector<double> mw_durations(const Timeline& tl) {
  std::vector<double> out;
  for (const auto& s : tl.segments)
    if (s.mw_on) out.push_back(s.duration);
  return out;
}

}  // namespace

TEST_SUITE("sequence") {
  TEST_CASE("grid snapping rounds to nearest with ties up") {
    CHECK(snap(12.25e-9) == 49);
    CHECK(snap(12.125e-9) == 49);  // tie at 48.5 ticks goes up
    CHECK(snap(12.1e-9) == 48);
    CHECK(snap(0.0) == 0);
    CHECK(to_seconds(snap(1.0 / (2 * 20.4e6))) == doctest::Approx(24.5e-9).epsilon(1e-12));
    CHECK(snap(1.0 / (4 * 20.408e6)) == snap(1.0 / (4 * 20.4e6)));
  }

  TEST_CASE("rabi example parses to a five segment timeline") {
    const PulseSequence seq = parse_sequence(kRabiSource);
    REQUIRE(seq.variables.size() == 3);
    CHECK(seq.find_variable("tau")->dimension == Dimension::time);
    CHECK(seq.find_variable("f0")->dimension == Dimension::frequency);
    CHECK(seq.find_variable("omega")->dimension == Dimension::frequency);

    const Timeline tl = make_timeline(seq, {{"tau", 24.5e-9}, {"f0", 2.87e9}, {"omega", 20.4e6}});
    REQUIRE(tl.segments.size() == 5);
    CHECK(tl.segments[0].laser_power == 1e-3);
    CHECK(tl.segments[0].duration == doctest::Approx(3e-6));
    CHECK(tl.segments[1].laser_power == 0.0);
    CHECK(tl.segments[2].mw_on);
    CHECK(tl.segments[2].duration == doctest::Approx(24.5e-9));
    CHECK(tl.segments[2].mw_rabi == 20.4e6);
    CHECK(tl.segments[3].duration == doctest::Approx(500e-9));
    CHECK(tl.segments[4].laser_power == 1e-3);
    REQUIRE(tl.windows.size() == 1);
    CHECK(tl.windows[0].start == doctest::Approx(4.5245e-6));
    CHECK(tl.windows[0].duration == doctest::Approx(800e-9));
    CHECK(tl.total_duration == doctest::Approx(7.5245e-6));

    // tau = 0 keeps the zero-length MW segment
    const Timeline t0 = make_timeline(seq, {{"tau", 0.0}, {"f0", 2.87e9}, {"omega", 20.4e6}});
    REQUIRE(t0.segments.size() == 5);
    CHECK(t0.segments[2].mw_on);
    CHECK(t0.segments[2].duration == 0.0);
  }

  TEST_CASE("segments tile the total duration") {
    const PulseSequence seq = parse_sequence(kHahnTemplate);
    const Timeline tl = make_timeline(seq, seq.default_bindings());
    double sum = 0.0;
    for (const auto& s : tl.segments) sum += s.duration;
    CHECK(sum == doctest::Approx(tl.total_duration).epsilon(1e-12));
  }

  TEST_CASE("empty source is a syntax error") {
    for (const char* src : {"", "   \n\n", "# only a comment\n", ";;;"}) {
      const auto e = parse_error(src);
      CHECK(e.line() >= 1);
      CHECK(e.column() >= 1);
    }
  }

  TEST_CASE("semantic errors carry positions") {
    SUBCASE("undeclared variable") {
      const auto e = parse_error("var a: time = 1ns\nlaser a readout 0..1ns\nmw b");
      CHECK(e.message().find("undeclared") != std::string::npos);
      CHECK(e.line() == 3);
      CHECK(e.column() == 4);
    }
    SUBCASE("unused declaration") {
      const auto e = parse_error("var a: time = 1ns\nvar b: time = 2ns\nlaser a readout 0..1ns");
      CHECK(e.message().find("never used") != std::string::npos);
      CHECK(e.line() == 2);
    }
    SUBCASE("overlapping pulses") {
      const auto e = parse_error("laser 1us readout 0..1us\nlaser 1us @500ns");
      CHECK(e.message().find("overlapping") != std::string::npos);
      CHECK(e.line() == 2);
      CHECK(e.column() == 1);
    }
    SUBCASE("missing readout window") {
      const auto e = parse_error("laser 3us; wait 1us");
      CHECK(e.message().find("readout") != std::string::npos);
    }
    SUBCASE("lexical error") {
      const auto e = parse_error("laser 3us readout 0..1us\nwait 2us $");
      CHECK(e.line() == 2);
      CHECK(e.column() == 10);
    }
    SUBCASE("dimension mismatch") {
      const auto e = parse_error("laser 3MHz readout 0..1us");
      CHECK(e.column() == 7);
    }
    SUBCASE("readout outside its statement") {
      parse_error("laser 1us readout 0..2us");
    }
    SUBCASE("variable used with two dimensions") {
      parse_error("var x: time = 1us\nlaser x readout 0..1us; mw 1ns freq x");
    }
  }

  TEST_CASE("laser and mw can overlap across channels") {
    const PulseSequence seq = parse_sequence("laser 1ms @0 readout 0..1ms; mw 1ms @0 freq 2.87GHz target both");
    const Timeline tl = make_timeline(seq, {});
    REQUIRE(tl.segments.size() == 1);
    CHECK(tl.segments[0].mw_on);
    CHECK(tl.segments[0].laser_power == 1e-3);
    CHECK(tl.segments[0].target_transition == Transition::both);
  }

  TEST_CASE("units including micro sign variants") {
    const auto a = parse_sequence("laser 3us readout 0..800ns");
    const auto b = parse_sequence("laser 3\xC2\xB5s readout 0..800ns");
    const auto c = parse_sequence("laser 3\xCE\xBCs readout 0..0.8us");
    CHECK(a == b);
    CHECK(a == c);
    const auto d = parse_sequence("laser 2500ps power 250uW readout 0..2.5ns");
    const Timeline tl = make_timeline(d, {});
    CHECK(tl.segments[0].duration == doctest::Approx(2.5e-9));
    CHECK(tl.segments[0].laser_power == doctest::Approx(250e-6));
  }

  TEST_CASE("repeat blocks expand in place") {
    const auto seq = parse_sequence("repeat 3 {\n  mw 10ns; wait 20ns\n}\nlaser 1us readout 0..1us");
    const Timeline tl = make_timeline(seq, {});
    CHECK(tl.segments.size() == 7);
    CHECK(tl.total_duration == doctest::Approx(1.09e-6));
  }

  TEST_CASE("builders equal the parse of their templates") {
    CHECK(build_rabi(24.5e-9, 2.87e9, 20.4e6) == parse_sequence(kRabiTemplate));
    CHECK(build_hahn(300e-9, 20.4e6, 2.87e9) == parse_sequence(kHahnTemplate));

    const auto a = make_timeline(build_hahn(300e-9, 20.4e6, 2.87e9), {{"tau", 300e-9}, {"pi2", 12.25e-9},
                                                                      {"pi", 24.5e-9}, {"f0", 2.87e9},
                                                                      {"omega", 20.4e6}});
    const auto b = parse_sequence(kHahnTemplate);
    const auto tb = make_timeline(b, b.default_bindings());
    REQUIRE(a.segments.size() == tb.segments.size());
    for (std::size_t k = 0; k < a.segments.size(); ++k) CHECK(a.segments[k] == tb.segments[k]);
  }

  TEST_CASE("round trip is a canonical fixpoint") {
    const std::vector<std::string> sources = {
        kRabiSource,
        kRabiTemplate,
        kHahnTemplate,
        "sequence odd\nvar p: phase = 90deg\nvar P: power in 0..2mW\n"
        "laser 1.25ns power P readout 0..1ns tagged; mw 3ns phase p freq 2.8712345GHz amp 0.6MHz target minus",
        "repeat 2 { repeat 3 { mw 1ns; wait 1ns } }; laser 10.75ns @1us readout 0..1ns",
        render(build_odmr_cw(2.77e9, 2.97e9, 201).first),
        render(build_lifetime(3e-6)),
        render(build_readout(24.5e-9, 2.87e9, 20.4e6)),
        render(build_ramsey(100e-9, 20.4e6, 2.87e9)),
    };
    for (const auto& src : sources) {
      CAPTURE(src);
      const PulseSequence first = parse_sequence(src);
      const std::string text = render(first);
      const PulseSequence second = parse_sequence(text);
      CHECK(first == second);
      CHECK(render(second) == text);
    }
  }

  TEST_CASE("rabi sweep 0 to 200 ns with 101 points") {
    const auto seq = build_rabi(0.0, 2.87e9, 20.4e6);
    const auto tls = expand_sweep(seq, {"tau", 0.0, 200e-9, 101, Spacing::linear});
    REQUIRE(tls.size() == 101);
    for (std::size_t k = 0; k < tls.size(); ++k) {
      const auto mw = mw_durations(tls[k]);
      REQUIRE(mw.size() == 1);
      CHECK(mw[0] == doctest::Approx(2e-9 * k).epsilon(1e-12));
      CHECK(tls[k].segments.size() == tls[0].segments.size());
      for (std::size_t s = 0; s < tls[k].segments.size(); ++s) {
        CHECK(tls[k].segments[s].mw_on == tls[0].segments[s].mw_on);
        CHECK(tls[k].segments[s].laser_power == tls[0].segments[s].laser_power);
      }
    }
  }

  TEST_CASE("hahn sweep keeps both gaps equal") {
    const auto seq = build_hahn(0.0, 20.4e6, 2.87e9);
    const auto tls = expand_sweep(seq, {"tau", 0.0, 3e-6, 31, Spacing::linear});
    for (const auto& tl : tls) {
      // segments: laser, wait, pi2, gap, pi, gap, pi2, wait, laser
      REQUIRE(tl.segments.size() == 9);
      CHECK(tl.segments[3].duration == tl.segments[5].duration);
      CHECK(tl.segments[2].duration == doctest::Approx(12.25e-9));
      CHECK(tl.segments[4].duration == doctest::Approx(24.5e-9));
    }
  }

  TEST_CASE("log sweep visits decades") {
    const SweepSpec sweep{"tau", 10e-9, 10e-6, 4, Spacing::log};
    const auto v = sweep.values();
    REQUIRE(v.size() == 4);
    CHECK(v[0] == doctest::Approx(10e-9));
    CHECK(v[1] == doctest::Approx(100e-9));
    CHECK(v[2] == doctest::Approx(1e-6));
    CHECK(v[3] == doctest::Approx(10e-6));
    const auto tls = expand_sweep(build_rabi(0.0, 2.87e9, 20.4e6), sweep);
    CHECK(mw_durations(tls[2])[0] == doctest::Approx(1e-6));
  }

  TEST_CASE("sweep spec validation") {
    CHECK_THROWS(SweepSpec{"x", 0.0, 1.0, 1, Spacing::linear}.validate());
    CHECK_THROWS(SweepSpec{"x", 1.0, 1.0, 5, Spacing::linear}.validate());
    CHECK_THROWS(SweepSpec{"x", 0.0, 1.0, 5, Spacing::log}.validate());
    CHECK_THROWS_AS(expand_sweep(build_rabi(0.0, 2.87e9, 20.4e6), {"nope", 0.0, 1e-6, 3, Spacing::linear}),
                    SequenceError);
    // negative duration from substitution
    CHECK_THROWS_AS(expand_sweep(build_rabi(0.0, 2.87e9, 20.4e6), {"tau", -10e-9, 10e-9, 3, Spacing::linear}),
                    SequenceError);
  }

  TEST_CASE("odmr builder") {
    const auto [seq, sweep] = build_odmr_cw(2.77e9, 2.97e9, 2);
    const auto v = sweep.values();
    REQUIRE(v.size() == 2);
    CHECK(v[0] == 2.77e9);
    CHECK(v[1] == 2.97e9);
    const auto tls = expand_sweep(seq, sweep);
    REQUIRE(tls.size() == 2);
    for (const auto& tl : tls) {
      REQUIRE(tl.segments.size() == 1);
      CHECK(tl.segments[0].mw_on);
      CHECK(tl.segments[0].laser_power > 0.0);
      CHECK(tl.windows.size() == 1);
    }
    CHECK(tls[1].segments[0].mw_frequency == 2.97e9);
    CHECK_THROWS(build_odmr_cw(2.97e9, 2.77e9, 11));
    CHECK_THROWS(build_odmr_cw(2.77e9, 2.97e9, 1));
  }

  TEST_CASE("lifetime builder") {
    const auto seq = build_lifetime(3e-6);
    const auto tl = make_timeline(seq, {});
    REQUIRE(tl.windows.size() == 1);
    CHECK(tl.windows[0].tagged);
    CHECK(tl.windows[0].start == doctest::Approx(3e-6));
    CHECK(tl.windows[0].duration == doctest::Approx(200e-9));
    CHECK_THROWS(build_lifetime(3e-6, 100e-12, 250e-12));
    CHECK_THROWS(build_lifetime(0.0));
  }

  TEST_CASE("frame follows the first mw frequency") {
    const auto tl = make_timeline(build_rabi(24.5e-9, 2.8e9, 20.4e6), {{"tau", 24.5e-9}, {"f0", 2.8e9},
                                                                        {"omega", 20.4e6}});
    for (const auto& s : tl.segments) CHECK(s.mw_frequency == 2.8e9);
  }

  TEST_CASE("validation is total under random input") {
    std::mt19937_64 rng(7);
    const std::vector<std::string> pieces = {
        "laser", "mw", "wait", "var", "repeat", "{", "}", ";", "\n", "@", "..", ":", "=", "3us", "0",
        "tau", "freq", "amp", "phase", "power", "readout", "tagged", "target", "plus", "both", "1e400GHz",
        "12.25ns", "2.87GHz", "time", "frequency", "in", "\xC2\xB5s", "$", "#", "-1", "9999999999s", "1e3",
        "sequence", "x", "90deg", "1mW"};
    std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
    std::uniform_int_distribution<int> len(0, 25);
    int accepted = 0;
    for (int trial = 0; trial < 5000; ++trial) {
      std::string src;
      const int n = len(rng);
      for (int k = 0; k < n; ++k) src += pieces[pick(rng)] + ((rng() & 1) ? " " : "");
      try {
        const auto seq = parse_sequence(src);
        ++accepted;
        CHECK(parse_sequence(render(seq)) == seq);
      } catch (const SequenceError& e) {
        CHECK(e.line() >= 1);
        CHECK(e.column() >= 1);
      }
    }
    // mutate valid sources by deleting a character
    const std::string base = kHahnTemplate;
    for (std::size_t k = 0; k < base.size(); ++k) {
      std::string src = base;
      src.erase(k, 1);
      try {
        parse_sequence(src);
      } catch (const SequenceError& e) {
        CHECK(e.line() >= 1);
      }
    }
    MESSAGE("random sources accepted: " << accepted);
  }

  TEST_CASE("random valid sequences round trip") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> ticks(0, 4000);
    std::uniform_int_distribution<int> count(1, 6);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const char* time_units[] = {"ns", "us", "ps"};
    for (int trial = 0; trial < 300; ++trial) {
      std::string src;
      const int n = count(rng);
      for (int k = 0; k < n; ++k) {
        const double ns = ticks(rng) / 4.0;
        const int kind = static_cast<int>(rng() % 3);
        if (kind == 0) {
          src += "laser " + std::to_string(ns) + "ns power " + std::to_string(unit(rng)) + "mW";
        } else if (kind == 1) {
          src += "mw " + std::to_string(ns) + "ns freq " + std::to_string(2.8 + 0.1 * unit(rng)) + "GHz amp " +
                 std::to_string(30 * unit(rng)) + "MHz phase " + std::to_string(360 * unit(rng)) + "deg";
        } else {
          src += "wait " + std::to_string(ns * (rng() % 2 ? 1 : 1000)) + time_units[rng() % 2 ? 0 : 2];
        }
        src += (rng() % 2) ? ";" : "\n";
      }
      src += "laser 1us readout 0..1us";
      CAPTURE(src);
      const auto seq = parse_sequence(src);
      const std::string text = render(seq);
      CHECK(parse_sequence(text) == seq);
      CHECK(render(parse_sequence(text)) == text);
    }
  }
}
