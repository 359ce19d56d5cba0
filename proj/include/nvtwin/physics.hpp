#pragma once

// NV ground-triplet spin dynamics and optical-cycle rate model.
//
// Units: every frequency in this header is an ordinary frequency in Hz
// (H/h), never an angular frequency. The 2*pi factor is applied once,
// inside build_generator(). Times are seconds, fields tesla, power watts.
//
// Level ordering for all 3x3 ground operators is {|+1>, |0>, |-1>}.

#include <Eigen/Dense>

#include <complex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nvtwin::physics {

using Complex = std::complex<double>;
using Mat3c = Eigen::Matrix3cd;

inline constexpr int kPlus = 0;
inline constexpr int kZero = 1;
inline constexpr int kMinus = 2;

// Real coordinates of the hybrid state:
//   [0..2]  ground populations (+1, 0, -1)
//   [3..8]  Re/Im of rho(+1,0), rho(+1,-1), rho(0,-1)
//   [9..11] excited populations (e+1, e0, e-1)
//   [12]    singlet population
inline constexpr int kStateDim = 13;
using StateVector = Eigen::Matrix<double, kStateDim, 1>;
using Generator = Eigen::Matrix<double, kStateDim, kStateDim>;

class PhysicsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when the integrator cannot advance within its accuracy budget.
class IntegrationError : public PhysicsError {
 public:
  using PhysicsError::PhysicsError;
};

struct Spin1Operators {
  Mat3c sx;
  Mat3c sy;
  Mat3c sz;
};

Spin1Operators spin1_matrices();

/// Optical-cycle rates, all in 1/s. Defaults are calibrated (see
/// tools `nvtwin calibrate-rates`) so that the simulated fluorescence
/// lifetime is ~12 ns, readout traces converge by ~1.5 us and the CW
/// ODMR fixture gives ~4 % contrast. They are not measured values.
struct OpticalRates {
  double k_rad = 72e6;     // e_m -> g_m, spin conserving, radiative
  double k_isc_pm = 60e6;  // e_+-1 -> singlet
  double k_isc_0 = 10e6;   // e_0 -> singlet
  double k_s0 = 3e6;       // singlet -> |0>
  double k_s_pm = 0.15e6;  // singlet -> |+1> and singlet -> |-1>, each
  double pump_rate_per_watt = 2e10;

  void validate() const;

  /// 1/e lifetime of the bright excited level |e0>.
  double excited_lifetime() const { return 1.0 / (k_rad + k_isc_0); }
  double singlet_lifetime() const { return 1.0 / (k_s0 + 2.0 * k_s_pm); }

  /// Alternative preset with a ~20 ns excited-state lifetime.
  static OpticalRates lifetime_20ns();
};

struct NVParameters {
  double d_zfs = 2.87e9;
  double gamma_e = 28e9;
  /// Driven coherence time: the on-resonance Rabi envelope at
  /// drive_reference_rabi decays as exp(-t/t2_star).
  double t2_star = 320e-9;
  /// Markovian free-precession coherence time of |0>-|+-1> (not
  /// refocused by an echo).
  double t2 = 940e-9;
  double t1 = 1e-3;
  /// Standard deviation (Hz) of the quasi-static detuning noise that the
  /// ensemble average integrates over. Refocused by a Hahn echo.
  double quasi_static_sigma = 571.3e3;
  double drive_reference_rabi = 20.4e6;
  OpticalRates optical;
  Eigen::Vector3d axis{0.0, 0.0, 1.0};

  void validate() const;

  /// Rate (1/s) of the dressed-basis dephasing channel applied while the
  /// MW drive is on with Rabi frequency `rabi`.
  double drive_dephasing_rate(double rabi) const;
};

/// Sigma (Hz) of Gaussian quasi-static detuning such that a Ramsey signal
/// decaying as exp(-t/t2) * exp(-2 pi^2 sigma^2 t^2) reaches 1/e at
/// t = ramsey_time. Zero when t2 <= ramsey_time.
double ramsey_matched_sigma(double ramsey_time, double t2);

enum class Transition { zero_to_plus, zero_to_minus, both };

std::string to_string(Transition t);
Transition transition_from_string(const std::string& s);

/// One piecewise-constant control interval. `mw_frequency` also sets the
/// rotating frame when the drive is off, so free precession between
/// pulses keeps the phase reference of the MW source.
struct ControlSegment {
  double duration = 0.0;
  double laser_power = 0.0;
  bool mw_on = false;
  double mw_frequency = 2.87e9;
  double mw_rabi = 0.0;
  double mw_phase = 0.0;
  Transition target_transition = Transition::zero_to_plus;
  /// Field component along the NV axis (T), filled in by the instrument.
  double bz = 0.0;

  void validate() const;
  bool operator==(const ControlSegment&) const = default;
};

struct NVState {
  Mat3c rho_g = Mat3c::Zero();
  Eigen::Vector3d p_e = Eigen::Vector3d::Zero();
  double p_s = 0.0;

  static NVState ground(int level);
  static NVState thermal();

  double total_population() const;
  double ground_population(int level) const { return rho_g(level, level).real(); }
  /// Throws PhysicsError when trace, hermiticity or positivity is violated.
  void check_invariants(double tol = 1e-9) const;

  StateVector to_vector() const;
  static NVState from_vector(const StateVector& v);
};

Mat3c ground_hamiltonian(const NVParameters& params, double b0_along_axis);

/// Rotating-frame Hamiltonian (Hz) in the frame of segment.mw_frequency.
/// Diagonal: nu_+- minus the frame frequency. Off-diagonal: Omega/2 e^{i phi}
/// on the addressed |0>-|+-1> pair(s) when the drive is on.
Mat3c drive_generator(const ControlSegment& segment, const NVParameters& params);

/// Full linear generator dx/dt = L x of the hybrid model for one segment.
Generator build_generator(const ControlSegment& segment, const NVParameters& params);

/// Exact propagator over a step h: transfer = exp(L h) and
/// integral = int_0^h exp(L s) ds.
struct StepPropagator {
  Generator transfer;
  Generator integral;
};

StepPropagator make_step(const Generator& generator, double h);

/// Row vector w with w.dot(x) = emission rate (photons/s).
StateVector emission_functional(const NVParameters& params);

double emission_rate(const NVState& state, const NVParameters& params);

NVState evolve(const NVState& state, const ControlSegment& segment, const NVParameters& params,
               double dt_max);

struct EvolveResult {
  NVState state;
  double emitted_photons = 0.0;  // integral of emission_rate over the segment
};

EvolveResult evolve_with_emission(const NVState& state, const ControlSegment& segment,
                                  const NVParameters& params, double dt_max);

/// Stationary state of the segment's generator (laser and/or MW held on).
NVState steady_state(const ControlSegment& segment, const NVParameters& params);

struct PolarizationResult {
  NVState state;
  bool target_reached = true;
  std::string warning;
};

inline constexpr double kDefaultPolarizationTarget = 0.85;

/// Dark wait appended after a polarizing pulse: long enough to drain the
/// excited levels (>= 10 lifetimes) and most of the singlet.
double polarization_dark_wait(const NVParameters& params);

PolarizationResult polarize(const NVParameters& params, double laser_power, double duration,
                            double target = kDefaultPolarizationTarget);
PolarizationResult polarize(const NVState& initial, const NVParameters& params,
                            double laser_power, double duration,
                            double target = kDefaultPolarizationTarget);

/// Nodes and weights for E[f(X)], X ~ N(0,1) (Gauss-Hermite, Golub-Welsch).
std::vector<std::pair<double, double>> gauss_hermite_normal(int n);

}  // namespace nvtwin::physics
