#include "nvtwin/physics.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

namespace nvtwin::physics {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

using Super = Eigen::Matrix<Complex, 9, 9>;

bool finite_positive(double v) { return std::isfinite(v) && v > 0.0; }

// Row-major vectorization: vec(rho)[3i+j] = rho(i,j), vec(A rho B) = (A kron B^T) vec(rho).
Super kron(const Mat3c& a, const Mat3c& b) {
  Super out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) out(3 * i + k, 3 * j + l) = a(i, j) * b(k, l);
  return out;
}

Super commutator_super(const Mat3c& h) {
  const Mat3c id = Mat3c::Identity();
  return Complex(0.0, -kTwoPi) * (kron(h, id) - kron(id, h.transpose()));
}

Super dissipator_super(const Mat3c& l) {
  const Mat3c id = Mat3c::Identity();
  const Mat3c ldl = l.adjoint() * l;
  return kron(l, l.conjugate()) - 0.5 * kron(ldl, id) - 0.5 * kron(id, ldl.transpose());
}

constexpr std::array<std::pair<int, int>, 3> kCoherencePairs{{{0, 1}, {0, 2}, {1, 2}}};

// Maps vec(rho) to the 9 real ground coordinates and back.
struct RealBasis {
  Eigen::Matrix<Complex, 9, 9> forward = Eigen::Matrix<Complex, 9, 9>::Zero();
  Eigen::Matrix<Complex, 9, 9> inverse = Eigen::Matrix<Complex, 9, 9>::Zero();

  RealBasis() {
    for (int m = 0; m < 3; ++m) {
      forward(m, 4 * m) = 1.0;
      inverse(4 * m, m) = 1.0;
    }
    const Complex half(0.5, 0.0);
    const Complex minus_half_i(0.0, -0.5);
    for (int p = 0; p < 3; ++p) {
      const auto [i, j] = kCoherencePairs[p];
      const int re = 3 + 2 * p;
      const int im = re + 1;
      const int ij = 3 * i + j;
      const int ji = 3 * j + i;
      forward(re, ij) = half;
      forward(re, ji) = half;
      forward(im, ij) = minus_half_i;
      forward(im, ji) = -minus_half_i;
      inverse(ij, re) = 1.0;
      inverse(ij, im) = Complex(0.0, 1.0);
      inverse(ji, re) = 1.0;
      inverse(ji, im) = Complex(0.0, -1.0);
    }
  }
};

const RealBasis& real_basis() {
  static const RealBasis basis;
  return basis;
}

std::vector<int> addressed_levels(Transition t) {
  switch (t) {
    case Transition::zero_to_plus:
      return {kPlus};
    case Transition::zero_to_minus:
      return {kMinus};
    case Transition::both:
      return {kPlus, kMinus};
  }
  return {};
}

double trace_of(const StateVector& x) {
  return x(0) + x(1) + x(2) + x(9) + x(10) + x(11) + x(12);
}

}  // namespace

Spin1Operators spin1_matrices() {
  const double r = 1.0 / std::sqrt(2.0);
  const Complex i(0.0, 1.0);
  Spin1Operators s;
  s.sx << 0, r, 0, r, 0, r, 0, r, 0;
  s.sy << 0, -i * r, 0, i * r, 0, -i * r, 0, i * r, 0;
  s.sz << 1, 0, 0, 0, 0, 0, 0, 0, -1;
  return s;
}

void OpticalRates::validate() const {
  for (double v : {k_rad, k_isc_pm, k_isc_0, k_s0, k_s_pm, pump_rate_per_watt}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw PhysicsError("optical rates must be finite and >= 0");
  }
  if (!(k_isc_pm > k_isc_0))
    throw PhysicsError("k_isc_pm must exceed k_isc_0 (spin-dependent intersystem crossing)");
  if (!(k_s0 > k_s_pm)) throw PhysicsError("k_s0 must exceed k_s_pm (singlet decays mainly to |0>)");
}

OpticalRates OpticalRates::lifetime_20ns() {
  OpticalRates r;
  r.k_rad = 43e6;
  r.k_isc_0 = 7e6;
  r.k_isc_pm = 40e6;
  return r;
}

void NVParameters::validate() const {
  if (!finite_positive(d_zfs)) throw PhysicsError("d_zfs must be > 0");
  if (!finite_positive(gamma_e)) throw PhysicsError("gamma_e must be > 0");
  if (!(t2_star > 0.0)) throw PhysicsError("t2_star must be > 0");
  if (!(t2 > 0.0)) throw PhysicsError("t2 must be > 0");
  if (!(t1 > 0.0)) throw PhysicsError("t1 must be > 0");
  if (std::isfinite(t1) && std::isfinite(t2_star) && t1 < 0.5 * t2_star)
    throw PhysicsError("t1 must be >= t2_star / 2");
  if (!(quasi_static_sigma >= 0.0)) throw PhysicsError("quasi_static_sigma must be >= 0");
  if (!finite_positive(drive_reference_rabi)) throw PhysicsError("drive_reference_rabi must be > 0");
  if (std::abs(axis.norm() - 1.0) > 1e-9) throw PhysicsError("NV axis must have unit norm");
  optical.validate();
}

double NVParameters::drive_dephasing_rate(double rabi) const {
  const double markov = std::isfinite(t2) ? 1.0 / (2.0 * t2) : 0.0;
  const double driven = std::isfinite(t2_star) ? 1.0 / t2_star : 0.0;
  const double base = std::max(0.0, 0.5 * (driven - markov));
  const double ratio = rabi / drive_reference_rabi;
  return base * ratio * ratio;
}

double ramsey_matched_sigma(double ramsey_time, double t2) {
  const double markov = std::isfinite(t2) ? ramsey_time / t2 : 0.0;
  if (markov >= 1.0) return 0.0;
  return std::sqrt((1.0 - markov) / (2.0 * std::numbers::pi * std::numbers::pi)) / ramsey_time;
}

std::string to_string(Transition t) {
  switch (t) {
    case Transition::zero_to_plus:
      return "plus";
    case Transition::zero_to_minus:
      return "minus";
    case Transition::both:
      return "both";
  }
  return "plus";
}

Transition transition_from_string(const std::string& s) {
  if (s == "plus" || s == "zero_to_plus") return Transition::zero_to_plus;
  if (s == "minus" || s == "zero_to_minus") return Transition::zero_to_minus;
  if (s == "both") return Transition::both;
  throw PhysicsError("unknown transition '" + s + "'");
}

void ControlSegment::validate() const {
  if (!(duration > 0.0) || !std::isfinite(duration)) throw PhysicsError("segment duration must be > 0");
  if (!(laser_power >= 0.0)) throw PhysicsError("laser_power must be >= 0");
  if (!(mw_rabi >= 0.0)) throw PhysicsError("mw_rabi must be >= 0");
}

NVState NVState::ground(int level) {
  NVState s;
  s.rho_g(level, level) = 1.0;
  return s;
}

NVState NVState::thermal() {
  NVState s;
  s.rho_g = Mat3c::Identity() / 3.0;
  return s;
}

double NVState::total_population() const { return rho_g.trace().real() + p_e.sum() + p_s; }

void NVState::check_invariants(double tol) const {
  if (std::abs(total_population() - 1.0) > tol) throw PhysicsError("population not conserved");
  if ((rho_g - rho_g.adjoint()).norm() > tol) throw PhysicsError("ground density matrix not Hermitian");
  const Eigen::SelfAdjointEigenSolver<Mat3c> eig(rho_g);
  if (eig.eigenvalues().minCoeff() < -tol) throw PhysicsError("ground density matrix not positive");
  for (double p : {p_e(0), p_e(1), p_e(2), p_s}) {
    if (p < -tol || p > 1.0 + tol) throw PhysicsError("classical population outside [0,1]");
  }
}

StateVector NVState::to_vector() const {
  StateVector v;
  for (int m = 0; m < 3; ++m) v(m) = rho_g(m, m).real();
  for (int p = 0; p < 3; ++p) {
    const auto [i, j] = kCoherencePairs[p];
    v(3 + 2 * p) = rho_g(i, j).real();
    v(4 + 2 * p) = rho_g(i, j).imag();
  }
  v.segment<3>(9) = p_e;
  v(12) = p_s;
  return v;
}

NVState NVState::from_vector(const StateVector& v) {
  NVState s;
  for (int m = 0; m < 3; ++m) s.rho_g(m, m) = v(m);
  for (int p = 0; p < 3; ++p) {
    const auto [i, j] = kCoherencePairs[p];
    s.rho_g(i, j) = Complex(v(3 + 2 * p), v(4 + 2 * p));
    s.rho_g(j, i) = std::conj(s.rho_g(i, j));
  }
  s.p_e = v.segment<3>(9);
  s.p_s = v(12);
  return s;
}

Mat3c ground_hamiltonian(const NVParameters& params, double b0_along_axis) {
  const auto s = spin1_matrices();
  return params.d_zfs * s.sz * s.sz + params.gamma_e * b0_along_axis * s.sz;
}

Mat3c drive_generator(const ControlSegment& segment, const NVParameters& params) {
  Mat3c h = Mat3c::Zero();
  const double zeeman = params.gamma_e * segment.bz;
  h(kPlus, kPlus) = params.d_zfs + zeeman - segment.mw_frequency;
  h(kMinus, kMinus) = params.d_zfs - zeeman - segment.mw_frequency;
  if (segment.mw_on && segment.mw_rabi > 0.0) {
    const Complex coupling = 0.5 * segment.mw_rabi * std::polar(1.0, segment.mw_phase);
    for (int level : addressed_levels(segment.target_transition)) {
      h(level, kZero) += coupling;
      h(kZero, level) += std::conj(coupling);
    }
  }
  return h;
}

Generator build_generator(const ControlSegment& segment, const NVParameters& params) {
  const auto ops = spin1_matrices();
  Super super = commutator_super(drive_generator(segment, params));

  if (std::isfinite(params.t2)) super += dissipator_super(std::sqrt(2.0 / params.t2) * ops.sz);

  if (std::isfinite(params.t1)) {
    const double rate = 1.0 / (3.0 * params.t1);
    for (int m = 0; m < 3; ++m)
      for (int n = 0; n < 3; ++n) {
        if (m == n) continue;
        Mat3c jump = Mat3c::Zero();
        jump(m, n) = std::sqrt(rate);
        super += dissipator_super(jump);
      }
  }

  if (segment.mw_on && segment.mw_rabi > 0.0) {
    const double kappa = params.drive_dephasing_rate(segment.mw_rabi);
    if (kappa > 0.0) {
      const Complex phase = std::polar(1.0, segment.mw_phase);
      for (int level : addressed_levels(segment.target_transition)) {
        Mat3c x = Mat3c::Zero();
        x(level, kZero) = phase;
        x(kZero, level) = std::conj(phase);
        super += dissipator_super(std::sqrt(kappa) * x);
      }
    }
  }

  const auto& basis = real_basis();
  const Eigen::Matrix<Complex, 9, 9> ground = basis.forward * super * basis.inverse;

  Generator g = Generator::Zero();
  g.topLeftCorner<9, 9>() = ground.real();

  const auto& r = params.optical;
  const double pump = r.pump_rate_per_watt * segment.laser_power;
  // Pumping empties every ground population and coherence at the same rate.
  g.topLeftCorner<9, 9>().diagonal().array() -= pump;
  for (int m = 0; m < 3; ++m) {
    const int e = 9 + m;
    const double isc = (m == kZero) ? r.k_isc_0 : r.k_isc_pm;
    g(e, m) += pump;
    g(e, e) -= r.k_rad + isc;
    g(m, e) += r.k_rad;
    g(12, e) += isc;
  }
  g(12, 12) -= r.k_s0 + 2.0 * r.k_s_pm;
  g(kZero, 12) += r.k_s0;
  g(kPlus, 12) += r.k_s_pm;
  g(kMinus, 12) += r.k_s_pm;
  return g;
}

StepPropagator make_step(const Generator& generator, double h) {
  using Aug = Eigen::Matrix<double, 2 * kStateDim, 2 * kStateDim>;
  Aug a = Aug::Zero();
  a.topLeftCorner<kStateDim, kStateDim>() = generator * h;
  a.topRightCorner<kStateDim, kStateDim>() = Generator::Identity() * h;
  const Aug e = a.exp();
  return {e.topLeftCorner<kStateDim, kStateDim>(), e.topRightCorner<kStateDim, kStateDim>()};
}

StateVector emission_functional(const NVParameters& params) {
  StateVector w = StateVector::Zero();
  w.segment<3>(9).setConstant(params.optical.k_rad);
  return w;
}

double emission_rate(const NVState& state, const NVParameters& params) {
  return params.optical.k_rad * state.p_e.sum();
}

EvolveResult evolve_with_emission(const NVState& state, const ControlSegment& segment,
                                  const NVParameters& params, double dt_max) {
  if (!(dt_max > 0.0) || !std::isfinite(dt_max)) throw IntegrationError("dt_max must be > 0");
  segment.validate();
  const Generator gen = build_generator(segment, params);
  const StateVector w = emission_functional(params);
  const StateVector x0 = state.to_vector();
  const double trace0 = trace_of(x0);

  // Exact per-step propagators make refinement a consistency check: a
  // drifting trace means the generator itself is malformed.
  auto steps = static_cast<long>(std::ceil(segment.duration / dt_max));
  for (int attempt = 0; attempt < 4; ++attempt, steps *= 2) {
    const double h = segment.duration / static_cast<double>(steps);
    const StepPropagator step = make_step(gen, h);
    StateVector x = x0;
    double emitted = 0.0;
    bool ok = true;
    for (long k = 0; k < steps; ++k) {
      emitted += w.dot(step.integral * x);
      x = step.transfer * x;
      if (!x.allFinite() || std::abs(trace_of(x) - trace0) > 1e-9 * std::max(1.0, std::abs(trace0))) {
        ok = false;
        break;
      }
    }
    if (ok) return {NVState::from_vector(x), emitted};
  }
  throw IntegrationError("integrator failed to conserve population; check rates and dt_max");
}

NVState evolve(const NVState& state, const ControlSegment& segment, const NVParameters& params,
               double dt_max) {
  return evolve_with_emission(state, segment, params, dt_max).state;
}

NVState steady_state(const ControlSegment& segment, const NVParameters& params) {
  const Generator gen = build_generator(segment, params);
  Eigen::Matrix<double, kStateDim + 1, kStateDim> a;
  a.topRows<kStateDim>() = gen;
  a.row(kStateDim).setZero();
  for (int k : {0, 1, 2, 9, 10, 11, 12}) a(kStateDim, k) = 1.0;
  Eigen::Matrix<double, kStateDim + 1, 1> b = Eigen::Matrix<double, kStateDim + 1, 1>::Zero();
  b(kStateDim) = 1.0;
  const StateVector x = a.completeOrthogonalDecomposition().solve(b);
  return NVState::from_vector(x);
}

double polarization_dark_wait(const NVParameters& params) {
  return std::max(10.0 * params.optical.excited_lifetime(), 6.0 * params.optical.singlet_lifetime());
}

PolarizationResult polarize(const NVState& initial, const NVParameters& params, double laser_power,
                            double duration, double target) {
  if (!(duration >= 0.0)) throw PhysicsError("polarization duration must be >= 0");
  NVState s = initial;
  ControlSegment seg;
  seg.laser_power = laser_power;
  if (duration > 0.0) {
    seg.duration = duration;
    s = evolve(s, seg, params, std::min(1e-9, duration / 10.0));
  }
  seg.laser_power = 0.0;
  seg.duration = polarization_dark_wait(params);
  s = evolve(s, seg, params, seg.duration);

  PolarizationResult out{s, true, {}};
  if (duration > 0.0 && s.ground_population(kZero) < target) {
    out.target_reached = false;
    out.warning = "polarization target " + std::to_string(target) + " not reached (|0> population " +
                  std::to_string(s.ground_population(kZero)) + ")";
  }
  return out;
}

PolarizationResult polarize(const NVParameters& params, double laser_power, double duration,
                            double target) {
  return polarize(NVState::thermal(), params, laser_power, duration, target);
}

std::vector<std::pair<double, double>> gauss_hermite_normal(int n) {
  if (n < 1) throw PhysicsError("quadrature order must be >= 1");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = std::sqrt(static_cast<double>(k));
    jacobi(k - 1, k) = jacobi(k, k - 1);
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  std::vector<std::pair<double, double>> nodes;
  nodes.reserve(n);
  for (int k = 0; k < n; ++k) {
    const double v0 = eig.eigenvectors()(0, k);
    nodes.emplace_back(eig.eigenvalues()(k), v0 * v0);
  }
  return nodes;
}

}  // namespace nvtwin::physics
