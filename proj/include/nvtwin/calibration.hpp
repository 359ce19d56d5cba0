#pragma once

// Calibration oracle for the optical-cycle rates. A classical seven-level
// rate model (independent of the density-matrix engine) checks the rate
// targets directly; the full simulator then checks the observables the
// rates were tuned for.

#include "nvtwin/physics.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace nvtwin::calib {

/// Populations g0, g+1, g-1, e0, e+1, e-1, singlet.
using Populations = Eigen::Matrix<double, 7, 1>;

class RateModel {
 public:
  /// `mw_mixing` is a symmetric g0 <-> g+-1 transfer rate (1/s) standing in
  /// for a saturating resonant drive.
  RateModel(const physics::OpticalRates& rates, double pump_power, double mw_mixing = 0.0);

  Eigen::Matrix<double, 7, 7> propagator(double t) const;
  Populations evolve(const Populations& p, double t) const;
  Populations steady_state() const;
  /// Photons per second for unit collection.
  double emission(const Populations& p) const;

  static Populations thermal();
  static Populations ground(int m);  // m in {0, +1, -1}

 private:
  physics::OpticalRates rates_;
  Eigen::Matrix<double, 7, 7> a_;
};

struct Check {
  std::string name;
  std::string source;  // "rate-model" or "simulation"
  double value = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::string unit;
  bool pass() const { return value >= lo && value <= hi; }
};

struct Report {
  physics::OpticalRates rates;
  std::vector<Check> checks;
  bool pass() const;
};

/// Rate-model checks, plus the simulated lifetime fit, readout convergence
/// and CW-ODMR fixture line when `simulate` is set.
Report calibrate_rates(const physics::OpticalRates& rates, std::uint64_t seed = 1, bool simulate = true);

nlohmann::json to_json(const Report& r);
std::string format_report(const Report& r);

}  // namespace nvtwin::calib
