#include "nvtwin/calibration.hpp"

#include "nvtwin/config.hpp"
#include "nvtwin/experiments.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <iomanip>
#include <sstream>

namespace nvtwin::calib {

namespace {

enum : int { g0, gp, gm, e0, ep, em, sg };

// Rate-model readout reference: pump power of the pulsed sequences.
constexpr double kReadoutPower = 1e-3;
constexpr double kOdmrPower = 1.6e-3;

}  // namespace

RateModel::RateModel(const physics::OpticalRates& rates, double pump_power, double mw_mixing) : rates_(rates) {
  rates.validate();
  a_.setZero();
  // a_(to, from) += k; a_(from, from) -= k
  auto link = [this](int from, int to, double k) {
    a_(to, from) += k;
    a_(from, from) -= k;
  };
  const double pump = rates.pump_rate_per_watt * pump_power;
  for (int m = 0; m < 3; ++m) {
    link(g0 + m, e0 + m, pump);
    link(e0 + m, g0 + m, rates.k_rad);
  }
  link(e0, sg, rates.k_isc_0);
  link(ep, sg, rates.k_isc_pm);
  link(em, sg, rates.k_isc_pm);
  link(sg, g0, rates.k_s0);
  link(sg, gp, rates.k_s_pm);
  link(sg, gm, rates.k_s_pm);
  if (mw_mixing > 0.0) {
    for (int m : {gp, gm}) {
      link(g0, m, mw_mixing);
      link(m, g0, mw_mixing);
    }
  }
}

Eigen::Matrix<double, 7, 7> RateModel::propagator(double t) const { return (a_ * t).exp(); }

Populations RateModel::evolve(const Populations& p, double t) const { return propagator(t) * p; }

Populations RateModel::steady_state() const {
  // Null vector of the generator with the normalisation row swapped in.
  Eigen::Matrix<double, 7, 7> m = a_;
  m.row(6).setOnes();
  Populations rhs = Populations::Zero();
  rhs(6) = 1.0;
  return m.fullPivLu().solve(rhs);
}

double RateModel::emission(const Populations& p) const { return rates_.k_rad * (p(e0) + p(ep) + p(em)); }

Populations RateModel::thermal() {
  Populations p = Populations::Zero();
  p(g0) = p(gp) = p(gm) = 1.0 / 3.0;
  return p;
}

Populations RateModel::ground(int m) {
  Populations p = Populations::Zero();
  p(m == 0 ? g0 : (m > 0 ? gp : gm)) = 1.0;
  return p;
}

bool Report::pass() const {
  for (const auto& c : checks)
    if (!c.pass()) return false;
  return true;
}

Report calibrate_rates(const physics::OpticalRates& rates, std::uint64_t seed, bool simulate) {
  Report r;
  r.rates = rates;
  const double inf = std::numeric_limits<double>::infinity();

  r.checks.push_back({"excited-state lifetime 1/(k_rad + k_isc_0)", "rate-model", rates.excited_lifetime(), 10e-9,
                      14e-9, "s"});

  const RateModel pulsed(rates, kReadoutPower);
  const Populations after = pulsed.evolve(RateModel::thermal(), 3e-6);
  const double ground_total = after(g0) + after(gp) + after(gm);
  r.checks.push_back({"|0> share after a 3 us pulse", "rate-model", after(g0) / ground_total, 0.85, 1.0, ""});

  // Readout convergence: the spin-dependent emission difference falls to
  // 5 % of its early maximum.
  {
    const double dt = 1e-9;
    const auto step = pulsed.propagator(dt);
    Populations p0 = RateModel::ground(0), p1 = RateModel::ground(1);
    const RateModel& m = pulsed;
    double peak = 0.0, converged = inf;
    bool settled = false;
    for (int k = 1; k <= 5000; ++k) {
      p0 = step * p0;
      p1 = step * p1;
      const double d = std::abs(m.emission(p0) - m.emission(p1));
      if (k * dt <= 200e-9) peak = std::max(peak, d);
      if (k * dt > 200e-9) {
        if (d <= 0.05 * peak) {
          if (!settled) converged = k * dt;
          settled = true;
        } else {
          settled = false;
          converged = inf;
        }
      }
    }
    r.checks.push_back({"readout difference below 5 % of its peak", "rate-model", converged, 0.0, 1.5e-6, "s"});
  }

  {
    const RateModel off(rates, kOdmrPower), on(rates, kOdmrPower, 1e9);
    const double contrast = 1.0 - on.emission(on.steady_state()) / off.emission(off.steady_state());
    r.checks.push_back({"saturated CW-ODMR contrast (upper bound)", "rate-model", contrast, 0.04, 1.0, ""});
  }

  if (simulate) {
    physics::NVParameters np;
    np.optical = rates;
    exp::Context ctx;
    ctx.snapshot.sample = lab::VirtualSample::single({50, 50, 50}, np);
    ctx.snapshot.psf = lab::PSFModel::from_optics();
    ctx.snapshot.state.seed = seed;
    const auto lt = exp::lifetime({}, ctx);
    r.checks.push_back({"fitted fluorescence lifetime", "simulation",
                        config::to_number(lt.metadata["derived"]["lifetime"], "lifetime"), 10e-9, 14e-9, "s"});
    const auto ro = exp::readout_contrast({}, ctx);
    r.checks.push_back({"readout traces converged after", "simulation",
                        config::to_number(ro.metadata["derived"]["converged_after"], "converged_after"), 0.0, 1.5e-6,
                        "s"});
    r.checks.push_back({"readout early contrast", "simulation",
                        config::to_number(ro.metadata["derived"]["early_contrast"], "early_contrast"), 1e-9, 1.0, ""});
    const auto od = exp::cw_odmr({}, ctx);
    const auto& dip = od.metadata["derived"]["dips"][0];
    r.checks.push_back({"CW-ODMR contrast (fixture)", "simulation", config::to_number(dip["contrast"], "contrast"),
                        0.03, 0.05, ""});
    r.checks.push_back({"CW-ODMR FWHM (fixture)", "simulation", config::to_number(dip["fwhm"], "fwhm"), 9e6, 13e6,
                        "Hz"});
  }
  return r;
}

nlohmann::json to_json(const Report& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name},
                      {"source", c.source},
                      {"value", config::number(c.value)},
                      {"lo", config::number(c.lo)},
                      {"hi", config::number(c.hi)},
                      {"unit", c.unit},
                      {"pass", c.pass()}});
  return {{"rates", config::to_json(r.rates)}, {"checks", checks}, {"pass", r.pass()}};
}

std::string format_report(const Report& r) {
  std::ostringstream out;
  out << "optical rates (1/s): k_rad " << r.rates.k_rad << ", k_isc_0 " << r.rates.k_isc_0 << ", k_isc_pm "
      << r.rates.k_isc_pm << ", k_s0 " << r.rates.k_s0 << ", k_s_pm " << r.rates.k_s_pm << ", pump/W "
      << r.rates.pump_rate_per_watt << "\n";
  for (const auto& c : r.checks) {
    out << (c.pass() ? "PASS " : "FAIL ") << std::left << std::setw(44) << c.name << " " << std::setw(11) << c.source
        << " " << std::setprecision(4) << c.value << " " << c.unit << "  [" << c.lo << ", " << c.hi << "]\n";
  }
  out << (r.pass() ? "calibration OK\n" : "calibration FAILED\n");
  return out.str();
}

}  // namespace nvtwin::calib
