#include <doctest.h>

#include "nvtwin/analysis.hpp"
#include "test_support.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace nvtwin::analysis;
using nvtwin::testing::close_rel;

namespace {

constexpr double kPi = std::numbers::pi;

Eigen::VectorXd linspace(double a, double b, int n) { return Eigen::VectorXd::LinSpaced(n, a, b); }

Eigen::VectorXd poisson(const Eigen::VectorXd& mean, std::mt19937_64& rng) {
  Eigen::VectorXd out(mean.size());
  for (Eigen::Index i = 0; i < mean.size(); ++i) out[i] = std::poisson_distribution<long>(mean[i])(rng);
  return out;
}

// Rabi trace in detected counts: 1e5 shots at about 0.13 photons per shot
// in the readout window, 30 % spin contrast.
const Eigen::VectorXd kRabiTruth = (Eigen::VectorXd(5) << 2000.0, 20.4e6, 0.0, 320e-9, 11000.0).finished();

Eigen::VectorXd rabi_x() { return linspace(0.0, 400e-9, 81); }

}  // namespace

TEST_SUITE("analysis") {
  TEST_CASE("model values") {
    const auto rabi = ModelSpec::rabi();
    Eigen::VectorXd p(5);
    p << 0.3, 20.4e6, 0.7, 320e-9, 1.1;
    Eigen::VectorXd x0(1);
    x0 << 0.0;
    CHECK(eval_model(rabi, p, x0)[0] == doctest::Approx(0.3 * std::cos(0.7) + 1.1).epsilon(1e-15));

    // Undamped, zero phase: first minimum at 1/(2 omega).
    p << 1.0, 20.4e6, 0.0, 1e9, 0.0;
    const Eigen::VectorXd t = linspace(0.0, 50e-9, 50001);
    Eigen::Index imin = 0;
    eval_model(rabi, p, t).minCoeff(&imin);
    CHECK(t[imin] == doctest::Approx(24.51e-9).epsilon(1e-3));

    const auto decay = ModelSpec::decay();
    Eigen::VectorXd q(3);
    q << 2.0, 5e-6, 0.25;
    Eigen::VectorXd xt(1);
    xt << 5e-6;
    CHECK(eval_model(decay, q, xt)[0] == doctest::Approx(2.0 / std::numbers::e + 0.25).epsilon(1e-15));

    const auto lor = ModelSpec::lorentzian(1);
    Eigen::VectorXd l(4);
    l << 100.0, 0.2, 2.87e9, 10e6;
    Eigen::VectorXd xl(2);
    xl << 2.87e9, 2.875e9;
    const Eigen::VectorXd yl = eval_model(lor, l, xl);
    CHECK(yl[0] == doctest::Approx(80.0));
    CHECK(yl[1] == doctest::Approx(90.0));

    CHECK_THROWS_AS(eval_model(rabi, q, xt), AnalysisError);
  }

  TEST_CASE("model spec validation") {
    CHECK(ModelSpec::decay({}, true).parameter_count() == 4);
    CHECK(ModelSpec::lorentzian(2).parameter_count() == 7);
    CHECK_THROWS_AS(ModelSpec::lorentzian(0).validate(), AnalysisError);
    CHECK_THROWS_AS(ModelSpec::rabi({1.0, 2.0}).validate(), AnalysisError);
    ModelSpec s = ModelSpec::decay({1.0, 2.0, 0.0});
    s.bounds = {{0, 1}, {0, 1}, {-1, 1}};
    CHECK_THROWS_AS(s.validate(), AnalysisError);
    s.bounds = {{0, 2}, {3, 1}, {-1, 1}};
    CHECK_THROWS_AS(s.validate(), AnalysisError);
    CHECK(model_from_string("rabi_eq4") == ModelKind::rabi_eq4);
    CHECK_THROWS_AS(model_from_string("cubic"), AnalysisError);
  }

  TEST_CASE("jacobians match central differences") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    struct Case {
      ModelSpec spec;
      Eigen::VectorXd base;
      Eigen::VectorXd x;
    };
    Eigen::VectorXd x2d(2 * 49);
    for (int i = 0; i < 49; ++i) {
      x2d[2 * i] = (i % 7) * 0.05;
      x2d[2 * i + 1] = (i / 7) * 0.05;
    }
    std::vector<Case> cases = {
        {ModelSpec::rabi(), (Eigen::VectorXd(5) << 0.3, 20e6, 0.4, 300e-9, 1.0).finished(), linspace(0, 400e-9, 41)},
        {ModelSpec::decay(), (Eigen::VectorXd(3) << 2.0, 1e-6, 0.3).finished(), linspace(0, 5e-6, 41)},
        {ModelSpec::decay({}, true), (Eigen::VectorXd(4) << 2.0, 1e-6, 0.3, 1.4).finished(), linspace(0, 5e-6, 41)},
        {ModelSpec::lorentzian(2), (Eigen::VectorXd(7) << 1e4, 0.1, 2.86e9, 11e6, 0.12, 2.88e9, 10e6).finished(),
         linspace(2.82e9, 2.92e9, 41)},
        {{ModelKind::gaussian_1d}, (Eigen::VectorXd(4) << 5.0, 0.1, 0.2, 1.0).finished(), linspace(-1, 1, 41)},
        {{ModelKind::gaussian_2d}, (Eigen::VectorXd(5) << 5.0, 0.15, 0.12, 0.1, 1.0).finished(), x2d},
    };
    for (const auto& c : cases) {
      for (int trial = 0; trial < 10; ++trial) {
        Eigen::VectorXd p = c.base;
        // Centres stay inside the sweep; everything else varies freely.
        const bool lor = c.spec.kind == ModelKind::lorentzian_multi;
        for (Eigen::Index k = 0; k < p.size(); ++k) p[k] *= (lor && k % 3 == 2) ? 1.0 + (u(rng) - 1.0) / 200 : u(rng);
        const Eigen::MatrixXd j = model_jacobian(c.spec, p, c.x);
        for (Eigen::Index k = 0; k < p.size(); ++k) {
          // Fourth-order central difference.
          const double h = 1e-4 * std::abs((lor && k % 3 == 2) ? p[k + 1] : p[k]);
          auto at = [&](double step) {
            Eigen::VectorXd q = p;
            q[k] += step;
            return eval_model(c.spec, q, c.x);
          };
          const Eigen::VectorXd fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
          const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-300);
          INFO(to_string(c.spec.kind) << " parameter " << k);
          CHECK((j.col(k) - fd).cwiseAbs().maxCoeff() <= 1e-6 * scale);
        }
      }
    }
  }

  TEST_CASE("noiseless fits recover parameters") {
    const Eigen::VectorXd x = rabi_x();
    const auto rabi = ModelSpec::rabi();
    const Eigen::VectorXd y = eval_model(rabi, kRabiTruth, x);
    const FitResult r = fit(rabi, x, y, poisson_sigma(y));
    REQUIRE(r.converged);
    CHECK(r.dof == 76);
    CHECK(r.parameters.size() == 5);
    CHECK(r.value("a") == doctest::Approx(2000.0).epsilon(1e-6));
    CHECK(r.value("omega") == doctest::Approx(20.4e6).epsilon(1e-6));
    CHECK(std::abs(r.value("phi")) < 1e-6);
    CHECK(r.value("t2star") == doctest::Approx(320e-9).epsilon(1e-6));
    CHECK(r.value("c") == doctest::Approx(11000.0).epsilon(1e-6));
    CHECK(r.chi2 < 1e-10);

    const auto decay = ModelSpec::decay();
    const Eigen::VectorXd xd = linspace(0, 60e-9, 240);
    const Eigen::VectorXd pd = (Eigen::VectorXd(3) << 900.0, 12e-9, 30.0).finished();
    const FitResult rd = fit(decay, xd, eval_model(decay, pd, xd), Eigen::VectorXd::Ones(240));
    REQUIRE(rd.converged);
    CHECK(rd.value("tau") == doctest::Approx(12e-9).epsilon(1e-6));
    CHECK(rd.value("amplitude") == doctest::Approx(900.0).epsilon(1e-6));

    const auto stretched = ModelSpec::decay({}, true);
    const Eigen::VectorXd ps = (Eigen::VectorXd(4) << 0.3, 940e-9, 0.7, 1.6).finished();
    const Eigen::VectorXd xs = linspace(0, 3e-6, 60);
    const FitResult rs = fit(stretched, xs, eval_model(stretched, ps, xs), Eigen::VectorXd::Constant(60, 0.01));
    REQUIRE(rs.converged);
    CHECK(rs.value("stretch") == doctest::Approx(1.6).epsilon(1e-6));
    CHECK(rs.value("tau") == doctest::Approx(940e-9).epsilon(1e-6));
  }

  TEST_CASE("poisson rabi fits within tolerance") {
    const Eigen::VectorXd x = rabi_x();
    const auto rabi = ModelSpec::rabi();
    const Eigen::VectorXd mean = eval_model(rabi, kRabiTruth, x);
    std::mt19937_64 rng(2024);
    int within_omega = 0, within_t2 = 0, converged = 0;
    const int n = 120;
    for (int k = 0; k < n; ++k) {
      const Eigen::VectorXd y = poisson(mean, rng);
      const FitResult r = fit(rabi, x, y, poisson_sigma(y));
      converged += r.converged;
      within_omega += std::abs(r.value("omega") / 20.4e6 - 1.0) < 0.02;
      within_t2 += std::abs(r.value("t2star") / 320e-9 - 1.0) < 0.20;
    }
    CHECK(converged == n);
    CHECK(within_omega == n);
    CHECK(within_t2 == n);
  }

  TEST_CASE("one-sigma coverage for omega") {
    const Eigen::VectorXd x = rabi_x();
    const auto rabi = ModelSpec::rabi();
    const Eigen::VectorXd mean = eval_model(rabi, kRabiTruth, x);
    std::mt19937_64 rng(77);
    const int n = 300;
    int covered = 0;
    for (int k = 0; k < n; ++k) {
      const Eigen::VectorXd y = poisson(mean, rng);
      const FitResult r = fit(rabi, x, y, poisson_sigma(y));
      covered += std::abs(r.value("omega") - 20.4e6) <= r.sigma("omega");
    }
    const double frac = static_cast<double>(covered) / n;
    MESSAGE("coverage " << frac);
    CHECK(frac >= 0.63);
    CHECK(frac <= 0.73);
  }

  TEST_CASE("overlapping lorentzian dips") {
    const auto lor = ModelSpec::lorentzian(2);
    const double split = 19.94e6;
    const Eigen::VectorXd truth =
        (Eigen::VectorXd(7) << 2e4, 0.12, 2.87e9 - split / 2, 11e6, 0.12, 2.87e9 + split / 2, 11e6).finished();
    const Eigen::VectorXd x = linspace(2.82e9, 2.92e9, 201);
    const Eigen::VectorXd mean = eval_model(lor, truth, x);

    const FitResult exact = fit(lor, x, mean, poisson_sigma(mean));
    REQUIRE(exact.converged);
    CHECK(exact.value("center0") == doctest::Approx(truth[2]).epsilon(1e-9));
    CHECK(exact.value("center1") == doctest::Approx(truth[5]).epsilon(1e-9));

    std::mt19937_64 rng(5);
    for (int k = 0; k < 50; ++k) {
      const Eigen::VectorXd y = poisson(mean, rng);
      const FitResult r = fit(lor, x, y, poisson_sigma(y));
      CHECK(r.converged);
      CHECK(std::abs(r.value("center0") - truth[2]) < 0.5e6);
      CHECK(std::abs(r.value("center1") - truth[5]) < 0.5e6);
    }
  }

  TEST_CASE("scale equivariance") {
    const Eigen::VectorXd x = rabi_x();
    const auto rabi = ModelSpec::rabi();
    std::mt19937_64 rng(9);
    const Eigen::VectorXd y = poisson(eval_model(rabi, kRabiTruth, x), rng);
    const Eigen::VectorXd s = poisson_sigma(y);
    const FitResult a = fit(rabi, x, y, s);
    const double k = 3.7;
    const FitResult b = fit(rabi, x, k * y, k * s);
    REQUIRE(a.converged);
    REQUIRE(b.converged);
    CHECK(b.value("a") == doctest::Approx(k * a.value("a")).epsilon(1e-6));
    CHECK(b.value("c") == doctest::Approx(k * a.value("c")).epsilon(1e-6));
    CHECK(b.value("omega") == doctest::Approx(a.value("omega")).epsilon(1e-6));
    CHECK(b.value("t2star") == doctest::Approx(a.value("t2star")).epsilon(1e-6));
    CHECK(b.value("phi") == doctest::Approx(a.value("phi")).epsilon(1e-5));
    CHECK(b.chi2 == doctest::Approx(a.chi2).epsilon(1e-6));
  }

  TEST_CASE("fit errors and flags") {
    const auto rabi = ModelSpec::rabi();
    const Eigen::VectorXd x = linspace(0, 1, 5);
    CHECK_THROWS_AS(fit(rabi, x, x, Eigen::VectorXd::Ones(5)), AnalysisError);
    const Eigen::VectorXd x6 = linspace(0, 1, 6);
    CHECK_THROWS_AS(fit(rabi, x6, x6, Eigen::VectorXd::Zero(6)), AnalysisError);
    CHECK_THROWS_AS(fit(rabi, x6, x6.head(5), Eigen::VectorXd::Ones(5)), AnalysisError);

    // A flat spectrum leaves depth, centre and width unidentifiable.
    const Eigen::VectorXd xf = linspace(2.82e9, 2.92e9, 101);
    const Eigen::VectorXd flat = Eigen::VectorXd::Constant(101, 1e4);
    const FitResult r = fit(ModelSpec::lorentzian(1), xf, flat, poisson_sigma(flat));
    CHECK_FALSE(r.converged);
    CHECK_FALSE(r.message.empty());
    for (const auto& p : r.parameters) CHECK(std::isfinite(p.value));

    FitOptions short_run;
    short_run.max_iterations = 1;
    std::mt19937_64 rng(1);
    const Eigen::VectorXd y = poisson(eval_model(rabi, kRabiTruth, rabi_x()), rng);
    ModelSpec far = ModelSpec::rabi({1500.0, 15e6, 1.0, 100e-9, 9000.0});
    const FitResult lim = fit(far, rabi_x(), y, poisson_sigma(y), short_run);
    CHECK(lim.iterations == 1);
    CHECK_FALSE(lim.converged);
  }

  TEST_CASE("guesses") {
    const Eigen::VectorXd x = rabi_x();
    const Eigen::VectorXd y = eval_model(ModelSpec::rabi(), kRabiTruth, x);
    CHECK(dominant_frequency(x, y) == doctest::Approx(20.4e6).epsilon(0.05));
    const auto g = guess_parameters(ModelSpec::rabi(), x, y);
    CHECK(g[1] == doctest::Approx(20.4e6).epsilon(0.05));
    CHECK(g[0] > 0.0);

    const Eigen::VectorXd xd = linspace(0, 60e-9, 240);
    const auto decay = ModelSpec::decay();
    const auto gd = guess_parameters(decay, xd, eval_model(decay, Eigen::Vector3d(900, 12e-9, 30), xd));
    CHECK(gd[1] == doctest::Approx(12e-9).epsilon(0.2));
  }

  TEST_CASE("peak finding") {
    const auto lor = ModelSpec::lorentzian(1);
    const Eigen::VectorXd x = linspace(2.82e9, 2.92e9, 101);
    const double dx = x[1] - x[0];
    const Eigen::VectorXd single = eval_model(lor, Eigen::Vector4d(1e4, 0.2, 2.8733e9, 11e6), x);
    std::mt19937_64 rng(3);
    for (int k = 0; k < 20; ++k) {
      const auto c = peak_find(x, poisson(single, rng), 3);
      REQUIRE(c.size() >= 1);
      CHECK(std::abs(c[0] - 2.8733e9) <= 2 * dx);
    }

    CHECK(peak_find(x, Eigen::VectorXd::Constant(101, 1e4), 2).empty());

    // Mirror-symmetric pair of equal dips about the grid centre.
    const auto lor2 = ModelSpec::lorentzian(2);
    Eigen::VectorXd p(7);
    p << 1e4, 0.2, 2.85e9, 5e6, 0.2, 2.89e9, 5e6;
    const auto pair = peak_find(x, eval_model(lor2, p, x), 2);
    REQUIRE(pair.size() == 2);
    CHECK(pair[0] < pair[1]);
    CHECK(pair[0] == doctest::Approx(2.85e9).epsilon(1e-6));

    // Deeper dip comes first regardless of position.
    p << 1e4, 0.1, 2.85e9, 5e6, 0.3, 2.89e9, 5e6;
    const auto deep = peak_find(x, eval_model(lor2, p, x), 2);
    REQUIRE(deep.size() == 2);
    CHECK(deep[0] > deep[1]);
    CHECK(peak_find(x, eval_model(lor2, p, x), 1).size() == 1);

    CHECK_THROWS_AS(peak_find(x.head(4), single.head(4), 1), AnalysisError);
  }

  TEST_CASE("field from splitting") {
    const double g = 28e9;
    const auto b = bz_from_splitting(2.87e9 + 9.968e6, 2.87e9 - 9.968e6, g);
    CHECK(b.bz == doctest::Approx(356e-6).epsilon(1e-3));
    CHECK(bz_from_splitting(2.87e9, 2.87e9, g).bz == 0.0);
    CHECK_THROWS_AS(bz_from_splitting(2.86e9, 2.87e9, g), AnalysisError);

    // Quadrature propagation: sqrt(2) * 14 kHz / (2 gamma_e).
    const auto u = bz_from_splitting(2.88e9, 2.86e9, g, 14e3, 14e3);
    CHECK(u.sigma == doctest::Approx(std::sqrt(2.0) * 14e3 / (2 * g)).epsilon(1e-12));

    const double s1 = bz_from_splitting(2.875e9, 2.865e9, g).bz;
    const double s2 = bz_from_splitting(2.88e9, 2.86e9, g).bz;
    CHECK(s2 == doctest::Approx(2 * s1).epsilon(1e-12));
  }

  TEST_CASE("pulse calibration") {
    const auto a = pulse_calibration(20.4e6);
    CHECK(a.tau_pi == doctest::Approx(24.5e-9).epsilon(1e-12));
    CHECK(a.tau_pi_2 == doctest::Approx(12.25e-9).epsilon(1e-12));
    const auto b = pulse_calibration(10e6);
    CHECK(b.tau_pi == doctest::Approx(50e-9).epsilon(1e-12));
    CHECK(b.tau_pi_2 == doctest::Approx(25e-9).epsilon(1e-12));
    const auto c = pulse_calibration(20.408e6);
    CHECK(c.tau_pi == a.tau_pi);
    CHECK(c.tau_pi_2 == a.tau_pi_2);
    CHECK_THROWS_AS(pulse_calibration(0.0), AnalysisError);
  }
}
