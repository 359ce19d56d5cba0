#include "nvtwin/analysis.hpp"

#include "nvtwin/sequence.hpp"

#include <unsupported/Eigen/LevenbergMarquardt>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace nvtwin::analysis {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double span_of(const Eigen::VectorXd& x) { return x.maxCoeff() - x.minCoeff(); }

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + mid - 1, v.end());
    m = 0.5 * (m + v[mid - 1]);
  }
  return m;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// Map between bounded model parameters p and unconstrained internal u.
// Both bounds: p = lo + (hi - lo)(sin u + 1)/2, on a log scale when the
// interval spans many decades of a positive quantity. One bound:
// p = lo - 1 + sqrt(u^2 + 1) (mirrored for an upper bound).
struct Transform {
  enum class Kind { none, lower, upper, both, log_both } kind = Kind::none;
  double lo = -kInf;
  double hi = kInf;

  static Transform from(const Bound& b) {
    Transform t{Kind::none, b.lo, b.hi};
    const bool fl = std::isfinite(b.lo), fh = std::isfinite(b.hi);
    if (fl && fh) {
      t.kind = (b.lo > 0.0 && b.hi / b.lo > 1e3) ? Kind::log_both : Kind::both;
    } else if (fl) {
      t.kind = Kind::lower;
    } else if (fh) {
      t.kind = Kind::upper;
    }
    return t;
  }

  double to_external(double u) const {
    switch (kind) {
      case Kind::none:
        return u;
      case Kind::lower:
        return lo - 1.0 + std::sqrt(u * u + 1.0);
      case Kind::upper:
        return hi + 1.0 - std::sqrt(u * u + 1.0);
      case Kind::both:
        return lo + 0.5 * (hi - lo) * (std::sin(u) + 1.0);
      case Kind::log_both: {
        const double a = std::log(lo), b = std::log(hi);
        return std::exp(a + 0.5 * (b - a) * (std::sin(u) + 1.0));
      }
    }
    return u;
  }

  double derivative(double u) const {
    switch (kind) {
      case Kind::none:
        return 1.0;
      case Kind::lower:
        return u / std::sqrt(u * u + 1.0);
      case Kind::upper:
        return -u / std::sqrt(u * u + 1.0);
      case Kind::both:
        return 0.5 * (hi - lo) * std::cos(u);
      case Kind::log_both: {
        const double a = std::log(lo), b = std::log(hi);
        return to_external(u) * 0.5 * (b - a) * std::cos(u);
      }
    }
    return 1.0;
  }

  double to_internal(double p) const {
    switch (kind) {
      case Kind::none:
        return p;
      case Kind::lower: {
        const double d = std::max(p - lo + 1.0, 1.0);
        return std::sqrt(d * d - 1.0);
      }
      case Kind::upper: {
        const double d = std::max(hi - p + 1.0, 1.0);
        return std::sqrt(d * d - 1.0);
      }
      case Kind::both:
        return std::asin(std::clamp(2.0 * (p - lo) / (hi - lo) - 1.0, -1.0, 1.0));
      case Kind::log_both: {
        const double a = std::log(lo), b = std::log(hi);
        return std::asin(std::clamp(2.0 * (std::log(p) - a) / (b - a) - 1.0, -1.0, 1.0));
      }
    }
    return p;
  }
};

// Keep starting points off the bounds, where the sine map is flat.
double inset(double p, const Bound& b) {
  const bool fl = std::isfinite(b.lo), fh = std::isfinite(b.hi);
  if (fl && fh) {
    if (b.lo > 0.0 && b.hi / b.lo > 1e3) {
      const double a = std::log(b.lo), c = std::log(b.hi);
      const double m = 1e-3 * (c - a);
      return std::exp(std::clamp(std::log(std::max(p, b.lo)), a + m, c - m));
    }
    const double m = 1e-3 * (b.hi - b.lo);
    return std::clamp(p, b.lo + m, b.hi - m);
  }
  if (fl) return std::max(p, b.lo + 1e-6 * std::max(1.0, std::abs(b.lo)));
  if (fh) return std::min(p, b.hi - 1e-6 * std::max(1.0, std::abs(b.hi)));
  return p;
}

struct Problem : Eigen::DenseFunctor<double> {
  Problem(const ModelSpec& spec, const Eigen::VectorXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& sigma,
          std::vector<Transform> transforms)
      : Eigen::DenseFunctor<double>(static_cast<int>(spec.parameter_count()), static_cast<int>(y.size())),
        spec(spec),
        x(x),
        y(y),
        inv_sigma(sigma.cwiseInverse()),
        transforms(std::move(transforms)) {}

  Eigen::VectorXd external(const Eigen::VectorXd& u) const {
    Eigen::VectorXd p(u.size());
    for (Eigen::Index k = 0; k < u.size(); ++k) p[k] = transforms[k].to_external(u[k]);
    return p;
  }

  int operator()(const Eigen::VectorXd& u, Eigen::VectorXd& fvec) const {
    fvec = (eval_model(spec, external(u), x) - y).cwiseProduct(inv_sigma);
    return 0;
  }

  int df(const Eigen::VectorXd& u, Eigen::MatrixXd& fjac) const {
    fjac = inv_sigma.asDiagonal() * model_jacobian(spec, external(u), x);
    for (Eigen::Index k = 0; k < u.size(); ++k) fjac.col(k) *= transforms[k].derivative(u[k]);
    return 0;
  }

  const ModelSpec& spec;
  const Eigen::VectorXd& x;
  const Eigen::VectorXd& y;
  Eigen::VectorXd inv_sigma;
  std::vector<Transform> transforms;
};

// Amplitude/phase of a damped cosine at fixed frequency and envelope.
struct LinearFit {
  double alpha, beta, c, residual;
};

LinearFit damped_cos_lsq(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double f, double t) {
  Eigen::MatrixXd a(x.size(), 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double e = std::isfinite(t) ? std::exp(-x[i] / t) : 1.0;
    a(i, 0) = std::cos(kTwoPi * f * x[i]) * e;
    a(i, 1) = std::sin(kTwoPi * f * x[i]) * e;
    a(i, 2) = 1.0;
  }
  const Eigen::Vector3d s = a.colPivHouseholderQr().solve(y);
  return {s[0], s[1], s[2], (a * s - y).squaredNorm()};
}

// Half-depth full width around index i of a dip below `base`.
double dip_width(const Eigen::VectorXd& x, const std::vector<double>& s, std::size_t i, double base) {
  const double half = base - 0.5 * (base - s[i]);
  std::size_t l = i, r = i;
  while (l > 0 && s[l] < half) --l;
  while (r + 1 < s.size() && s[r] < half) ++r;
  return std::max(x[static_cast<Eigen::Index>(r)] - x[static_cast<Eigen::Index>(l)], 1e-12);
}

std::vector<double> smooth(const Eigen::VectorXd& y) {
  const auto n = static_cast<std::ptrdiff_t>(y.size());
  std::vector<double> s(static_cast<std::size_t>(n));
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::ptrdiff_t a = std::max<std::ptrdiff_t>(0, i - 2), b = std::min<std::ptrdiff_t>(n - 1, i + 2);
    double acc = 0.0;
    for (std::ptrdiff_t k = a; k <= b; ++k) acc += y[k];
    s[static_cast<std::size_t>(i)] = acc / static_cast<double>(b - a + 1);
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::lorentzian_multi:
      return "lorentzian_multi";
    case ModelKind::rabi_eq4:
      return "rabi_eq4";
    case ModelKind::exp_decay:
      return "exp_decay";
    case ModelKind::gaussian_1d:
      return "gaussian_1d";
    case ModelKind::gaussian_2d:
      return "gaussian_2d";
  }
  return "exp_decay";
}

ModelKind model_from_string(const std::string& s) {
  for (auto k : {ModelKind::lorentzian_multi, ModelKind::rabi_eq4, ModelKind::exp_decay, ModelKind::gaussian_1d,
                 ModelKind::gaussian_2d})
    if (to_string(k) == s) return k;
  throw AnalysisError("unknown model '" + s + "'");
}

std::vector<std::string> ModelSpec::parameter_names() const {
  switch (kind) {
    case ModelKind::rabi_eq4:
      return {"a", "omega", "phi", "t2star", "c"};
    case ModelKind::exp_decay:
      if (stretched) return {"amplitude", "tau", "offset", "stretch"};
      return {"amplitude", "tau", "offset"};
    case ModelKind::lorentzian_multi: {
      std::vector<std::string> n = {"c"};
      for (int k = 0; k < n_peaks; ++k) {
        const std::string s = std::to_string(k);
        n.push_back("depth" + s);
        n.push_back("center" + s);
        n.push_back("fwhm" + s);
      }
      return n;
    }
    case ModelKind::gaussian_1d:
      return {"amplitude", "center", "sigma", "offset"};
    case ModelKind::gaussian_2d:
      return {"amplitude", "x0", "y0", "sigma", "offset"};
  }
  return {};
}

std::size_t ModelSpec::parameter_count() const { return parameter_names().size(); }

void ModelSpec::validate() const {
  if (kind == ModelKind::lorentzian_multi && n_peaks < 1) throw AnalysisError("n_peaks must be >= 1");
  const std::size_t n = parameter_count();
  if (!initial_guess.empty() && initial_guess.size() != n)
    throw AnalysisError("initial guess has " + std::to_string(initial_guess.size()) + " values, model needs " +
                        std::to_string(n));
  if (!bounds.empty() && bounds.size() != n) throw AnalysisError("bounds size does not match the model");
  for (std::size_t k = 0; k < bounds.size(); ++k) {
    if (!(bounds[k].lo < bounds[k].hi)) throw AnalysisError("bounds must satisfy lo < hi");
    if (!initial_guess.empty() && !(initial_guess[k] >= bounds[k].lo && initial_guess[k] <= bounds[k].hi))
      throw AnalysisError("initial guess outside bounds for parameter " + parameter_names()[k]);
  }
}

ModelSpec ModelSpec::rabi(std::vector<double> guess) {
  return {ModelKind::rabi_eq4, 1, false, std::move(guess), {}};
}

ModelSpec ModelSpec::decay(std::vector<double> guess, bool stretched) {
  return {ModelKind::exp_decay, 1, stretched, std::move(guess), {}};
}

ModelSpec ModelSpec::lorentzian(int n_peaks, std::vector<double> guess) {
  return {ModelKind::lorentzian_multi, n_peaks, false, std::move(guess), {}};
}

Eigen::VectorXd eval_model(const ModelSpec& spec, const Eigen::VectorXd& p, const Eigen::VectorXd& x) {
  if (static_cast<std::size_t>(p.size()) != spec.parameter_count())
    throw AnalysisError("parameter vector has the wrong length");
  const Eigen::Index m = spec.kind == ModelKind::gaussian_2d ? x.size() / 2 : x.size();
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    switch (spec.kind) {
      case ModelKind::rabi_eq4:
        y[i] = p[0] * std::cos(kTwoPi * p[1] * x[i] + p[2]) * std::exp(-x[i] / p[3]) + p[4];
        break;
      case ModelKind::exp_decay: {
        const double n = spec.stretched ? p[3] : 1.0;
        const double u = x[i] / p[1];
        y[i] = p[0] * std::exp(-(n == 1.0 ? u : std::pow(std::max(u, 0.0), n))) + p[2];
        break;
      }
      case ModelKind::lorentzian_multi: {
        double sum = 0.0;
        for (int k = 0; k < spec.n_peaks; ++k) {
          const double a = p[1 + 3 * k], x0 = p[2 + 3 * k], w = p[3 + 3 * k];
          const double h = 0.25 * w * w, d = x[i] - x0;
          sum += a * h / (d * d + h);
        }
        y[i] = p[0] * (1.0 - sum);
        break;
      }
      case ModelKind::gaussian_1d: {
        const double d = x[i] - p[1];
        y[i] = p[0] * std::exp(-d * d / (2.0 * p[2] * p[2])) + p[3];
        break;
      }
      case ModelKind::gaussian_2d: {
        const double dx = x[2 * i] - p[1], dy = x[2 * i + 1] - p[2];
        y[i] = p[0] * std::exp(-(dx * dx + dy * dy) / (2.0 * p[3] * p[3])) + p[4];
        break;
      }
    }
  }
  return y;
}

Eigen::MatrixXd model_jacobian(const ModelSpec& spec, const Eigen::VectorXd& p, const Eigen::VectorXd& x) {
  const auto np = static_cast<Eigen::Index>(spec.parameter_count());
  if (p.size() != np) throw AnalysisError("parameter vector has the wrong length");
  const Eigen::Index m = spec.kind == ModelKind::gaussian_2d ? x.size() / 2 : x.size();
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(m, np);
  for (Eigen::Index i = 0; i < m; ++i) {
    switch (spec.kind) {
      case ModelKind::rabi_eq4: {
        const double th = kTwoPi * p[1] * x[i] + p[2];
        const double e = std::exp(-x[i] / p[3]);
        const double c = std::cos(th), s = std::sin(th);
        j(i, 0) = c * e;
        j(i, 1) = -p[0] * s * e * kTwoPi * x[i];
        j(i, 2) = -p[0] * s * e;
        j(i, 3) = p[0] * c * e * x[i] / (p[3] * p[3]);
        j(i, 4) = 1.0;
        break;
      }
      case ModelKind::exp_decay: {
        const double n = spec.stretched ? p[3] : 1.0;
        const double u = std::max(x[i] / p[1], 0.0);
        const double un = n == 1.0 ? u : std::pow(u, n);
        const double e = std::exp(-un);
        j(i, 0) = e;
        j(i, 1) = p[0] * e * n * un / p[1];
        j(i, 2) = 1.0;
        if (spec.stretched) j(i, 3) = u > 0.0 ? -p[0] * e * un * std::log(u) : 0.0;
        break;
      }
      case ModelKind::lorentzian_multi: {
        double sum = 0.0;
        for (int k = 0; k < spec.n_peaks; ++k) {
          const double a = p[1 + 3 * k], x0 = p[2 + 3 * k], w = p[3 + 3 * k];
          const double h = 0.25 * w * w, d = x[i] - x0;
          const double den = d * d + h;
          const double l = h / den;
          sum += a * l;
          j(i, 1 + 3 * k) = -p[0] * l;
          j(i, 2 + 3 * k) = -p[0] * a * 2.0 * h * d / (den * den);
          j(i, 3 + 3 * k) = -p[0] * a * 0.5 * w * d * d / (den * den);
        }
        j(i, 0) = 1.0 - sum;
        break;
      }
      case ModelKind::gaussian_1d: {
        const double d = x[i] - p[1], s2 = p[2] * p[2];
        const double g = std::exp(-d * d / (2.0 * s2));
        j(i, 0) = g;
        j(i, 1) = p[0] * g * d / s2;
        j(i, 2) = p[0] * g * d * d / (s2 * p[2]);
        j(i, 3) = 1.0;
        break;
      }
      case ModelKind::gaussian_2d: {
        const double dx = x[2 * i] - p[1], dy = x[2 * i + 1] - p[2], s2 = p[3] * p[3];
        const double r2 = dx * dx + dy * dy;
        const double g = std::exp(-r2 / (2.0 * s2));
        j(i, 0) = g;
        j(i, 1) = p[0] * g * dx / s2;
        j(i, 2) = p[0] * g * dy / s2;
        j(i, 3) = p[0] * g * r2 / (s2 * p[3]);
        j(i, 4) = 1.0;
        break;
      }
    }
  }
  return j;
}

const FitParameter& FitResult::at(const std::string& name) const {
  for (const auto& p : parameters)
    if (p.name == name) return p;
  throw AnalysisError("fit has no parameter '" + name + "'");
}

Eigen::VectorXd FitResult::values() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(parameters.size()));
  for (std::size_t k = 0; k < parameters.size(); ++k) v[static_cast<Eigen::Index>(k)] = parameters[k].value;
  return v;
}

Eigen::VectorXd poisson_sigma(const Eigen::VectorXd& counts) {
  return counts.unaryExpr([](double c) { return std::sqrt(std::max(c, 1.0)); });
}

double dominant_frequency(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const Eigen::Index n = x.size();
  if (n < 4) throw AnalysisError("need at least 4 points for a frequency estimate");
  const double span = span_of(x);
  if (!(span > 0.0)) throw AnalysisError("x values must span a positive range");

  // Remove a straight-line trend before transforming.
  Eigen::MatrixXd a(n, 2);
  a.col(0).setOnes();
  a.col(1) = x;
  const Eigen::Vector2d line = a.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd r = y - a * line;

  const double nyquist = 0.5 * static_cast<double>(n - 1) / span;
  const double df = 1.0 / (8.0 * span);
  auto power = [&](double f) {
    double re = 0.0, im = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      re += r[i] * std::cos(kTwoPi * f * x[i]);
      im -= r[i] * std::sin(kTwoPi * f * x[i]);
    }
    return re * re + im * im;
  };
  double best_f = 0.5 / span, best_p = -1.0;
  for (double f = 0.5 / span; f <= nyquist; f += df) {
    const double pw = power(f);
    if (pw > best_p) {
      best_p = pw;
      best_f = f;
    }
  }
  // Parabolic refinement on the grid neighbours.
  const double pl = power(best_f - df), pr = power(best_f + df);
  const double den = pl - 2.0 * best_p + pr;
  if (den < 0.0) best_f += 0.5 * df * (pl - pr) / den;
  return best_f;
}

std::vector<double> guess_parameters(const ModelSpec& spec, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const Eigen::Index m = y.size();
  const double span = spec.kind == ModelKind::gaussian_2d ? 0.0 : span_of(x);
  switch (spec.kind) {
    case ModelKind::rabi_eq4: {
      const double f = dominant_frequency(x, y);
      LinearFit best{0, 0, y.mean(), kInf};
      double best_t = span;
      for (double t : {0.25 * span, 0.5 * span, span, 2.0 * span, 5.0 * span, kInf}) {
        const LinearFit lf = damped_cos_lsq(x, y, f, t);
        if (lf.residual < best.residual) {
          best = lf;
          best_t = std::isfinite(t) ? t : 20.0 * span;
        }
      }
      const double a = std::hypot(best.alpha, best.beta);
      const double phi = std::atan2(-best.beta, best.alpha);
      return {a, f, phi, best_t, best.c};
    }
    case ModelKind::exp_decay: {
      const Eigen::Index tail = std::max<Eigen::Index>(1, m / 10);
      const double offset = y.tail(tail).mean();
      const Eigen::Index head = std::min<Eigen::Index>(3, m);
      const double amp = y.head(head).mean() - offset;
      // Log-linear regression on the clearly non-zero part of the decay.
      double sx = 0, sy = 0, sxx = 0, sxy = 0;
      int cnt = 0;
      if (amp != 0.0) {
        for (Eigen::Index i = 0; i < m; ++i) {
          const double r = (y[i] - offset) / amp;
          if (r > 0.1 && r <= 1.5) {
            const double l = std::log(r);
            sx += x[i];
            sy += l;
            sxx += x[i] * x[i];
            sxy += x[i] * l;
            ++cnt;
          }
        }
      }
      double tau = span / 3.0;
      if (cnt >= 2) {
        const double slope = (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx);
        if (slope < 0.0 && std::isfinite(slope)) tau = -1.0 / slope;
      }
      std::vector<double> g = {amp, tau, offset};
      if (spec.stretched) g.push_back(1.0);
      return g;
    }
    case ModelKind::lorentzian_multi: {
      const double c = median(to_std(y));
      const std::vector<double> s = smooth(y);
      std::vector<double> centers = peak_find(x, y, spec.n_peaks);
      const double dx = span / static_cast<double>(std::max<Eigen::Index>(1, m - 1));
      std::vector<double> g = {c};
      std::vector<std::pair<double, double>> dips;  // center, width
      for (double x0 : centers) {
        const auto i = static_cast<std::size_t>(std::min_element(x.data(), x.data() + m,
                                                                 [&](double a, double b) {
                                                                   return std::abs(a - x0) < std::abs(b - x0);
                                                                 }) -
                                                x.data());
        dips.emplace_back(x0, std::max(dip_width(x, s, i, c), 2.0 * dx));
      }
      if (dips.empty()) {
        const auto i = static_cast<std::size_t>(std::min_element(s.begin(), s.end()) - s.begin());
        dips.emplace_back(x[static_cast<Eigen::Index>(i)], std::max(dip_width(x, s, i, c), 2.0 * dx));
      }
      // Fewer separated dips than requested: split the deepest one.
      while (static_cast<int>(dips.size()) < spec.n_peaks) {
        const auto [x0, w] = dips.front();
        dips.front() = {x0 - 0.25 * w, 0.6 * w};
        dips.emplace_back(x0 + 0.25 * w, 0.6 * w);
      }
      std::sort(dips.begin(), dips.end());
      for (const auto& [x0, w] : dips) {
        const auto i = static_cast<std::size_t>(std::min_element(x.data(), x.data() + m,
                                                                 [&](double a, double b) {
                                                                   return std::abs(a - x0) < std::abs(b - x0);
                                                                 }) -
                                                x.data());
        const double depth = c != 0.0 ? std::clamp((c - s[i]) / c, 1e-4, 0.99) : 0.01;
        g.push_back(depth);
        g.push_back(std::clamp(x0, x.minCoeff(), x.maxCoeff()));
        g.push_back(std::min(w, span));
      }
      return g;
    }
    case ModelKind::gaussian_1d: {
      Eigen::Index imax = 0;
      y.maxCoeff(&imax);
      const double offset = std::min(median(to_std(y)), y.minCoeff() + 0.5 * (y.maxCoeff() - y.minCoeff()));
      const double amp = y[imax] - offset;
      const double half = offset + 0.5 * amp;
      Eigen::Index l = imax, r = imax;
      while (l > 0 && y[l] > half) --l;
      while (r + 1 < m && y[r] > half) ++r;
      const double sigma = std::max((x[r] - x[l]) / 2.3548, span / static_cast<double>(4 * m));
      return {amp, x[imax], sigma, offset};
    }
    case ModelKind::gaussian_2d: {
      Eigen::Index imax = 0;
      y.maxCoeff(&imax);
      const double offset = median(to_std(y));
      const double amp = y[imax] - offset;
      // Second moment of the pixels above half maximum.
      double w = 0, mx = 0, my = 0;
      for (Eigen::Index i = 0; i < m; ++i)
        if (y[i] - offset > 0.5 * amp) {
          w += 1;
          mx += x[2 * i];
          my += x[2 * i + 1];
        }
      mx /= w;
      my /= w;
      double r2 = 0;
      for (Eigen::Index i = 0; i < m; ++i)
        if (y[i] - offset > 0.5 * amp) r2 += std::pow(x[2 * i] - mx, 2) + std::pow(x[2 * i + 1] - my, 2);
      // Area above half maximum of a 2-D Gaussian is 2 pi sigma^2 ln 2;
      // use the spread of those pixels instead when it is larger.
      const double sigma = std::max(std::sqrt(r2 / w / (2.0 * std::log(2.0))) , 1e-6);
      return {amp, x[2 * imax], x[2 * imax + 1], sigma, offset};
    }
  }
  return {};
}

std::vector<Bound> default_bounds(const ModelSpec& spec, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  std::vector<Bound> b;
  switch (spec.kind) {
    case ModelKind::rabi_eq4:
      return {{0.0, kInf}, {0.0, 1e9}, {-kInf, kInf}, {1e-9, 1.0}, {-kInf, kInf}};
    case ModelKind::exp_decay:
      b = {{-kInf, kInf}, {1e-12, 1.0}, {-kInf, kInf}};
      if (spec.stretched) b.push_back({0.2, 5.0});
      return b;
    case ModelKind::lorentzian_multi: {
      const double lo = x.minCoeff(), hi = x.maxCoeff();
      b.push_back({0.0, kInf});
      for (int k = 0; k < spec.n_peaks; ++k) {
        b.push_back({0.0, 1.0});
        b.push_back({lo, hi});
        b.push_back({0.0, hi - lo});
      }
      return b;
    }
    case ModelKind::gaussian_1d:
      return {{0.0, kInf}, {x.minCoeff(), x.maxCoeff()}, {0.0, kInf}, {-kInf, kInf}};
    case ModelKind::gaussian_2d: {
      double xlo = kInf, xhi = -kInf, ylo = kInf, yhi = -kInf;
      for (Eigen::Index i = 0; i + 1 < x.size(); i += 2) {
        xlo = std::min(xlo, x[i]);
        xhi = std::max(xhi, x[i]);
        ylo = std::min(ylo, x[i + 1]);
        yhi = std::max(yhi, x[i + 1]);
      }
      return {{0.0, kInf}, {xlo, xhi}, {ylo, yhi}, {0.0, kInf}, {-kInf, kInf}};
    }
  }
  (void)y;
  return b;
}

FitResult fit(const ModelSpec& spec_in, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
              const Eigen::VectorXd& sigma, const FitOptions& options) {
  spec_in.validate();
  const std::size_t n = spec_in.parameter_count();
  const Eigen::Index m = y.size();
  const Eigen::Index xm = spec_in.kind == ModelKind::gaussian_2d ? x.size() / 2 : x.size();
  if (xm != m || sigma.size() != m) throw AnalysisError("x, y and sigma must have the same length");
  if (static_cast<std::size_t>(m) < n + 1)
    throw AnalysisError("need at least " + std::to_string(n + 1) + " points for this model");
  if (!x.allFinite() || !y.allFinite()) throw AnalysisError("data must be finite");
  if (!(sigma.array() > 0.0).all() || !sigma.allFinite()) throw AnalysisError("sigma must be finite and > 0");

  ModelSpec spec = spec_in;
  if (spec.bounds.empty()) spec.bounds = default_bounds(spec, x, y);
  if (spec.initial_guess.empty()) spec.initial_guess = guess_parameters(spec, x, y);

  std::vector<Transform> transforms;
  Eigen::VectorXd u(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) {
    transforms.push_back(Transform::from(spec.bounds[k]));
    double g = spec.initial_guess[k];
    if (!std::isfinite(g)) g = 0.0;
    u[static_cast<Eigen::Index>(k)] = transforms.back().to_internal(inset(g, spec.bounds[k]));
  }

  Problem problem(spec, x, y, sigma, transforms);
  Eigen::LevenbergMarquardt<Problem> lm(problem);
  lm.setXtol(options.xtol);
  lm.setFtol(1e-12);
  lm.setGtol(0.0);
  lm.setMaxfev(10 * options.max_iterations + 10);

  FitResult out;
  out.model = spec.kind;
  auto status = lm.minimizeInit(u);
  int iterations = 0;
  if (status != Eigen::LevenbergMarquardtSpace::ImproperInputParameters) {
    do {
      status = lm.minimizeOneStep(u);
      ++iterations;
    } while (status == Eigen::LevenbergMarquardtSpace::Running && iterations < options.max_iterations);
  }
  out.iterations = iterations;

  const Eigen::VectorXd p = problem.external(u);
  const Eigen::VectorXd r = (eval_model(spec, p, x) - y).cwiseQuotient(sigma);
  out.chi2 = r.squaredNorm();
  out.residual_norm = std::sqrt(out.chi2);
  out.dof = static_cast<int>(m) - static_cast<int>(n);

  using namespace Eigen::LevenbergMarquardtSpace;
  switch (status) {
    case RelativeReductionTooSmall:
    case RelativeErrorTooSmall:
    case RelativeErrorAndReductionTooSmall:
    case CosinusTooSmall:
    case FtolTooSmall:
    case XtolTooSmall:
    case GtolTooSmall:
      out.converged = true;
      break;
    case Running:
      out.message = "iteration limit reached";
      break;
    case TooManyFunctionEvaluation:
      out.message = "too many function evaluations";
      break;
    default:
      out.message = "improper input";
      break;
  }

  // Column equilibration keeps the rank test independent of parameter units.
  const Eigen::MatrixXd j = sigma.cwiseInverse().asDiagonal() * model_jacobian(spec, p, x);
  const Eigen::VectorXd norms = j.colwise().norm().transpose();
  Eigen::VectorXd var = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), kInf);
  bool singular = !(norms.array() > 0.0).all() || !norms.allFinite();
  if (!singular) {
    const Eigen::VectorXd d = norms.cwiseInverse();
    const Eigen::MatrixXd js = j * d.asDiagonal();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(js);
    const Eigen::VectorXd sv = svd.singularValues();
    singular = !(sv[sv.size() - 1] > 1e-10 * sv[0]);
    if (!singular) {
      const Eigen::MatrixXd inv = (js.transpose() * js).inverse();
      var = (d.asDiagonal() * inv * d.asDiagonal()).diagonal();
    }
  }
  if (singular) {
    out.converged = false;
    out.message = "singular Jacobian";
  }
  if (!p.allFinite()) {
    out.converged = false;
    out.message = "non-finite parameters";
  }

  const auto names = spec.parameter_names();
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    out.parameters.push_back({names[k], p[i], std::sqrt(std::max(var[i], 0.0))});
  }

  // A numerically converged fit can still be meaningless: a parameter
  // pinned to its bound or a signal amplitude indistinguishable from zero
  // (flat data) is reported as not converged.
  if (out.converged) {
    for (std::size_t k = 0; k < n && out.converged; ++k) {
      const Bound& b = spec.bounds[k];
      const double v = out.parameters[k].value;
      const double range = std::isfinite(b.hi - b.lo) ? b.hi - b.lo
                                                      : std::max({1.0, std::abs(v),
                                                                  std::isfinite(b.lo) ? std::abs(b.lo) : 0.0,
                                                                  std::isfinite(b.hi) ? std::abs(b.hi) : 0.0});
      const double tol = 1e-6 * range;
      bool pinned = (std::isfinite(b.lo) && v - b.lo <= tol) || (std::isfinite(b.hi) && b.hi - v <= tol);
      if (transforms[k].kind == Transform::Kind::log_both) {
        const double lt = 1e-6 * std::log(b.hi / b.lo);
        pinned = std::log(v / b.lo) <= lt || std::log(b.hi / v) <= lt;
      }
      if (pinned) {
        out.converged = false;
        out.message = "parameter " + names[k] + " at bound";
      }
    }
    for (std::size_t k = 0; k < n && out.converged; ++k) {
      const std::string& name = names[k];
      const bool amplitude = name == "a" || name == "amplitude" || name.rfind("depth", 0) == 0;
      if (amplitude && !(std::abs(out.parameters[k].value) > 2.0 * out.parameters[k].sigma)) {
        out.converged = false;
        out.message = "parameter " + name + " not significant";
      }
    }
  }
  return out;
}

std::vector<double> peak_find(const Eigen::VectorXd& x, const Eigen::VectorXd& y, int max_peaks) {
  if (x.size() != y.size()) throw AnalysisError("x and y must have the same length");
  if (y.size() < 5) throw AnalysisError("peak_find needs at least 5 points");
  if (max_peaks < 1) return {};
  const std::vector<double> s = smooth(y);
  const std::size_t n = s.size();
  const double base = median(s);

  std::vector<double> diffs;
  for (Eigen::Index i = 1; i < y.size(); ++i) diffs.push_back(y[i] - y[i - 1]);
  const double dmed = median(diffs);
  for (auto& d : diffs) d = std::abs(d - dmed);
  const double noise = 1.4826 * median(diffs) / std::sqrt(2.0) / std::sqrt(5.0);
  const double threshold = std::max(6.0 * noise, 1e-12 * std::max(1.0, std::abs(base)));

  struct Cand {
    std::size_t i;
    double depth;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (!(s[i] < s[i - 1] && s[i] <= s[i + 1])) continue;
    // Topographic prominence: rise needed to reach a deeper point.
    double left = s[i], right = s[i];
    for (std::size_t j = i; j-- > 0;) {
      if (s[j] < s[i]) break;
      left = std::max(left, s[j]);
    }
    for (std::size_t j = i + 1; j < n; ++j) {
      if (s[j] < s[i]) break;
      right = std::max(right, s[j]);
    }
    const double prominence = std::min(left, right) - s[i];
    if (prominence > threshold && base - s[i] > threshold) cands.push_back({i, base - s[i]});
  }
  const double tie = 1e-9 * std::max(1.0, std::abs(base));
  std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
    if (std::abs(a.depth - b.depth) > tie) return a.depth > b.depth;
    return x[static_cast<Eigen::Index>(a.i)] < x[static_cast<Eigen::Index>(b.i)];
  });
  std::vector<double> out;
  for (const auto& c : cands) {
    if (static_cast<int>(out.size()) >= max_peaks) break;
    const auto i = static_cast<Eigen::Index>(c.i);
    double xc = x[i];
    const double den = s[c.i - 1] - 2.0 * s[c.i] + s[c.i + 1];
    if (den > 0.0) {
      const double off = 0.5 * (s[c.i - 1] - s[c.i + 1]) / den;
      xc += off * (off > 0 ? x[i + 1] - x[i] : x[i] - x[i - 1]);
    }
    out.push_back(xc);
  }
  return out;
}

FieldEstimate bz_from_splitting(double nu_plus, double nu_minus, double gamma_e, double sigma_plus,
                                double sigma_minus) {
  if (!(gamma_e > 0.0)) throw AnalysisError("gamma_e must be > 0");
  if (!(nu_plus >= nu_minus)) throw AnalysisError("nu_plus must not be below nu_minus");
  if (!(sigma_plus >= 0.0) || !(sigma_minus >= 0.0)) throw AnalysisError("uncertainties must be >= 0");
  return {(nu_plus - nu_minus) / (2.0 * gamma_e), std::hypot(sigma_plus, sigma_minus) / (2.0 * gamma_e)};
}

PulseDurations pulse_calibration(double omega) {
  if (!(omega > 0.0) || !std::isfinite(omega)) throw AnalysisError("omega must be > 0");
  return {seq::to_seconds(seq::snap(1.0 / (2.0 * omega))), seq::to_seconds(seq::snap(1.0 / (4.0 * omega)))};
}

}  // namespace nvtwin::analysis
