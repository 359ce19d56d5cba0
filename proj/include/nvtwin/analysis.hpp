#pragma once

// Model functions, bounded weighted least squares, peak finding and the
// field/pulse arithmetic used by the experiments.

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nvtwin::analysis {

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class ModelKind { lorentzian_multi, rabi_eq4, exp_decay, gaussian_1d, gaussian_2d };

std::string to_string(ModelKind k);
ModelKind model_from_string(const std::string& s);

struct Bound {
  double lo = -kInf;
  double hi = kInf;
  bool operator==(const Bound&) const = default;
};

/// Parameter order per model:
///   rabi_eq4          a, omega, phi, t2star, c
///                     y = a cos(2 pi omega x + phi) exp(-x / t2star) + c
///   exp_decay         amplitude, tau, offset [, stretch]
///                     y = amplitude exp(-(x / tau)^stretch) + offset
///   lorentzian_multi  c, then depth_i, center_i, fwhm_i per dip
///                     y = c (1 - sum depth_i (w_i/2)^2 / ((x - x0_i)^2 + (w_i/2)^2))
///   gaussian_1d       amplitude, center, sigma, offset
///   gaussian_2d       amplitude, x0, y0, sigma, offset (x holds pairs)
struct ModelSpec {
  ModelKind kind = ModelKind::exp_decay;
  int n_peaks = 1;
  bool stretched = false;
  std::vector<double> initial_guess;
  std::vector<Bound> bounds;

  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  void validate() const;

  static ModelSpec rabi(std::vector<double> guess = {});
  static ModelSpec decay(std::vector<double> guess = {}, bool stretched = false);
  static ModelSpec lorentzian(int n_peaks, std::vector<double> guess = {});
};

/// Pointwise values. For gaussian_2d, x is [x0, y0, x1, y1, ...].
Eigen::VectorXd eval_model(const ModelSpec& spec, const Eigen::VectorXd& params, const Eigen::VectorXd& x);
/// d y_i / d p_j, analytic.
Eigen::MatrixXd model_jacobian(const ModelSpec& spec, const Eigen::VectorXd& params, const Eigen::VectorXd& x);

struct FitParameter {
  std::string name;
  double value = 0.0;
  double sigma = 0.0;
  bool operator==(const FitParameter&) const = default;
};

struct FitResult {
  ModelKind model = ModelKind::exp_decay;
  std::vector<FitParameter> parameters;
  double residual_norm = 0.0;  // sqrt(chi^2)
  double chi2 = 0.0;
  int dof = 0;
  int iterations = 0;
  bool converged = false;
  std::string message;

  const FitParameter& at(const std::string& name) const;
  double value(const std::string& name) const { return at(name).value; }
  double sigma(const std::string& name) const { return at(name).sigma; }
  Eigen::VectorXd values() const;
  bool operator==(const FitResult&) const = default;
};

struct FitOptions {
  double xtol = 1e-8;  // relative step
  int max_iterations = 200;
};

/// Weighted nonlinear least squares. Missing initial guesses or bounds are
/// filled from the data (see guess_parameters / default_bounds).
/// Uncertainties are sqrt(diag((J^T W J)^-1)) at the optimum.
FitResult fit(const ModelSpec& spec, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
              const Eigen::VectorXd& sigma, const FitOptions& options = {});

/// Data-driven initial guess for the model.
std::vector<double> guess_parameters(const ModelSpec& spec, const Eigen::VectorXd& x, const Eigen::VectorXd& y);
std::vector<Bound> default_bounds(const ModelSpec& spec, const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// Poisson weights: sqrt(counts) with a floor of 1.
Eigen::VectorXd poisson_sigma(const Eigen::VectorXd& counts);

/// Frequency of the strongest component of the mean-removed signal,
/// scanned on a grid finer than the DFT bins.
double dominant_frequency(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// Candidate dip centres, deepest first (equal depth: lower x first).
std::vector<double> peak_find(const Eigen::VectorXd& x, const Eigen::VectorXd& y, int max_peaks);

struct FieldEstimate {
  double bz = 0.0;
  double sigma = 0.0;
};

FieldEstimate bz_from_splitting(double nu_plus, double nu_minus, double gamma_e, double sigma_plus = 0.0,
                                double sigma_minus = 0.0);

struct PulseDurations {
  double tau_pi = 0.0;
  double tau_pi_2 = 0.0;
};

/// 1/(2 omega) and 1/(4 omega) on the 0.25 ns sequencer grid.
PulseDurations pulse_calibration(double omega);

}  // namespace nvtwin::analysis
