#pragma once

// The measurement suite: each experiment expands its sweep, runs the
// timelines on the virtual lab and returns a Dataset with fits.
//
// Every experiment draws its randomness from make_rng(seed, id, index),
// with a fixed id per experiment and one index per sweep point (or scan
// row), so a Dataset's metadata is enough to regenerate it exactly.

#include "nvtwin/analysis.hpp"
#include "nvtwin/config.hpp"
#include "nvtwin/dataset.hpp"
#include "nvtwin/lab.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

namespace nvtwin::exp {

using Json = nlohmann::json;

class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { scan, odmr, rabi, readout, lifetime, hahn, ramsey, autofocus };

std::string to_string(ExperimentKind k);
ExperimentKind experiment_from_string(const std::string& s);

inline constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

struct Context {
  lab::InstrumentSnapshot snapshot;
  config::RunDefaults run;
  /// Checked between sweep points (between rows for scans).
  const std::atomic<bool>* abort = nullptr;
  /// Called in sweep order after each point with its values.
  std::function<void(std::size_t index, std::size_t total, const Json& point)> on_point;
  /// Wall-clock pause per point; lets tests stretch a run.
  std::chrono::milliseconds point_delay{0};

  bool abort_requested() const { return abort != nullptr && abort->load(); }
};

// --- parameters ----------------------------------------------------------------
// Unset (NaN) frequencies and Rabi rates fall back to the instrument MW
// settings; zero shots fall back to the run defaults.

struct ScanParams {
  double x_min = 49.0, x_max = 51.0;
  double y_min = 49.0, y_max = 51.0;
  double z = kUnset;  // um, current stage height when unset
  double resolution = 0.05;
  double dwell = 1e-3;
  bool fit_spot = true;
};

struct OdmrParams {
  double f_start = 2.82e9;
  double f_stop = 2.92e9;
  int points = 201;
  double dwell = 1.0;  // s per point, split into 1 ms sequence shots
  /// Calibration fixture giving the 11 MHz / 4 % line at zero field.
  double laser_power = 1.6e-3;
  double mw_rabi = 0.6e6;
  int n_peaks = 0;  // 0 chooses 1 or 2 from the field and the data
};

struct RabiParams {
  double tau_start = 0.0;
  double tau_stop = 500e-9;
  int points = 101;
  double mw_frequency = kUnset;
  double omega = kUnset;
  std::uint64_t shots = 0;
};

struct ReadoutParams {
  double pi_duration = kUnset;  // 1/(2 omega) when unset
  double mw_frequency = kUnset;
  double omega = kUnset;
  double readout = 3e-6;
  double bin = 20e-9;
  std::uint64_t shots = 0;
};

struct LifetimeParams {
  double excitation = 3e-6;  // long enough to reach the polarized steady state
  double dark_window = 200e-9;
  double bin = 250e-12;
  std::uint64_t shots = 6000000;
};

struct EchoParams {
  double tau_start = 0.0;
  double tau_stop = 1.5e-6;
  int points = 31;
  double mw_frequency = kUnset;
  double omega = kUnset;
  // The echo amplitude is small, so the default budget is a longer
  // integration than the run default.
  std::uint64_t shots = 2000000;
  bool stretched = false;
};

struct AutofocusParams {
  lab::Vec3 guess = lab::Vec3::Constant(50.0);
  double span = 0.6;          // um, lateral line length
  double axial_span = kUnset;  // um, 6 axial sigmas when unset
  int points = 31;
  double dwell = 5e-3;
};

Json to_json(const ScanParams& p);
Json to_json(const OdmrParams& p);
Json to_json(const RabiParams& p);
Json to_json(const ReadoutParams& p);
Json to_json(const LifetimeParams& p);
Json to_json(const EchoParams& p);
Json to_json(const AutofocusParams& p);

// Strict decoders: unknown keys throw config::ConfigError.
ScanParams scan_params(const Json& j);
OdmrParams odmr_params(const Json& j);
RabiParams rabi_params(const Json& j);
ReadoutParams readout_params(const Json& j);
LifetimeParams lifetime_params(const Json& j);
EchoParams echo_params(const Json& j);
AutofocusParams autofocus_params(const Json& j);

// --- experiments --------------------------------------------------------------

data::Dataset confocal_scan(const ScanParams& p, const Context& ctx);
/// Same scan written row by row to `path`; memory stays bounded for
/// 2000 x 2000 rasters. Returns the metadata written.
Json confocal_scan_to_file(const ScanParams& p, const Context& ctx, const std::filesystem::path& path);

data::Dataset cw_odmr(const OdmrParams& p, const Context& ctx);
data::Dataset rabi(const RabiParams& p, const Context& ctx);
data::Dataset readout_contrast(const ReadoutParams& p, const Context& ctx);
data::Dataset lifetime(const LifetimeParams& p, const Context& ctx);
/// Signal against the total free evolution 2 tau.
data::Dataset hahn_echo(const EchoParams& p, const Context& ctx);
data::Dataset ramsey(const EchoParams& p, const Context& ctx);

struct AutofocusResult {
  lab::Vec3 position;
  data::Dataset dataset;
};
/// Line scans along x, y and z through the guess with a 1-D Gaussian fit
/// each; throws ExperimentError when any axis shows no peak.
AutofocusResult autofocus(const AutofocusParams& p, const Context& ctx);

/// Dispatch by name with JSON parameters (missing keys take defaults).
data::Dataset run_experiment(ExperimentKind kind, const Json& params, const Context& ctx);

/// Re-runs the experiment recorded in a Dataset's metadata.
data::Dataset replay(const Json& metadata);

}  // namespace nvtwin::exp
