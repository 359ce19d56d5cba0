#pragma once

// Lab configuration files and the JSON codecs shared with dataset
// metadata. Parsing is strict: unknown keys are errors.

#include "nvtwin/analysis.hpp"
#include "nvtwin/lab.hpp"
#include "nvtwin/physics.hpp"
#include "nvtwin/sequence.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace nvtwin::config {

using Json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kFormatVersion = 1;

struct RunDefaults {
  std::uint64_t shots = 100000;
  int quadrature_nodes = 24;
  bool operator==(const RunDefaults&) const = default;
};

struct LabConfig {
  int format_version = kFormatVersion;
  std::uint64_t seed = 1;
  /// Applied to every emitter that does not override it.
  physics::NVParameters physics;
  lab::InstrumentSnapshot instrument;
  RunDefaults run;
  /// Where the sample came from: "default", "inline", "preset:<name>" or a path.
  std::string sample_source = "default";
};

/// Reads and validates a config file. Relative sample paths resolve
/// against the config file's directory.
LabConfig load_config(const std::filesystem::path& path);
LabConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
/// Effective configuration after defaulting, with the sample inlined.
Json effective_config(const LabConfig& cfg);

/// Default sample: one emitter at the stage centre (50, 50, 50) um.
lab::VirtualSample default_sample(const physics::NVParameters& params);

// --- codecs ------------------------------------------------------------------
// Non-finite doubles are written as the strings "inf", "-inf", "nan".

Json number(double v);
double to_number(const Json& j, const std::string& path);

Json to_json(const physics::OpticalRates& r);
Json to_json(const physics::NVParameters& p);
Json to_json(const lab::Emitter& e);
Json to_json(const lab::VirtualSample& s);
Json to_json(const lab::SPADConfig& s);
Json to_json(const lab::PSFModel& p);
Json to_json(const lab::StageModel& s);
Json to_json(const lab::InstrumentState& s);
Json to_json(const lab::InstrumentSnapshot& s);
Json to_json(const analysis::FitResult& f);
Json to_json(const seq::SweepSpec& s);
Json to_json(const RunDefaults& r);

// Decoders start from `base` and override the keys present.
physics::OpticalRates optical_from_json(const Json& j, physics::OpticalRates base = {}, const std::string& path = "optical");
physics::NVParameters physics_from_json(const Json& j, physics::NVParameters base = {}, const std::string& path = "physics");
lab::VirtualSample sample_from_json(const Json& j, const physics::NVParameters& defaults, const std::string& path = "sample");
lab::InstrumentState state_from_json(const Json& j, lab::InstrumentState base = {}, const std::string& path = "state");
lab::PSFModel psf_from_json(const Json& j, const std::string& path = "psf");
lab::StageModel stage_from_json(const Json& j, lab::StageModel base = {}, const std::string& path = "stage");
lab::InstrumentSnapshot snapshot_from_json(const Json& j, const std::string& path = "instrument");
analysis::FitResult fit_from_json(const Json& j, const std::string& path = "fit");
seq::SweepSpec sweep_from_json(const Json& j, const std::string& path = "sweep");
RunDefaults run_from_json(const Json& j, RunDefaults base = {}, const std::string& path = "run");

}  // namespace nvtwin::config
