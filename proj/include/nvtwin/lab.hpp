#pragma once

// Virtual confocal instrument: piezo stage, Gaussian PSF, magnet, MW
// source, SPAD and TCSPC. Maps physics-engine emission into detected
// counts and photon time tags.
//
// Positions are micrometres, fields tesla, powers watts, times seconds.

#include "nvtwin/physics.hpp"
#include "nvtwin/sequence.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvtwin::lab {

using Vec3 = Eigen::Vector3d;
using Rng = std::mt19937_64;

class LabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Independent stream for (seed, experiment id, sweep index).
Rng make_rng(std::uint64_t seed, std::uint64_t experiment_id = 0, std::uint64_t index = 0);

struct Emitter {
  Vec3 position = Vec3::Zero();
  physics::NVParameters params;
  double brightness_scale = 1.0;
};

struct VirtualSample {
  std::string name = "empty";
  std::vector<Emitter> emitters;
  double background_rate_per_watt = 2e4;  // counts/(s W) reaching the detector

  void validate() const;

  static VirtualSample single(const Vec3& position, const physics::NVParameters& params = {});
  /// Uniformly placed emitters at the given depth inside a lateral box.
  static VirtualSample random(std::uint64_t seed, int count, const Vec3& lo, const Vec3& hi,
                              const physics::NVParameters& params = {});
};

/// The four <111> bond directions of the diamond lattice, normalised.
std::vector<Vec3> tetrahedral_axes();
/// Assign tetrahedral axes round-robin (emitter k gets axis k mod 4).
void assign_tetrahedral_axes(VirtualSample& sample);

struct SPADConfig {
  double dark_rate = 100.0;
  double dead_time = 50e-9;
  double quantum_efficiency = 0.4;
  double collection_efficiency = 0.05;

  void validate() const;
  double efficiency() const { return quantum_efficiency * collection_efficiency; }
  bool operator==(const SPADConfig&) const = default;
};

struct PSFModel {
  double lateral_sigma = 0.0;  // um
  double axial_sigma = 0.0;    // um
  double wavelength = 650.0;   // nm
  double numerical_aperture = 1.45;

  /// sigma_lat from the Abbe FWHM 0.51 lambda/NA; axial from
  /// 0.88 lambda / (n - sqrt(n^2 - NA^2)) with oil immersion n = 1.518.
  static PSFModel from_optics(double wavelength_nm = 650.0, double numerical_aperture = 1.45);
  void validate() const;
};

double psf_weight(const PSFModel& psf, const Vec3& delta);

struct StageModel {
  double um_per_volt = 10.0;
  double jitter_sigma = 0.002;   // um
  double time_constant = 1e-3;   // s, first-order settling
  void validate() const;
};

inline constexpr double kStageMaxVolts = 10.0;

Vec3 stage_position(const Vec3& voltage, const StageModel& stage = {});
Vec3 stage_voltage(const Vec3& position, const StageModel& stage = {});
/// Position reached `elapsed` seconds after commanding `target` from `from`.
Vec3 stage_settle(const Vec3& from, const Vec3& target, double elapsed, const StageModel& stage = {});
Vec3 stage_jitter(Rng& rng, const StageModel& stage = {});

double axis_field_projection(const Vec3& field, const Vec3& axis);

struct MWSource {
  double frequency = 2.87e9;
  double rabi = 20.4e6;  // Rabi frequency produced by the configured power
  bool on = false;
  bool operator==(const MWSource&) const = default;
};

struct InstrumentState {
  Vec3 stage_voltage = Vec3::Constant(5.0);
  double laser_power = 1e-3;
  double attenuation_db = 0.0;
  MWSource mw;
  Vec3 magnet_field = Vec3::Zero();
  SPADConfig spad;
  std::uint64_t seed = 1;

  void validate() const;
  double power_at_sample() const;
  /// Power at the sample for a commanded source power.
  double attenuate(double power) const;
  bool operator==(const InstrumentState&) const = default;
};

/// Expected detector count rate (counts/s) with the focus at `focus`
/// (um), laser and MW held at the instrument settings. Dead time is not
/// applied here.
double collected_rate(const VirtualSample& sample, const InstrumentState& state, const PSFModel& psf,
                      const Vec3& focus);
double collected_rate(const VirtualSample& sample, const InstrumentState& state, const PSFModel& psf);

/// Per-emitter detected steady-state rate at unit PSF weight, so an image
/// can be evaluated pixel by pixel without re-solving the physics.
class RateMap {
 public:
  RateMap(const VirtualSample& sample, const InstrumentState& state, const PSFModel& psf);
  double at(const Vec3& focus) const;

 private:
  const VirtualSample* sample_;
  PSFModel psf_;
  std::vector<double> peak_;
  double floor_ = 0.0;
};

double dead_time_rate(double rate, double dead_time);

/// Poisson count for a dwell with non-paralyzable dead-time correction of
/// the mean.
std::int64_t spad_sample(double rate, double dwell, const SPADConfig& spad, Rng& rng);

struct Histogram {
  double start = 0.0;
  double bin_width = 0.0;
  std::vector<std::int64_t> counts;

  double bin_center(std::size_t k) const { return start + (static_cast<double>(k) + 0.5) * bin_width; }
  std::int64_t total() const;
};

/// Bins are right-open, [start + k w, start + (k+1) w); a tag on an edge
/// lands in the bin to its right. Tags outside [lo, hi) are dropped.
Histogram tcspc_histogram(const std::vector<double>& tags, double bin_width, double lo, double hi);

struct RunOptions {
  std::uint64_t shots = 100000;
  /// Time-binned trace per readout window (0 disables).
  double trace_bin = 0.0;
  /// Draw photon arrival times inside windows marked `tagged`.
  bool time_tags = false;
  /// Gauss-Hermite nodes over the quasi-static detuning (timelines with MW).
  int quadrature_nodes = 24;
  /// Cell length for the thinning upper bound.
  double tag_cell = 0.5e-9;
  bool warm_up = true;
};

struct RunResult {
  std::vector<double> expected;      // mean detected counts per window over all shots
  std::vector<std::int64_t> counts;  // sampled
  std::vector<std::vector<double>> expected_traces;
  std::vector<std::vector<std::int64_t>> traces;
  std::vector<std::vector<double>> tags;  // per window, seconds from window start, sorted
};

/// Runs `options.shots` repetitions of the timeline with the focus at the
/// stage position. Laser powers in the timeline are source powers; the
/// instrument attenuation and the magnet are applied here.
RunResult run_timeline(const seq::Timeline& timeline, const VirtualSample& sample,
                       const InstrumentState& state, const PSFModel& psf, Rng& rng,
                       const RunOptions& options = {});

// ---------------------------------------------------------------------------

struct InstrumentSnapshot {
  VirtualSample sample;
  InstrumentState state;
  PSFModel psf;
  StageModel stage;
};

class LeaseConflict : public LabError {
 public:
  explicit LeaseConflict(const std::string& holder);
  const std::string& holder() const { return holder_; }

 private:
  std::string holder_;
};

/// The shared instrument. Every mutation is serialised through one mutex;
/// readers get consistent copies. One experiment at a time holds the lease.
class Instrument {
 public:
  class Lease {
   public:
    Lease() = default;
    Lease(Lease&& other) noexcept;
    Lease& operator=(Lease&& other) noexcept;
    Lease(const Lease&) = delete;
    Lease& operator=(const Lease&) = delete;
    ~Lease();
    bool held() const { return owner_ != nullptr; }
    void release();

   private:
    friend class Instrument;
    explicit Lease(Instrument* owner) : owner_(owner) {}
    Instrument* owner_ = nullptr;
  };

  Instrument();
  explicit Instrument(InstrumentSnapshot initial);

  InstrumentSnapshot snapshot() const;
  InstrumentState state() const;
  /// Returns false when the new state equals the current one.
  bool set_state(const InstrumentState& state);
  void load_sample(VirtualSample sample);
  void set_psf(const PSFModel& psf);
  void set_stage_model(const StageModel& stage);

  Lease acquire(const std::string& holder);
  std::string lease_holder() const;

 private:
  void release_lease();

  mutable std::mutex mutex_;
  InstrumentSnapshot data_;
  std::string holder_;
};

}  // namespace nvtwin::lab
