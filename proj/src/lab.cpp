#include "nvtwin/lab.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace nvtwin::lab {

namespace {

std::uint64_t splitmix(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::int64_t poisson(double mean, Rng& rng) {
  if (!(mean > 0.0)) return 0;
  std::poisson_distribution<std::int64_t> dist(mean);
  return dist(rng);
}

constexpr double kOilIndex = 1.518;
constexpr double kPsfCutoff = 1e-12;

}  // namespace

Rng make_rng(std::uint64_t seed, std::uint64_t experiment_id, std::uint64_t index) {
  std::uint64_t state = seed;
  std::uint64_t key = splitmix(state);
  state = key ^ experiment_id;
  key = splitmix(state);
  state = key ^ index;
  std::seed_seq seq{static_cast<std::uint32_t>(splitmix(state)), static_cast<std::uint32_t>(splitmix(state)),
                    static_cast<std::uint32_t>(splitmix(state)), static_cast<std::uint32_t>(splitmix(state))};
  return Rng(seq);
}

// ---------------------------------------------------------------------------
// Sample

void VirtualSample::validate() const {
  if (!(background_rate_per_watt >= 0.0) || !std::isfinite(background_rate_per_watt))
    throw LabError("background_rate_per_watt must be finite and >= 0");
  for (std::size_t k = 0; k < emitters.size(); ++k) {
    const auto& e = emitters[k];
    for (int a = 0; a < 3; ++a)
      if (!(e.position[a] >= 0.0 && e.position[a] <= 100.0))
        throw LabError("emitter " + std::to_string(k) + " lies outside the [0,100] um cube");
    if (!(e.brightness_scale > 0.0) || !std::isfinite(e.brightness_scale))
      throw LabError("emitter " + std::to_string(k) + " brightness_scale must be > 0");
    e.params.validate();
  }
}

VirtualSample VirtualSample::single(const Vec3& position, const physics::NVParameters& params) {
  VirtualSample s;
  s.name = "single";
  s.emitters.push_back({position, params, 1.0});
  return s;
}

VirtualSample VirtualSample::random(std::uint64_t seed, int count, const Vec3& lo, const Vec3& hi,
                                    const physics::NVParameters& params) {
  if (count < 0) throw LabError("emitter count must be >= 0");
  Rng rng = make_rng(seed, 0x53414d50);
  VirtualSample s;
  s.name = "random";
  for (int k = 0; k < count; ++k) {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = std::uniform_real_distribution<double>(lo[a], hi[a])(rng);
    s.emitters.push_back({p, params, 1.0});
  }
  return s;
}

std::vector<Vec3> tetrahedral_axes() {
  const double r = 1.0 / std::sqrt(3.0);
  return {Vec3(1, 1, 1) * r, Vec3(1, -1, -1) * r, Vec3(-1, 1, -1) * r, Vec3(-1, -1, 1) * r};
}

void assign_tetrahedral_axes(VirtualSample& sample) {
  const auto axes = tetrahedral_axes();
  for (std::size_t k = 0; k < sample.emitters.size(); ++k) sample.emitters[k].params.axis = axes[k % 4];
}

// ---------------------------------------------------------------------------
// Detector, optics, stage

void SPADConfig::validate() const {
  if (!(dark_rate >= 0.0) || !std::isfinite(dark_rate)) throw LabError("dark_rate must be >= 0");
  if (!(dead_time >= 0.0) || !std::isfinite(dead_time)) throw LabError("dead_time must be >= 0");
  if (!(quantum_efficiency > 0.0 && quantum_efficiency <= 1.0))
    throw LabError("quantum_efficiency must be in (0, 1]");
  if (!(collection_efficiency > 0.0 && collection_efficiency <= 1.0))
    throw LabError("collection_efficiency must be in (0, 1]");
}

PSFModel PSFModel::from_optics(double wavelength_nm, double numerical_aperture) {
  PSFModel p;
  p.wavelength = wavelength_nm;
  p.numerical_aperture = numerical_aperture;
  const double fwhm_lat = 0.51 * wavelength_nm / numerical_aperture * 1e-3;
  const double na = std::min(numerical_aperture, kOilIndex * 0.999);
  const double fwhm_ax =
      0.88 * wavelength_nm / (kOilIndex - std::sqrt(kOilIndex * kOilIndex - na * na)) * 1e-3;
  const double to_sigma = 2.0 * std::sqrt(2.0 * std::log(2.0));
  p.lateral_sigma = fwhm_lat / to_sigma;
  p.axial_sigma = fwhm_ax / to_sigma;
  return p;
}

void PSFModel::validate() const {
  if (!(lateral_sigma > 0.0) || !(axial_sigma > 0.0)) throw LabError("PSF sigmas must be > 0");
  if (!(numerical_aperture > 0.0 && numerical_aperture <= 1.6))
    throw LabError("numerical_aperture must be in (0, 1.6]");
  if (!(wavelength > 0.0)) throw LabError("wavelength must be > 0");
}

double psf_weight(const PSFModel& psf, const Vec3& d) {
  const double lat = (d.x() * d.x() + d.y() * d.y()) / (2.0 * psf.lateral_sigma * psf.lateral_sigma);
  const double ax = d.z() * d.z() / (2.0 * psf.axial_sigma * psf.axial_sigma);
  return std::exp(-lat - ax);
}

void StageModel::validate() const {
  if (!(um_per_volt > 0.0)) throw LabError("um_per_volt must be > 0");
  if (!(jitter_sigma >= 0.0)) throw LabError("jitter_sigma must be >= 0");
  if (!(time_constant >= 0.0)) throw LabError("time_constant must be >= 0");
}

Vec3 stage_position(const Vec3& voltage, const StageModel& stage) {
  for (int a = 0; a < 3; ++a)
    if (!(voltage[a] >= 0.0 && voltage[a] <= kStageMaxVolts))
      throw LabError("stage voltage out of range [0, 10] V on axis " + std::string(1, "xyz"[a]));
  return voltage * stage.um_per_volt;
}

Vec3 stage_voltage(const Vec3& position, const StageModel& stage) {
  const Vec3 v = position / stage.um_per_volt;
  for (int a = 0; a < 3; ++a)
    if (!(v[a] >= 0.0 && v[a] <= kStageMaxVolts))
      throw LabError("position outside stage travel on axis " + std::string(1, "xyz"[a]));
  return v;
}

Vec3 stage_settle(const Vec3& from, const Vec3& target, double elapsed, const StageModel& stage) {
  if (stage.time_constant <= 0.0) return target;
  return target + (from - target) * std::exp(-elapsed / stage.time_constant);
}

Vec3 stage_jitter(Rng& rng, const StageModel& stage) {
  if (stage.jitter_sigma <= 0.0) return Vec3::Zero();
  std::normal_distribution<double> n(0.0, stage.jitter_sigma);
  const double x = n(rng);
  const double y = n(rng);
  const double z = n(rng);
  return {x, y, z};
}

double axis_field_projection(const Vec3& field, const Vec3& axis) {
  if (std::abs(axis.norm() - 1.0) > 1e-9) throw LabError("NV axis must have unit norm");
  return field.dot(axis);
}

void InstrumentState::validate() const {
  for (int a = 0; a < 3; ++a)
    if (!(stage_voltage[a] >= 0.0 && stage_voltage[a] <= kStageMaxVolts))
      throw LabError("stage voltage out of range [0, 10] V");
  if (!(laser_power >= 0.0) || !std::isfinite(laser_power)) throw LabError("laser_power must be >= 0");
  if (!(attenuation_db >= 0.0) || !std::isfinite(attenuation_db)) throw LabError("attenuation must be >= 0 dB");
  if (!(mw.frequency > 0.0) || !std::isfinite(mw.frequency)) throw LabError("MW frequency must be > 0");
  if (!(mw.rabi >= 0.0) || !std::isfinite(mw.rabi)) throw LabError("MW Rabi frequency must be >= 0");
  if (!magnet_field.allFinite()) throw LabError("magnet field must be finite");
  spad.validate();
}

double InstrumentState::attenuate(double power) const { return power * std::pow(10.0, -attenuation_db / 10.0); }

double InstrumentState::power_at_sample() const { return attenuate(laser_power); }

// ---------------------------------------------------------------------------
// Steady-state rates

namespace {

physics::ControlSegment cw_segment(const InstrumentState& state, double bz) {
  physics::ControlSegment seg;
  seg.duration = 1.0;
  seg.laser_power = state.power_at_sample();
  seg.mw_on = state.mw.on;
  seg.mw_frequency = state.mw.frequency;
  seg.mw_rabi = state.mw.on ? state.mw.rabi : 0.0;
  seg.target_transition = physics::Transition::both;
  seg.bz = bz;
  return seg;
}

// Photon emission rate averaged over the quasi-static detuning.
double steady_emission(const Emitter& e, const InstrumentState& state) {
  const double bz = axis_field_projection(state.magnet_field, e.params.axis);
  if (state.power_at_sample() <= 0.0) return 0.0;
  if (!state.mw.on || e.params.quasi_static_sigma <= 0.0) {
    return physics::emission_rate(physics::steady_state(cw_segment(state, bz), e.params), e.params);
  }
  double sum = 0.0;
  for (const auto& [x, w] : physics::gauss_hermite_normal(9)) {
    const double shift = x * e.params.quasi_static_sigma / e.params.gamma_e;
    sum += w * physics::emission_rate(physics::steady_state(cw_segment(state, bz + shift), e.params),
                                      e.params);
  }
  return sum;
}

}  // namespace

RateMap::RateMap(const VirtualSample& sample, const InstrumentState& state, const PSFModel& psf)
    : sample_(&sample), psf_(psf) {
  peak_.reserve(sample.emitters.size());
  for (const auto& e : sample.emitters)
    peak_.push_back(e.brightness_scale * state.spad.efficiency() * steady_emission(e, state));
  floor_ = sample.background_rate_per_watt * state.power_at_sample() + state.spad.dark_rate;
}

double RateMap::at(const Vec3& focus) const {
  double rate = floor_;
  for (std::size_t k = 0; k < peak_.size(); ++k) {
    if (peak_[k] <= 0.0) continue;
    const double w = psf_weight(psf_, sample_->emitters[k].position - focus);
    if (w > kPsfCutoff) rate += w * peak_[k];
  }
  return rate;
}

double collected_rate(const VirtualSample& sample, const InstrumentState& state, const PSFModel& psf,
                      const Vec3& focus) {
  return RateMap(sample, state, psf).at(focus);
}

double collected_rate(const VirtualSample& sample, const InstrumentState& state, const PSFModel& psf) {
  return collected_rate(sample, state, psf, stage_position(state.stage_voltage));
}

double dead_time_rate(double rate, double dead_time) { return rate / (1.0 + rate * dead_time); }

std::int64_t spad_sample(double rate, double dwell, const SPADConfig& spad, Rng& rng) {
  if (!(dwell > 0.0)) throw LabError("dwell must be > 0");
  if (!(rate >= 0.0) || !std::isfinite(rate)) throw LabError("rate must be finite and >= 0");
  return poisson(dead_time_rate(rate, spad.dead_time) * dwell, rng);
}

std::int64_t Histogram::total() const {
  std::int64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

Histogram tcspc_histogram(const std::vector<double>& tags, double bin_width, double lo, double hi) {
  if (!(bin_width > 0.0)) throw LabError("bin width must be > 0");
  if (!(hi > lo)) throw LabError("histogram window must have hi > lo");
  const auto bins = static_cast<std::size_t>(std::floor((hi - lo) / bin_width + 1e-9));
  if (bins == 0) throw LabError("histogram window shorter than one bin");
  Histogram h{lo, bin_width, std::vector<std::int64_t>(bins, 0)};
  for (double t : tags) {
    if (!(t >= lo && t < hi)) continue;
    // The slack keeps tags computed as lo + k*w in bin k despite rounding.
    const auto k = static_cast<std::size_t>(std::floor((t - lo) / bin_width + 1e-9));
    if (k < bins) ++h.counts[k];
  }
  return h;
}

// ---------------------------------------------------------------------------
// Timeline execution

namespace {

// One emitter at one quadrature node, with cached generators and steps.
class Track {
 public:
  Track(const seq::Timeline& tl, const physics::NVParameters& params, double bz, const InstrumentState& state)
      : params_(params) {
    generators_.reserve(tl.segments.size());
    for (auto seg : tl.segments) {
      seg.bz = bz;
      seg.laser_power = state.attenuate(seg.laser_power);
      pumps_.push_back(params.optical.pump_rate_per_watt * seg.laser_power);
      generators_.push_back(physics::build_generator(seg, params));
    }
    w_ = physics::emission_functional(params);
  }

  const physics::StepPropagator& step(std::size_t seg, double h) {
    const auto key = std::make_pair(seg, h);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, physics::make_step(generators_[seg], h)).first;
    return it->second;
  }

  const physics::Generator& generator(std::size_t seg) const { return generators_[seg]; }
  double pump(std::size_t seg) const { return pumps_[seg]; }
  const physics::StateVector& w() const { return w_; }
  double k_rad() const { return params_.optical.k_rad; }

 private:
  physics::NVParameters params_;
  std::vector<physics::Generator> generators_;
  std::vector<double> pumps_;
  physics::StateVector w_;
  std::map<std::pair<std::size_t, double>, physics::StepPropagator> cache_;
};

struct Piece {
  std::size_t segment;
  double start;
  double length;
  int window;  // -1 when outside every readout window
  int bin;     // trace bin inside the window, -1 when traces are off
};

std::vector<Piece> make_pieces(const seq::Timeline& tl, double trace_bin) {
  std::vector<double> cuts;
  for (const auto& w : tl.windows) {
    cuts.push_back(w.start);
    cuts.push_back(w.start + w.duration);
    if (trace_bin > 0.0) {
      const auto n = static_cast<long>(std::ceil(w.duration / trace_bin - 1e-9));
      for (long k = 1; k < n; ++k) cuts.push_back(w.start + static_cast<double>(k) * trace_bin);
    }
  }
  std::sort(cuts.begin(), cuts.end());

  std::vector<Piece> pieces;
  double t = 0.0;
  for (std::size_t s = 0; s < tl.segments.size(); ++s) {
    const double end = t + tl.segments[s].duration;
    double a = t;
    auto it = std::upper_bound(cuts.begin(), cuts.end(), a + 1e-15);
    while (a < end - 1e-15) {
      double b = end;
      if (it != cuts.end() && *it < end - 1e-15) b = *it++;
      pieces.push_back({s, a, b - a, -1, -1});
      a = b;
    }
    t = end;
  }
  for (auto& p : pieces) {
    const double mid = p.start + 0.5 * p.length;
    for (std::size_t w = 0; w < tl.windows.size(); ++w) {
      const auto& win = tl.windows[w];
      if (mid >= win.start && mid < win.start + win.duration) {
        p.window = static_cast<int>(w);
        if (trace_bin > 0.0) p.bin = static_cast<int>(std::floor((mid - win.start) / trace_bin));
        break;
      }
    }
  }
  return pieces;
}

std::size_t trace_bins(const seq::Window& w, double trace_bin) {
  return static_cast<std::size_t>(std::ceil(w.duration / trace_bin - 1e-9));
}

}  // namespace

RunResult run_timeline(const seq::Timeline& timeline, const VirtualSample& sample, const InstrumentState& state,
                       const PSFModel& psf, Rng& rng, const RunOptions& options) {
  if (timeline.segments.empty()) throw LabError("timeline has no segments");
  if (!(timeline.total_duration > 0.0)) throw LabError("timeline has zero duration");
  if (options.shots == 0) throw LabError("shots must be >= 1");
  if (options.quadrature_nodes < 1) throw LabError("quadrature_nodes must be >= 1");
  if (options.trace_bin < 0.0) throw LabError("trace_bin must be >= 0");
  if (!(options.tag_cell > 0.0)) throw LabError("tag_cell must be > 0");
  state.validate();
  psf.validate();

  const auto pieces = make_pieces(timeline, options.trace_bin);
  const std::size_t nwin = timeline.windows.size();
  const double shots = static_cast<double>(options.shots);

  RunResult out;
  out.expected.assign(nwin, 0.0);
  out.expected_traces.resize(nwin);
  out.tags.resize(nwin);
  if (options.trace_bin > 0.0)
    for (std::size_t w = 0; w < nwin; ++w)
      out.expected_traces[w].assign(trace_bins(timeline.windows[w], options.trace_bin), 0.0);

  bool any_mw = false;
  for (const auto& s : timeline.segments) any_mw = any_mw || (s.mw_on && s.mw_rabi > 0.0);

  // Background and dark counts are homogeneous within each piece.
  std::vector<std::pair<const Piece*, double>> flat;  // piece, rate
  for (const auto& p : pieces) {
    if (p.window < 0) continue;
    const double rate = state.spad.dark_rate +
                        sample.background_rate_per_watt * state.attenuate(timeline.segments[p.segment].laser_power);
    out.expected[p.window] += shots * rate * p.length;
    if (p.bin >= 0) out.expected_traces[p.window][p.bin] += shots * rate * p.length;
    flat.emplace_back(&p, rate);
  }

  const Vec3 focus = stage_position(state.stage_voltage);
  for (const auto& e : sample.emitters) {
    const double weight = psf_weight(psf, e.position - focus);
    if (weight < 1e-9) continue;
    const double eta = weight * e.brightness_scale * state.spad.efficiency();
    const double bz = axis_field_projection(state.magnet_field, e.params.axis);

    std::vector<std::pair<double, double>> nodes = {{0.0, 1.0}};
    if (any_mw && e.params.quasi_static_sigma > 0.0) nodes = physics::gauss_hermite_normal(options.quadrature_nodes);

    for (const auto& [x, node_weight] : nodes) {
      Track track(timeline, e.params, bz + x * e.params.quasi_static_sigma / e.params.gamma_e, state);
      physics::StateVector v = physics::NVState::thermal().to_vector();
      if (options.warm_up) {
        for (const auto& p : pieces) v = track.step(p.segment, p.length).transfer * v;
      }
      const double scale = shots * node_weight * eta;
      for (const auto& p : pieces) {
        const auto& step = track.step(p.segment, p.length);
        if (p.window >= 0) {
          const double photons = track.w().dot(step.integral * v);
          out.expected[p.window] += scale * photons;
          if (p.bin >= 0) out.expected_traces[p.window][p.bin] += scale * photons;

          if (options.time_tags && timeline.windows[p.window].tagged) {
            // Thinning: inside each cell the emission rate is bounded by its
            // value at the cell start plus the pump feed (laser on), since
            // excited populations can only grow through pumping.
            const double win_start = timeline.windows[p.window].start;
            const auto cells = static_cast<long>(std::ceil(p.length / options.tag_cell - 1e-9));
            const double hc = p.length / static_cast<double>(cells);
            const auto& cell_step = track.step(p.segment, hc);
            const double pump = track.pump(p.segment);
            physics::StateVector c = v;
            for (long k = 0; k < cells; ++k) {
              const double t0 = p.start + static_cast<double>(k) * hc;
              const double bound = track.w().dot(c) + track.k_rad() * pump * hc;
              const std::int64_t n = poisson(scale * bound * hc, rng);
              std::vector<double> cand(static_cast<std::size_t>(n));
              std::uniform_real_distribution<double> u(0.0, hc);
              for (auto& t : cand) t = u(rng);
              std::sort(cand.begin(), cand.end());
              for (double dt : cand) {
                const physics::Generator prop = (track.generator(p.segment) * dt).exp();
                const double rate = track.w().dot(prop * c);
                if (std::uniform_real_distribution<double>(0.0, bound)(rng) < rate)
                  out.tags[p.window].push_back(t0 + dt - win_start);
              }
              c = cell_step.transfer * c;
            }
          }
        }
        v = step.transfer * v;
      }
    }
  }

  if (options.time_tags) {
    for (const auto& [p, rate] : flat) {
      if (!timeline.windows[p->window].tagged) continue;
      const double win_start = timeline.windows[p->window].start;
      const std::int64_t n = poisson(shots * rate * p->length, rng);
      std::uniform_real_distribution<double> u(p->start, p->start + p->length);
      for (std::int64_t k = 0; k < n; ++k) out.tags[p->window].push_back(u(rng) - win_start);
    }
    for (auto& t : out.tags) std::sort(t.begin(), t.end());
  }

  // Dead time acts on the mean rate inside each window.
  auto dead = [&](double mean, double duration) {
    if (duration <= 0.0 || state.spad.dead_time <= 0.0) return mean;
    const double r = mean / (shots * duration);
    return mean / (1.0 + r * state.spad.dead_time);
  };
  out.counts.resize(nwin);
  out.traces.resize(nwin);
  for (std::size_t w = 0; w < nwin; ++w) {
    out.expected[w] = dead(out.expected[w], timeline.windows[w].duration);
    out.counts[w] = poisson(out.expected[w], rng);
    auto& et = out.expected_traces[w];
    out.traces[w].resize(et.size());
    for (std::size_t b = 0; b < et.size(); ++b) {
      const double width = std::min(options.trace_bin, timeline.windows[w].duration - b * options.trace_bin);
      et[b] = dead(et[b], width);
      out.traces[w][b] = poisson(et[b], rng);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instrument

LeaseConflict::LeaseConflict(const std::string& holder)
    : LabError("instrument is leased by '" + holder + "'"), holder_(holder) {}

Instrument::Lease::Lease(Lease&& other) noexcept : owner_(other.owner_) { other.owner_ = nullptr; }

Instrument::Lease& Instrument::Lease::operator=(Lease&& other) noexcept {
  if (this != &other) {
    release();
    owner_ = other.owner_;
    other.owner_ = nullptr;
  }
  return *this;
}

Instrument::Lease::~Lease() { release(); }

void Instrument::Lease::release() {
  if (owner_) owner_->release_lease();
  owner_ = nullptr;
}

Instrument::Instrument() : Instrument(InstrumentSnapshot{VirtualSample{}, InstrumentState{}, PSFModel::from_optics(), StageModel{}}) {}

Instrument::Instrument(InstrumentSnapshot initial) : data_(std::move(initial)) {
  data_.sample.validate();
  data_.state.validate();
  data_.psf.validate();
  data_.stage.validate();
}

InstrumentSnapshot Instrument::snapshot() const {
  std::lock_guard lock(mutex_);
  return data_;
}

InstrumentState Instrument::state() const {
  std::lock_guard lock(mutex_);
  return data_.state;
}

bool Instrument::set_state(const InstrumentState& state) {
  state.validate();
  std::lock_guard lock(mutex_);
  if (data_.state == state) return false;
  data_.state = state;
  return true;
}

void Instrument::load_sample(VirtualSample sample) {
  sample.validate();
  std::lock_guard lock(mutex_);
  data_.sample = std::move(sample);
}

void Instrument::set_psf(const PSFModel& psf) {
  psf.validate();
  std::lock_guard lock(mutex_);
  data_.psf = psf;
}

void Instrument::set_stage_model(const StageModel& stage) {
  stage.validate();
  std::lock_guard lock(mutex_);
  data_.stage = stage;
}

Instrument::Lease Instrument::acquire(const std::string& holder) {
  std::lock_guard lock(mutex_);
  if (!holder_.empty()) throw LeaseConflict(holder_);
  holder_ = holder.empty() ? "anonymous" : holder;
  return Lease(this);
}

std::string Instrument::lease_holder() const {
  std::lock_guard lock(mutex_);
  return holder_;
}

void Instrument::release_lease() {
  std::lock_guard lock(mutex_);
  holder_.clear();
}

}  // namespace nvtwin::lab
