#include "nvtwin/experiments.hpp"

#include "nvtwin/sequence.hpp"
#include "strict_json.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

namespace nvtwin::exp {

namespace {

using config::number;
using config::detail::Obj;
using Eigen::VectorXd;

constexpr double kOdmrShot = 1e-3;
constexpr double kTcspcResolution = 250e-12;
// Index reserved for draws that belong to no sweep point.
constexpr std::uint64_t kAuxIndex = 1ull << 40;

std::uint64_t experiment_id(ExperimentKind k) { return static_cast<std::uint64_t>(k) + 1; }

std::int64_t poisson(double mean, lab::Rng& rng) {
  if (!(mean > 0.0)) return 0;
  return std::poisson_distribution<std::int64_t>(mean)(rng);
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

struct Drive {
  double frequency;
  double omega;
};

Drive resolve_drive(double frequency, double omega, const lab::InstrumentState& s) {
  Drive d{std::isnan(frequency) ? s.mw.frequency : frequency, std::isnan(omega) ? s.mw.rabi : omega};
  if (!(d.frequency > 0.0) || !std::isfinite(d.frequency)) throw ExperimentError("MW frequency must be > 0");
  if (!(d.omega >= 0.0) || !std::isfinite(d.omega)) throw ExperimentError("Rabi frequency must be >= 0");
  return d;
}

std::uint64_t resolve_shots(std::uint64_t shots, const Context& ctx) {
  const std::uint64_t n = shots ? shots : ctx.run.shots;
  if (n == 0) throw ExperimentError("shots must be > 0");
  return n;
}

seq::ChannelDefaults channel_defaults(const lab::InstrumentState& s) {
  return {s.laser_power, s.mw.frequency, s.mw.rabi};
}

lab::RunOptions run_options(const Context& ctx, std::uint64_t shots) {
  lab::RunOptions o;
  o.shots = shots;
  o.quadrature_nodes = ctx.run.quadrature_nodes;
  return o;
}

lab::RunResult run(const seq::Timeline& tl, const Context& ctx, lab::Rng& rng, const lab::RunOptions& o) {
  const auto& s = ctx.snapshot;
  return lab::run_timeline(tl, s.sample, s.state, s.psf, rng, o);
}

// Pause between points in short slices so an abort still lands quickly.
void point_pause(const Context& ctx) {
  using namespace std::chrono;
  const auto until = steady_clock::now() + ctx.point_delay;
  while (steady_clock::now() < until && !ctx.abort_requested())
    std::this_thread::sleep_for(std::min<steady_clock::duration>(milliseconds(5), until - steady_clock::now()));
}

// Runs fn(i) in order until done or aborted; returns the points completed.
template <class F>
std::size_t for_points(std::size_t n, const Context& ctx, F&& fn) {
  for (std::size_t i = 0; i < n; ++i) {
    if (ctx.abort_requested()) return i;
    fn(i);
    if (ctx.point_delay.count() > 0) point_pause(ctx);
  }
  return n;
}

void notify(const Context& ctx, std::size_t i, std::size_t n, const Json& point) {
  if (ctx.on_point) ctx.on_point(i, n, point);
}

Json base_metadata(ExperimentKind k, const Json& params, const Context& ctx) {
  Json m = Json::object();
  m["experiment"] = to_string(k);
  m["params"] = params;
  m["instrument"] = config::to_json(ctx.snapshot);
  m["run"] = config::to_json(ctx.run);
  m["seed"] = ctx.snapshot.state.seed;
  m["timestamp_clock"] = "virtual";
  return m;
}

VectorXd to_vec(const std::vector<double>& v) { return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())); }

std::vector<double> sqrt_sigma(const std::vector<double>& counts) {
  std::vector<double> s(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) s[i] = std::isnan(counts[i]) ? nan() : std::sqrt(std::max(counts[i], 1.0));
  return s;
}

double gamma_of(const lab::InstrumentSnapshot& s) {
  return s.sample.emitters.empty() ? physics::NVParameters{}.gamma_e : s.sample.emitters.front().params.gamma_e;
}

// --- normalized sweeps ----------------------------------------------------------

struct SweepData {
  std::vector<double> x, signal, sigma, counts, reference;
  std::size_t done = 0;
  double duration = 0.0;  // virtual seconds
};

// Each point: sequence counts over an interleaved bright reference (the
// same readout without MW).
SweepData normalized_sweep(ExperimentKind kind, const seq::PulseSequence& sequence, const seq::SweepSpec& sweep,
                           const seq::Timeline& reference, const Context& ctx, std::uint64_t shots, double x_scale) {
  const auto defaults = channel_defaults(ctx.snapshot.state);
  const auto timelines = seq::expand_sweep(sequence, sweep, defaults);
  const auto values = sweep.values();
  const auto opts = run_options(ctx, shots);
  const auto seed = ctx.snapshot.state.seed;
  const auto id = experiment_id(kind);

  lab::Rng aux = lab::make_rng(seed, id, kAuxIndex);
  const double ref_mean = run(reference, ctx, aux, opts).expected.at(0);

  const std::size_t n = timelines.size();
  SweepData d;
  d.x.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.x[i] = values[i] * x_scale;
  d.signal.assign(n, nan());
  d.sigma.assign(n, nan());
  d.counts.assign(n, nan());
  d.reference.assign(n, nan());

  d.done = for_points(n, ctx, [&](std::size_t i) {
    lab::Rng rng = lab::make_rng(seed, id, i);
    const auto r = run(timelines[i], ctx, rng, opts);
    const double s = static_cast<double>(r.counts.at(0));
    const double ref = static_cast<double>(poisson(ref_mean, rng));
    d.counts[i] = s;
    d.reference[i] = ref;
    if (ref > 0.0) {
      d.signal[i] = s / ref;
      d.sigma[i] = d.signal[i] * std::sqrt(1.0 / std::max(s, 1.0) + 1.0 / ref);
      if (s == 0.0) d.sigma[i] = 1.0 / ref;
    } else {
      d.signal[i] = 0.0;
      d.sigma[i] = 1.0;
    }
    d.duration += static_cast<double>(shots) * (timelines[i].total_duration + reference.total_duration);
    notify(ctx, i, n,
           {{"index", i}, {"x", d.x[i]}, {"signal", number(d.signal[i])}, {"sigma", number(d.sigma[i])},
            {"counts", s}, {"reference", ref}});
  });
  return d;
}

data::Dataset sweep_dataset(const SweepData& d, const std::string& axis, const std::string& unit) {
  data::Dataset ds;
  ds.kind = data::Kind::sweep;
  ds.axes = {{axis, unit, d.x}};
  ds.channels = {{"signal", "normalized", d.signal, d.sigma},
                 {"counts", "counts", d.counts, sqrt_sigma(d.counts)},
                 {"reference", "counts", d.reference, sqrt_sigma(d.reference)}};
  ds.aborted = d.done < d.x.size();
  return ds;
}

analysis::FitResult fit_signal(const analysis::ModelSpec& spec, const SweepData& d) {
  return analysis::fit(spec, to_vec(d.x), to_vec(d.signal), to_vec(d.sigma));
}

// Detection threshold on top of the fitter's own checks: a sweep has many
// points, so a 2 sigma noise feature is always available to fit.
constexpr double kDetectionSigma = 5.0;

void require_signal(analysis::FitResult& f, const std::vector<std::string>& amplitudes) {
  if (!f.converged) return;
  for (const auto& name : amplitudes) {
    const auto& p = f.at(name);
    if (!(std::abs(p.value) >= kDetectionSigma * p.sigma)) {
      f.converged = false;
      f.message = "no significant signal: " + name + " below " + std::to_string(static_cast<int>(kDetectionSigma)) +
                  " sigma";
      return;
    }
  }
}

Json fit_summary(const analysis::FitResult& f) {
  Json j = Json::object();
  for (const auto& p : f.parameters) {
    j[p.name] = number(p.value);
    j[p.name + "_sigma"] = number(p.sigma);
  }
  j["converged"] = f.converged;
  return j;
}

seq::Timeline bright_reference(const Drive& drive, const Context& ctx) {
  const auto s = seq::build_rabi(0.0, drive.frequency, std::max(drive.omega, 1.0));
  return seq::make_timeline(s, s.default_bindings(), channel_defaults(ctx.snapshot.state));
}

// --- scan -------------------------------------------------------------------------

struct ScanGrid {
  std::vector<double> xs, ys;
  double z = 0.0;
};

ScanGrid scan_grid(const ScanParams& p, const Context& ctx) {
  if (!(p.resolution > 0.0) || !std::isfinite(p.resolution)) throw ExperimentError("resolution must be > 0");
  if (!(p.dwell > 0.0) || !std::isfinite(p.dwell)) throw ExperimentError("dwell must be > 0");
  if (!(p.x_max > p.x_min) || !(p.y_max > p.y_min)) throw ExperimentError("scan region must have max > min");
  const auto& stage = ctx.snapshot.stage;
  ScanGrid g;
  g.z = std::isnan(p.z) ? lab::stage_position(ctx.snapshot.state.stage_voltage, stage).z() : p.z;
  const double travel = lab::kStageMaxVolts * stage.um_per_volt;
  for (double v : {p.x_min, p.x_max, p.y_min, p.y_max, g.z})
    if (!(v >= 0.0 && v <= travel))
      throw ExperimentError("scan region outside stage travel [0, " + std::to_string(travel) + "] um");
  const auto nx = std::max<long>(1, std::lround((p.x_max - p.x_min) / p.resolution));
  const auto ny = std::max<long>(1, std::lround((p.y_max - p.y_min) / p.resolution));
  for (long i = 0; i < nx; ++i) g.xs.push_back(p.x_min + (static_cast<double>(i) + 0.5) * p.resolution);
  for (long i = 0; i < ny; ++i) g.ys.push_back(p.y_min + (static_cast<double>(i) + 0.5) * p.resolution);
  return g;
}

// One raster line in serpentine order, stored by pixel index.
void scan_row(std::size_t iy, const ScanGrid& g, const ScanParams& p, const lab::RateMap& map, const Context& ctx,
              std::vector<double>& out) {
  const auto& s = ctx.snapshot;
  lab::Rng rng = lab::make_rng(s.state.seed, experiment_id(ExperimentKind::scan), iy);
  const std::size_t nx = g.xs.size();
  out.resize(nx);
  for (std::size_t k = 0; k < nx; ++k) {
    const std::size_t ix = iy % 2 == 0 ? k : nx - 1 - k;
    const lab::Vec3 target(g.xs[ix], g.ys[iy], g.z);
    const lab::Vec3 reached = lab::stage_position(lab::stage_voltage(target, s.stage), s.stage);
    const lab::Vec3 at = reached + lab::stage_jitter(rng, s.stage);
    out[ix] = static_cast<double>(lab::spad_sample(map.at(at), p.dwell, s.state.spad, rng));
  }
}

Json scan_metadata(const ScanParams& p, const ScanGrid& g, const Context& ctx, std::size_t rows_done) {
  Json m = base_metadata(ExperimentKind::scan, to_json(p), ctx);
  m["scan_order"] = "serpentine";
  m["line_settle"] = number(3.0 * ctx.snapshot.stage.time_constant);
  m["z"] = number(g.z);
  m["rows_completed"] = rows_done;
  const double row_time = static_cast<double>(g.xs.size()) * p.dwell + 3.0 * ctx.snapshot.stage.time_constant;
  m["timestamp"] = number(static_cast<double>(rows_done) * row_time);
  return m;
}

// Gaussian spot fit in a window around the brightest pixel.
std::optional<analysis::FitResult> fit_spot(const ScanGrid& g, const std::vector<double>& img, const Context& ctx) {
  const std::size_t nx = g.xs.size(), ny = g.ys.size();
  if (nx * ny > 1000000 || nx < 3 || ny < 3) return std::nullopt;
  const auto best = static_cast<std::size_t>(std::max_element(img.begin(), img.end()) - img.begin());
  const double res = g.xs.size() > 1 ? g.xs[1] - g.xs[0] : 1.0;
  const double sig = ctx.snapshot.psf.lateral_sigma;
  const long r = std::max<long>(3, std::lround(4.0 * sig / res));
  const long bx = static_cast<long>(best % nx), by = static_cast<long>(best / nx);
  std::vector<double> xy, y;
  for (long iy = std::max(0L, by - r); iy <= std::min<long>(static_cast<long>(ny) - 1, by + r); ++iy)
    for (long ix = std::max(0L, bx - r); ix <= std::min<long>(static_cast<long>(nx) - 1, bx + r); ++ix) {
      xy.push_back(g.xs[static_cast<std::size_t>(ix)]);
      xy.push_back(g.ys[static_cast<std::size_t>(iy)]);
      y.push_back(img[static_cast<std::size_t>(iy) * nx + static_cast<std::size_t>(ix)]);
    }
  if (y.size() < 9) return std::nullopt;
  analysis::ModelSpec spec;
  spec.kind = analysis::ModelKind::gaussian_2d;
  const VectorXd yv = to_vec(y);
  return analysis::fit(spec, to_vec(xy), yv, analysis::poisson_sigma(yv));
}

// --- autofocus ---------------------------------------------------------------------

struct LineFit {
  std::vector<double> offsets, counts;
  analysis::FitResult fit;
};

LineFit focus_line(int axis, const lab::Vec3& centre, double span, double psf_sigma, const AutofocusParams& p,
                   const lab::RateMap& map, const Context& ctx, lab::Rng& rng) {
  const auto& s = ctx.snapshot;
  LineFit lf;
  const int n = p.points;
  std::vector<double> pos(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double off = -0.5 * span + span * static_cast<double>(i) / (n - 1);
    lab::Vec3 at = centre;
    at[axis] += off;
    lf.offsets.push_back(off);
    pos[static_cast<std::size_t>(i)] = at[axis];
    at += lab::stage_jitter(rng, s.stage);
    lf.counts.push_back(static_cast<double>(lab::spad_sample(map.at(at), p.dwell, s.state.spad, rng)));
  }
  const VectorXd x = to_vec(pos), y = to_vec(lf.counts);
  analysis::ModelSpec spec;
  spec.kind = analysis::ModelKind::gaussian_1d;
  const double lo = y.minCoeff();
  // Start at the guess so the nearest emitter wins over a brighter distant one.
  spec.initial_guess = {std::max(y.maxCoeff() - lo, 1.0), centre[axis], psf_sigma, lo};
  spec.bounds = {{0.0, analysis::kInf},
                 {pos.front(), pos.back()},
                 {0.5 * psf_sigma, 2.0 * psf_sigma},
                 {-analysis::kInf, analysis::kInf}};
  lf.fit = analysis::fit(spec, x, y, analysis::poisson_sigma(y));
  return lf;
}

}  // namespace

// --- names ---------------------------------------------------------------------------

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::scan:
      return "scan";
    case ExperimentKind::odmr:
      return "odmr";
    case ExperimentKind::rabi:
      return "rabi";
    case ExperimentKind::readout:
      return "readout";
    case ExperimentKind::lifetime:
      return "lifetime";
    case ExperimentKind::hahn:
      return "hahn";
    case ExperimentKind::ramsey:
      return "ramsey";
    case ExperimentKind::autofocus:
      return "autofocus";
  }
  return "?";
}

ExperimentKind experiment_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::scan, ExperimentKind::odmr, ExperimentKind::rabi, ExperimentKind::readout,
                 ExperimentKind::lifetime, ExperimentKind::hahn, ExperimentKind::ramsey, ExperimentKind::autofocus})
    if (to_string(k) == s) return k;
  throw ExperimentError("unknown experiment '" + s + "'");
}

// --- parameter codecs ----------------------------------------------------------------

Json to_json(const ScanParams& p) {
  return {{"x_min", number(p.x_min)},         {"x_max", number(p.x_max)}, {"y_min", number(p.y_min)},
          {"y_max", number(p.y_max)},         {"z", number(p.z)},         {"resolution", number(p.resolution)},
          {"dwell", number(p.dwell)},         {"fit_spot", p.fit_spot}};
}
Json to_json(const OdmrParams& p) {
  return {{"f_start", number(p.f_start)},         {"f_stop", number(p.f_stop)},   {"points", p.points},
          {"dwell", number(p.dwell)},             {"laser_power", number(p.laser_power)},
          {"mw_rabi", number(p.mw_rabi)},         {"n_peaks", p.n_peaks}};
}
Json to_json(const RabiParams& p) {
  return {{"tau_start", number(p.tau_start)}, {"tau_stop", number(p.tau_stop)}, {"points", p.points},
          {"mw_frequency", number(p.mw_frequency)}, {"omega", number(p.omega)}, {"shots", p.shots}};
}
Json to_json(const ReadoutParams& p) {
  return {{"pi_duration", number(p.pi_duration)}, {"mw_frequency", number(p.mw_frequency)},
          {"omega", number(p.omega)},             {"readout", number(p.readout)},
          {"bin", number(p.bin)},                 {"shots", p.shots}};
}
Json to_json(const LifetimeParams& p) {
  return {{"excitation", number(p.excitation)}, {"dark_window", number(p.dark_window)}, {"bin", number(p.bin)},
          {"shots", p.shots}};
}
Json to_json(const EchoParams& p) {
  return {{"tau_start", number(p.tau_start)}, {"tau_stop", number(p.tau_stop)}, {"points", p.points},
          {"mw_frequency", number(p.mw_frequency)}, {"omega", number(p.omega)}, {"shots", p.shots},
          {"stretched", p.stretched}};
}
Json to_json(const AutofocusParams& p) {
  return {{"guess", Json::array({number(p.guess.x()), number(p.guess.y()), number(p.guess.z())})},
          {"span", number(p.span)},
          {"axial_span", number(p.axial_span)},
          {"points", p.points},
          {"dwell", number(p.dwell)}};
}

ScanParams scan_params(const Json& j) {
  ScanParams p;
  Obj o(j, "params");
  o.num("x_min", p.x_min);
  o.num("x_max", p.x_max);
  o.num("y_min", p.y_min);
  o.num("y_max", p.y_max);
  o.num("z", p.z);
  o.num("resolution", p.resolution);
  o.num("dwell", p.dwell);
  o.boolean("fit_spot", p.fit_spot);
  o.finish();
  return p;
}
OdmrParams odmr_params(const Json& j) {
  OdmrParams p;
  Obj o(j, "params");
  o.num("f_start", p.f_start);
  o.num("f_stop", p.f_stop);
  o.integer("points", p.points);
  o.num("dwell", p.dwell);
  o.num("laser_power", p.laser_power);
  o.num("mw_rabi", p.mw_rabi);
  o.integer("n_peaks", p.n_peaks);
  o.finish();
  return p;
}
RabiParams rabi_params(const Json& j) {
  RabiParams p;
  Obj o(j, "params");
  o.num("tau_start", p.tau_start);
  o.num("tau_stop", p.tau_stop);
  o.integer("points", p.points);
  o.num("mw_frequency", p.mw_frequency);
  o.num("omega", p.omega);
  o.u64("shots", p.shots);
  o.finish();
  return p;
}
ReadoutParams readout_params(const Json& j) {
  ReadoutParams p;
  Obj o(j, "params");
  o.num("pi_duration", p.pi_duration);
  o.num("mw_frequency", p.mw_frequency);
  o.num("omega", p.omega);
  o.num("readout", p.readout);
  o.num("bin", p.bin);
  o.u64("shots", p.shots);
  o.finish();
  return p;
}
LifetimeParams lifetime_params(const Json& j) {
  LifetimeParams p;
  Obj o(j, "params");
  o.num("excitation", p.excitation);
  o.num("dark_window", p.dark_window);
  o.num("bin", p.bin);
  o.u64("shots", p.shots);
  o.finish();
  return p;
}
EchoParams echo_params(const Json& j) {
  EchoParams p;
  Obj o(j, "params");
  o.num("tau_start", p.tau_start);
  o.num("tau_stop", p.tau_stop);
  o.integer("points", p.points);
  o.num("mw_frequency", p.mw_frequency);
  o.num("omega", p.omega);
  o.u64("shots", p.shots);
  o.boolean("stretched", p.stretched);
  o.finish();
  return p;
}
AutofocusParams autofocus_params(const Json& j) {
  AutofocusParams p;
  Obj o(j, "params");
  o.vec3("guess", p.guess);
  o.num("span", p.span);
  o.num("axial_span", p.axial_span);
  o.integer("points", p.points);
  o.num("dwell", p.dwell);
  o.finish();
  return p;
}

// --- confocal scan ---------------------------------------------------------------------

data::Dataset confocal_scan(const ScanParams& p, const Context& ctx) {
  const ScanGrid g = scan_grid(p, ctx);
  const auto& s = ctx.snapshot;
  const lab::RateMap map(s.sample, s.state, s.psf);
  const std::size_t nx = g.xs.size(), ny = g.ys.size();
  std::vector<double> img(nx * ny, nan()), row;

  const std::size_t rows = for_points(ny, ctx, [&](std::size_t iy) {
    scan_row(iy, g, p, map, ctx, row);
    std::copy(row.begin(), row.end(), img.begin() + static_cast<std::ptrdiff_t>(iy * nx));
    notify(ctx, iy, ny, {{"index", iy}, {"y", g.ys[iy]}, {"values", row}});
  });

  data::Dataset ds;
  ds.kind = data::Kind::scan2d;
  ds.axes = {{"x", "um", g.xs}, {"y", "um", g.ys}};
  ds.channels = {{"counts", "counts", img, {}}};
  ds.aborted = rows < ny;
  ds.metadata = scan_metadata(p, g, ctx, rows);
  Json derived = Json::object();
  if (rows > 0) {
    std::size_t best = 0;
    for (std::size_t k = 0; k < rows * nx; ++k)
      if (img[k] > img[best]) best = k;
    derived["peak_x"] = g.xs[best % nx];
    derived["peak_y"] = g.ys[best / nx];
    derived["peak_counts"] = img[best];
  }
  if (!ds.aborted && p.fit_spot) {
    if (auto f = fit_spot(g, img, ctx)) {
      derived["spot"] = fit_summary(*f);
      ds.fits.push_back(std::move(*f));
    }
  }
  ds.metadata["derived"] = derived;
  return ds;
}

Json confocal_scan_to_file(const ScanParams& p, const Context& ctx, const std::filesystem::path& path) {
  const ScanGrid g = scan_grid(p, ctx);
  const auto& s = ctx.snapshot;
  const lab::RateMap map(s.sample, s.state, s.psf);
  const std::size_t ny = g.ys.size();
  data::StreamWriter w(path, data::Kind::scan2d, {{"x", "um", g.xs}, {"y", "um", g.ys}}, {{"counts", "counts"}});
  std::vector<double> row;
  double peak = -1.0;
  std::size_t peak_ix = 0, peak_iy = 0;
  const std::size_t rows = for_points(ny, ctx, [&](std::size_t iy) {
    scan_row(iy, g, p, map, ctx, row);
    for (std::size_t ix = 0; ix < row.size(); ++ix)
      if (row[ix] > peak) {
        peak = row[ix];
        peak_ix = ix;
        peak_iy = iy;
      }
    w.append(0, row);
    notify(ctx, iy, ny, {{"index", iy}, {"y", g.ys[iy]}, {"values", row}});
  });
  Json m = scan_metadata(p, g, ctx, rows);
  m["derived"] = Json::object();
  if (rows > 0) m["derived"] = {{"peak_x", g.xs[peak_ix]}, {"peak_y", g.ys[peak_iy]}, {"peak_counts", peak}};
  w.finish(m, {}, rows < ny);
  return m;
}

// --- CW-ODMR -----------------------------------------------------------------------------

data::Dataset cw_odmr(const OdmrParams& p, const Context& ctx) {
  if (p.points < 2) throw ExperimentError("ODMR needs at least 2 points");
  if (!(p.dwell > 0.0)) throw ExperimentError("dwell must be > 0");
  if (!(p.laser_power >= 0.0) || !(p.mw_rabi >= 0.0)) throw ExperimentError("powers must be >= 0");
  if (p.n_peaks < 0 || p.n_peaks > 8) throw ExperimentError("n_peaks must be 0 (auto) or 1..8");
  const auto [sequence, sweep] = seq::build_odmr_cw(p.f_start, p.f_stop, p.points, kOdmrShot);
  seq::ChannelDefaults defaults = channel_defaults(ctx.snapshot.state);
  defaults.laser_power = p.laser_power;
  defaults.mw_rabi = p.mw_rabi;
  const auto timelines = seq::expand_sweep(sequence, sweep, defaults);
  const auto shots = static_cast<std::uint64_t>(std::max(1L, std::lround(p.dwell / kOdmrShot)));
  const auto opts = run_options(ctx, shots);
  const auto seed = ctx.snapshot.state.seed;
  const auto id = experiment_id(ExperimentKind::odmr);

  // Interleaved reference: the same shot with the MW switched off.
  seq::Timeline off = timelines.front();
  for (auto& seg : off.segments) seg.mw_on = false;
  lab::Rng aux = lab::make_rng(seed, id, kAuxIndex);
  const double ref_mean = run(off, ctx, aux, opts).expected.at(0);

  SweepData d;
  const std::size_t n = timelines.size();
  d.x = sweep.values();
  d.signal.assign(n, nan());
  d.sigma.assign(n, nan());
  d.counts.assign(n, nan());
  d.reference.assign(n, nan());
  d.done = for_points(n, ctx, [&](std::size_t i) {
    lab::Rng rng = lab::make_rng(seed, id, i);
    const double sc = static_cast<double>(run(timelines[i], ctx, rng, opts).counts.at(0));
    const double rc = static_cast<double>(poisson(ref_mean, rng));
    d.counts[i] = sc;
    d.reference[i] = rc;
    d.signal[i] = rc > 0.0 ? sc / rc : 0.0;
    d.sigma[i] = rc > 0.0 ? std::max(d.signal[i], 1.0 / rc) * std::sqrt(1.0 / std::max(sc, 1.0) + 1.0 / rc) : 1.0;
    notify(ctx, i, n,
           {{"index", i}, {"x", d.x[i]}, {"signal", number(d.signal[i])}, {"sigma", number(d.sigma[i])},
            {"counts", sc}, {"reference", rc}});
  });

  data::Dataset ds = sweep_dataset(d, "frequency", "Hz");
  ds.kind = data::Kind::spectrum;
  ds.metadata = base_metadata(ExperimentKind::odmr, to_json(p), ctx);
  ds.metadata["sequence"] = seq::render(sequence);
  ds.metadata["sweep"] = config::to_json(sweep);
  ds.metadata["shots"] = shots;
  ds.metadata["timestamp"] = number(static_cast<double>(d.done) * 2.0 * p.dwell);

  Json derived = Json::object();
  if (!ds.aborted) {
    const VectorXd x = to_vec(d.x), y = to_vec(d.signal);
    const double gamma = gamma_of(ctx.snapshot);
    int n_peaks = p.n_peaks;
    if (n_peaks == 0) {
      // Two dips once the Zeeman splitting exceeds a fraction of a linewidth,
      // or when the data already show two.
      const double split = 2.0 * gamma * ctx.snapshot.state.magnet_field.norm();
      n_peaks = (split > 1e6 || analysis::peak_find(x, y, 2).size() >= 2) ? 2 : 1;
    }
    auto f = analysis::fit(analysis::ModelSpec::lorentzian(n_peaks), x, y, to_vec(d.sigma));
    std::vector<std::string> depths;
    for (int k = 0; k < n_peaks; ++k) depths.push_back("depth" + std::to_string(k));
    require_signal(f, depths);
    derived["n_peaks"] = n_peaks;
    derived["converged"] = f.converged;
    std::vector<std::pair<double, double>> centres;
    Json dips = Json::array();
    for (int k = 0; k < n_peaks; ++k) {
      const auto ks = std::to_string(k);
      centres.emplace_back(f.value("center" + ks), f.sigma("center" + ks));
      dips.push_back({{"center", number(f.value("center" + ks))},
                      {"center_sigma", number(f.sigma("center" + ks))},
                      {"fwhm", number(f.value("fwhm" + ks))},
                      {"fwhm_sigma", number(f.sigma("fwhm" + ks))},
                      {"contrast", number(f.value("depth" + ks))},
                      {"contrast_sigma", number(f.sigma("depth" + ks))}});
    }
    derived["dips"] = dips;
    if (n_peaks == 2) {
      std::sort(centres.begin(), centres.end());
      derived["splitting"] = number(centres[1].first - centres[0].first);
      try {
        const auto b = analysis::bz_from_splitting(centres[1].first, centres[0].first, gamma, centres[1].second,
                                                   centres[0].second);
        derived["bz"] = number(b.bz);
        derived["bz_sigma"] = number(b.sigma);
      } catch (const std::exception&) {
      }
    }
    ds.fits.push_back(std::move(f));
  }
  ds.metadata["derived"] = derived;
  return ds;
}

// --- Rabi ------------------------------------------------------------------------------------

data::Dataset rabi(const RabiParams& p, const Context& ctx) {
  if (p.points < 2) throw ExperimentError("Rabi sweep needs at least 2 points");
  if (!(p.tau_start >= 0.0) || !(p.tau_stop > p.tau_start)) throw ExperimentError("tau range must satisfy 0 <= start < stop");
  const Drive drive = resolve_drive(p.mw_frequency, p.omega, ctx.snapshot.state);
  const auto shots = resolve_shots(p.shots, ctx);
  const auto sequence = seq::build_rabi(p.tau_start, drive.frequency, drive.omega);
  const seq::SweepSpec sweep{"tau", p.tau_start, p.tau_stop, p.points, seq::Spacing::linear};

  const SweepData d = normalized_sweep(ExperimentKind::rabi, sequence, sweep, bright_reference(drive, ctx), ctx, shots, 1.0);
  data::Dataset ds = sweep_dataset(d, "tau", "s");
  ds.metadata = base_metadata(ExperimentKind::rabi, to_json(p), ctx);
  ds.metadata["sequence"] = seq::render(sequence);
  ds.metadata["sweep"] = config::to_json(sweep);
  ds.metadata["shots"] = shots;
  ds.metadata["mw_frequency"] = number(drive.frequency);
  ds.metadata["omega"] = number(drive.omega);
  ds.metadata["timestamp"] = number(d.duration);

  Json derived = Json::object();
  if (!ds.aborted) {
    auto f = fit_signal(analysis::ModelSpec::rabi(), d);
    require_signal(f, {"a"});
    derived = fit_summary(f);
    const double omega = f.value("omega");
    if (f.converged && omega > 0.0) {
      const auto pc = analysis::pulse_calibration(omega);
      derived["tau_pi"] = number(pc.tau_pi);
      derived["tau_pi_2"] = number(pc.tau_pi_2);
    }
    ds.fits.push_back(std::move(f));
  }
  ds.metadata["derived"] = derived;
  return ds;
}

// --- readout traces ---------------------------------------------------------------------------

data::Dataset readout_contrast(const ReadoutParams& p, const Context& ctx) {
  if (!(p.bin > 0.0) || !(p.readout >= p.bin)) throw ExperimentError("readout must span at least one bin");
  const Drive drive = resolve_drive(p.mw_frequency, p.omega, ctx.snapshot.state);
  double pi = p.pi_duration;
  if (std::isnan(pi)) {
    if (!(drive.omega > 0.0)) throw ExperimentError("pi duration needs a Rabi frequency > 0");
    pi = analysis::pulse_calibration(drive.omega).tau_pi;
  }
  if (!(pi >= 0.0)) throw ExperimentError("pi duration must be >= 0");
  const auto shots = resolve_shots(p.shots, ctx);
  const auto sequence = seq::build_readout(0.0, drive.frequency, std::max(drive.omega, 1.0), p.readout);
  const auto defaults = channel_defaults(ctx.snapshot.state);
  const auto seed = ctx.snapshot.state.seed;
  const auto id = experiment_id(ExperimentKind::readout);
  auto opts = run_options(ctx, shots);
  opts.trace_bin = p.bin;

  std::vector<std::vector<double>> traces(2);
  std::vector<double> pis = {0.0, pi};
  const std::size_t done = for_points(2, ctx, [&](std::size_t i) {
    auto b = sequence.default_bindings();
    b["pi"] = pis[i];
    const auto tl = seq::make_timeline(sequence, b, defaults);
    lab::Rng rng = lab::make_rng(seed, id, i);
    const auto r = run(tl, ctx, rng, opts);
    for (auto c : r.traces.at(0)) traces[i].push_back(static_cast<double>(c));
    notify(ctx, i, 2, {{"index", i}, {"pi_duration", pis[i]}, {"values", traces[i]}});
  });

  const std::size_t nb = static_cast<std::size_t>(std::floor(p.readout / p.bin + 1e-9));
  std::vector<double> t(nb);
  for (std::size_t k = 0; k < nb; ++k) t[k] = (static_cast<double>(k) + 0.5) * p.bin;
  for (auto& tr : traces) tr.resize(nb, nan());
  std::vector<double> diff(nb), dsig(nb);
  for (std::size_t k = 0; k < nb; ++k) {
    diff[k] = traces[0][k] - traces[1][k];
    dsig[k] = std::sqrt(std::max(traces[0][k] + traces[1][k], 1.0));
  }

  data::Dataset ds;
  ds.kind = data::Kind::time_trace;
  ds.axes = {{"time", "s", t}};
  ds.channels = {{"I0", "counts", traces[0], sqrt_sigma(traces[0])},
                 {"I1", "counts", traces[1], sqrt_sigma(traces[1])},
                 {"difference", "counts", diff, dsig}};
  ds.aborted = done < 2;
  ds.metadata = base_metadata(ExperimentKind::readout, to_json(p), ctx);
  ds.metadata["sequence"] = seq::render(sequence);
  ds.metadata["sweep"] = config::to_json(seq::SweepSpec{"pi", 0.0, pi, 2, seq::Spacing::linear});
  ds.metadata["shots"] = shots;
  ds.metadata["pi_duration"] = number(pi);
  ds.metadata["timestamp"] = number(static_cast<double>(done * shots) * (8.5e-6 + pi + p.readout));

  Json derived = Json::object();
  if (!ds.aborted) {
    // Early window: first 300 ns of the readout.
    double s0 = 0, s1 = 0;
    for (std::size_t k = 0; k < nb && t[k] < 300e-9; ++k) {
      s0 += traces[0][k];
      s1 += traces[1][k];
    }
    derived["early_I0"] = s0;
    derived["early_I1"] = s1;
    derived["early_contrast"] = number(s0 > 0 ? (s0 - s1) / s0 : nan());
    derived["early_contrast_sigma"] = number(s0 > 0 ? std::sqrt(s0 + s1) / s0 * std::max(s1 / s0, 1.0) : nan());
    // Convergence: the first 100 ns block after which every block sum of
    // the difference stays within noise. 3.5 sigma keeps the family-wise
    // false alarm near 1 % over a few dozen blocks.
    const std::size_t block = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(100e-9 / p.bin)));
    const std::size_t nblocks = nb / block;
    std::size_t first_ok = nblocks;
    for (std::size_t bidx = nblocks; bidx-- > 0;) {
      double sd = 0, var = 0;
      for (std::size_t k = bidx * block; k < (bidx + 1) * block; ++k) {
        sd += diff[k];
        var += dsig[k] * dsig[k];
      }
      if (std::abs(sd) < 3.5 * std::sqrt(var)) first_ok = bidx;
      else break;
    }
    derived["converged_after"] = number(first_ok < nblocks ? static_cast<double>(first_ok * block) * p.bin : nan());
  }
  ds.metadata["derived"] = derived;
  return ds;
}

// --- lifetime ------------------------------------------------------------------------------------

data::Dataset lifetime(const LifetimeParams& p, const Context& ctx) {
  if (!(p.bin >= kTcspcResolution * (1.0 - 1e-9)))
    throw ExperimentError("bin must be at least the 250 ps TCSPC resolution");
  if (!(p.dark_window >= p.bin)) throw ExperimentError("dark window shorter than one histogram bin");
  if (!(p.excitation > 0.0)) throw ExperimentError("excitation must be > 0");
  if (p.shots == 0) throw ExperimentError("shots must be > 0");
  const auto sequence = seq::build_lifetime(p.excitation, p.dark_window, p.bin);
  const auto tl = seq::make_timeline(sequence, sequence.default_bindings(), channel_defaults(ctx.snapshot.state));
  auto opts = run_options(ctx, p.shots);
  opts.time_tags = true;

  lab::Rng rng = lab::make_rng(ctx.snapshot.state.seed, experiment_id(ExperimentKind::lifetime), 0);
  std::vector<double> tags;
  bool aborted = ctx.abort_requested();
  if (!aborted) tags = run(tl, ctx, rng, opts).tags.at(0);
  const double window = tl.windows.at(0).duration;
  const auto h = lab::tcspc_histogram(tags, p.bin, 0.0, window);
  std::vector<double> t(h.counts.size()), c(h.counts.size());
  for (std::size_t k = 0; k < c.size(); ++k) {
    t[k] = h.bin_center(k);
    c[k] = aborted ? nan() : static_cast<double>(h.counts[k]);
  }
  if (!aborted) notify(ctx, 0, 1, {{"index", 0}, {"tags", tags.size()}, {"values", c}});

  data::Dataset ds;
  ds.kind = data::Kind::histogram;
  ds.axes = {{"time", "s", t}};
  ds.channels = {{"counts", "counts", c, sqrt_sigma(c)}};
  ds.aborted = aborted;
  ds.metadata = base_metadata(ExperimentKind::lifetime, to_json(p), ctx);
  ds.metadata["sequence"] = seq::render(sequence);
  ds.metadata["shots"] = p.shots;
  ds.metadata["timestamp"] = number(aborted ? 0.0 : static_cast<double>(p.shots) * tl.total_duration);

  Json derived = Json::object();
  if (!aborted) {
    const VectorXd y = to_vec(c);
    auto f = analysis::fit(analysis::ModelSpec::decay(), to_vec(t), y, analysis::poisson_sigma(y));
    require_signal(f, {"amplitude"});
    derived = fit_summary(f);
    derived["tags"] = tags.size();
    if (tags.size() < 1000) {
      f.converged = false;
      f.message = "insufficient counts: " + std::to_string(tags.size()) + " tags (< 1000)";
      derived["converged"] = false;
    }
    derived["lifetime"] = number(f.value("tau"));
    derived["lifetime_sigma"] = number(f.sigma("tau"));
    ds.fits.push_back(std::move(f));
  }
  ds.metadata["derived"] = derived;
  return ds;
}

// --- echo and Ramsey --------------------------------------------------------------------------------

namespace {

data::Dataset free_evolution(ExperimentKind kind, const EchoParams& p, const Context& ctx) {
  if (p.points < 2) throw ExperimentError("sweep needs at least 2 points");
  if (!(p.tau_start >= 0.0) || !(p.tau_stop > p.tau_start)) throw ExperimentError("tau range must satisfy 0 <= start < stop");
  const Drive drive = resolve_drive(p.mw_frequency, p.omega, ctx.snapshot.state);
  if (!(drive.omega > 0.0)) throw ExperimentError("pulses need a Rabi frequency > 0");
  const auto shots = resolve_shots(p.shots, ctx);
  const bool echo = kind == ExperimentKind::hahn;
  const auto sequence = echo ? seq::build_hahn(p.tau_start, drive.omega, drive.frequency)
                             : seq::build_ramsey(p.tau_start, drive.omega, drive.frequency);
  const seq::SweepSpec sweep{"tau", p.tau_start, p.tau_stop, p.points, seq::Spacing::linear};
  // Echo points are indexed by the total free evolution 2 tau.
  const double scale = echo ? 2.0 : 1.0;
  const SweepData d = normalized_sweep(kind, sequence, sweep, bright_reference(drive, ctx), ctx, shots, scale);

  data::Dataset ds = sweep_dataset(d, echo ? "free_evolution" : "tau", "s");
  ds.metadata = base_metadata(kind, to_json(p), ctx);
  ds.metadata["sequence"] = seq::render(sequence);
  ds.metadata["sweep"] = config::to_json(sweep);
  ds.metadata["shots"] = shots;
  ds.metadata["mw_frequency"] = number(drive.frequency);
  ds.metadata["omega"] = number(drive.omega);
  if (echo) {
    ds.metadata["free_evolution"] = d.x;
    ds.metadata["pulses"] = {{"pi", number(analysis::pulse_calibration(drive.omega).tau_pi)},
                             {"pi_2", number(analysis::pulse_calibration(drive.omega).tau_pi_2)}};
  }
  ds.metadata["timestamp"] = number(d.duration);

  Json derived = Json::object();
  if (!ds.aborted) {
    auto f = fit_signal(analysis::ModelSpec::decay({}, p.stretched), d);
    require_signal(f, {"amplitude"});
    derived = fit_summary(f);
    const std::string name = echo ? "t2" : "t2_star";
    derived[name] = number(f.value("tau"));
    derived[name + "_sigma"] = number(f.sigma("tau"));
    const double x_max = d.x.back();
    if (!f.converged || !(f.value("tau") < x_max)) derived[name + "_lower_bound"] = number(x_max);
    ds.fits.push_back(std::move(f));
  }
  ds.metadata["derived"] = derived;
  return ds;
}

}  // namespace

data::Dataset hahn_echo(const EchoParams& p, const Context& ctx) { return free_evolution(ExperimentKind::hahn, p, ctx); }
data::Dataset ramsey(const EchoParams& p, const Context& ctx) { return free_evolution(ExperimentKind::ramsey, p, ctx); }

// --- autofocus ------------------------------------------------------------------------------------------

AutofocusResult autofocus(const AutofocusParams& p, const Context& ctx) {
  const auto& s = ctx.snapshot;
  const double travel = lab::kStageMaxVolts * s.stage.um_per_volt;
  for (int a = 0; a < 3; ++a)
    if (!(p.guess[a] >= 0.0 && p.guess[a] <= travel)) throw ExperimentError("guess outside stage travel");
  if (p.points < 5) throw ExperimentError("autofocus needs at least 5 points per line");
  if (!(p.span > 0.0) || !(p.dwell > 0.0)) throw ExperimentError("span and dwell must be > 0");
  const double axial_span = std::isnan(p.axial_span) ? 6.0 * s.psf.axial_sigma : p.axial_span;
  if (!(axial_span > 0.0)) throw ExperimentError("axial span must be > 0");

  const lab::RateMap map(s.sample, s.state, s.psf);
  const auto id = experiment_id(ExperimentKind::autofocus);
  lab::Vec3 pos = p.guess;
  std::vector<LineFit> last(3);
  std::size_t index = 0;
  static const char* names[] = {"x", "y", "z"};
  // Two passes: the lateral fits sharpen once z is near focus.
  for (int pass = 0; pass < 2; ++pass) {
    for (int a = 0; a < 3; ++a, ++index) {
      if (ctx.abort_requested()) throw ExperimentError("autofocus aborted");
      lab::Rng rng = lab::make_rng(s.state.seed, id, index);
      const double sig = a == 2 ? s.psf.axial_sigma : s.psf.lateral_sigma;
      LineFit lf = focus_line(a, pos, a == 2 ? axial_span : p.span, sig, p, map, ctx, rng);
      const auto& f = lf.fit;
      const double amp = f.value("amplitude"), amp_sigma = f.sigma("amplitude");
      if (!f.converged || !(amp > 5.0 * amp_sigma))
        throw ExperimentError(std::string("no peak found along ") + names[a]);
      pos[a] = f.value("center");
      notify(ctx, index, 6, {{"index", index}, {"axis", names[a]}, {"center", pos[a]}, {"values", lf.counts}});
      last[static_cast<std::size_t>(a)] = std::move(lf);
      if (ctx.point_delay.count() > 0) point_pause(ctx);
    }
  }

  AutofocusResult out;
  out.position = pos;
  auto& ds = out.dataset;
  ds.kind = data::Kind::sweep;
  ds.axes = {{"index", "", std::vector<double>()}};
  for (int i = 0; i < p.points; ++i) ds.axes[0].values.push_back(i);
  for (int a = 0; a < 3; ++a) {
    auto& lf = last[static_cast<std::size_t>(a)];
    ds.channels.push_back({std::string(names[a]) + "_offset", "um", lf.offsets, {}});
    ds.channels.push_back({std::string(names[a]) + "_counts", "counts", lf.counts, sqrt_sigma(lf.counts)});
    ds.fits.push_back(lf.fit);
  }
  ds.metadata = base_metadata(ExperimentKind::autofocus, to_json(p), ctx);
  ds.metadata["timestamp"] = number(6.0 * p.points * p.dwell);
  ds.metadata["derived"] = {{"position", Json::array({pos.x(), pos.y(), pos.z()})}};
  return out;
}

// --- dispatch ------------------------------------------------------------------------------------------

data::Dataset run_experiment(ExperimentKind kind, const Json& params, const Context& ctx) {
  const Json& pj = params.is_null() ? Json::object() : params;
  switch (kind) {
    case ExperimentKind::scan:
      return confocal_scan(scan_params(pj), ctx);
    case ExperimentKind::odmr:
      return cw_odmr(odmr_params(pj), ctx);
    case ExperimentKind::rabi:
      return rabi(rabi_params(pj), ctx);
    case ExperimentKind::readout:
      return readout_contrast(readout_params(pj), ctx);
    case ExperimentKind::lifetime:
      return lifetime(lifetime_params(pj), ctx);
    case ExperimentKind::hahn:
      return hahn_echo(echo_params(pj), ctx);
    case ExperimentKind::ramsey:
      return ramsey(echo_params(pj), ctx);
    case ExperimentKind::autofocus:
      return autofocus(autofocus_params(pj), ctx).dataset;
  }
  throw ExperimentError("unknown experiment");
}

data::Dataset replay(const Json& metadata) {
  if (!metadata.contains("experiment") || !metadata.contains("instrument") || !metadata.contains("params"))
    throw ExperimentError("metadata lacks experiment, params or instrument");
  Context ctx;
  ctx.snapshot = config::snapshot_from_json(metadata.at("instrument"));
  if (metadata.contains("run")) ctx.run = config::run_from_json(metadata.at("run"));
  return run_experiment(experiment_from_string(metadata.at("experiment").get<std::string>()), metadata.at("params"),
                        ctx);
}

}  // namespace nvtwin::exp
