#include "nvtwin/config.hpp"
#include "strict_json.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace nvtwin::config {

namespace {

using detail::Obj;

Json vec(const Eigen::Vector3d& v) { return Json::array({number(v[0]), number(v[1]), number(v[2])}); }

// Wraps library validation errors with the config path.
template <class F>
void checked(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string location(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t k = 0; k + 1 < byte && k < text.size(); ++k) {
    if (text[k] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return std::to_string(line) + ":" + std::to_string(col);
}

Json parse_text(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    std::string msg = e.what();
    if (auto p = msg.find("parse error"); p != std::string::npos) msg = msg.substr(p);
    throw ConfigError(what + ":" + location(text, e.byte) + ": " + msg);
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void check_version(Obj& o, const std::string& what) {
  const Json* v = o.get("format_version");
  if (!v) throw ConfigError(what + ": missing format_version");
  if (!v->is_number_integer() || v->get<int>() != kFormatVersion)
    throw ConfigError(what + ": unsupported format_version " + v->dump() + " (expected " +
                      std::to_string(kFormatVersion) + ")");
}

}  // namespace

Json number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double to_number(const Json& j, const std::string& path) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw ConfigError(path + ": expected a number");
}

// --- encoders ----------------------------------------------------------------

Json to_json(const physics::OpticalRates& r) {
  return {{"k_rad", number(r.k_rad)},       {"k_isc_pm", number(r.k_isc_pm)}, {"k_isc_0", number(r.k_isc_0)},
          {"k_s0", number(r.k_s0)},         {"k_s_pm", number(r.k_s_pm)},
          {"pump_rate_per_watt", number(r.pump_rate_per_watt)}};
}

Json to_json(const physics::NVParameters& p) {
  return {{"d_zfs", number(p.d_zfs)},
          {"gamma_e", number(p.gamma_e)},
          {"t2_star", number(p.t2_star)},
          {"t2", number(p.t2)},
          {"t1", number(p.t1)},
          {"quasi_static_sigma", number(p.quasi_static_sigma)},
          {"drive_reference_rabi", number(p.drive_reference_rabi)},
          {"optical", to_json(p.optical)},
          {"axis", vec(p.axis)}};
}

Json to_json(const lab::Emitter& e) {
  return {{"position", vec(e.position)}, {"brightness_scale", number(e.brightness_scale)}, {"physics", to_json(e.params)}};
}

Json to_json(const lab::VirtualSample& s) {
  Json em = Json::array();
  for (const auto& e : s.emitters) em.push_back(to_json(e));
  return {{"name", s.name}, {"background_rate_per_watt", number(s.background_rate_per_watt)}, {"emitters", em}};
}

Json to_json(const lab::SPADConfig& s) {
  return {{"dark_rate", number(s.dark_rate)},
          {"dead_time", number(s.dead_time)},
          {"quantum_efficiency", number(s.quantum_efficiency)},
          {"collection_efficiency", number(s.collection_efficiency)}};
}

Json to_json(const lab::PSFModel& p) {
  return {{"lateral_sigma", number(p.lateral_sigma)},
          {"axial_sigma", number(p.axial_sigma)},
          {"wavelength_nm", number(p.wavelength)},
          {"numerical_aperture", number(p.numerical_aperture)}};
}

Json to_json(const lab::StageModel& s) {
  return {{"um_per_volt", number(s.um_per_volt)},
          {"jitter_sigma", number(s.jitter_sigma)},
          {"time_constant", number(s.time_constant)}};
}

Json to_json(const lab::InstrumentState& s) {
  return {{"stage_voltage", vec(s.stage_voltage)},
          {"laser_power", number(s.laser_power)},
          {"attenuation_db", number(s.attenuation_db)},
          {"mw", {{"frequency", number(s.mw.frequency)}, {"rabi", number(s.mw.rabi)}, {"on", s.mw.on}}},
          {"magnet_field", vec(s.magnet_field)},
          {"spad", to_json(s.spad)},
          {"seed", s.seed}};
}

Json to_json(const lab::InstrumentSnapshot& s) {
  return {{"sample", to_json(s.sample)}, {"state", to_json(s.state)}, {"psf", to_json(s.psf)}, {"stage", to_json(s.stage)}};
}

Json to_json(const analysis::FitResult& f) {
  Json params = Json::array();
  for (const auto& p : f.parameters) params.push_back({{"name", p.name}, {"value", number(p.value)}, {"sigma", number(p.sigma)}});
  return {{"model", analysis::to_string(f.model)},
          {"parameters", params},
          {"residual_norm", number(f.residual_norm)},
          {"chi2", number(f.chi2)},
          {"dof", f.dof},
          {"iterations", f.iterations},
          {"converged", f.converged},
          {"message", f.message}};
}

Json to_json(const seq::SweepSpec& s) {
  return {{"variable", s.variable},
          {"start", number(s.start)},
          {"stop", number(s.stop)},
          {"points", s.points},
          {"spacing", s.spacing == seq::Spacing::log ? "log" : "linear"}};
}

Json to_json(const RunDefaults& r) { return {{"shots", r.shots}, {"quadrature_nodes", r.quadrature_nodes}}; }

// --- decoders ----------------------------------------------------------------

physics::OpticalRates optical_from_json(const Json& j, physics::OpticalRates r, const std::string& path) {
  Obj o(j, path);
  o.num("k_rad", r.k_rad);
  o.num("k_isc_pm", r.k_isc_pm);
  o.num("k_isc_0", r.k_isc_0);
  o.num("k_s0", r.k_s0);
  o.num("k_s_pm", r.k_s_pm);
  o.num("pump_rate_per_watt", r.pump_rate_per_watt);
  o.finish();
  checked(path, [&] { r.validate(); });
  return r;
}

physics::NVParameters physics_from_json(const Json& j, physics::NVParameters p, const std::string& path) {
  Obj o(j, path);
  if (const Json* preset = o.get("optical_preset")) {
    if (!preset->is_string()) throw ConfigError(o.sub("optical_preset") + ": expected a string");
    const auto name = preset->get<std::string>();
    if (name == "default")
      p.optical = physics::OpticalRates{};
    else if (name == "lifetime_20ns")
      p.optical = physics::OpticalRates::lifetime_20ns();
    else
      throw ConfigError(o.sub("optical_preset") + ": unknown preset '" + name + "'");
  }
  o.num("d_zfs", p.d_zfs);
  o.num("gamma_e", p.gamma_e);
  o.num("t2_star", p.t2_star);
  o.num("t2", p.t2);
  o.num("t1", p.t1);
  o.num("quasi_static_sigma", p.quasi_static_sigma);
  o.num("drive_reference_rabi", p.drive_reference_rabi);
  o.vec3("axis", p.axis);
  if (const Json* opt = o.get("optical")) p.optical = optical_from_json(*opt, p.optical, o.sub("optical"));
  o.finish();
  checked(path, [&] { p.validate(); });
  return p;
}

lab::VirtualSample sample_from_json(const Json& j, const physics::NVParameters& defaults, const std::string& path) {
  Obj o(j, path);
  lab::VirtualSample s;
  if (const Json* preset = o.get("preset")) {
    if (!preset->is_string()) throw ConfigError(o.sub("preset") + ": expected a string");
    const auto name = preset->get<std::string>();
    if (name == "single") {
      Eigen::Vector3d pos(50, 50, 50);
      o.vec3("position", pos);
      s = lab::VirtualSample::single(pos, defaults);
    } else if (name == "random") {
      int count = 10;
      std::uint64_t seed = 1;
      Eigen::Vector3d lo(40, 40, 50), hi(60, 60, 50);
      bool tetra = false;
      o.integer("count", count);
      o.u64("seed", seed);
      o.vec3("lo", lo);
      o.vec3("hi", hi);
      o.boolean("tetrahedral_axes", tetra);
      checked(path, [&] { s = lab::VirtualSample::random(seed, count, lo, hi, defaults); });
      if (tetra) lab::assign_tetrahedral_axes(s);
    } else if (name == "empty") {
      s.name = "empty";
    } else {
      throw ConfigError(o.sub("preset") + ": unknown preset '" + name + "'");
    }
  } else if (const Json* em = o.get("emitters")) {
    if (!em->is_array()) throw ConfigError(o.sub("emitters") + ": expected an array");
    for (std::size_t k = 0; k < em->size(); ++k) {
      const std::string ep = o.sub("emitters") + "[" + std::to_string(k) + "]";
      Obj e((*em)[k], ep);
      lab::Emitter emitter;
      emitter.params = defaults;
      if (!e.has("position")) throw ConfigError(ep + ": missing position");
      e.vec3("position", emitter.position);
      e.num("brightness_scale", emitter.brightness_scale);
      if (const Json* ph = e.get("physics")) emitter.params = physics_from_json(*ph, defaults, ep + ".physics");
      e.finish();
      s.emitters.push_back(emitter);
    }
    s.name = "inline";
  }
  o.text("name", s.name);
  o.num("background_rate_per_watt", s.background_rate_per_watt);
  if (o.has("file")) throw ConfigError(o.sub("file") + ": sample files are only allowed in lab configs");
  o.finish();
  checked(path, [&] { s.validate(); });
  return s;
}

lab::InstrumentState state_from_json(const Json& j, lab::InstrumentState s, const std::string& path) {
  Obj o(j, path);
  o.vec3("stage_voltage", s.stage_voltage);
  o.num("laser_power", s.laser_power);
  o.num("attenuation_db", s.attenuation_db);
  if (const Json* mw = o.get("mw")) {
    Obj m(*mw, o.sub("mw"));
    m.num("frequency", s.mw.frequency);
    m.num("rabi", s.mw.rabi);
    m.boolean("on", s.mw.on);
    m.finish();
  }
  o.vec3("magnet_field", s.magnet_field);
  if (const Json* sp = o.get("spad")) {
    Obj d(*sp, o.sub("spad"));
    d.num("dark_rate", s.spad.dark_rate);
    d.num("dead_time", s.spad.dead_time);
    d.num("quantum_efficiency", s.spad.quantum_efficiency);
    d.num("collection_efficiency", s.spad.collection_efficiency);
    d.finish();
  }
  o.u64("seed", s.seed);
  o.finish();
  checked(path, [&] { s.validate(); });
  return s;
}

lab::PSFModel psf_from_json(const Json& j, const std::string& path) {
  Obj o(j, path);
  double wl = 650.0, na = 1.45;
  o.num("wavelength_nm", wl);
  o.num("numerical_aperture", na);
  lab::PSFModel p = lab::PSFModel::from_optics(wl, na);
  o.num("lateral_sigma", p.lateral_sigma);
  o.num("axial_sigma", p.axial_sigma);
  o.finish();
  checked(path, [&] { p.validate(); });
  return p;
}

lab::StageModel stage_from_json(const Json& j, lab::StageModel s, const std::string& path) {
  Obj o(j, path);
  o.num("um_per_volt", s.um_per_volt);
  o.num("jitter_sigma", s.jitter_sigma);
  o.num("time_constant", s.time_constant);
  o.finish();
  checked(path, [&] { s.validate(); });
  return s;
}

lab::InstrumentSnapshot snapshot_from_json(const Json& j, const std::string& path) {
  Obj o(j, path);
  lab::InstrumentSnapshot s{lab::VirtualSample{}, lab::InstrumentState{}, lab::PSFModel::from_optics(), lab::StageModel{}};
  if (const Json* v = o.get("sample")) s.sample = sample_from_json(*v, physics::NVParameters{}, o.sub("sample"));
  if (const Json* v = o.get("state")) s.state = state_from_json(*v, {}, o.sub("state"));
  if (const Json* v = o.get("psf")) s.psf = psf_from_json(*v, o.sub("psf"));
  if (const Json* v = o.get("stage")) s.stage = stage_from_json(*v, {}, o.sub("stage"));
  o.finish();
  return s;
}

analysis::FitResult fit_from_json(const Json& j, const std::string& path) {
  Obj o(j, path);
  analysis::FitResult f;
  std::string model;
  o.text("model", model);
  checked(path, [&] { f.model = analysis::model_from_string(model); });
  if (const Json* ps = o.get("parameters")) {
    if (!ps->is_array()) throw ConfigError(o.sub("parameters") + ": expected an array");
    for (std::size_t k = 0; k < ps->size(); ++k) {
      Obj p((*ps)[k], o.sub("parameters") + "[" + std::to_string(k) + "]");
      analysis::FitParameter fp;
      p.text("name", fp.name);
      p.num("value", fp.value);
      p.num("sigma", fp.sigma);
      p.finish();
      f.parameters.push_back(fp);
    }
  }
  o.num("residual_norm", f.residual_norm);
  o.num("chi2", f.chi2);
  o.integer("dof", f.dof);
  o.integer("iterations", f.iterations);
  o.boolean("converged", f.converged);
  o.text("message", f.message);
  o.finish();
  return f;
}

seq::SweepSpec sweep_from_json(const Json& j, const std::string& path) {
  Obj o(j, path);
  seq::SweepSpec s;
  std::string spacing = "linear";
  o.text("variable", s.variable);
  o.num("start", s.start);
  o.num("stop", s.stop);
  o.integer("points", s.points);
  o.text("spacing", spacing);
  o.finish();
  if (spacing == "log")
    s.spacing = seq::Spacing::log;
  else if (spacing != "linear")
    throw ConfigError(o.sub("spacing") + ": expected 'linear' or 'log'");
  checked(path, [&] { s.validate(); });
  return s;
}

RunDefaults run_from_json(const Json& j, RunDefaults r, const std::string& path) {
  Obj o(j, path);
  o.u64("shots", r.shots);
  o.integer("quadrature_nodes", r.quadrature_nodes);
  o.finish();
  if (r.shots < 1) throw ConfigError(o.sub("shots") + ": must be >= 1");
  if (r.quadrature_nodes < 1 || r.quadrature_nodes > 200)
    throw ConfigError(o.sub("quadrature_nodes") + ": must be in [1, 200]");
  return r;
}

// --- lab config ----------------------------------------------------------------

lab::VirtualSample default_sample(const physics::NVParameters& params) {
  return lab::VirtualSample::single(Eigen::Vector3d(50, 50, 50), params);
}

LabConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  const Json j = parse_text(text, "config");
  Obj o(j, "");
  check_version(o, "config");
  LabConfig cfg;
  cfg.instrument = {lab::VirtualSample{}, lab::InstrumentState{}, lab::PSFModel::from_optics(), lab::StageModel{}};
  o.u64("seed", cfg.seed);
  if (const Json* v = o.get("physics")) cfg.physics = physics_from_json(*v, {}, "physics");

  if (const Json* v = o.get("instrument")) {
    // Instrument keys are the state keys plus psf and stage.
    Json state = *v;
    if (!state.is_object()) throw ConfigError("instrument: expected an object");
    if (state.contains("psf")) {
      cfg.instrument.psf = psf_from_json(state["psf"], "instrument.psf");
      state.erase("psf");
    }
    if (state.contains("stage")) {
      cfg.instrument.stage = stage_from_json(state["stage"], {}, "instrument.stage");
      state.erase("stage");
    }
    if (state.contains("seed")) throw ConfigError("unknown key 'instrument.seed' (use the top-level seed)");
    cfg.instrument.state = state_from_json(state, {}, "instrument");
  }
  cfg.instrument.state.seed = cfg.seed;

  cfg.instrument.sample = default_sample(cfg.physics);
  if (const Json* v = o.get("sample")) {
    if (v->is_object() && v->contains("file")) {
      if (v->size() != 1) throw ConfigError("sample: 'file' cannot be combined with other keys");
      std::filesystem::path p = (*v)["file"].get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      const std::string stext = read_file(p);
      Json sj = parse_text(stext, p.string());
      if (!sj.is_object()) throw ConfigError(p.string() + ": expected an object");
      {
        Obj so(sj, p.string());
        check_version(so, p.string());
      }
      sj.erase("format_version");
      cfg.instrument.sample = sample_from_json(sj, cfg.physics, "sample(" + p.filename().string() + ")");
      cfg.sample_source = p.string();
    } else {
      cfg.instrument.sample = sample_from_json(*v, cfg.physics, "sample");
      cfg.sample_source = v->contains("preset") ? "preset:" + (*v)["preset"].get<std::string>() : "inline";
    }
  }
  if (const Json* v = o.get("run")) cfg.run = run_from_json(*v, {}, "run");
  o.finish();
  return cfg;
}

LabConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path), path.parent_path());
}

Json effective_config(const LabConfig& cfg) {
  Json inst = to_json(cfg.instrument.state);
  inst.erase("seed");
  inst["psf"] = to_json(cfg.instrument.psf);
  inst["stage"] = to_json(cfg.instrument.stage);
  Json sample = to_json(cfg.instrument.sample);
  return {{"format_version", cfg.format_version},
          {"seed", cfg.seed},
          {"physics", to_json(cfg.physics)},
          {"instrument", inst},
          {"sample", sample},
          {"run", to_json(cfg.run)}};
}

}  // namespace nvtwin::config
