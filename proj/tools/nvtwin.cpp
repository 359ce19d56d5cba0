// nvtwin: batch front end for the virtual NV microscope.

#include "nvtwin/calibration.hpp"
#include "nvtwin/config.hpp"
#include "nvtwin/experiments.hpp"
#include "nvtwin/render.hpp"
#include "nvtwin/service.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

using namespace nvtwin;
using Json = nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string params = "{}";
  bool json = false;
};

config::LabConfig load(const Common& c) {
  config::LabConfig cfg =
      c.config.empty() ? config::parse_config(R"({"format_version": 1})") : config::load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.instrument.state.seed = *c.seed;
  }
  return cfg;
}

// Inline JSON or @file.
Json parse_params(const std::string& text) {
  std::string body = text;
  if (!text.empty() && text[0] == '@') {
    std::ifstream in(text.substr(1));
    if (!in) throw std::runtime_error("cannot read params file " + text.substr(1));
    std::ostringstream s;
    s << in.rdbuf();
    body = s.str();
  }
  try {
    return Json::parse(body);
  } catch (const Json::exception& e) {
    throw config::ConfigError(std::string("--params: ") + e.what());
  }
}

double num(const Json& j, const char* key) { return config::to_number(j.at(key), key); }

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// Human summary of the derived quantities.
void report(const data::Dataset& ds, const std::string& path, bool as_json) {
  const Json d = ds.metadata.value("derived", Json::object());
  if (as_json) {
    Json fits = Json::array();
    for (const auto& f : ds.fits) fits.push_back(config::to_json(f));
    std::cout << Json{{"dataset", path}, {"aborted", ds.aborted}, {"derived", d}, {"fits", fits}}.dump(2) << "\n";
    return;
  }
  std::cout << "experiment: " << ds.metadata.value("experiment", "?") << "\n"
            << "dataset:    " << path << "\n";
  for (const auto& f : ds.fits) {
    std::cout << "fit " << analysis::to_string(f.model) << (f.converged ? "" : " NOT CONVERGED")
              << (f.message.empty() ? "" : " (" + f.message + ")") << ", chi2/dof "
              << fixed(f.dof > 0 ? f.chi2 / f.dof : 0.0, 3) << "\n";
    for (const auto& p : f.parameters)
      std::cout << "  " << p.name << " = " << p.value << " +- " << p.sigma << "\n";
  }
  const std::string exp_name = ds.metadata.value("experiment", "");
  if (d.contains("bz"))
    std::cout << "Bz = " << fixed(num(d, "bz") * 1e6, 2) << " +- " << fixed(num(d, "bz_sigma") * 1e6, 2) << " uT\n";
  if (d.contains("splitting")) std::cout << "splitting = " << fixed(num(d, "splitting") / 1e6, 3) << " MHz\n";
  if (d.contains("dips"))
    for (const auto& dip : d["dips"])
      std::cout << "dip at " << fixed(num(dip, "center") / 1e9, 6) << " GHz, FWHM " << fixed(num(dip, "fwhm") / 1e6, 2)
                << " MHz, contrast " << fixed(num(dip, "contrast") * 100, 2) << " %\n";
  if (d.contains("tau_pi"))
    std::cout << "tau_pi = " << fixed(num(d, "tau_pi") * 1e9, 2) << " ns, tau_pi/2 = " << fixed(num(d, "tau_pi_2") * 1e9, 2)
              << " ns\n";
  if (d.contains("early_contrast"))
    std::cout << "early contrast = " << fixed(num(d, "early_contrast") * 100, 1) << " %, converged after "
              << fixed(num(d, "converged_after") * 1e9, 0) << " ns\n";
  if (d.contains("lifetime"))
    std::cout << "lifetime = " << fixed(num(d, "lifetime") * 1e9, 2) << " +- " << fixed(num(d, "lifetime_sigma") * 1e9, 2)
              << " ns from " << d["tags"] << " tags\n";
  for (const char* key : {"t2", "t2_star"})
    if (d.contains(key))
      std::cout << key << " = " << fixed(num(d, key) * 1e9, 0) << " +- " << fixed(num(d, (std::string(key) + "_sigma").c_str()) * 1e9, 0)
                << " ns\n";
  if (d.contains("t2_lower_bound")) std::cout << "T2 lower bound = " << fixed(num(d, "t2_lower_bound") * 1e9, 0) << " ns\n";
  if (d.contains("peak_x"))
    std::cout << "brightest pixel at (" << num(d, "peak_x") << ", " << num(d, "peak_y") << ") um, "
              << num(d, "peak_counts") << " counts\n";
  if (d.contains("spot") && d["spot"].contains("parameters"))
    std::cout << "spot fit: " << d["spot"].dump() << "\n";
  if (d.contains("focus"))
    std::cout << "focus at " << d["focus"].dump() << " um\n";
  if (ds.aborted) std::cout << "run was aborted\n";
}

std::atomic<bool> g_interrupted{false};
extern "C" void on_signal(int) { g_interrupted = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Virtual NV-center confocal microscope"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "nvtwin 1.0");

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Lab configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "RNG seed (overrides the config)");
    sub->add_option("--out", common.out, "Dataset file to write (default <subcommand>.ds)");
    sub->add_option("--params", common.params, "Experiment parameters as JSON or @file");
    sub->add_flag("--json", common.json, "Print the summary as JSON");
  };

  std::optional<double> bz;
  bool render_too = false;
  struct Run {
    CLI::App* app;
    exp::ExperimentKind kind;
  };
  std::vector<Run> runs;
  for (const auto& [name, kind, help] : std::vector<std::tuple<std::string, exp::ExperimentKind, std::string>>{
           {"scan", exp::ExperimentKind::scan, "Confocal raster scan"},
           {"odmr", exp::ExperimentKind::odmr, "CW-ODMR spectrum"},
           {"rabi", exp::ExperimentKind::rabi, "Rabi oscillation sweep"},
           {"readout", exp::ExperimentKind::readout, "Spin-dependent readout traces I0/I1"},
           {"lifetime", exp::ExperimentKind::lifetime, "TCSPC fluorescence lifetime"},
           {"hahn", exp::ExperimentKind::hahn, "Hahn echo decay"},
           {"ramsey", exp::ExperimentKind::ramsey, "Ramsey free-induction decay"},
           {"autofocus", exp::ExperimentKind::autofocus, "Line-scan autofocus on an emitter"}}) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    sub->add_flag("--render", render_too, "Also write the figure next to the dataset");
    if (kind == exp::ExperimentKind::odmr)
      sub->add_option("--bz", bz, "Bias field along the NV axis in tesla");
    runs.push_back({sub, kind});
  }

  auto* cal = app.add_subcommand("calibrate-rates", "Check the optical rates against the rate-model oracle");
  add_common(cal);
  bool no_sim = false;
  cal->add_flag("--no-simulate", no_sim, "Rate-model checks only");

  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  add_common(serve);
  std::string host = "127.0.0.1", data_dir = "datasets";
  int port = 8080, delay_ms = 0;
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->check(CLI::Range(0, 65535))->capture_default_str();
  serve->add_option("--data-dir", data_dir)->capture_default_str();
  serve->add_option("--point-delay-ms", delay_ms, "Extra wall-clock time per sweep point")->check(CLI::NonNegativeNumber);

  auto* show = app.add_subcommand("config", "Print the effective configuration after defaulting");
  show->add_option("--config", common.config, "Lab configuration file")->check(CLI::ExistingFile);
  show->add_option("--seed", common.seed, "RNG seed (overrides the config)");

  auto* rend = app.add_subcommand("render", "Plot datasets (SVG, plus PNG for scans)");
  std::vector<std::string> inputs;
  std::string render_out;
  rend->add_option("datasets", inputs, "Dataset files")->required()->check(CLI::ExistingFile);
  rend->add_option("--out", render_out, "Output base name (single input only)");

  auto* rep = app.add_subcommand("replay", "Re-run the experiment recorded in a dataset");
  std::string replay_in;
  rep->add_option("dataset", replay_in)->required()->check(CLI::ExistingFile);
  rep->add_option("--out", common.out, "Dataset file to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    for (const auto& r : runs) {
      if (!*r.app) continue;
      if (common.out.empty()) common.out = r.app->get_name() + ".ds";
      const auto cfg = load(common);
      exp::Context ctx;
      ctx.snapshot = cfg.instrument;
      ctx.run = cfg.run;
      if (bz) ctx.snapshot.state.magnet_field = lab::Vec3(0, 0, *bz);
      const Json params = parse_params(common.params);

      if (r.kind == exp::ExperimentKind::scan) {
        const auto p = exp::scan_params(params);
        const double pixels = std::ceil((p.x_max - p.x_min) / p.resolution) * std::ceil((p.y_max - p.y_min) / p.resolution);
        if (pixels > 250000) {
          // Too big to hold comfortably: stream rows to disk.
          const Json m = exp::confocal_scan_to_file(p, ctx, common.out);
          data::Dataset head;
          head.metadata = m;
          report(head, common.out, common.json);
          return 0;
        }
      }
      data::Dataset ds;
      if (r.kind == exp::ExperimentKind::autofocus) {
        const auto af = exp::autofocus(exp::autofocus_params(params), ctx);
        ds = af.dataset;
        ds.metadata["derived"]["focus"] = {af.position.x(), af.position.y(), af.position.z()};
      } else {
        ds = exp::run_experiment(r.kind, params, ctx);
      }
      data::save_dataset(ds, common.out);
      report(ds, common.out, common.json);
      if (render_too)
        for (const auto& f : render::render_dataset(ds, common.out)) std::cout << "figure: " << f.string() << "\n";
      return 0;
    }

    if (*cal) {
      const auto cfg = load(common);
      const auto rep_ = calib::calibrate_rates(cfg.physics.optical, cfg.seed, !no_sim);
      if (common.json)
        std::cout << calib::to_json(rep_).dump(2) << "\n";
      else
        std::cout << calib::format_report(rep_);
      return rep_.pass() ? 0 : 1;
    }

    if (*serve) {
      const auto cfg = load(common);
      service::ServiceOptions opts;
      opts.data_dir = data_dir;
      opts.point_delay = std::chrono::milliseconds(delay_ms);
      service::Service svc(cfg, opts);
      const int bound = svc.listen(host, port);
      std::cout << "listening on http://" << host << ":" << bound << "/api/v1" << std::endl;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      std::cout << "shutting down" << std::endl;
      svc.stop();
      return 0;
    }

    if (*show) {
      std::cout << config::effective_config(load(common)).dump(2) << "\n";
      return 0;
    }

    if (*rend) {
      if (!render_out.empty() && inputs.size() != 1) throw std::runtime_error("--out needs exactly one dataset");
      for (const auto& in : inputs) {
        const auto ds = data::load_dataset(in);
        for (const auto& f : render::render_dataset(ds, render_out.empty() ? in : render_out))
          std::cout << f.string() << "\n";
      }
      return 0;
    }

    if (*rep) {
      const auto original = data::read_header(replay_in);
      const auto ds = exp::replay(original.at("metadata"));
      data::save_dataset(ds, common.out);
      report(ds, common.out, false);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
