#include "nvtwin/render.hpp"

#include "nvtwin/config.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace nvtwin::render {

namespace {

constexpr double kWidth = 760, kHeight = 500;
constexpr double kLeft = 80, kRight = 230, kTop = 50, kBottom = 60;

struct Scale {
  double factor = 1.0;  // display = value * factor
  std::string unit;
};

// SI prefix that puts `magnitude` in [1, 1000).
Scale si_scale(double magnitude, const std::string& unit) {
  if (unit != "s" && unit != "Hz" && unit != "T") return {1.0, unit};
  static const std::array<std::pair<int, const char*>, 8> prefixes = {
      {{9, "G"}, {6, "M"}, {3, "k"}, {0, ""}, {-3, "m"}, {-6, "µ"}, {-9, "n"}, {-12, "p"}}};
  if (!(magnitude > 0.0) || !std::isfinite(magnitude)) return {1.0, unit};
  for (const auto& [exp, p] : prefixes)
    if (magnitude >= std::pow(10.0, exp)) return {std::pow(10.0, -exp), std::string(p) + unit};
  return {1e12, "p" + unit};
}

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// "v +- s unit" with the uncertainty to two significant digits.
std::string with_error(double v, double sigma, const std::string& unit) {
  const Scale sc = si_scale(std::abs(v), unit);
  const double dv = v * sc.factor, ds = sigma * sc.factor;
  int decimals = 2;
  if (ds > 0.0 && std::isfinite(ds)) decimals = std::clamp(1 - static_cast<int>(std::floor(std::log10(ds))), 0, 8);
  std::ostringstream s;
  s << std::fixed << std::setprecision(decimals) << dv;
  if (std::isfinite(sigma)) s << " ± " << ds;
  if (!sc.unit.empty()) s << " " << sc.unit;
  return s.str();
}

std::vector<double> nice_ticks(double lo, double hi) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / 6.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  std::vector<double> t;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
  return t;
}

analysis::ModelSpec spec_for(const analysis::FitResult& f) {
  analysis::ModelSpec spec;
  spec.kind = f.model;
  if (f.model == analysis::ModelKind::lorentzian_multi) spec.n_peaks = static_cast<int>((f.parameters.size() - 1) / 3);
  if (f.model == analysis::ModelKind::exp_decay) spec.stretched = f.parameters.size() == 4;
  return spec;
}

struct Label {
  std::string text;
  std::string unit;
};

Label parameter_label(const std::string& name, const std::string& experiment) {
  if (name == "omega") return {"Ω", "Hz"};
  if (name == "t2star") return {"T2*", "s"};
  if (name == "phi") return {"φ", "rad"};
  if (name == "tau") {
    if (experiment == "hahn") return {"T2", "s"};
    if (experiment == "ramsey") return {"T2*", "s"};
    return {"τ", "s"};
  }
  if (name.rfind("center", 0) == 0) return {"ν" + name.substr(6), "Hz"};
  if (name.rfind("fwhm", 0) == 0) return {"FWHM" + name.substr(4), "Hz"};
  if (name.rfind("depth", 0) == 0) return {"C" + name.substr(5), ""};
  return {name, ""};
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void axes(std::ostringstream& o, const Frame& f, const Scale& xs, const std::string& xlabel, const std::string& ylabel) {
  const double w = kWidth - kLeft - kRight, h = kHeight - kTop - kBottom;
  o << "<rect x='" << kLeft << "' y='" << kTop << "' width='" << w << "' height='" << h
    << "' fill='none' stroke='black'/>\n";
  for (double t : nice_ticks(f.x0 * xs.factor, f.x1 * xs.factor)) {
    const double x = f.px(t / xs.factor);
    o << "<line x1='" << x << "' y1='" << kHeight - kBottom << "' x2='" << x << "' y2='" << kHeight - kBottom + 5
      << "' stroke='black'/><text x='" << x << "' y='" << kHeight - kBottom + 18
      << "' text-anchor='middle'>" << fmt(t) << "</text>\n";
  }
  for (double t : nice_ticks(f.y0, f.y1)) {
    const double y = f.py(t);
    o << "<line x1='" << kLeft - 5 << "' y1='" << y << "' x2='" << kLeft << "' y2='" << y
      << "' stroke='black'/><text x='" << kLeft - 8 << "' y='" << y + 4 << "' text-anchor='end'>" << fmt(t)
      << "</text>\n";
  }
  o << "<text x='" << kLeft + w / 2 << "' y='" << kHeight - 15 << "' text-anchor='middle'>" << esc(xlabel)
    << "</text>\n";
  o << "<text transform='translate(20," << kTop + h / 2 << ") rotate(-90)' text-anchor='middle'>" << esc(ylabel)
    << "</text>\n";
}

std::string svg_open(double w, double h) {
  std::ostringstream o;
  o << "<?xml version='1.0' encoding='UTF-8'?>\n<svg xmlns='http://www.w3.org/2000/svg' "
       "xmlns:xlink='http://www.w3.org/1999/xlink' width='"
    << w << "' height='" << h << "' font-family='Helvetica, Arial, sans-serif' font-size='12'>\n"
    << "<rect width='100%' height='100%' fill='white'/>\n";
  return o.str();
}

std::vector<std::string> annotations(const data::Dataset& ds) {
  std::vector<std::string> lines;
  const std::string exp_name = ds.metadata.value("experiment", std::string());
  for (const auto& f : ds.fits) {
    lines.push_back(analysis::to_string(f.model) + (f.converged ? "" : " (not converged)"));
    for (const auto& p : f.parameters) {
      const Label l = parameter_label(p.name, exp_name);
      if (p.name.rfind("depth", 0) == 0)
        lines.push_back(l.text + " = " + with_error(100 * p.value, 100 * p.sigma, "") + " %");
      else
        lines.push_back(l.text + " = " + with_error(p.value, p.sigma, l.unit));
    }
    lines.push_back("χ²/dof = " + fmt(f.dof > 0 ? f.chi2 / f.dof : 0.0, 3));
  }
  if (ds.metadata.contains("derived")) {
    const auto& d = ds.metadata["derived"];
    auto num = [&](const char* k) { return config::to_number(d.at(k), k); };
    if (d.contains("bz")) lines.push_back("Bz = " + with_error(num("bz"), num("bz_sigma"), "T"));
    if (d.contains("splitting")) lines.push_back("splitting = " + with_error(num("splitting"), NAN, "Hz"));
    if (d.contains("tau_pi")) lines.push_back("τπ = " + with_error(num("tau_pi"), NAN, "s"));
    if (d.contains("tau_pi_2")) lines.push_back("τπ/2 = " + with_error(num("tau_pi_2"), NAN, "s"));
    if (d.contains("early_contrast"))
      lines.push_back("early contrast = " + with_error(100 * num("early_contrast"), 100 * num("early_contrast_sigma"), "") + " %");
    if (d.contains("converged_after")) lines.push_back("converged after " + with_error(num("converged_after"), NAN, "s"));
    if (d.contains("tags")) lines.push_back("tags = " + fmt(num("tags"), 8));
  }
  return lines;
}

struct Series {
  std::string name;
  const data::Channel* channel;
  std::string colour;
};

std::vector<Series> series_for(const data::Dataset& ds) {
  auto has = [&](const char* n) {
    return std::any_of(ds.channels.begin(), ds.channels.end(), [&](const auto& c) { return c.name == n; });
  };
  if (ds.kind == data::Kind::time_trace && has("I0") && has("I1"))
    return {{"I0", &ds.channel("I0"), "#1f77b4"}, {"I1", &ds.channel("I1"), "#d62728"}};
  if (has("signal")) return {{"signal", &ds.channel("signal"), "#1f77b4"}};
  if (ds.channels.empty()) throw RenderError("dataset has no channels");
  return {{ds.channels.front().name, &ds.channels.front(), "#1f77b4"}};
}

// Perceptual-ish ramp from dark blue through orange to white.
std::array<unsigned char, 3> colour(double t) {
  static const std::array<std::array<double, 3>, 5> stops = {
      {{0.0, 0.0, 0.02}, {0.25, 0.05, 0.45}, {0.75, 0.2, 0.3}, {0.98, 0.6, 0.1}, {1.0, 1.0, 0.9}}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int k = std::min(3, static_cast<int>(t));
  const double u = t - k;
  std::array<unsigned char, 3> c{};
  for (int i = 0; i < 3; ++i)
    c[static_cast<std::size_t>(i)] = static_cast<unsigned char>(
        std::lround(255.0 * (stops[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] * (1 - u) +
                             stops[static_cast<std::size_t>(k + 1)][static_cast<std::size_t>(i)] * u)));
  return c;
}

}  // namespace

std::string plot_svg(const data::Dataset& ds) {
  ds.validate();
  if (ds.axes.size() != 1) throw RenderError("line plots need a one-axis dataset");
  const auto& ax = ds.axes[0];
  const auto series = series_for(ds);

  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (double x : ax.values)
    if (std::isfinite(x)) x0 = std::min(x0, x), x1 = std::max(x1, x);
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.channel->values.size(); ++i) {
      const double v = s.channel->values[i];
      if (!std::isfinite(v)) continue;
      const double e = s.channel->sigma.empty() ? 0.0 : s.channel->sigma[i];
      y0 = std::min(y0, v - e);
      y1 = std::max(y1, v + e);
    }
  if (!std::isfinite(x0) || !(x1 > x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0) || !(y1 > y0)) y0 = std::isfinite(y0) ? y0 - 1 : 0, y1 = y0 + 2;
  const double pad = 0.05 * (y1 - y0);
  const Frame f{x0, x1, y0 - pad, y1 + pad};
  const Scale xs = si_scale(std::max(std::abs(x0), std::abs(x1)), ax.unit);

  std::ostringstream o;
  o << svg_open(kWidth, kHeight);
  const std::string title = ds.metadata.value("experiment", data::to_string(ds.kind));
  o << "<text x='" << kLeft << "' y='28' font-size='16' font-weight='bold'>" << esc(title)
    << (ds.aborted ? " (aborted)" : "") << "</text>\n";
  const std::string ylabel = series.size() > 1 ? "counts per bin" : series[0].name + " (" + series[0].channel->unit + ")";
  axes(o, f, xs, ax.name + (xs.unit.empty() ? "" : " (" + xs.unit + ")"), ylabel);

  o << "<clipPath id='plot'><rect x='" << kLeft << "' y='" << kTop << "' width='" << kWidth - kLeft - kRight
    << "' height='" << kHeight - kTop - kBottom << "'/></clipPath>\n<g clip-path='url(#plot)'>\n";
  for (const auto& s : series) {
    const auto& v = s.channel->values;
    const bool dense = v.size() > 300;
    if (dense) o << "<polyline fill='none' stroke='" << s.colour << "' stroke-width='1' points='";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) continue;
      const double x = f.px(ax.values[i]), y = f.py(v[i]);
      if (dense) {
        o << x << "," << y << " ";
        continue;
      }
      if (!s.channel->sigma.empty() && std::isfinite(s.channel->sigma[i]))
        o << "<line x1='" << x << "' y1='" << f.py(v[i] - s.channel->sigma[i]) << "' x2='" << x << "' y2='"
          << f.py(v[i] + s.channel->sigma[i]) << "' stroke='" << s.colour << "' stroke-opacity='0.5'/>";
      o << "<circle cx='" << x << "' cy='" << y << "' r='2.5' fill='" << s.colour << "'/>\n";
    }
    if (dense) o << "'/>\n";
  }
  // Fit overlay on a dense grid.
  for (const auto& fit : ds.fits) {
    if (fit.model == analysis::ModelKind::gaussian_2d) continue;
    const int n = 400;
    Eigen::VectorXd xg(n);
    for (int i = 0; i < n; ++i) xg[i] = x0 + (x1 - x0) * i / (n - 1);
    const Eigen::VectorXd yg = analysis::eval_model(spec_for(fit), fit.values(), xg);
    o << "<polyline fill='none' stroke='black' stroke-width='1.5' points='";
    for (int i = 0; i < n; ++i)
      if (std::isfinite(yg[i])) o << f.px(xg[i]) << "," << f.py(yg[i]) << " ";
    o << "'/>\n";
  }
  o << "</g>\n";

  double ty = kTop + 12;
  const double tx = kWidth - kRight + 12;
  for (const auto& s : series) {
    o << "<circle cx='" << tx + 4 << "' cy='" << ty - 4 << "' r='3' fill='" << s.colour << "'/><text x='" << tx + 14
      << "' y='" << ty << "'>" << esc(s.name) << "</text>\n";
    ty += 18;
  }
  if (!ds.fits.empty()) {
    o << "<line x1='" << tx << "' y1='" << ty - 4 << "' x2='" << tx + 10 << "' y2='" << ty - 4
      << "' stroke='black' stroke-width='1.5'/><text x='" << tx + 14 << "' y='" << ty << "'>fit</text>\n";
    ty += 24;
  }
  for (const auto& line : annotations(ds)) {
    o << "<text x='" << tx << "' y='" << ty << "'>" << esc(line) << "</text>\n";
    ty += 16;
  }
  o << "</svg>\n";
  return o.str();
}

void heatmap_png(const data::Dataset& ds, const std::filesystem::path& path, const std::string& channel) {
  ds.validate();
  if (ds.kind != data::Kind::scan2d) throw RenderError("heatmaps need a scan2d dataset");
  const auto& v = ds.channel(channel).values;
  const std::size_t nx = ds.axes[0].values.size(), ny = ds.axes[1].values.size();
  double lo = INFINITY, hi = -INFINITY;
  for (double c : v)
    if (std::isfinite(c)) lo = std::min(lo, c), hi = std::max(hi, c);
  if (!(hi > lo)) hi = lo + 1.0;

  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw RenderError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw RenderError("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(nx), static_cast<png_uint_32>(ny), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(3 * nx);
  for (std::size_t r = 0; r < ny; ++r) {
    const std::size_t iy = ny - 1 - r;  // image rows run top-down
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const double c = v[iy * nx + ix];
      const auto rgb = std::isfinite(c) ? colour((c - lo) / (hi - lo)) : std::array<unsigned char, 3>{128, 128, 128};
      std::copy(rgb.begin(), rgb.end(), row.begin() + static_cast<std::ptrdiff_t>(3 * ix));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::string heatmap_svg(const data::Dataset& ds, const std::string& png_href) {
  ds.validate();
  if (ds.kind != data::Kind::scan2d) throw RenderError("heatmaps need a scan2d dataset");
  const auto& xa = ds.axes[0].values;
  const auto& ya = ds.axes[1].values;
  const double dx = xa.size() > 1 ? xa[1] - xa[0] : 1.0, dy = ya.size() > 1 ? ya[1] - ya[0] : 1.0;
  const Frame f{xa.front() - dx / 2, xa.back() + dx / 2, ya.front() - dy / 2, ya.back() + dy / 2};
  std::ostringstream o;
  o << svg_open(kWidth, kHeight);
  o << "<text x='" << kLeft << "' y='28' font-size='16' font-weight='bold'>confocal scan"
    << (ds.aborted ? " (aborted)" : "") << "</text>\n";
  o << "<image x='" << kLeft << "' y='" << kTop << "' width='" << kWidth - kLeft - kRight << "' height='"
    << kHeight - kTop - kBottom << "' preserveAspectRatio='none' style='image-rendering:pixelated' xlink:href='"
    << esc(png_href) << "'/>\n";
  axes(o, f, {1.0, "um"}, "x (µm)", "y (µm)");
  double lo = INFINITY, hi = -INFINITY;
  for (double c : ds.channel("counts").values)
    if (std::isfinite(c)) lo = std::min(lo, c), hi = std::max(hi, c);
  const double bx = kWidth - kRight + 20, bh = kHeight - kTop - kBottom;
  for (int k = 0; k < 64; ++k) {
    const auto c = colour(1.0 - k / 63.0);
    o << "<rect x='" << bx << "' y='" << kTop + bh * k / 64 << "' width='14' height='" << bh / 64 + 0.5
      << "' fill='rgb(" << int(c[0]) << "," << int(c[1]) << "," << int(c[2]) << ")'/>\n";
  }
  o << "<text x='" << bx + 20 << "' y='" << kTop + 10 << "'>" << fmt(hi) << " counts</text>\n";
  o << "<text x='" << bx + 20 << "' y='" << kTop + bh << "'>" << fmt(lo) << "</text>\n";
  double ty = kTop + bh / 2;
  for (const auto& fit : ds.fits) {
    if (fit.model != analysis::ModelKind::gaussian_2d) continue;
    o << "<circle cx='" << f.px(fit.value("x0")) << "' cy='" << f.py(fit.value("y0")) << "' r='"
      << 2.0 * fit.value("sigma") / (f.x1 - f.x0) * (kWidth - kLeft - kRight)
      << "' fill='none' stroke='cyan' stroke-dasharray='4,3'/>\n";
    for (const std::string& line : {"x0 = " + with_error(fit.value("x0"), fit.sigma("x0"), "") + " µm",
                                    "y0 = " + with_error(fit.value("y0"), fit.sigma("y0"), "") + " µm",
                                    "σ = " + with_error(1e3 * fit.value("sigma"), 1e3 * fit.sigma("sigma"), "") + " nm"}) {
      o << "<text x='" << bx + 20 << "' y='" << ty << "'>" << esc(line) << "</text>\n";
      ty += 16;
    }
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<std::filesystem::path> render_dataset(const data::Dataset& ds, const std::filesystem::path& base) {
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw RenderError("cannot write " + p.string());
  };
  std::filesystem::path stem = base;
  stem.replace_extension();
  if (ds.kind == data::Kind::scan2d) {
    auto png = stem;
    png += ".png";
    auto svg = stem;
    svg += ".svg";
    heatmap_png(ds, png);
    write(svg, heatmap_svg(ds, png.filename().string()));
    return {png, svg};
  }
  auto svg = stem;
  svg += ".svg";
  write(svg, plot_svg(ds));
  return {svg};
}

}  // namespace nvtwin::render
