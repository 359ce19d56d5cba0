#pragma once

// Publication-style figures from datasets: SVG line plots with the fitted
// curve and parameter annotations, PNG heatmaps for confocal scans.

#include "nvtwin/dataset.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvtwin::render {

class RenderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One-axis datasets (spectrum, sweep, time trace, histogram).
std::string plot_svg(const data::Dataset& ds);

/// 8-bit RGB heatmap of a scan2d channel, one pixel per sample, y up.
void heatmap_png(const data::Dataset& ds, const std::filesystem::path& path, const std::string& channel = "counts");

/// SVG wrapper around a heatmap PNG with axes, colour bar and the spot fit.
std::string heatmap_svg(const data::Dataset& ds, const std::string& png_href);

/// Writes the figure(s) for `ds` next to `base` (extension replaced) and
/// returns the files written.
std::vector<std::filesystem::path> render_dataset(const data::Dataset& ds, const std::filesystem::path& base);

}  // namespace nvtwin::render
