#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "retro/evaluator.hpp"

namespace retro::plots {

struct Series {
  std::string label;
  std::string color;
  std::vector<double> values;  // one per x
};

struct BarChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::string> x;
  std::vector<Series> series;  // drawn side by side per x
  bool log_y = false;
};

std::string render_svg(const BarChart& chart);

/// loss_by_bucket.svg, delta_by_bucket.svg, bucket_hist.svg.
void write_analysis_plots(const std::filesystem::path& dir,
                          std::span<const eval::BucketRow> rows, bool log_y);

}  // namespace retro::plots
