#include "retro/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace retro::plots {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 60;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const BarChart& chart) {
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  double lo = 0, hi = 0;
  bool any = false;
  double min_pos = 0;
  for (const auto& s : chart.series) {
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      if (v > 0 && (!any || v < min_pos)) min_pos = v;
      if (v > 0) any = true;
    }
  }
  // log axis: decades spanning the positive values; non-positive bars are skipped
  const bool log_y = chart.log_y && any;
  double y0 = lo, y1 = hi;
  if (log_y) {
    y0 = std::floor(std::log10(min_pos));
    y1 = std::ceil(std::log10(std::max(hi, min_pos)));
    if (y1 <= y0) y1 = y0 + 1;
  } else if (y1 - y0 <= 0) {
    y1 = y0 + 1;
  }
  const auto ypix = [&](double v) {
    const double t = log_y ? (std::log10(v) - y0) / (y1 - y0) : (v - y0) / (y1 - y0);
    return kTop + plot_h * (1 - t);
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << escape(chart.title) << "</text>\n";

  // y ticks
  const int ticks = log_y ? int(y1 - y0) : 5;
  for (int t = 0; t <= ticks; ++t) {
    const double v = log_y ? std::pow(10.0, y0 + t) : y0 + (y1 - y0) * t / ticks;
    const double y = ypix(v);
    o << "<line x1=\"" << kLeft << "\" x2=\"" << kWidth - kRight << "\" y1=\"" << y << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << num(v)
      << "</text>\n";
  }
  if (!log_y && y0 < 0 && y1 > 0) {
    o << "<line x1=\"" << kLeft << "\" x2=\"" << kWidth - kRight << "\" y1=\"" << ypix(0) << "\" y2=\""
      << ypix(0) << "\" stroke=\"#444\"/>\n";
  }

  const std::size_t nx = std::max<std::size_t>(chart.x.size(), 1);
  const double slot = plot_w / double(nx);
  const double bar = slot * 0.8 / double(std::max<std::size_t>(chart.series.size(), 1));
  const double base = log_y ? kTop + plot_h : ypix(std::clamp(0.0, y0, y1));
  const std::size_t label_every = std::max<std::size_t>(1, nx / 20);
  for (std::size_t i = 0; i < chart.x.size(); ++i) {
    const double x0 = kLeft + slot * double(i) + slot * 0.1;
    for (std::size_t s = 0; s < chart.series.size(); ++s) {
      const double v = i < chart.series[s].values.size() ? chart.series[s].values[i] : NAN;
      if (!std::isfinite(v) || (log_y && v <= 0)) continue;
      const double y = ypix(v);
      o << "<rect x=\"" << x0 + bar * double(s) << "\" y=\"" << std::min(y, base) << "\" width=\""
        << bar << "\" height=\"" << std::abs(base - y) << "\" fill=\"" << chart.series[s].color
        << "\"/>\n";
    }
    if (i % label_every == 0) {
      o << "<text x=\"" << x0 + slot * 0.4 << "\" y=\"" << kTop + plot_h + 16
        << "\" text-anchor=\"middle\">" << escape(chart.x[i]) << "</text>\n";
    }
  }
  o << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 16 << "\" text-anchor=\"middle\">"
    << escape(chart.x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << kTop + plot_h / 2
    << ") rotate(-90)\" text-anchor=\"middle\">" << escape(chart.y_label)
    << (log_y ? " (log)" : "") << "</text>\n";
  double ly = kTop + 4;
  for (const auto& s : chart.series) {
    o << "<rect x=\"" << kWidth - kRight - 150 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\""
      << s.color << "\"/>\n";
    o << "<text x=\"" << kWidth - kRight - 135 << "\" y=\"" << ly + 9 << "\">" << escape(s.label)
      << "</text>\n";
    ly += 16;
  }
  o << "</svg>\n";
  return o.str();
}

void write_analysis_plots(const std::filesystem::path& dir, std::span<const eval::BucketRow> rows,
                          bool log_y) {
  std::filesystem::create_directories(dir);
  const auto save = [&](const char* name, const BarChart& c) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << render_svg(c);
  };
  std::vector<std::string> xs;
  Series mean{"mean loss (retrieval on)", "#3b6ea5", {}};
  Series pos{"sum of positive deltas", "#4c9a4c", {}};
  Series neg{"sum of negative deltas", "#c44e4e", {}};
  Series total{"total delta", "#555555", {}};
  Series count{"tokens", "#3b6ea5", {}};
  for (const auto& r : rows) {
    xs.push_back(std::to_string(r.n));
    mean.values.push_back(r.mean_loss_on);
    pos.values.push_back(r.delta.positive);
    neg.values.push_back(r.delta.negative);
    total.values.push_back(r.delta.total);
    count.values.push_back(double(r.count));
  }
  save("loss_by_bucket.svg", {"Mean loss per overlap bucket", "overlap n", "loss (nats)", xs, {mean}, log_y});
  // Negative sums cannot be drawn on a log axis; the linear chart always shows them.
  save("delta_by_bucket.svg",
       {"Loss difference (off - on) per overlap bucket", "overlap n", "summed delta (nats)", xs,
        {pos, neg, total}, false});
  save("bucket_hist.svg", {"Tokens per overlap bucket", "overlap n", "count", xs, {count}, log_y});
}

}  // namespace retro::plots
