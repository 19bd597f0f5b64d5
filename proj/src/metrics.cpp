#include "taskdp/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace taskdp::metrics {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_double(const std::string& text, std::size_t line_no) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end == text.c_str() || *end != '\0') {
    throw std::runtime_error("metrics CSV line " + std::to_string(line_no) +
                             ": bad number '" + text + "'");
  }
  return v;
}

// Splits in first-appearance order, so plots and legends are stable.
std::vector<std::string> split_order(const History& history) {
  std::vector<std::string> order;
  for (const EvalPoint& p : history.points) {
    if (std::find(order.begin(), order.end(), p.split) == order.end()) {
      order.push_back(p.split);
    }
  }
  return order;
}

}  // namespace

// ───────────────────────────────────────────────────────────────────────────
// CSV
// ───────────────────────────────────────────────────────────────────────────

void write_csv(const History& history, const std::string& path) {
  if (history.points.empty()) {
    throw std::invalid_argument("metrics history is empty");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write metrics CSV: " + path);
  out << kCsvHeader << "\n";
  for (const EvalPoint& p : history.points) {
    out << p.step << ',' << p.split << ',' << fmt(p.success_rate) << ','
        << fmt(p.avg_success_steps) << ',' << fmt(p.estimator_loss) << ','
        << fmt(p.critic_loss) << ',' << fmt(p.cp_loss) << ','
        << fmt(p.reach_component) << ',' << fmt(p.articulation_component)
        << ',' << fmt(p.mpr_component) << "\n";
  }
  if (!out) throw std::runtime_error("failed while writing CSV: " + path);
}

History read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics CSV: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw std::runtime_error("metrics CSV header mismatch in " + path);
  }
  History history;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> f = split_fields(line);
    if (f.size() != 10) {
      throw std::runtime_error("metrics CSV line " + std::to_string(line_no) +
                               ": expected 10 fields, got " +
                               std::to_string(f.size()));
    }
    EvalPoint p;
    p.step = static_cast<std::uint64_t>(
        std::strtoull(f[0].c_str(), nullptr, 10));
    p.split = f[1];
    p.success_rate = parse_double(f[2], line_no);
    p.avg_success_steps = parse_double(f[3], line_no);
    p.estimator_loss = parse_double(f[4], line_no);
    p.critic_loss = parse_double(f[5], line_no);
    p.cp_loss = parse_double(f[6], line_no);
    p.reach_component = parse_double(f[7], line_no);
    p.articulation_component = parse_double(f[8], line_no);
    p.mpr_component = parse_double(f[9], line_no);
    history.points.push_back(std::move(p));
  }
  return history;
}

// ───────────────────────────────────────────────────────────────────────────
// Summary JSON
// ───────────────────────────────────────────────────────────────────────────

void write_summary_json(const History& history, const std::string& path) {
  if (history.points.empty()) {
    throw std::invalid_argument("metrics history is empty");
  }
  struct Digest {
    double last_sr = 0.0;
    double best_sr = 0.0;
    double last_steps = 0.0;
    std::size_t evals = 0;
  };
  std::map<std::string, Digest> by_split;
  std::uint64_t last_step = 0;
  for (const EvalPoint& p : history.points) {
    Digest& d = by_split[p.split];
    d.last_sr = p.success_rate;
    d.best_sr = std::max(d.best_sr, p.success_rate);
    d.last_steps = p.avg_success_steps;
    ++d.evals;
    last_step = std::max(last_step, p.step);
  }
  nlohmann::json j;
  j["last_step"] = last_step;
  j["points"] = history.points.size();
  for (const auto& [name, d] : by_split) {
    j["splits"][name] = {{"last_success_rate", d.last_sr},
                         {"best_success_rate", d.best_sr},
                         {"last_avg_success_steps", d.last_steps},
                         {"evals", d.evals}};
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write summary: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("failed while writing summary: " + path);
}

// ───────────────────────────────────────────────────────────────────────────
// SVG
// ───────────────────────────────────────────────────────────────────────────

namespace {

constexpr double kWidth = 860.0;
constexpr double kPlotHeight = 230.0;
constexpr double kMarginLeft = 70.0;
constexpr double kMarginRight = 30.0;
constexpr double kGap = 60.0;
constexpr double kTop = 40.0;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                          "#9467bd", "#ff7f0e", "#8c564b"};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> xy;
};

void emit_plot(std::ostream& out, const std::vector<Series>& series,
               double y0, const std::string& title, double lo, double hi,
               double max_x) {
  const double x0 = kMarginLeft;
  const double x1 = kWidth - kMarginRight;
  const double y1 = y0 + kPlotHeight;
  if (hi <= lo) hi = lo + 1.0;
  const auto sx = [&](double x) {
    return x0 + (max_x > 0.0 ? (x / max_x) : 0.0) * (x1 - x0);
  };
  const auto sy = [&](double y) {
    return y1 - (y - lo) / (hi - lo) * kPlotHeight;
  };
  out << "<text x=\"" << fmt2(x0) << "\" y=\"" << fmt2(y0 - 12.0)
      << "\" font-size=\"15\" font-family=\"sans-serif\">" << title
      << "</text>\n";
  out << "<rect x=\"" << fmt2(x0) << "\" y=\"" << fmt2(y0) << "\" width=\""
      << fmt2(x1 - x0) << "\" height=\"" << fmt2(kPlotHeight)
      << "\" fill=\"none\" stroke=\"#888888\"/>\n";
  out << "<text x=\"" << fmt2(x0 - 8.0) << "\" y=\"" << fmt2(y1)
      << "\" font-size=\"11\" text-anchor=\"end\" "
         "font-family=\"sans-serif\">"
      << fmt2(lo) << "</text>\n";
  out << "<text x=\"" << fmt2(x0 - 8.0) << "\" y=\"" << fmt2(y0 + 10.0)
      << "\" font-size=\"11\" text-anchor=\"end\" "
         "font-family=\"sans-serif\">"
      << fmt2(hi) << "</text>\n";
  out << "<text x=\"" << fmt2(x1) << "\" y=\"" << fmt2(y1 + 16.0)
      << "\" font-size=\"11\" text-anchor=\"end\" "
         "font-family=\"sans-serif\">"
      << fmt2(max_x) << " steps</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % (sizeof kPalette / sizeof *kPalette)];
    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[s].xy) {
      out << fmt2(sx(x)) << "," << fmt2(sy(std::clamp(y, lo, hi))) << " ";
    }
    out << "\"/>\n";
    out << "<text x=\"" << fmt2(x0 + 10.0 + 130.0 * static_cast<double>(s))
        << "\" y=\"" << fmt2(y1 + 16.0) << "\" font-size=\"11\" fill=\""
        << color << "\" font-family=\"sans-serif\">" << series[s].name
        << "</text>\n";
  }
}

}  // namespace

void write_svg(const History& history, const std::string& path) {
  if (history.points.empty()) {
    throw std::invalid_argument("metrics history is empty");
  }
  double max_x = 0.0;
  for (const EvalPoint& p : history.points) {
    max_x = std::max(max_x, static_cast<double>(p.step));
  }

  std::vector<Series> rate;
  for (const std::string& name : split_order(history)) {
    Series s{name, {}};
    for (const EvalPoint& p : history.points) {
      if (p.split == name) {
        s.xy.emplace_back(static_cast<double>(p.step), p.success_rate);
      }
    }
    rate.push_back(std::move(s));
  }

  // Reward components from the first split's points (one curve each).
  const std::string lead = history.points.front().split;
  Series reach{"reach", {}};
  Series artic{"articulation", {}};
  Series mpr{"contact prior", {}};
  double lo = 0.0;
  double hi = 0.0;
  for (const EvalPoint& p : history.points) {
    if (p.split != lead) continue;
    const double x = static_cast<double>(p.step);
    reach.xy.emplace_back(x, p.reach_component);
    artic.xy.emplace_back(x, p.articulation_component);
    mpr.xy.emplace_back(x, p.mpr_component);
    lo = std::min({lo, p.reach_component, p.articulation_component,
                   p.mpr_component});
    hi = std::max({hi, p.reach_component, p.articulation_component,
                   p.mpr_component});
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write SVG: " + path);
  const double total_height = kTop + 2.0 * kPlotHeight + kGap + 40.0;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt2(kWidth)
      << "\" height=\"" << fmt2(total_height) << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  emit_plot(out, rate, kTop, "success rate by split", 0.0, 1.0, max_x);
  emit_plot(out, {reach, artic, mpr}, kTop + kPlotHeight + kGap,
            "mean reward components (" + lead + ")", lo, hi, max_x);
  out << "</svg>\n";
  if (!out) throw std::runtime_error("failed while writing SVG: " + path);
}

void export_metrics(const History& history, const std::string& csv_path,
                    const std::string& summary_path,
                    const std::string& svg_path) {
  write_csv(history, csv_path);
  write_summary_json(history, summary_path);
  if (!svg_path.empty()) write_svg(history, svg_path);
}

}  // namespace taskdp::metrics
