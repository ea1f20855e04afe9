#include "cmri/report.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <tuple>

#include "cmri/error.hpp"
#include "cmri/metrics.hpp"

namespace cmri {

std::string format_results_tsv(const std::vector<AurocRow>& rows) {
  std::ostringstream os;
  os << "experiment\tfraction\tcondition\tseed\tsplit\tauroc\n";
  for (const auto& r : rows) {
    os << r.experiment << '\t';
    if (std::isnan(r.fraction)) {
      os << "NA";
    } else {
      os << std::fixed << std::setprecision(2) << r.fraction;
    }
    os << '\t' << r.condition << '\t' << r.seed << '\t' << r.split << '\t' << std::setprecision(8) << r.auroc << '\n';
    os.unsetf(std::ios::floatfield);
  }
  return os.str();
}

std::vector<AurocRow> parse_results_tsv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<AurocRow> rows;
  bool header = true;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, '\t')) f.push_back(cell);
    if (f.size() != 6) throw ValidationError("results table line " + std::to_string(line_no) + ": expected 6 columns");
    try {
      AurocRow r;
      r.experiment = f[0];
      r.fraction = f[1] == "NA" ? std::nan("") : std::stod(f[1]);
      r.condition = f[2];
      r.seed = std::stoull(f[3]);
      r.split = f[4];
      r.auroc = std::stod(f[5]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ValidationError("results table line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

std::vector<AurocRow> unique_rows(const std::vector<AurocRow>& rows) {
  std::set<std::tuple<std::string, long, std::string, std::uint64_t, std::string>> seen;
  std::vector<AurocRow> out;
  for (const auto& r : rows) {
    const long f = std::isnan(r.fraction) ? -1 : std::lround(r.fraction * 1000);
    if (seen.insert({r.experiment, f, r.condition, r.seed, r.split}).second) out.push_back(r);
  }
  return out;
}

std::map<std::string, std::vector<CurvePoint>> curves(const std::vector<AurocRow>& rows, const std::string& experiment,
                                                      const std::string& split) {
  std::map<std::string, std::map<long, std::vector<double>>> grouped;
  for (const auto& r : rows) {
    if (r.experiment != experiment || r.split != split || std::isnan(r.fraction)) continue;
    grouped[r.condition][std::lround(r.fraction * 1000)].push_back(r.auroc);
  }
  std::map<std::string, std::vector<CurvePoint>> out;
  for (const auto& [cond, by_f] : grouped) {
    for (const auto& [f, values] : by_f) {
      const MeanStd ms = mean_std(values);
      out[cond].push_back({static_cast<double>(f) / 1000.0, ms.mean, ms.std, ms.count});
    }
  }
  return out;
}

namespace {

const char* colour(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  return palette[i % 5];
}

std::string num(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

}  // namespace

std::string render_curve_svg(const std::vector<AurocRow>& rows, const std::string& experiment,
                             const std::string& split, const std::string& x_label) {
  const auto lines = curves(rows, experiment, split);
  std::vector<double> baseline;
  for (const auto& r : rows) {
    if (r.experiment == "baseline" && r.split == split) baseline.push_back(r.auroc);
  }

  double lo = 1.0, hi = 0.0;
  for (const auto& [c, pts] : lines) {
    for (const auto& p : pts) {
      lo = std::min(lo, p.mean - p.std);
      hi = std::max(hi, p.mean + p.std);
    }
  }
  const MeanStd base = baseline.empty() ? MeanStd{} : mean_std(baseline);
  if (!baseline.empty()) {
    lo = std::min(lo, base.mean);
    hi = std::max(hi, base.mean);
  }
  if (lo > hi) {
    lo = 0.4;
    hi = 1.0;
  }
  lo = std::max(0.0, std::floor((lo - 0.02) * 20.0) / 20.0);
  hi = std::min(1.0, std::ceil((hi + 0.02) * 20.0) / 20.0);
  if (hi - lo < 0.1) hi = std::min(1.0, lo + 0.1);

  const double W = 640, H = 420, left = 70, right = 170, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  auto X = [&](double f) { return left + f * pw; };
  auto Y = [&](double a) { return top + (hi - a) / (hi - lo) * ph; };

  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << experiment << " ("
    << split << ")</text>\n";
  s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 10; ++i) {
    const double f = i / 10.0;
    s << "<line x1=\"" << X(f) << "\" y1=\"" << top + ph << "\" x2=\"" << X(f) << "\" y2=\"" << top + ph + 5
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << X(f) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << i * 10 << "</text>\n";
  }
  for (double a = lo; a <= hi + 1e-9; a += 0.05) {
    s << "<line x1=\"" << left - 5 << "\" y1=\"" << Y(a) << "\" x2=\"" << left + pw << "\" y2=\"" << Y(a)
      << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << left - 8 << "\" y=\"" << Y(a) + 4 << "\" text-anchor=\"end\">" << num(a) << "</text>\n";
  }
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << x_label << " (%)</text>\n";
  s << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">AUROC</text>\n";

  double legend_y = top + 10;
  auto legend = [&](const std::string& label, const char* c, bool dashed) {
    s << "<line x1=\"" << W - right + 15 << "\" y1=\"" << legend_y << "\" x2=\"" << W - right + 45 << "\" y2=\""
      << legend_y << "\" stroke=\"" << c << "\" stroke-width=\"2\"" << (dashed ? " stroke-dasharray=\"6,4\"" : "")
      << "/>\n";
    s << "<text x=\"" << W - right + 52 << "\" y=\"" << legend_y + 4 << "\">" << label << "</text>\n";
    legend_y += 20;
  };

  if (!baseline.empty()) {
    s << "<line x1=\"" << left << "\" y1=\"" << Y(base.mean) << "\" x2=\"" << left + pw << "\" y2=\"" << Y(base.mean)
      << "\" stroke=\"black\" stroke-width=\"1.5\" stroke-dasharray=\"6,4\"/>\n";
    legend("baseline " + num(base.mean), "black", true);
  }
  std::size_t k = 0;
  for (const auto& [cond, pts] : lines) {
    const char* c = colour(k++);
    std::ostringstream band, line;
    band << std::fixed << std::setprecision(2);
    line << std::fixed << std::setprecision(2);
    for (const auto& p : pts) band << X(p.fraction) << "," << Y(p.mean + p.std) << " ";
    for (auto it = pts.rbegin(); it != pts.rend(); ++it) band << X(it->fraction) << "," << Y(it->mean - it->std) << " ";
    for (const auto& p : pts) line << X(p.fraction) << "," << Y(p.mean) << " ";
    s << "<polygon points=\"" << band.str() << "\" fill=\"" << c << "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
    s << "<polyline points=\"" << line.str() << "\" fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    for (const auto& p : pts) {
      s << "<circle cx=\"" << X(p.fraction) << "\" cy=\"" << Y(p.mean) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    }
    legend(cond, c, false);
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace cmri
