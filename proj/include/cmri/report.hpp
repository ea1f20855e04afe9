#pragma once

#include <map>
#include <string>
#include <vector>

#include "cmri/archive.hpp"
#include "cmri/evalharness.hpp"

namespace cmri {

// Tab-separated: experiment, fraction, condition, seed, split, auroc.
// A NaN fraction is written as NA.
std::string format_results_tsv(const std::vector<AurocRow>& rows);
std::vector<AurocRow> parse_results_tsv(const std::string& text);

// Drops repeated (experiment, fraction, condition, seed, split) rows, keeping the first.
std::vector<AurocRow> unique_rows(const std::vector<AurocRow>& rows);

struct CurvePoint {
  double fraction = 0.0;
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

// Mean and std over seeds per fraction, keyed by condition, fractions ascending.
std::map<std::string, std::vector<CurvePoint>> curves(const std::vector<AurocRow>& rows,
                                                      const std::string& experiment, const std::string& split);

/// Line plot of AUROC against fraction: one line per condition with a
/// mean +- std band, plus the baseline as a dashed horizontal line.
std::string render_curve_svg(const std::vector<AurocRow>& rows, const std::string& experiment,
                             const std::string& split, const std::string& x_label);

}  // namespace cmri
