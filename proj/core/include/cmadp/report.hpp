#pragma once

// Dependency-free SVG plots and the experiment summary assembled from run
// directories written by the command-line tool.

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmadp/common.hpp"
#include "cmadp/synthworld.hpp"

namespace cmadp {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

std::string svg_line_plot(const std::string& title, const std::string& xlabel,
                          const std::string& ylabel, std::span<const Series> series, bool log_y);

/// Rows are channels, columns are time; an optional categorical strip (one
/// id per column) is drawn underneath.
std::string svg_heatmap(const std::string& title, const MatD& values,
                        std::span<const std::string> row_names, std::span<const int> strip);

std::string svg_scatter(const std::string& title, const MatD& xy, std::span<const int> category,
                        std::span<const std::string> category_names);

/// Number formatting shared by all text outputs (6 significant digits).
std::string fmt6(double v);

struct SummaryEntry {
  std::string experiment;
  std::string metric;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

nlohmann::json summary_json(std::span<const SummaryEntry> entries);

/// Allocation-based statistics used for the attention experiment: tactile
/// allocation gap between contact-rich (Insert, Screw) and reaching
/// (ReachBase, ReachLeg) frames, and the number of primitive pairs whose
/// mean allocation vectors differ by more than `l1_threshold` in L1.
struct AllocationStats {
  std::array<std::array<double, kNumModalities>, kNumPrimitives> mean{};
  double tactile_contact = 0.0;
  double tactile_reach = 0.0;
  int separated_pairs = 0;
  std::vector<double> pair_l1;  // 15 entries, lexicographic pairs
};

AllocationStats allocation_stats(std::span<const int> labels,
                                 std::span<const std::array<double, kNumModalities>> alloc,
                                 double l1_threshold = 0.1);

/// Reads run directories, writes SVG figures plus `summary.json` (and
/// `budget.json` when a whole run and six primitive runs are present) into
/// `out`. Throws DataError for a missing run directory.
nlohmann::json build_report(std::span<const std::filesystem::path> runs, const std::filesystem::path& out);

}  // namespace cmadp
