#include "cmadp/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "cmadp/array_io.hpp"
#include "cmadp/trainer.hpp"

namespace cmadp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;

const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string color(int i) { return kPalette[((i % 10) + 10) % 10]; }

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string header(int w, int h, const std::string& title) {
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n"
    << "<rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n"
    << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
    << escape(title) << "</text>\n";
  return o.str();
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  }
};

std::string text(double x, double y, const std::string& s, const char* anchor = "middle", int size = 12) {
  return "<text x=\"" + fmt6(x) + "\" y=\"" + fmt6(y) + "\" text-anchor=\"" + anchor +
         "\" font-family=\"sans-serif\" font-size=\"" + std::to_string(size) + "\">" + escape(s) + "</text>\n";
}

std::string axes(const Range& xr, const Range& yr, const std::string& xlabel, const std::string& ylabel,
                 bool log_y) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  std::string o = "<g stroke=\"black\" stroke-width=\"1\" fill=\"none\">\n<line x1=\"" + fmt6(x0) + "\" y1=\"" +
                  fmt6(y0) + "\" x2=\"" + fmt6(x1) + "\" y2=\"" + fmt6(y0) + "\"/>\n<line x1=\"" + fmt6(x0) +
                  "\" y1=\"" + fmt6(y0) + "\" x2=\"" + fmt6(x0) + "\" y2=\"" + fmt6(y1) + "\"/>\n</g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    const double xv = xr.lo + f * (xr.hi - xr.lo);
    double yv = yr.lo + f * (yr.hi - yr.lo);
    if (log_y) yv = std::pow(10.0, yv);
    o += text(x0 + f * (x1 - x0), y0 + 16, fmt6(xv));
    o += text(x0 - 6, y0 - f * (y0 - y1) + 4, fmt6(yv), "end", 10);
  }
  o += text((x0 + x1) / 2, kHeight - 12, xlabel);
  o += "<text x=\"16\" y=\"" + fmt6((y0 + y1) / 2) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
       fmt6((y0 + y1) / 2) + ")\">" + escape(ylabel) + "</text>\n";
  return o;
}

double px(const Range& r, double v) { return kLeft + (v - r.lo) / (r.hi - r.lo) * (kWidth - kRight - kLeft); }
double py(const Range& r, double v) {
  return (kHeight - kBottom) - (v - r.lo) / (r.hi - r.lo) * (kHeight - kBottom - kTop);
}

std::string legend(std::span<const std::string> names) {
  std::string o;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = kTop + 16.0 * static_cast<double>(i);
    o += "<rect x=\"" + fmt6(kWidth - kRight + 10) + "\" y=\"" + fmt6(y) + "\" width=\"10\" height=\"10\" fill=\"" +
         color(static_cast<int>(i)) + "\"/>\n";
    o += text(kWidth - kRight + 24, y + 9, names[i], "start", 11);
  }
  return o;
}

// Viridis-like ramp from dark blue to yellow.
std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(68 + t * (253 - 68)));
  const int g = static_cast<int>(std::lround(1 + t * (231 - 1)));
  const int b = static_cast<int>(std::lround(84 + t * (37 - 84)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in '" + p.string() + "': " + e.what());
  }
}

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  int index(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    return it == columns.end() ? -1 : static_cast<int>(it - columns.begin());
  }
};

CsvTable read_csv(const fs::path& p) {
  CsvTable t;
  std::istringstream in(read_text(p));
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV '" + p.string() + "'");
  {
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) t.columns.push_back(cell);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError("non-numeric cell '" + cell + "' in '" + p.string() + "'");
      }
    }
    if (row.size() != t.columns.size()) throw DataError("ragged row in '" + p.string() + "'");
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::vector<std::string> primitive_names() {
  std::vector<std::string> names;
  for (int p = 0; p < kNumPrimitives; ++p) names.emplace_back(primitive_name(p));
  return names;
}

}  // namespace

std::string fmt6(double v) {
  if (v == 0.0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string svg_line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                          std::span<const Series> series, bool log_y) {
  auto tr = [&](double v) { return log_y ? (v > 0 ? std::log10(v) : NAN) : v; };
  Range xr, yr;
  for (const auto& s : series) {
    for (double x : s.x) xr.add(x);
    for (double y : s.y) yr.add(tr(y));
  }
  xr.finish();
  yr.finish();
  std::string o = header(kWidth, kHeight, title) + axes(xr, yr, xlabel, ylabel, log_y);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    names.push_back(s.name);
    std::string pts;
    for (std::size_t j = 0; j < std::min(s.x.size(), s.y.size()); ++j) {
      const double y = tr(s.y[j]);
      if (!std::isfinite(y) || !std::isfinite(s.x[j])) continue;
      if (!pts.empty()) pts += ' ';
      pts += fmt6(px(xr, s.x[j])) + "," + fmt6(py(yr, y));
    }
    o += "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" + color(static_cast<int>(i)) + "\" points=\"" +
         pts + "\"/>\n";
  }
  o += legend(names) + "</svg>\n";
  return o;
}

std::string svg_heatmap(const std::string& title, const MatD& values, std::span<const std::string> row_names,
                        std::span<const int> strip) {
  const int rows = static_cast<int>(values.rows());
  const int cols = static_cast<int>(values.cols());
  const double x0 = kLeft, x1 = kWidth - kRight;
  const double cell_h = 30.0;
  const double cw = cols > 0 ? (x1 - x0) / cols : 0.0;
  const int height = static_cast<int>(kTop + cell_h * (rows + 1) + 60);
  double lo = 0.0, hi = 1.0;
  if (values.size() > 0) {
    lo = values.minCoeff();
    hi = values.maxCoeff();
    if (hi - lo < 1e-12) hi = lo + 1.0;
  }
  std::string o = header(kWidth, height, title);
  for (int r = 0; r < rows; ++r) {
    const double y = kTop + r * cell_h;
    if (static_cast<std::size_t>(r) < row_names.size()) o += text(x0 - 6, y + cell_h / 2 + 4, row_names[r], "end", 11);
    for (int c = 0; c < cols; ++c)
      o += "<rect x=\"" + fmt6(x0 + c * cw) + "\" y=\"" + fmt6(y) + "\" width=\"" + fmt6(cw) + "\" height=\"" +
           fmt6(cell_h) + "\" fill=\"" + ramp((values(r, c) - lo) / (hi - lo)) + "\"/>\n";
  }
  if (!strip.empty()) {
    const double y = kTop + rows * cell_h + 6;
    o += text(x0 - 6, y + 14, "label", "end", 11);
    for (std::size_t c = 0; c < strip.size() && static_cast<int>(c) < cols; ++c)
      o += "<rect x=\"" + fmt6(x0 + static_cast<double>(c) * cw) + "\" y=\"" + fmt6(y) + "\" width=\"" + fmt6(cw) +
           "\" height=\"" + fmt6(cell_h - 6) + "\" fill=\"" + color(strip[c]) + "\"/>\n";
  }
  const double ly = kTop + (rows + 1) * cell_h + 20;
  o += text(x0, ly, "min " + fmt6(lo), "start", 11);
  o += text(x1, ly, "max " + fmt6(hi), "end", 11);
  o += text((x0 + x1) / 2, ly + 20, "frame");
  o += "</svg>\n";
  return o;
}

std::string svg_scatter(const std::string& title, const MatD& xy, std::span<const int> category,
                        std::span<const std::string> category_names) {
  if (xy.cols() != 2) throw ShapeError("svg_scatter expects an M x 2 matrix");
  if (static_cast<Eigen::Index>(category.size()) != xy.rows())
    throw ShapeError("svg_scatter: category count differs from point count");
  Range xr, yr;
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    xr.add(xy(i, 0));
    yr.add(xy(i, 1));
  }
  xr.finish();
  yr.finish();
  std::string o = header(kWidth, kHeight, title) + axes(xr, yr, "dim 1", "dim 2", false);
  for (Eigen::Index i = 0; i < xy.rows(); ++i)
    o += "<circle cx=\"" + fmt6(px(xr, xy(i, 0))) + "\" cy=\"" + fmt6(py(yr, xy(i, 1))) + "\" r=\"2.5\" fill=\"" +
         color(category[static_cast<std::size_t>(i)]) + "\"/>\n";
  o += legend(category_names) + "</svg>\n";
  return o;
}

json summary_json(std::span<const SummaryEntry> entries) {
  json arr = json::array();
  for (const auto& e : entries)
    arr.push_back({{"experiment", e.experiment},
                   {"metric", e.metric},
                   {"value", e.value},
                   {"threshold", e.threshold},
                   {"pass", e.pass}});
  return arr;
}

AllocationStats allocation_stats(std::span<const int> labels,
                                 std::span<const std::array<double, kNumModalities>> alloc, double l1_threshold) {
  if (labels.size() != alloc.size()) throw ShapeError("allocation_stats: label/allocation length mismatch");
  AllocationStats s;
  std::array<int, kNumPrimitives> counts{};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l < 0 || l >= kNumPrimitives) throw DataError("allocation_stats: label out of range");
    ++counts[l];
    for (int m = 0; m < kNumModalities; ++m) s.mean[l][m] += alloc[i][m];
  }
  for (int p = 0; p < kNumPrimitives; ++p)
    for (int m = 0; m < kNumModalities; ++m)
      s.mean[p][m] = counts[p] > 0 ? s.mean[p][m] / counts[p] : std::numeric_limits<double>::quiet_NaN();

  constexpr int kTactile = 3;
  auto pooled = [&](std::initializer_list<int> ps) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (std::find(ps.begin(), ps.end(), labels[i]) != ps.end()) {
        sum += alloc[i][kTactile];
        ++n;
      }
    return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
  };
  s.tactile_contact = pooled({4, 5});
  s.tactile_reach = pooled({0, 2});

  for (int a = 0; a < kNumPrimitives; ++a)
    for (int b = a + 1; b < kNumPrimitives; ++b) {
      double d = 0.0;
      for (int m = 0; m < kNumModalities; ++m) d += std::abs(s.mean[a][m] - s.mean[b][m]);
      s.pair_l1.push_back(d);
      if (d > l1_threshold) ++s.separated_pairs;
    }
  return s;
}

json build_report(std::span<const fs::path> runs, const fs::path& out) {
  for (const auto& r : runs)
    if (!fs::is_directory(r)) throw DataError("run directory '" + r.string() + "' does not exist");
  fs::create_directories(out);

  std::vector<SummaryEntry> summary;
  std::vector<Series> curves;
  std::optional<json> whole_final;
  std::array<std::optional<double>, kNumPrimitives> prim_final;
  int fig_index = 0;

  for (const auto& dir : runs) {
    if (fs::exists(dir / "metrics.csv")) {
      const auto log = MetricsLog::from_csv(read_text(dir / "metrics.csv"));
      Series s;
      s.name = dir.filename().string();
      for (const auto& row : log.split("val")) {
        s.x.push_back(static_cast<double>(row.step));
        s.y.push_back(row.loss);
      }
      if (fs::exists(dir / "final_val.json")) {
        const json fv = read_json(dir / "final_val.json");
        const std::string mode = fv.at("mode").get<std::string>();
        s.name = mode;
        if (mode == "whole") {
          whole_final = fv;
          const auto val = log.split("val");
          if (val.size() >= 2 && val.back().loss > 0) {
            const double ratio = val.front().loss / val.back().loss;
            summary.push_back({"A", "val_loss_reduction_ratio", ratio, 2.0, ratio >= 2.0});
          }
        } else {
          const int p = parse_mode(mode);
          prim_final[p] = fv.at("val").get<double>();
        }
      }
      curves.push_back(std::move(s));
    }

    if (fs::exists(dir / "features.csv")) {
      const CsvTable t = read_csv(dir / "features.csv");
      const int li = t.index("label");
      const int ti = t.index("traj");
      std::array<int, kNumModalities> ai{};
      const char* anames[] = {"alloc_img3", "alloc_imgg", "alloc_state", "alloc_tactile"};
      for (int m = 0; m < kNumModalities; ++m) ai[m] = t.index(anames[m]);
      if (li < 0 || std::any_of(ai.begin(), ai.end(), [](int i) { return i < 0; }))
        throw DataError("features.csv in '" + dir.string() + "' lacks label/allocation columns");
      std::vector<int> labels;
      std::vector<std::array<double, kNumModalities>> alloc;
      for (const auto& row : t.rows) {
        labels.push_back(static_cast<int>(row[li]));
        std::array<double, kNumModalities> a{};
        for (int m = 0; m < kNumModalities; ++m) a[m] = row[ai[m]];
        alloc.push_back(a);
      }
      const auto st = allocation_stats(labels, alloc);
      summary.push_back({"C", "tactile_alloc_contact_minus_reach", st.tactile_contact - st.tactile_reach, 0.0,
                         st.tactile_contact > st.tactile_reach});
      summary.push_back({"C", "primitive_pairs_alloc_l1_gt_0.1", static_cast<double>(st.separated_pairs), 3.0,
                         st.separated_pairs >= 3});

      // Heatmap of the first trajectory in the file.
      const int first_traj = ti >= 0 && !t.rows.empty() ? static_cast<int>(t.rows[0][ti]) : 0;
      std::vector<std::size_t> sel;
      for (std::size_t i = 0; i < t.rows.size(); ++i)
        if (ti < 0 || static_cast<int>(t.rows[i][ti]) == first_traj) sel.push_back(i);
      MatD hm(kNumModalities, static_cast<Eigen::Index>(sel.size()));
      std::vector<int> strip;
      for (std::size_t c = 0; c < sel.size(); ++c) {
        for (int m = 0; m < kNumModalities; ++m) hm(m, static_cast<Eigen::Index>(c)) = alloc[sel[c]][m];
        strip.push_back(labels[sel[c]]);
      }
      const std::vector<std::string> rows = {"img3", "imgg", "state", "tactile"};
      write_text(out / ("attention_heatmap_" + std::to_string(fig_index) + ".svg"),
                 svg_heatmap("Modality allocation over time (trajectory " + std::to_string(first_traj) + ")", hm,
                             rows, strip));
      json stats = {{"mean_allocation", st.mean}, {"pair_l1", st.pair_l1},
                    {"tactile_contact", st.tactile_contact}, {"tactile_reach", st.tactile_reach}};
      write_text(out / ("allocation_stats_" + std::to_string(fig_index) + ".json"), stats.dump(2) + "\n");
      ++fig_index;
    }

    if (fs::exists(dir / "segmentation.json")) {
      const json seg = read_json(dir / "segmentation.json");
      const json& m = seg.contains("mean_metrics") ? seg.at("mean_metrics") : seg.at("metrics");
      const double nmi_v = m.at("nmi").get<double>();
      const double acc = m.at("frame_accuracy").get<double>();
      summary.push_back({"D", "nmi", nmi_v, 0.5, nmi_v >= 0.5});
      summary.push_back({"D", "frame_accuracy", acc, 0.6, acc >= 0.6});
    }

    if (fs::exists(dir / "tsne.csv")) {
      const CsvTable t = read_csv(dir / "tsne.csv");
      const int xi = t.index("x"), yi = t.index("y"), gi = t.index("gt_label"), ci = t.index("cluster");
      if (xi < 0 || yi < 0 || gi < 0 || ci < 0) throw DataError("tsne.csv in '" + dir.string() + "' lacks columns");
      MatD xy(static_cast<Eigen::Index>(t.rows.size()), 2);
      std::vector<int> gt, cl;
      int kmax = 0;
      for (std::size_t i = 0; i < t.rows.size(); ++i) {
        xy(static_cast<Eigen::Index>(i), 0) = t.rows[i][xi];
        xy(static_cast<Eigen::Index>(i), 1) = t.rows[i][yi];
        gt.push_back(static_cast<int>(t.rows[i][gi]));
        cl.push_back(static_cast<int>(t.rows[i][ci]));
        kmax = std::max(kmax, cl.back() + 1);
      }
      const auto names = primitive_names();
      std::vector<std::string> cnames;
      for (int c = 0; c < kmax; ++c) cnames.push_back("cluster " + std::to_string(c));
      write_text(out / ("tsne_by_label_" + std::to_string(fig_index) + ".svg"),
                 svg_scatter("t-SNE of CMA embeddings, colored by primitive", xy, gt, names));
      write_text(out / ("tsne_by_cluster_" + std::to_string(fig_index) + ".svg"),
                 svg_scatter("t-SNE of CMA embeddings, colored by cluster", xy, cl, cnames));
      ++fig_index;
    }
  }

  if (!curves.empty())
    write_text(out / "val_loss.svg", svg_line_plot("Validation loss", "step", "loss", curves, true));

  json budget = nullptr;
  const bool all_prims = std::all_of(prim_final.begin(), prim_final.end(), [](const auto& v) { return v.has_value(); });
  if (whole_final && all_prims) {
    BudgetReport rep;
    const auto& per = whole_final->at("per_primitive");
    for (int p = 0; p < kNumPrimitives; ++p)
      rep.rows.push_back(make_budget_row(p, per.at(p).get<double>(), *prim_final[p]));
    budget = rep.to_json();
    write_text(out / "budget.json", budget.dump(2) + "\n");
    const int wins = rep.primitive_wins();
    summary.push_back({"B", "primitive_wins", static_cast<double>(wins), 4.0, wins >= 4});
  }

  json result = summary_json(summary);
  write_text(out / "summary.json", result.dump(2) + "\n");
  return {{"summary", result}, {"budget", budget}};
}

}  // namespace cmadp
