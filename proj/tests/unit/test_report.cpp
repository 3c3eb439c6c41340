#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <filesystem>
#include <sstream>

#include "cmadp/array_io.hpp"
#include "cmadp/report.hpp"

using namespace cmadp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("cmadp_report_" + name);
  fs::remove_all(p);
  return p;
}

boost::property_tree::ptree parse_xml(const std::string& text) {
  std::istringstream in(text);
  boost::property_tree::ptree t;
  boost::property_tree::read_xml(in, t);
  return t;
}

void fake_run(const fs::path& dir, const std::string& mode, double first, double last, const json& extra = json::object()) {
  fs::create_directories(dir);
  write_text(dir / "metrics.csv", "step,split,loss\n0,val," + fmt6(first) + "\n10,train,0.5\n10,val," + fmt6(last) + "\n");
  json fv = {{"mode", mode}, {"steps", 10}, {"val", last}};
  fv.update(extra);
  write_text(dir / "final_val.json", fv.dump());
}

}  // namespace

TEST(Svg, PlotsAreWellFormedXml) {
  const std::vector<Series> s = {{"a & <b>", {0, 1, 2}, {1.0, 0.5, 0.25}}, {"c", {0, 2}, {2.0, 0.1}}};
  const auto line = parse_xml(svg_line_plot("loss \"quoted\"", "step", "loss", s, true));
  EXPECT_EQ(line.count("svg"), 1u);
  MatD v = MatD::Random(4, 30).cwiseAbs();
  const std::vector<std::string> rows = {"img3", "imgg", "state", "tactile"};
  std::vector<int> strip(30);
  for (int i = 0; i < 30; ++i) strip[static_cast<std::size_t>(i)] = i / 5;
  EXPECT_EQ(parse_xml(svg_heatmap("attention", v, rows, strip)).count("svg"), 1u);
  const MatD xy = MatD::Random(12, 2);
  std::vector<int> cat(12);
  for (int i = 0; i < 12; ++i) cat[static_cast<std::size_t>(i)] = i % 3;
  const std::vector<std::string> names = {"x<y", "b", "c"};
  EXPECT_EQ(parse_xml(svg_scatter("scatter", xy, cat, names)).count("svg"), 1u);
}

TEST(Svg, OutputIsDeterministic) {
  const std::vector<Series> s = {{"a", {0, 1}, {0.123456789, 1e-7}}};
  EXPECT_EQ(svg_line_plot("t", "x", "y", s, false), svg_line_plot("t", "x", "y", s, false));
}

TEST(Fmt6, SixSignificantDigits) {
  EXPECT_EQ(fmt6(0.0), "0");
  EXPECT_EQ(fmt6(0.123456789), "0.123457");
  EXPECT_EQ(fmt6(1234567.0), "1.23457e+06");
  EXPECT_EQ(fmt6(-2.5), "-2.5");
}

TEST(AllocationStats, TactileGapAndSeparatedPairs) {
  std::vector<int> labels;
  std::vector<std::array<double, 4>> alloc;
  for (int l = 0; l < 6; ++l)
    for (int i = 0; i < 3; ++i) {
      labels.push_back(l);
      const double t = l >= 4 ? 0.5 : 0.25;
      alloc.push_back({0.25 + 0.01 * l, 0.25, 0.5 - t - 0.01 * l, t});
    }
  const auto s = allocation_stats(labels, alloc);
  EXPECT_NEAR(s.tactile_contact, 0.5, 1e-15);
  EXPECT_NEAR(s.tactile_reach, 0.25, 1e-15);
  ASSERT_EQ(s.pair_l1.size(), 15u);
  // Pairs across {0..3} x {4,5} differ by >= 0.5; pairs within groups by 0.02 per label step.
  int expected = 0;
  for (int a = 0; a < 6; ++a)
    for (int b = a + 1; b < 6; ++b) {
      const double l1 = (a >= 4) != (b >= 4) ? 0.5 + 0.02 * (b - a) : 0.02 * (b - a);
      expected += l1 > 0.1 ? 1 : 0;
    }
  EXPECT_EQ(s.separated_pairs, expected);
}

TEST(BuildReport, MissingRunDirectoryIsDataError) {
  const std::vector<fs::path> runs = {scratch("nowhere")};
  EXPECT_THROW(build_report(runs, scratch("out_missing")), DataError);
}

TEST(BuildReport, SevenRunsGiveSixRowBudgetTable) {
  const fs::path root = scratch("seven");
  std::vector<fs::path> runs = {root / "whole"};
  fake_run(runs[0], "whole", 1.0, 0.2, {{"per_primitive", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}}});
  for (int p = 0; p < kNumPrimitives; ++p) {
    runs.push_back(root / ("p" + std::to_string(p)));
    fake_run(runs.back(), "primitive:" + std::string(primitive_name(p)), 1.0, p < 4 ? 0.05 : 0.9);
  }
  const fs::path out = root / "report";
  const json r = build_report(runs, out);
  ASSERT_EQ(r["budget"].size(), 6u);
  EXPECT_EQ(r["budget"][0]["winner"], "primitive");
  EXPECT_EQ(r["budget"][5]["winner"], "whole");
  EXPECT_TRUE(fs::exists(out / "budget.json"));
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  EXPECT_NO_THROW(parse_xml(read_text(out / "val_loss.svg")));
  bool saw_a = false, saw_b = false;
  for (const auto& e : r["summary"]) {
    if (e["experiment"] == "A") {
      saw_a = true;
      EXPECT_NEAR(e["value"].get<double>(), 5.0, 1e-9);
      EXPECT_TRUE(e["pass"].get<bool>());
    }
    if (e["experiment"] == "B") {
      saw_b = true;
      EXPECT_EQ(e["value"].get<double>(), 4.0);
      EXPECT_TRUE(e["pass"].get<bool>());
    }
  }
  EXPECT_TRUE(saw_a);
  EXPECT_TRUE(saw_b);
  EXPECT_EQ(build_report(runs, out).dump(), r.dump());
}
