// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// writes acceptance.json into the work directory.
//
//   cmadp_acceptance [--work DIR] [--cli PATH] [--unit PATH]

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cmadp/analysis.hpp"
#include "cmadp/array_io.hpp"
#include "cmadp/report.hpp"
#include "cmadp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmadp;

namespace {

// Pinned thresholds.
constexpr double kNumericSuiteSeconds = 120.0;
constexpr double kSamplerSeconds = 300.0;
constexpr double kSamplerLinf = 0.1;
constexpr int kSamplerSteps = 2000;
constexpr double kExpARatio = 2.0;
constexpr double kExpASeconds = 45.0 * 60.0;
constexpr std::int64_t kWholeSteps = 12000;
constexpr std::int64_t kPrimitiveSteps = 2000;
constexpr int kExpBWins = 4;
constexpr double kExpBSeconds = 2.0 * 3600.0;
constexpr double kAllocL1 = 0.1;
constexpr int kExpCPairs = 3;
constexpr double kExpCSeconds = 300.0;
constexpr double kExpDNmi = 0.5;
constexpr double kExpDAccuracy = 0.6;
constexpr double kExpDSeconds = 600.0;
constexpr double kOracleNmiBound = 0.05;
constexpr int kOracleNmiLength = 3000;
constexpr double kOracleSeconds = 300.0;

const char* const kNumericFilter =
    "Attend.*:Allocation.*:Cma.*:NoiseSchedule.*:QSample.*:CmaGradient.*:UNetGradient.*:LayerGradients.*:"
    "EncoderGradient.*:PolicyGradient.*";

struct Outcome {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

class Cli {
 public:
  Cli(std::string exe, fs::path work) : exe_(std::move(exe)), work_(std::move(work)) {}

  // Runs inside the work directory with relative paths so that reruns in a
  // sibling directory echo identical configs.
  void operator()(const std::string& args, const std::string& log) const {
    const std::string cmd =
        "cd " + quote(work_.string()) + " && " + quote(exe_) + " " + args + " > " + quote(log) + " 2>&1";
    const int rc = shell(cmd);
    if (rc != 0) throw std::runtime_error("cmadp " + args + " exited with " + std::to_string(rc));
  }

  const fs::path& work() const { return work_; }

 private:
  std::string exe_;
  fs::path work_;
};

const char* const kPrimitives[] = {"ReachBase", "GripMoveBase", "ReachLeg", "GripMoveLeg", "Insert", "Screw"};

// Experiments A to D on an existing dataset, default desk-scale config, seed 0.
void run_pipeline(const Cli& cli, const std::vector<int>& val_trajs, std::vector<double>* seconds) {
  auto timed = [&](const std::function<void()>& f) {
    const auto t0 = Clock::now();
    f();
    if (seconds) seconds->push_back(since(t0));
  };
  timed([&] {
    cli("train --data data --mode whole --steps " + std::to_string(kWholeSteps) + " --out expA", "expA.log");
  });
  timed([&] {
    for (const char* p : kPrimitives)
      cli("train --data data --mode primitive:" + std::string(p) + " --steps " + std::to_string(kPrimitiveSteps) +
              " --out expB_" + p,
          std::string("expB_") + p + ".log");
  });
  timed([&] {
    for (int t : val_trajs)
      cli("attn --ckpt expA/checkpoint --data data --traj " + std::to_string(t) + " --out expC_" + std::to_string(t),
          "expC_" + std::to_string(t) + ".log");
  });
  timed([&] { cli("segment --ckpt expA/checkpoint --data data --split val --out expD", "expD.log"); });
}

// ---------------------------------------------------------------------------

Outcome numeric_suite(const std::string& unit_exe, const fs::path& work) {
  Outcome o{1, "numeric correctness suite"};
  const auto t0 = Clock::now();
  const fs::path log = work / "numeric_suite.log";
  const int rc = shell(quote(unit_exe) + " --gtest_filter='" + kNumericFilter + "' > " + quote(log.string()) + " 2>&1");
  o.seconds = since(t0);
  const std::string text = slurp(log);
  const auto at = text.find("[  PASSED  ] ");
  const std::string passed = at == std::string::npos ? "0" : text.substr(at + 13, text.find(' ', at + 13) - at - 13);
  o.pass = rc == 0 && o.seconds < kNumericSuiteSeconds;
  o.detail = "exit " + std::to_string(rc) + ", " + passed + " tests passed, " + num(o.seconds) + " s (limit " +
             num(kNumericSuiteSeconds) + " s)";
  return o;
}

Outcome sampler_oracle() {
  Outcome o{2, "sampler oracle"};
  const auto t0 = Clock::now();
  GenConfig g;
  g.count = 2;
  g.val_count = 1;
  const Dataset ds = generate_dataset(g);
  const ModelConfig model;
  Policy policy(model, fit_normalizer(ds), 0);
  const int H = model.unet.horizon;
  const FrameTable table(ds, policy.encoders, policy.normalizer(), H);

  const TrainConfig tc;
  const std::vector<FrameRef> batch(static_cast<std::size_t>(tc.batch_size), FrameRef{0, 120});
  const EncoderInput<float> in = table.input(batch);
  const MatF x0 = table.targets(batch);
  const MatF target = x0.topRows(H);

  const auto params = policy.trainable_params();
  Adam opt(tc.lr);
  std::mt19937_64 rng(0);
  double loss = 0.0;
  for (int step = 0; step < kSamplerSteps; ++step) {
    const NoiseDraw draw = draw_noise(tc.batch_size, H, kActionDim, model.diffusion_steps, rng);
    nn::zero_grads(params);
    loss = policy.loss(in, x0, draw, true);
    clip_grad_norm(params, tc.grad_clip);
    opt.step(params);
  }
  const std::vector<FrameRef> one(1, FrameRef{0, 120});
  std::mt19937_64 srng(0);
  const MatF sample = policy.sample_chunk(table.input(one), srng);
  const double linf = (sample - target).cwiseAbs().maxCoeff();
  o.seconds = since(t0);
  o.pass = linf < kSamplerLinf && o.seconds < kSamplerSeconds;
  o.detail = "L_inf " + num(linf) + " (limit " + num(kSamplerLinf) + "), final train loss " + num(loss) + ", " +
             num(o.seconds) + " s (limit " + num(kSamplerSeconds) + " s)";
  return o;
}

Outcome analysis_oracles() {
  Outcome o{8, "analysis oracles"};
  const auto t0 = Clock::now();
  std::mt19937_64 rng(0);

  // match_labels against all 720 bijections.
  int agree = 0;
  constexpr int kTrials = 20;
  for (int trial = 0; trial < kTrials; ++trial) {
    std::vector<int> gt(240), pred(240);
    std::uniform_int_distribution<int> lab(0, 5);
    std::bernoulli_distribution flip(0.4);
    std::array<int, 6> perm{};
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = static_cast<int>(i / 40);
      pred[i] = flip(rng) ? lab(rng) : perm[static_cast<std::size_t>(gt[i])];
    }
    std::array<int, 6> p{};
    std::iota(p.begin(), p.end(), 0);
    int best = 0;
    do {
      int hits = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) hits += p[static_cast<std::size_t>(pred[i])] == gt[i] ? 1 : 0;
      best = std::max(best, hits);
    } while (std::next_permutation(p.begin(), p.end()));
    const double brute = static_cast<double>(best) / static_cast<double>(gt.size());
    agree += std::abs(match_labels(pred, gt, 6).accuracy - brute) < 1e-12 ? 1 : 0;
  }

  // NMI of independent labelings.
  double worst_nmi = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> lab(0, 5);
    std::vector<int> a(kOracleNmiLength), b(kOracleNmiLength);
    for (auto& v : a) v = lab(rng);
    for (auto& v : b) v = lab(rng);
    worst_nmi = std::max(worst_nmi, std::abs(nmi(a, b)));
  }

  // t-SNE on six separated clouds.
  MatD x(300, 10);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = n01(rng) + (j == i % 6 ? 8.0 : 0.0);
  const TsneResult ts = tsne(x, 30.0, 500, 0);
  const double kl0 = ts.kl_trace.front().second;

  o.seconds = since(t0);
  o.pass = agree == kTrials && worst_nmi < kOracleNmiBound && ts.kl_final < kl0 && o.seconds < kOracleSeconds;
  o.detail = "match_labels agrees with brute force " + std::to_string(agree) + "/" + std::to_string(kTrials) +
             ", max independent NMI " + num(worst_nmi) + " (limit " + num(kOracleNmiBound) + "), t-SNE KL " +
             num(kl0) + " -> " + num(ts.kl_final) + ", " + num(o.seconds) + " s";
  return o;
}

Outcome experiment_a(const fs::path& work, double seconds) {
  Outcome o{3, "experiment A: validation loss reduction"};
  const MetricsLog log = MetricsLog::from_csv(slurp(work / "expA" / "metrics.csv"));
  const auto val = log.split("val");
  const double first = val.front().loss, last = val.back().loss;
  const double ratio = first / last;
  o.seconds = seconds;
  o.pass = val.front().step == 0 && val.back().step == kWholeSteps && ratio >= kExpARatio && seconds <= kExpASeconds;
  o.detail = "val loss " + num(first) + " -> " + num(last) + ", ratio " + num(ratio) + " (need >= " + num(kExpARatio) +
             "), " + num(seconds) + " s";
  return o;
}

Outcome experiment_b(const fs::path& work, const fs::path& report, double seconds) {
  Outcome o{4, "experiment B: matched-budget primitive policies"};
  const json whole = read_json(work / "expA" / "final_val.json");
  check_matched_budget(kWholeSteps, kPrimitiveSteps);
  BudgetReport rep;
  std::string rows;
  for (int p = 0; p < kNumPrimitives; ++p) {
    const json fv = read_json(work / ("expB_" + std::string(kPrimitives[p])) / "final_val.json");
    rep.rows.push_back(
        make_budget_row(p, whole.at("per_primitive").at(static_cast<std::size_t>(p)).get<double>(), fv.at("val").get<double>()));
    const auto& r = rep.rows.back();
    rows += std::string(p ? "; " : "") + kPrimitives[p] + " " + num(r.primitive_val_loss) + " vs " +
            num(r.whole_val_loss);
  }
  write_text(report / "budget.json", rep.to_json().dump(2) + "\n");
  const int wins = rep.primitive_wins();
  o.seconds = seconds;
  o.pass = wins >= kExpBWins && seconds <= kExpBSeconds;
  o.detail = "primitive wins " + std::to_string(wins) + "/6 (need >= " + std::to_string(kExpBWins) + "), primitive vs whole: " +
             rows + ", " + num(seconds) + " s";
  return o;
}

Outcome experiment_c(const fs::path& work, const std::vector<int>& val_trajs, double seconds) {
  Outcome o{5, "experiment C: modality allocation by primitive"};
  std::vector<int> labels;
  std::vector<std::array<double, kNumModalities>> alloc;
  for (int t : val_trajs) {
    std::istringstream csv(slurp(work / ("expC_" + std::to_string(t)) / "features.csv"));
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
      std::istringstream ls(line);
      std::string cell;
      std::array<double, 7> head{};
      for (int c = 0; c < 7 && std::getline(ls, cell, ','); ++c) head[static_cast<std::size_t>(c)] = std::stod(cell);
      labels.push_back(static_cast<int>(head[2]));
      alloc.push_back({head[3], head[4], head[5], head[6]});
    }
  }
  const AllocationStats st = allocation_stats(labels, alloc, kAllocL1);
  o.seconds = seconds;
  o.pass = st.tactile_contact > st.tactile_reach && st.separated_pairs >= kExpCPairs && seconds < kExpCSeconds;
  o.detail = "tactile allocation contact " + num(st.tactile_contact) + " vs reach " + num(st.tactile_reach) +
             ", pairs with L1 > " + num(kAllocL1) + ": " + std::to_string(st.separated_pairs) + " (need >= " +
             std::to_string(kExpCPairs) + "), " + std::to_string(labels.size()) + " frames, " + num(seconds) + " s";
  return o;
}

Outcome experiment_d(const fs::path& work, double seconds) {
  Outcome o{6, "experiment D: unsupervised segmentation"};
  const json seg = read_json(work / "expD" / "segmentation.json");
  const double n = seg.at("mean_metrics").at("nmi").get<double>();
  const double acc = seg.at("mean_metrics").at("frame_accuracy").get<double>();
  const double f1 = seg.at("mean_metrics").at("boundary_f1").get<double>();
  o.seconds = seconds;
  o.pass = seg.at("k").get<int>() == 6 && n >= kExpDNmi && acc >= kExpDAccuracy && seconds < kExpDSeconds;
  o.detail = "NMI " + num(n) + " (need >= " + num(kExpDNmi) + "), frame accuracy " + num(acc) + " (need >= " +
             num(kExpDAccuracy) + "), boundary F1 " + num(f1) + ", " + num(seconds) + " s";
  return o;
}

Outcome determinism(const fs::path& first, const fs::path& second) {
  Outcome o{7, "determinism"};
  int compared = 0;
  std::vector<std::string> differing;
  for (const auto& e : fs::recursive_directory_iterator(first)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext != ".csv" && ext != ".json" && ext != ".bin" && ext != ".svg") continue;
    const fs::path rel = fs::relative(e.path(), first);
    ++compared;
    if (!fs::exists(second / rel) || slurp(e.path()) != slurp(second / rel)) differing.push_back(rel.string());
  }
  o.pass = differing.empty() && compared > 0;
  o.detail = std::to_string(compared) + " output files compared, " + std::to_string(differing.size()) + " differ";
  for (std::size_t i = 0; i < std::min<std::size_t>(differing.size(), 5); ++i) o.detail += (i ? ", " : ": ") + differing[i];
  return o;
}

void print(const Outcome& o) {
  std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", o.id, o.name.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cmadp acceptance run"};
  std::string work = (fs::temp_directory_path() / "cmadp_acceptance").string();
#ifdef CMADP_CLI_PATH
  std::string cli_exe = CMADP_CLI_PATH;
#else
  std::string cli_exe = "cmadp";
#endif
#ifdef CMADP_UNIT_TESTS_PATH
  std::string unit_exe = CMADP_UNIT_TESTS_PATH;
#else
  std::string unit_exe = "cmadp_unit_tests";
#endif
  app.add_option("--work", work, "Scratch directory (wiped)");
  app.add_option("--cli", cli_exe, "cmadp executable");
  app.add_option("--unit", unit_exe, "Unit test executable");
  std::vector<int> only;
  app.add_option("--criteria", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(work);
  fs::remove_all(root);
  const fs::path run1 = root / "run1", run2 = root / "run2";
  fs::create_directories(run1);
  fs::create_directories(run2);

  std::vector<Outcome> out;
  auto record = [&](Outcome o) {
    print(o);
    out.push_back(std::move(o));
  };
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    if (!wanted(id)) return;
    try {
      record(f());
    } catch (const std::exception& e) {
      record({id, name, false, std::string("error: ") + e.what(), 0.0});
    }
  };

  guarded(1, "numeric correctness suite", [&] { return numeric_suite(unit_exe, root); });
  guarded(8, "analysis oracles", [&] { return analysis_oracles(); });
  guarded(2, "sampler oracle", [&] { return sampler_oracle(); });

  std::vector<double> secs;
  std::vector<int> val_trajs;
  const bool experiments = wanted(3) || wanted(4) || wanted(5) || wanted(6) || wanted(7);
  bool pipeline_ok = experiments;
  if (experiments) try {
    const Cli cli1(cli_exe, run1);
    cli1("gen --out data", "gen.log");
    val_trajs = read_dataset(run1 / "data").indices(Split::kVal);
    run_pipeline(cli1, val_trajs, &secs);
  } catch (const std::exception& e) {
    pipeline_ok = false;
    for (int id : {3, 4, 5, 6})
      if (wanted(id)) record({id, "experiment pipeline", false, std::string("error: ") + e.what(), 0.0});
  }
  if (pipeline_ok) {
    guarded(3, "experiment A", [&] { return experiment_a(run1, secs[0]); });
    guarded(4, "experiment B", [&] { return experiment_b(run1, root, secs[1]); });
    guarded(5, "experiment C", [&] { return experiment_c(run1, val_trajs, secs[2]); });
    guarded(6, "experiment D", [&] { return experiment_d(run1, secs[3]); });
  }
  guarded(7, "determinism", [&] {
    const Cli cli2(cli_exe, run2);
    cli2("gen --out data", "gen.log");
    run_pipeline(cli2, val_trajs, nullptr);
    return determinism(run1, run2);
  });

  std::sort(out.begin(), out.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
  std::printf("\nsummary\n");
  json j = json::array();
  int failed = 0;
  for (const auto& o : out) {
    print(o);
    failed += o.pass ? 0 : 1;
    j.push_back({{"criterion", o.id}, {"name", o.name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", o.seconds}});
  }
  write_text(root / "acceptance.json", j.dump(2) + "\n");
  std::printf("%d of %zu criteria passed\n", static_cast<int>(out.size()) - failed, out.size());
  return failed == 0 ? 0 : 1;
}
