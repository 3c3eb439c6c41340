#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cmadp/analysis.hpp"
#include "cmadp/array_io.hpp"
#include "cmadp/config.hpp"
#include "cmadp/report.hpp"
#include "cmadp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmadp;

namespace {

RunConfig resolve_config(const std::string& path) {
  if (path.empty()) return parse_run_config(json::object());
  return load_run_config(path);
}

void echo(const fs::path& out, const std::string& command, const RunConfig& cfg, json extra = json::object()) {
  fs::create_directories(out);
  json j = {{"command", command}, {"config", to_json(cfg)}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_text(out / "config.json", j.dump(2) + "\n");
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

int cmd_gen(const std::string& config, const std::string& out, std::optional<int> count) {
  RunConfig cfg = resolve_config(config);
  if (count) {
    cfg.gen.count = *count;
    cfg.gen.val_count = std::min(cfg.gen.val_count, std::max(0, *count - 1));
  }
  cfg.paths.data = out;
  cfg.validate();
  const Dataset ds = generate_dataset(cfg.gen);
  write_dataset(ds, out);
  echo(out, "gen", cfg);
  std::printf("wrote %zu trajectories to %s\n", ds.trajectories.size(), out.c_str());
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, std::optional<std::string> mode,
              const std::string& out, std::optional<std::int64_t> steps) {
  RunConfig cfg = resolve_config(config);
  if (mode) cfg.train.primitive = parse_mode(*mode);
  if (steps) cfg.train.total_steps = *steps;
  cfg.paths.data = data;
  cfg.paths.out = out;
  cfg.validate();
  const Dataset ds = read_dataset(data);
  echo(out, "train", cfg);

  const std::int64_t total = cfg.train.total_steps;
  auto progress = [total](std::int64_t step, double loss) {
    if (step % 500 == 0 || step == total)
      std::fprintf(stderr, "step %lld/%lld loss %.5f\n", static_cast<long long>(step),
                   static_cast<long long>(total), loss);
  };
  TrainResult r = train(cfg.train, cfg.model, ds, cfg.seed, progress);
  write_text(fs::path(out) / "metrics.csv", r.log.to_csv());
  save_checkpoint(r.policy, {r.steps, cfg.train.use_ema, cfg.train.mode_name(), cfg.seed},
                  fs::path(out) / "checkpoint");
  json fv = {{"mode", cfg.train.mode_name()}, {"steps", r.steps}, {"val", r.final_val}};
  if (cfg.train.primitive < 0) {
    json per = json::array();
    for (double v : r.final_primitive_val) per.push_back(v);
    fv["per_primitive"] = per;
  }
  write_json(fs::path(out) / "final_val.json", fv);
  std::printf("final val loss %s\n", fmt6(r.final_val).c_str());
  return 0;
}

int cmd_attn(const std::string& config, const std::string& ckpt, const std::string& data, int traj,
             const std::string& out) {
  RunConfig cfg = resolve_config(config);
  cfg.paths.data = data;
  cfg.paths.out = out;
  cfg.validate();
  const Dataset ds = read_dataset(data);
  if (traj < 0 || traj >= static_cast<int>(ds.trajectories.size()))
    throw DataError("--traj " + std::to_string(traj) + " out of range");
  const Policy policy = load_checkpoint(ckpt);
  echo(out, "attn", cfg, {{"ckpt", ckpt}, {"traj", traj}});
  auto feats = extract_features(policy, ds.trajectories[static_cast<std::size_t>(traj)]);
  for (auto& f : feats) f.traj = traj;
  write_text(fs::path(out) / "features.csv", features_csv(feats, true));
  std::printf("wrote %zu frames\n", feats.size());
  return 0;
}

int cmd_segment(const std::string& config, const std::string& ckpt, const std::string& data,
                const std::string& split, std::optional<int> k, const std::string& out) {
  RunConfig cfg = resolve_config(config);
  if (k) cfg.analysis.k = *k;
  cfg.paths.data = data;
  cfg.paths.out = out;
  cfg.validate();
  if (split != "val" && split != "train" && split != "all")
    throw ConfigError("--split must be 'train', 'val' or 'all'");
  const Dataset ds = read_dataset(data);
  std::vector<int> trajs;
  if (split == "all") {
    for (int i = 0; i < static_cast<int>(ds.trajectories.size()); ++i) trajs.push_back(i);
  } else {
    trajs = ds.indices(split == "val" ? Split::kVal : Split::kTrain);
  }
  if (trajs.empty()) throw DataError("split '" + split + "' is empty");
  const Policy policy = load_checkpoint(ckpt);
  echo(out, "segment", cfg, {{"ckpt", ckpt}, {"split", split}});

  json per = json::array();
  SegmentationMetrics mean;
  std::vector<FrameFeatures> all;
  std::vector<FrameFeatures> first;
  for (int t : trajs) {
    auto feats = extract_features(policy, ds.trajectories[static_cast<std::size_t>(t)]);
    for (auto& f : feats) f.traj = t;
    const SegmentationResult r = segment_features(feats, cfg.analysis, cfg.seed);
    json j = r.to_json();
    j["traj"] = t;
    per.push_back(j);
    mean.frame_accuracy += r.metrics.frame_accuracy / static_cast<double>(trajs.size());
    mean.nmi += r.metrics.nmi / static_cast<double>(trajs.size());
    mean.boundary_f1 += r.metrics.boundary_f1 / static_cast<double>(trajs.size());
    if (first.empty()) first = feats;
    all.insert(all.end(), feats.begin(), feats.end());
  }
  write_json(fs::path(out) / "segmentation.json",
             {{"k", cfg.analysis.k},
              {"split", split},
              {"mean_metrics",
               {{"frame_accuracy", mean.frame_accuracy}, {"nmi", mean.nmi}, {"boundary_f1", mean.boundary_f1}}},
              {"trajectories", per}});
  write_text(fs::path(out) / "features.csv", features_csv(all, false));

  const MatD x = feature_matrix(first, cfg.analysis.feature);
  const SegmentationResult r0 = segment_features(first, cfg.analysis, cfg.seed);
  const TsneResult ts = tsne(x, cfg.analysis.perplexity, cfg.analysis.tsne_iters, cfg.seed);
  std::string csv = "x,y,gt_label,cluster\n";
  for (std::size_t i = 0; i < first.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    csv += fmt6(ts.embedding(row, 0)) + "," + fmt6(ts.embedding(row, 1)) + "," +
           std::to_string(first[i].gt_label) + "," + std::to_string(r0.cluster_ids[i]) + "\n";
  }
  write_text(fs::path(out) / "tsne.csv", csv);
  std::string kl = "iter,kl\n";
  for (const auto& [it, v] : ts.kl_trace) kl += std::to_string(it) + "," + fmt6(v) + "\n";
  write_text(fs::path(out) / "tsne_kl.csv", kl);

  const auto sweep = k_sweep(x, cfg.analysis.k_sweep, cfg.analysis.restarts, cfg.seed);
  std::string ks = "k,inertia,silhouette\n";
  for (const auto& row : sweep) ks += std::to_string(row.k) + "," + fmt6(row.inertia) + "," + fmt6(row.silhouette) + "\n";
  write_text(fs::path(out) / "ksweep.csv", ks);

  const MatD p2 = pca2(x);
  std::vector<std::string> names;
  for (int p = 0; p < kNumPrimitives; ++p) names.emplace_back(primitive_name(p));
  std::vector<int> gt;
  for (const auto& f : first) gt.push_back(f.gt_label);
  write_text(fs::path(out) / "pca_by_label.svg", svg_scatter("PCA of CMA embeddings", p2, gt, names));

  std::printf("nmi %s frame_accuracy %s boundary_f1 %s\n", fmt6(mean.nmi).c_str(),
              fmt6(mean.frame_accuracy).c_str(), fmt6(mean.boundary_f1).c_str());
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<fs::path> paths(runs.begin(), runs.end());
  const json r = build_report(paths, out);
  std::printf("%s\n", r.at("summary").dump(2).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality attention diffusion policy toolkit"};
  app.require_subcommand(1);

  std::string config, out, data, ckpt, split = "val";
  std::optional<int> count, k;
  std::optional<std::string> mode;
  std::optional<std::int64_t> steps;
  int traj = 0;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic demonstration dataset");
  gen->add_option("--config", config, "Run config JSON");
  gen->add_option("--out", out, "Dataset directory")->required();
  gen->add_option("--count", count, "Number of trajectories");

  auto* tr = app.add_subcommand("train", "Train a policy");
  tr->add_option("--config", config, "Run config JSON");
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--mode", mode, "whole | primitive:<Name>");
  tr->add_option("--steps", steps, "Override train.total_steps");
  tr->add_option("--out", out, "Run directory")->required();

  auto* at = app.add_subcommand("attn", "Dump per-frame attention allocations and embeddings");
  at->add_option("--config", config, "Run config JSON");
  at->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  at->add_option("--data", data, "Dataset directory")->required();
  at->add_option("--traj", traj, "Trajectory index");
  at->add_option("--out", out, "Output directory")->required();

  auto* sg = app.add_subcommand("segment", "Cluster CMA embeddings and score segmentation");
  sg->add_option("--config", config, "Run config JSON");
  sg->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  sg->add_option("--data", data, "Dataset directory")->required();
  sg->add_option("--split", split, "train | val | all");
  sg->add_option("--k", k, "Number of clusters");
  sg->add_option("--out", out, "Output directory")->required();

  auto* rp = app.add_subcommand("report", "Assemble figures and summary.json from run directories");
  rp->add_option("--runs", runs, "Run directories")->required();
  rp->add_option("--out", out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(config, out, count);
    if (*tr) return cmd_train(config, data, mode, out, steps);
    if (*at) return cmd_attn(config, ckpt, data, traj, out);
    if (*sg) return cmd_segment(config, ckpt, data, split, k, out);
    if (*rp) return cmd_report(runs, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
