#include "cmadp/config.hpp"

#include <set>

#include "cmadp/array_io.hpp"

namespace cmadp {

using nlohmann::json;

namespace {

// Reads fields from one JSON object, remembering which keys were consumed so
// that leftovers can be reported as unknown.
class StrictReader {
 public:
  StrictReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("'" + where_ + "' must be a JSON object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError("'" + where_ + "." + key + "': " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.contains(item.key()))
        throw ConfigError("unknown config key '" + where_ + "." + item.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

const char* feature_name(FeatureKind f) {
  return f == FeatureKind::kEmbedding ? "embedding" : "allocation";
}

}  // namespace

std::string TrainConfig::mode_name() const {
  if (primitive < 0) return "whole";
  return "primitive:" + std::string(primitive_name(primitive));
}

int parse_mode(const std::string& mode) {
  if (mode == "whole") return -1;
  const std::string prefix = "primitive:";
  if (mode.rfind(prefix, 0) == 0) {
    const auto code = parse_primitive(mode.substr(prefix.size()));
    if (!code) throw ConfigError("unknown primitive name '" + mode.substr(prefix.size()) + "'");
    return *code;
  }
  throw ConfigError("mode must be 'whole' or 'primitive:<Name>', got '" + mode + "'");
}

void TrainConfig::validate() const {
  if (primitive < -1 || primitive >= kNumPrimitives) throw ConfigError("train.mode: bad primitive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw ConfigError("train.ema_decay must lie in [0, 1)");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be > 0");
  if (val_every < 1) throw ConfigError("train.val_every must be >= 1");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
  if (val_draws < 1) throw ConfigError("train.val_draws must be >= 1");
}

void AnalysisConfig::validate() const {
  if (k < 1 || k > 8) throw ConfigError("analysis.k must lie in [1, 8]");
  if (restarts < 1) throw ConfigError("analysis.restarts must be >= 1");
  if (smooth_window < 1 || smooth_window % 2 == 0)
    throw ConfigError("analysis.smooth_window must be odd");
  if (boundary_tol < 0) throw ConfigError("analysis.boundary_tol must be >= 0");
  if (!(perplexity > 1.0)) throw ConfigError("analysis.perplexity must be > 1");
  if (tsne_iters < 1) throw ConfigError("analysis.tsne_iters must be >= 1");
  for (int k : k_sweep)
    if (k < 1) throw ConfigError("analysis.k_sweep entries must be >= 1");
}

void ModelConfig::validate() const {
  cma.validate();
  unet.validate();
  if (cma.model_dim != encoder.embed_dim) throw ConfigError("model: cma.model_dim != embed_dim");
  if (cma.tokens != kTokens) throw ConfigError("model: cma.tokens must be 8");
  if (cma.cond_dim != unet.cond_dim) throw ConfigError("model: cma.cond_dim != unet.cond_dim");
  if (unet.action_dim != kActionDim) throw ConfigError("model: unet.action_dim must be 4");
  if (diffusion_steps < 2) throw ConfigError("model: diffusion_steps must be >= 2");
  if (exec_horizon < 1 || exec_horizon > unet.horizon)
    throw ConfigError("model: exec_horizon must lie in [1, horizon]");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  analysis.validate();
  if (gen.count < 1) throw ConfigError("gen.count must be >= 1");
  if (gen.val_count < 0 || gen.val_count >= gen.count)
    throw ConfigError("gen.val_count must lie in [0, count)");
}

json to_json(const GenConfig& c) {
  return {{"count", c.count},
          {"val_count", c.val_count},
          {"gen_seed", c.gen_seed},
          {"nominal_durations", c.nominal_durations},
          {"duration_jitter", c.duration_jitter},
          {"tactile_noise", c.tactile_noise},
          {"state_noise", c.state_noise},
          {"blob_sigma_px", c.blob_sigma_px},
          {"min_separation", c.min_separation},
          {"max_placement_attempts", c.max_placement_attempts}};
}

json to_json(const ModelConfig& c) {
  return {{"encoder", {{"embed_dim", c.encoder.embed_dim}, {"frozen_seed", c.encoder.frozen_seed}}},
          {"cma",
           {{"layers", c.cma.layers},
            {"heads", c.cma.heads},
            {"model_dim", c.cma.model_dim},
            {"mlp_hidden", c.cma.mlp_hidden},
            {"cond_dim", c.cma.cond_dim}}},
          {"unet",
           {{"horizon", c.unet.horizon},
            {"down_dims", c.unet.down_dims},
            {"kernel", c.unet.kernel},
            {"groups", c.unet.groups},
            {"step_embed_dim", c.unet.step_embed_dim}}},
          {"diffusion_steps", c.diffusion_steps},
          {"exec_horizon", c.exec_horizon}};
}

json to_json(const TrainConfig& c) {
  return {{"mode", c.mode_name()},       {"batch_size", c.batch_size}, {"total_steps", c.total_steps},
          {"lr", c.lr},                  {"use_ema", c.use_ema},       {"ema_decay", c.ema_decay},
          {"grad_clip", c.grad_clip},    {"val_every", c.val_every},   {"log_every", c.log_every},   {"val_draws", c.val_draws},
          {"val_seed", c.val_seed}};
}

json to_json(const AnalysisConfig& c) {
  return {{"k", c.k},
          {"restarts", c.restarts},
          {"smooth_window", c.smooth_window},
          {"boundary_tol", c.boundary_tol},
          {"feature", feature_name(c.feature)},
          {"perplexity", c.perplexity},
          {"tsne_iters", c.tsne_iters},
          {"k_sweep", c.k_sweep}};
}

json to_json(const RunConfig& c) {
  return {{"gen", to_json(c.gen)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"analysis", to_json(c.analysis)},
          {"paths", {{"data", c.paths.data}, {"out", c.paths.out}}},
          {"seed", c.seed}};
}

GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  StrictReader r(j, "gen");
  r.get("count", c.count);
  r.get("val_count", c.val_count);
  r.get("gen_seed", c.gen_seed);
  r.get("nominal_durations", c.nominal_durations);
  r.get("duration_jitter", c.duration_jitter);
  r.get("tactile_noise", c.tactile_noise);
  r.get("state_noise", c.state_noise);
  r.get("blob_sigma_px", c.blob_sigma_px);
  r.get("min_separation", c.min_separation);
  r.get("max_placement_attempts", c.max_placement_attempts);
  r.finish();
  return c;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  StrictReader r(j, "model");
  if (const json* e = r.sub("encoder")) {
    StrictReader er(*e, "model.encoder");
    er.get("embed_dim", c.encoder.embed_dim);
    er.get("frozen_seed", c.encoder.frozen_seed);
    er.finish();
  }
  if (const json* m = r.sub("cma")) {
    StrictReader mr(*m, "model.cma");
    mr.get("layers", c.cma.layers);
    mr.get("heads", c.cma.heads);
    mr.get("model_dim", c.cma.model_dim);
    mr.get("mlp_hidden", c.cma.mlp_hidden);
    mr.get("cond_dim", c.cma.cond_dim);
    mr.finish();
  }
  if (const json* u = r.sub("unet")) {
    StrictReader ur(*u, "model.unet");
    std::string preset;
    ur.get("preset", preset);
    if (preset == "paper")
      c.unet = UNetConfig::paper();
    else if (!preset.empty() && preset != "desk")
      throw ConfigError("model.unet.preset must be 'desk' or 'paper'");
    ur.get("horizon", c.unet.horizon);
    ur.get("down_dims", c.unet.down_dims);
    ur.get("kernel", c.unet.kernel);
    ur.get("groups", c.unet.groups);
    ur.get("step_embed_dim", c.unet.step_embed_dim);
    ur.finish();
  }
  c.unet.cond_dim = c.cma.cond_dim;
  r.get("diffusion_steps", c.diffusion_steps);
  r.get("exec_horizon", c.exec_horizon);
  r.finish();
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  StrictReader r(j, "train");
  std::string mode = "whole";
  r.get("mode", mode);
  c.primitive = parse_mode(mode);
  r.get("batch_size", c.batch_size);
  r.get("total_steps", c.total_steps);
  r.get("lr", c.lr);
  r.get("use_ema", c.use_ema);
  r.get("ema_decay", c.ema_decay);
  r.get("grad_clip", c.grad_clip);
  r.get("val_every", c.val_every);
  r.get("log_every", c.log_every);
  r.get("val_draws", c.val_draws);
  r.get("val_seed", c.val_seed);
  r.finish();
  return c;
}

AnalysisConfig analysis_config_from_json(const json& j) {
  AnalysisConfig c;
  StrictReader r(j, "analysis");
  r.get("k", c.k);
  r.get("restarts", c.restarts);
  r.get("smooth_window", c.smooth_window);
  r.get("boundary_tol", c.boundary_tol);
  std::string feature = feature_name(c.feature);
  r.get("feature", feature);
  if (feature == "embedding")
    c.feature = FeatureKind::kEmbedding;
  else if (feature == "allocation")
    c.feature = FeatureKind::kAllocation;
  else
    throw ConfigError("analysis.feature must be 'embedding' or 'allocation'");
  r.get("perplexity", c.perplexity);
  r.get("tsne_iters", c.tsne_iters);
  r.get("k_sweep", c.k_sweep);
  r.finish();
  return c;
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  StrictReader r(j, "config");
  if (const json* g = r.sub("gen")) c.gen = gen_config_from_json(*g);
  if (const json* m = r.sub("model")) c.model = model_config_from_json(*m);
  if (const json* t = r.sub("train")) c.train = train_config_from_json(*t);
  if (const json* a = r.sub("analysis")) c.analysis = analysis_config_from_json(*a);
  if (const json* p = r.sub("paths")) {
    StrictReader pr(*p, "paths");
    pr.get("data", c.paths.data);
    pr.get("out", c.paths.out);
    pr.finish();
  }
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(j);
}

}  // namespace cmadp
