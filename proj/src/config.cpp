#include "fedsim/config.hpp"

#include <cstdlib>
#include <fstream>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

const std::pair<Method, const char*> kMethodNames[] = {
    {Method::global, "global"},
    {Method::global_plus, "global-plus"},
    {Method::fedrep, "fedrep"},
    {Method::pfedme, "pfedme"},
    {Method::pfedkm, "pfedkm"},
    {Method::fedembed_som, "fedembed-som"},
    {Method::fedembed_personal, "fedembed-personal"},
    {Method::fedembed_prototype, "fedembed-prototype"},
    {Method::fedembed_type, "fedembed-type"},
};

// Collects every violation so a config is fixed in one pass.
struct Validator {
  std::vector<std::string> errors;

  void fail(const std::string& msg) { errors.push_back(msg); }

  void check_keys(const nlohmann::json& j, const std::string& scope,
                  std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool known = false;
      for (const char* k : allowed)
        if (it.key() == k) known = true;
      if (!known) fail(scope + ": unknown key \"" + it.key() + "\"");
    }
  }

  template <typename T>
  void get(const nlohmann::json& j, const std::string& scope, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(scope + "." + key + ": wrong type");
    }
  }

  void finish(const std::string& what) {
    if (errors.empty()) return;
    std::string msg = what + " invalid:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
};

void apply_preset(const std::string& preset, ExperimentConfig& cfg, Validator& v) {
  auto imbalanced_mnist = std::vector<double>{0.25, 0.15, 0.10, 0.10, 0.10, 0.10,
                                              0.05, 0.05, 0.05, 0.05};
  if (preset == "mnist-balanced") {
    cfg.dataset.type = "mnist";
    cfg.population.num_subpops = 10;
    cfg.population.proportions.assign(10, 0.1);
  } else if (preset == "mnist-imbalanced") {
    cfg.dataset.type = "mnist";
    cfg.population.num_subpops = 10;
    cfg.population.proportions = imbalanced_mnist;
  } else if (preset == "synthetic-balanced") {
    cfg.dataset.type = "synthetic";
    cfg.dataset.synth.num_styles = 20;
    cfg.dataset.synth.n_base_styles = 8;
    cfg.population.num_subpops = 20;
    cfg.population.proportions.assign(20, 0.05);
  } else {
    v.fail("preset: unknown name \"" + preset + "\"");
  }
}

}  // namespace

std::string method_name(Method m) {
  for (const auto& [method, name] : kMethodNames)
    if (method == m) return name;
  return "?";
}

Method method_from_name(const std::string& name) {
  for (const auto& [method, n] : kMethodNames)
    if (name == n) return method;
  throw ConfigError("unknown method: \"" + name + "\"");
}

std::string dataset_cache_dir() {
  const char* env = std::getenv("FEDSIM_DATA_DIR");
  return env && *env ? env : "data";
}

ExperimentConfig parse_config_json(const nlohmann::json& j) {
  Validator v;
  ExperimentConfig cfg;

  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  v.check_keys(j, "config",
               {"method", "preset", "seed", "rounds", "eval_every", "participation", "out_dir",
                "dataset", "population", "arch", "dp", "clustering", "training", "checkpoint",
                "emit_timing", "export_embeddings", "parallel_clients"});

  if (!j.contains("method")) v.fail("method: required key missing");
  if (!j.contains("seed")) v.fail("seed: required key missing");
  if (!j.contains("dataset") && !j.contains("preset"))
    v.fail("dataset: required key missing (or use a preset)");

  if (j.contains("preset")) {
    std::string preset;
    v.get(j, "config", "preset", preset);
    apply_preset(preset, cfg, v);
  }
  if (j.contains("method")) {
    std::string name;
    v.get(j, "config", "method", name);
    try {
      cfg.method = method_from_name(name);
    } catch (const ConfigError& e) {
      v.fail(e.what());
    }
  }
  v.get(j, "config", "seed", cfg.seed);
  v.get(j, "config", "rounds", cfg.rounds);
  v.get(j, "config", "eval_every", cfg.eval_every);
  v.get(j, "config", "participation", cfg.participation);
  v.get(j, "config", "out_dir", cfg.out_dir);
  v.get(j, "config", "emit_timing", cfg.emit_timing);
  v.get(j, "config", "export_embeddings", cfg.export_embeddings);
  v.get(j, "config", "parallel_clients", cfg.parallel_clients);

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    v.check_keys(d, "dataset",
                 {"type", "images", "labels", "n_base_styles", "num_styles", "samples_per_style",
                  "noise_scale", "image_side"});
    v.get(d, "dataset", "type", cfg.dataset.type);
    v.get(d, "dataset", "images", cfg.dataset.images_path);
    v.get(d, "dataset", "labels", cfg.dataset.labels_path);
    v.get(d, "dataset", "n_base_styles", cfg.dataset.synth.n_base_styles);
    v.get(d, "dataset", "num_styles", cfg.dataset.synth.num_styles);
    v.get(d, "dataset", "samples_per_style", cfg.dataset.synth.samples_per_style);
    v.get(d, "dataset", "noise_scale", cfg.dataset.synth.noise_scale);
    v.get(d, "dataset", "image_side", cfg.dataset.synth.image_side);
    if (cfg.dataset.type != "mnist" && cfg.dataset.type != "synthetic")
      v.fail("dataset.type: must be \"mnist\" or \"synthetic\"");
  }

  if (j.contains("population")) {
    const auto& p = j.at("population");
    v.check_keys(p, "population",
                 {"num_subpops", "proportions", "total_users", "train_per_user", "test_per_user"});
    v.get(p, "population", "num_subpops", cfg.population.num_subpops);
    v.get(p, "population", "total_users", cfg.population.total_users);
    v.get(p, "population", "train_per_user", cfg.population.train_per_user);
    v.get(p, "population", "test_per_user", cfg.population.test_per_user);
    if (p.contains("proportions")) {
      if (p.at("proportions").is_string()) {
        if (p.at("proportions").get<std::string>() != "balanced")
          v.fail("population.proportions: string form must be \"balanced\"");
        cfg.population.proportions.assign(cfg.population.num_subpops,
                                          1.0 / static_cast<double>(cfg.population.num_subpops));
      } else {
        v.get(p, "population", "proportions", cfg.population.proportions);
      }
    }
  }
  if (cfg.population.proportions.empty())
    cfg.population.proportions.assign(cfg.population.num_subpops,
                                      1.0 / static_cast<double>(cfg.population.num_subpops));

  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    v.check_keys(a, "arch", {"preset", "embed_dim", "mlp_feature_dim", "relu_after_norm"});
    v.get(a, "arch", "preset", cfg.arch.preset);
    v.get(a, "arch", "embed_dim", cfg.arch.embed_dim);
    v.get(a, "arch", "mlp_feature_dim", cfg.arch.mlp_feature_dim);
    v.get(a, "arch", "relu_after_norm", cfg.arch.relu_after_norm);
  }

  if (j.contains("dp")) {
    const auto& d = j.at("dp");
    v.check_keys(d, "dp", {"enabled", "clip_norm", "noise_multiplier", "server_side"});
    v.get(d, "dp", "enabled", cfg.dp.enabled);
    v.get(d, "dp", "clip_norm", cfg.dp.clip_norm);
    v.get(d, "dp", "noise_multiplier", cfg.dp.noise_multiplier);
    v.get(d, "dp", "server_side", cfg.dp.server_side);
  }

  if (j.contains("clustering")) {
    const auto& c = j.at("clustering");
    v.check_keys(c, "clustering",
                 {"som_rows", "som_cols", "som_lr0", "som_gradient_init_scale", "remap_interval",
                  "triplet_margin", "triplet_lr"});
    v.get(c, "clustering", "som_rows", cfg.clustering.som_rows);
    v.get(c, "clustering", "som_cols", cfg.clustering.som_cols);
    v.get(c, "clustering", "som_lr0", cfg.clustering.som_lr0);
    v.get(c, "clustering", "som_gradient_init_scale", cfg.clustering.som_gradient_init_scale);
    v.get(c, "clustering", "remap_interval", cfg.clustering.remap_interval);
    v.get(c, "clustering", "triplet_margin", cfg.clustering.triplet_margin);
    v.get(c, "clustering", "triplet_lr", cfg.clustering.triplet_lr);
  }

  if (j.contains("training")) {
    const auto& t = j.at("training");
    v.check_keys(t, "training",
                 {"local_lr", "central_lr", "kway_loss_weight", "embed_grad_source",
                  "pfedme_lambda"});
    v.get(t, "training", "local_lr", cfg.training.local_lr);
    v.get(t, "training", "central_lr", cfg.training.central_lr);
    v.get(t, "training", "kway_loss_weight", cfg.training.kway_loss_weight);
    v.get(t, "training", "embed_grad_source", cfg.training.embed_grad_source);
    v.get(t, "training", "pfedme_lambda", cfg.training.pfedme_lambda);
  }

  if (j.contains("checkpoint")) {
    const auto& c = j.at("checkpoint");
    v.check_keys(c, "checkpoint", {"save_path", "every", "format", "resume_from"});
    v.get(c, "checkpoint", "save_path", cfg.checkpoint.save_path);
    v.get(c, "checkpoint", "every", cfg.checkpoint.every);
    v.get(c, "checkpoint", "format", cfg.checkpoint.format);
    v.get(c, "checkpoint", "resume_from", cfg.checkpoint.resume_from);
    if (cfg.checkpoint.format != "binary" && cfg.checkpoint.format != "json")
      v.fail("checkpoint.format: must be \"binary\" or \"json\"");
  }

  // Cross-field validation.
  double prop_sum = 0.0;
  for (double p : cfg.population.proportions) prop_sum += p;
  if (cfg.population.proportions.size() != cfg.population.num_subpops)
    v.fail("population.proportions: expected " + std::to_string(cfg.population.num_subpops) +
           " entries, got " + std::to_string(cfg.population.proportions.size()));
  else if (std::abs(prop_sum - 1.0) > 1e-9)
    v.fail("population.proportions: sum is " + std::to_string(prop_sum) + ", expected 1");
  if (cfg.participation <= 0.0 || cfg.participation > 1.0)
    v.fail("participation: must be in (0, 1]");
  if (cfg.training.embed_grad_source != "global-head" &&
      cfg.training.embed_grad_source != "global-and-subpop")
    v.fail("training.embed_grad_source: must be \"global-head\" or \"global-and-subpop\"");
  if (cfg.method == Method::pfedme && cfg.training.pfedme_lambda < 0.0)
    v.fail("training.pfedme_lambda: must be non-negative");
  if (cfg.dataset.type == "synthetic" &&
      cfg.population.num_subpops > cfg.dataset.synth.num_styles)
    v.fail("population.num_subpops exceeds dataset.num_styles");
  if (cfg.dp.enabled && !(cfg.dp.clip_norm > 0.0))
    v.fail("dp.clip_norm: must be positive when dp is enabled");
  if (cfg.dp.enabled && cfg.dp.noise_multiplier < 0.0)
    v.fail("dp.noise_multiplier: must be non-negative");

  // Derived fields.
  const std::size_t side =
      cfg.dataset.type == "synthetic" ? cfg.dataset.synth.image_side : 28;
  cfg.arch.image_side = side;
  if (!j.contains("arch") || !j.at("arch").contains("embed_dim")) cfg.arch.embed_dim = side;
  cfg.arch.num_styles = cfg.population.num_subpops;
  cfg.arch.seed = cfg.seed;
  cfg.population.seed = stream_seed(cfg.seed, "data");
  cfg.dataset.synth.seed = stream_seed(cfg.seed, "dataset");
  if (cfg.dataset.type == "mnist") {
    if (cfg.dataset.images_path.empty())
      cfg.dataset.images_path = dataset_cache_dir() + "/train-images-idx3-ubyte";
    if (cfg.dataset.labels_path.empty())
      cfg.dataset.labels_path = dataset_cache_dir() + "/train-labels-idx1-ubyte";
  }

  v.finish("config");
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_config_json(j);
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["method"] = method_name(cfg.method);
  j["seed"] = cfg.seed;
  j["rounds"] = cfg.rounds;
  j["eval_every"] = cfg.eval_every;
  j["participation"] = cfg.participation;
  j["out_dir"] = cfg.out_dir;
  j["emit_timing"] = cfg.emit_timing;
  j["export_embeddings"] = cfg.export_embeddings;
  j["parallel_clients"] = cfg.parallel_clients;
  j["dataset"] = {{"type", cfg.dataset.type}};
  if (cfg.dataset.type == "mnist") {
    j["dataset"]["images"] = cfg.dataset.images_path;
    j["dataset"]["labels"] = cfg.dataset.labels_path;
  } else {
    j["dataset"]["n_base_styles"] = cfg.dataset.synth.n_base_styles;
    j["dataset"]["num_styles"] = cfg.dataset.synth.num_styles;
    j["dataset"]["samples_per_style"] = cfg.dataset.synth.samples_per_style;
    j["dataset"]["noise_scale"] = cfg.dataset.synth.noise_scale;
    j["dataset"]["image_side"] = cfg.dataset.synth.image_side;
  }
  j["population"] = {{"num_subpops", cfg.population.num_subpops},
                     {"proportions", cfg.population.proportions},
                     {"total_users", cfg.population.total_users},
                     {"train_per_user", cfg.population.train_per_user},
                     {"test_per_user", cfg.population.test_per_user}};
  j["arch"] = {{"preset", cfg.arch.preset},
               {"embed_dim", cfg.arch.embed_dim},
               {"mlp_feature_dim", cfg.arch.mlp_feature_dim},
               {"relu_after_norm", cfg.arch.relu_after_norm}};
  j["dp"] = {{"enabled", cfg.dp.enabled},
             {"clip_norm", cfg.dp.clip_norm},
             {"noise_multiplier", cfg.dp.noise_multiplier},
             {"server_side", cfg.dp.server_side}};
  j["clustering"] = {{"som_rows", cfg.clustering.som_rows},
                     {"som_cols", cfg.clustering.som_cols},
                     {"som_lr0", cfg.clustering.som_lr0},
                     {"som_gradient_init_scale", cfg.clustering.som_gradient_init_scale},
                     {"remap_interval", cfg.clustering.remap_interval},
                     {"triplet_margin", cfg.clustering.triplet_margin},
                     {"triplet_lr", cfg.clustering.triplet_lr}};
  j["training"] = {{"local_lr", cfg.training.local_lr},
                   {"central_lr", cfg.training.central_lr},
                   {"kway_loss_weight", cfg.training.kway_loss_weight},
                   {"embed_grad_source", cfg.training.embed_grad_source},
                   {"pfedme_lambda", cfg.training.pfedme_lambda}};
  j["checkpoint"] = {{"save_path", cfg.checkpoint.save_path},
                     {"every", cfg.checkpoint.every},
                     {"format", cfg.checkpoint.format},
                     {"resume_from", cfg.checkpoint.resume_from}};
  return j;
}

}  // namespace fedsim
