#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "fedsim/data.hpp"
#include "fedsim/model.hpp"
#include "fedsim/privacy.hpp"

namespace fedsim {

enum class Method {
  global,
  global_plus,
  fedrep,
  pfedme,
  pfedkm,
  fedembed_som,
  fedembed_personal,
  fedembed_prototype,
  fedembed_type,
};

std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct DatasetConfig {
  std::string type = "synthetic";  // "mnist" | "synthetic"
  std::string images_path, labels_path;  // mnist; empty -> resolved in the cache dir
  SyntheticSpec synth;
};

struct ClusteringConfig {
  std::size_t som_rows = 0, som_cols = 0;  // 0,0 -> most-square grid over the head count
  double som_lr0 = 0.5;
  double som_gradient_init_scale = 0.01;  // node init scale for gradient-space SOMs
  std::size_t remap_interval = 25;        // head remapping cadence, 0 disables
  double triplet_margin = 1.0;
  double triplet_lr = 0.01;
};

struct TrainingConfig {
  double local_lr = 0.001;   // local Adam: embeddings, local heads
  double central_lr = 1.0;   // central Adam
  double kway_loss_weight = 1.0;
  std::string embed_grad_source = "global-head";  // or "global-and-subpop"
  double pfedme_lambda = 0.1;
};

struct CheckpointConfig {
  std::string save_path;
  std::size_t every = 0;  // rounds between checkpoints, 0 disables
  std::string format = "binary";  // "binary" | "json"
  std::string resume_from;
};

// Full declarative description of one run; everything a report needs to be
// reproduced lives here.
struct ExperimentConfig {
  Method method = Method::fedembed_prototype;
  DatasetConfig dataset;
  PopulationSpec population;
  ArchConfig arch;
  DPConfig dp;
  ClusteringConfig clustering;
  TrainingConfig training;
  CheckpointConfig checkpoint;
  std::size_t rounds = 300;
  std::size_t eval_every = 10;
  double participation = 1.0;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool emit_timing = true;
  bool export_embeddings = true;
  std::size_t parallel_clients = 1;
};

// Parses and validates; reports every violation at once and rejects unknown
// keys. Defaults are filled so the echoed config is complete.
ExperimentConfig parse_config_json(const nlohmann::json& j);
ExperimentConfig parse_config_file(const std::string& path);

// Complete echo of a resolved config, defaults included.
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Dataset cache directory: $FEDSIM_DATA_DIR, falling back to "data".
std::string dataset_cache_dir();

}  // namespace fedsim
