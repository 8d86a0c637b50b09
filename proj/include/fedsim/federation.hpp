#pragma once

#include <optional>
#include <vector>

#include "fedsim/clustering.hpp"
#include "fedsim/config.hpp"
#include "fedsim/data.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/model.hpp"
#include "fedsim/packet.hpp"
#include "fedsim/privacy.hpp"

namespace fedsim {

// How a method wires the shared architecture: which heads exist, where the
// task head lives, and how clients pick it.
struct MethodTraits {
  bool personal_embeddings = false;
  bool server_heads = false;  // packets carry sub-population head blocks
  bool local_heads = false;   // task head stays on the client
  bool global_head = false;
  bool kway_head = false;
  enum class Assign {
    head_zero,      // everyone shares head 0
    own_local,      // user-local head
    som_embedding,  // BMU of the embedding SOM
    som_gradient,   // BMU of the gradient-space SOM (assignment lags one round)
    prototype,      // triplet step, then nearest prototype
    ground_truth,   // oracle sub-population
  } assign = Assign::head_zero;
};

MethodTraits method_behaviors(Method m);

// Everything the server owns between rounds.
struct ServerState {
  ModelParams params;
  AdamState central_opt;
  std::optional<SOMap> som;
  std::optional<PrototypeSet> prototypes;
  std::optional<Network> pfedme_reference;  // fixed anchor head for the proximal term
  std::vector<std::size_t> members_at_last_remap;
  std::uint64_t round = 0;
};

struct ClientResult {
  GradientPacket packet;
  std::optional<SOMClientReport> som_report;  // embedding-SOM methods
  std::optional<Tensor> som_gradient_input;   // gradient-SOM methods: clean flattened packet
  double som_score = 0.0;
  Tensor proto_embed_grad;  // mean global-head embedding gradient (prototype methods)
  std::size_t assigned_head = 0;
  double train_loss = 0.0;
};

// Canonical flattening of the transmitted parameters; packets, the mean
// bundle and the central optimizer all follow this order.
std::vector<Tensor*> transmitted_params(ModelParams& params);
std::vector<std::size_t> head_block_offsets(const ModelParams& params);

// Lines 7-22 of the training procedure: head selection, one full-batch pass,
// local embedding/head updates, then optional clip + noise. Mutates only the
// caller's UserState.
ClientResult client_round(UserState& user, const ServerState& server,
                          const ExperimentConfig& cfg, const MethodTraits& traits,
                          std::uint64_t round);

// Elementwise mean over packets; shapes must agree across all of them.
GradientPacket server_aggregate(const std::vector<GradientPacket>& packets);

// One central Adam step over every transmitted parameter.
void server_apply(AdamState& central, ModelParams& params, const GradientPacket& mean_bundle);

// Builds the server state (model, clustering state, reference heads) for a
// validated config.
ServerState init_server(const ExperimentConfig& cfg, const MethodTraits& traits);

// Fills embeddings, optimizer states, local heads and initial assignments.
void init_users(std::vector<UserState>& users, const ServerState& server,
                const ExperimentConfig& cfg, const MethodTraits& traits);

struct RoundStats {
  std::size_t clip_events = 0;
  std::size_t packets_noised = 0;
  double mean_train_loss = 0.0;
};

// One full federated round: sampled clients, clustering updates, aggregation,
// central step. Deterministic for a given (config, round) regardless of
// client execution order.
RoundStats run_federated_round(ServerState& server, std::vector<UserState>& users,
                               const ExperimentConfig& cfg, const MethodTraits& traits,
                               std::uint64_t round);

std::vector<StyledSample> load_dataset(const ExperimentConfig& cfg);

RunReport run_experiment(const ExperimentConfig& cfg);

// Full simulation state (server + client-local state + round counter);
// datasets are rebuilt from the config on resume.
void save_checkpoint(const std::string& path, const std::string& format,
                     const ServerState& server, const std::vector<UserState>& users);
void load_checkpoint(const std::string& path, ServerState& server,
                     std::vector<UserState>& users);

}  // namespace fedsim
