#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// Self-organizing map on a rows x cols grid, trained federated: every client
// proposes an update, the server applies only the best-scoring one per round.
struct SOMap {
  std::size_t rows = 1, cols = 1;
  std::vector<Tensor> nodes;
  double lr0 = 0.5;
  double radius0 = 1.0;
  double tau = 1.0;          // decay constant for both schedules
  std::uint64_t iteration = 0;
};

// Nodes initialized uniform(0, init_scale); schedules decay over
// `total_rounds` with tau = half the round count and radius0 = half the grid
// diameter.
SOMap make_som(std::size_t rows, std::size_t cols, std::size_t dim, std::size_t total_rounds,
               double init_scale, Rng& rng);

double som_learning_rate(const SOMap& som, std::uint64_t t);
double som_radius(const SOMap& som, std::uint64_t t);

// Best-matching unit: argmin squared Euclidean distance, ties to the lowest
// node index.
std::size_t som_bmu(const SOMap& som, const Tensor& embedding);

struct SOMClientReport {
  std::vector<Tensor> deltas;  // one per node
  double score = 0.0;          // -||embedding - w_bmu||^2, higher is better
};

// Kohonen deltas at the map's current iteration with a Gaussian neighborhood.
SOMClientReport som_client_step(const SOMap& som, const Tensor& embedding);

// Score only; equals som_client_step(...).score without materializing deltas.
double som_similarity_score(const SOMap& som, const Tensor& embedding);

// Applies the single best-scoring report (ties to the lowest position in the
// list) and advances the schedules.
void som_server_round(SOMap& som, const std::vector<SOMClientReport>& reports);

void som_apply_report(SOMap& som, const SOMClientReport& report);

// Greedy maximal-overlap matching between old and new cluster memberships.
// Entry j of the result is the old node whose head the new node j inherits;
// nullopt means no overlap survived and the head starts fresh.
std::vector<std::optional<std::size_t>> remap_heads(
    const std::vector<std::size_t>& old_memberships,
    const std::vector<std::size_t>& new_memberships, std::size_t num_nodes);

// One prototype embedding per sub-population plus the triplet margin.
struct PrototypeSet {
  std::vector<Tensor> prototypes;
  double margin = 1.0;
};

PrototypeSet make_prototypes(std::size_t count, std::size_t dim, double margin, Rng& rng);

double triplet_loss(const Tensor& emb, const Tensor& pos, const Tensor& neg, double margin);

// One descent step on ||e-p||^2 - ||e-n||^2 + margin. The gradient is the
// constant 2(n - p), so the step is lr * 2(p - n) regardless of e.
Tensor triplet_update(const Tensor& emb, const Tensor& pos, const Tensor& neg, double margin,
                      double lr);

// Nearest prototype by Euclidean distance, ties to the lowest index.
std::size_t prototype_assign(const Tensor& embedding, const PrototypeSet& protos);

// Moves each prototype by -lr times the mean of its users' reported embedding
// gradients; prototypes with no reports stay put.
void update_prototypes(PrototypeSet& protos,
                       const std::vector<std::vector<const Tensor*>>& grads_per_proto, double lr);

}  // namespace fedsim
