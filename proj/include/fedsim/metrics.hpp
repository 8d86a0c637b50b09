#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "fedsim/data.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

// F1 of the positive class: 2TP / (2TP + FP + FN), defined as 0 when that
// denominator is 0.
double f1_binary(const std::vector<int>& preds, const std::vector<int>& labels);

// Which network produces the task prediction for a user.
enum class PredictHead { assigned_subpop, local };

struct EvalSnapshot {
  std::size_t round = 0;
  double macro_f1 = 0.0;  // sub-populations weighted equally
  double micro_f1 = 0.0;  // users weighted equally
  std::vector<double> per_subpop_f1;
  double assignment_accuracy = 0.0;  // matched-diagonal fraction of the confusion matrix
};

// Per-user F1 on the held-out split with the user's own embedding and current
// head; sub-population score is the mean over its users.
EvalSnapshot evaluate_population(const std::vector<UserState>& users, const ModelParams& params,
                                 PredictHead mode, std::size_t num_subpops);

// Entry (k, c): users with ground truth k currently assigned to cluster c.
std::vector<std::vector<std::size_t>> cluster_confusion(const std::vector<UserState>& users,
                                                        std::size_t num_subpops,
                                                        std::size_t num_clusters);

// Fraction of users on the diagonal after greedily matching clusters to
// sub-populations by overlap.
double matched_diagonal_fraction(const std::vector<std::vector<std::size_t>>& confusion);

// CSV of all personal embeddings: user_id,true_k,assigned,e_0..e_{D-1}.
void export_embeddings(const std::vector<UserState>& users, const std::string& path);

struct RunReport {
  nlohmann::json config_echo;
  std::uint64_t master_seed = 0;
  std::vector<EvalSnapshot> history;
  EvalSnapshot final_eval;
  std::vector<std::vector<std::size_t>> confusion;
  std::size_t rounds_run = 0;
  std::size_t clip_events = 0;
  std::size_t packets_noised = 0;
  std::string embedding_export;
  bool emit_timing = false;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

}  // namespace fedsim
