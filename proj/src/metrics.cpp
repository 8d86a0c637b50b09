#include "fedsim/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "fedsim/errors.hpp"

namespace fedsim {

double f1_binary(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) throw UsageError("f1_binary: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == 1 && labels[i] == 1) ++tp;
    if (preds[i] == 1 && labels[i] == 0) ++fp;
    if (preds[i] == 0 && labels[i] == 1) ++fn;
  }
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

EvalSnapshot evaluate_population(const std::vector<UserState>& users, const ModelParams& params,
                                 PredictHead mode, std::size_t num_subpops) {
  std::vector<double> subpop_sum(num_subpops, 0.0);
  std::vector<std::size_t> subpop_count(num_subpops, 0);
  double user_sum = 0.0;

  for (const UserState& u : users) {
    std::vector<int> preds, labels;
    preds.reserve(u.data.test.size());
    labels.reserve(u.data.test.size());
    const Network* local = mode == PredictHead::local ? &*u.local_head : nullptr;
    for (const LabeledSample& s : u.data.test) {
      const Tensor logits = model_predict_logits(params, u.embedding.vector, s.sample.input,
                                                 mode == PredictHead::local ? 0 : u.assigned_head,
                                                 local);
      preds.push_back(logits.data[1] > logits.data[0] ? 1 : 0);
      labels.push_back(s.label);
    }
    const double f1 = f1_binary(preds, labels);
    user_sum += f1;
    subpop_sum[u.true_subpop] += f1;
    subpop_count[u.true_subpop] += 1;
  }

  EvalSnapshot snap;
  snap.per_subpop_f1.resize(num_subpops, 0.0);
  double macro = 0.0;
  std::size_t populated = 0;
  for (std::size_t k = 0; k < num_subpops; ++k) {
    if (subpop_count[k] > 0) {
      snap.per_subpop_f1[k] = subpop_sum[k] / static_cast<double>(subpop_count[k]);
      macro += snap.per_subpop_f1[k];
      ++populated;
    }
  }
  snap.macro_f1 = populated ? macro / static_cast<double>(populated) : 0.0;
  snap.micro_f1 = users.empty() ? 0.0 : user_sum / static_cast<double>(users.size());
  return snap;
}

std::vector<std::vector<std::size_t>> cluster_confusion(const std::vector<UserState>& users,
                                                        std::size_t num_subpops,
                                                        std::size_t num_clusters) {
  std::vector<std::vector<std::size_t>> m(num_subpops,
                                          std::vector<std::size_t>(num_clusters, 0));
  for (const UserState& u : users) {
    if (u.assigned_head >= num_clusters)
      throw UsageError("cluster_confusion: assignment " + std::to_string(u.assigned_head) +
                       " exceeds cluster count " + std::to_string(num_clusters));
    m[u.true_subpop][u.assigned_head] += 1;
  }
  return m;
}

double matched_diagonal_fraction(const std::vector<std::vector<std::size_t>>& confusion) {
  if (confusion.empty()) return 0.0;
  const std::size_t rows = confusion.size(), cols = confusion[0].size();
  std::vector<bool> row_done(rows, false), col_done(cols, false);
  std::size_t matched = 0, total = 0;
  for (const auto& row : confusion)
    for (std::size_t c : row) total += c;
  for (std::size_t step = 0; step < std::min(rows, cols); ++step) {
    std::size_t br = rows, bc = cols, best = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (row_done[r]) continue;
      for (std::size_t c = 0; c < cols; ++c) {
        if (col_done[c]) continue;
        if (confusion[r][c] > best) {
          best = confusion[r][c];
          br = r;
          bc = c;
        }
      }
    }
    if (best == 0) break;
    matched += best;
    row_done[br] = true;
    col_done[bc] = true;
  }
  return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total);
}

void export_embeddings(const std::vector<UserState>& users, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write embedding export: " + path);
  const std::size_t dim = users.empty() ? 0 : users[0].embedding.vector.numel();
  f << "user_id,true_k,assigned";
  for (std::size_t i = 0; i < dim; ++i) f << ",e_" << i;
  f << "\n";
  char buf[32];
  for (const UserState& u : users) {
    f << u.user_id << "," << u.true_subpop << "," << u.assigned_head;
    for (std::size_t i = 0; i < dim; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", u.embedding.vector.data[i]);
      f << "," << buf;
    }
    f << "\n";
  }
  if (!f.good()) throw DataError("write failed for embedding export: " + path);
}

namespace {
nlohmann::json snapshot_json(const EvalSnapshot& s) {
  return {{"round", s.round},
          {"macro_f1", s.macro_f1},
          {"micro_f1", s.micro_f1},
          {"per_subpop_f1", s.per_subpop_f1},
          {"assignment_accuracy", s.assignment_accuracy}};
}
}  // namespace

nlohmann::json RunReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = config_echo;
  j["master_seed"] = master_seed;
  j["rounds_run"] = rounds_run;
  nlohmann::json hist = nlohmann::json::array();
  for (const EvalSnapshot& s : history) hist.push_back(snapshot_json(s));
  j["history"] = hist;
  j["final"] = snapshot_json(final_eval);
  j["cluster_confusion"] = confusion;
  j["dp"] = {{"clip_events", clip_events}, {"packets_noised", packets_noised}};
  j["embedding_export"] = embedding_export;
  if (emit_timing) j["timing"] = {{"wall_seconds", wall_seconds}};
  return j;
}

}  // namespace fedsim
