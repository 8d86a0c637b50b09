#include "fedsim/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "fedsim/errors.hpp"

namespace fedsim {

SOMap make_som(std::size_t rows, std::size_t cols, std::size_t dim, std::size_t total_rounds,
               double init_scale, Rng& rng) {
  if (rows == 0 || cols == 0) throw ConfigError("SOM grid must be non-empty");
  SOMap som;
  som.rows = rows;
  som.cols = cols;
  som.nodes.resize(rows * cols);
  for (Tensor& n : som.nodes) {
    n = Tensor({dim});
    for (double& v : n.data) v = rng.uniform(0.0, init_scale);
  }
  const double diag = std::sqrt(static_cast<double>((rows - 1) * (rows - 1) +
                                                    (cols - 1) * (cols - 1)));
  som.radius0 = std::max(0.5 * diag, 0.5);
  som.tau = std::max(static_cast<double>(total_rounds) / 2.0, 1.0);
  return som;
}

double som_learning_rate(const SOMap& som, std::uint64_t t) {
  return som.lr0 * std::exp(-static_cast<double>(t) / som.tau);
}

double som_radius(const SOMap& som, std::uint64_t t) {
  return som.radius0 * std::exp(-static_cast<double>(t) / som.tau);
}

std::size_t som_bmu(const SOMap& som, const Tensor& embedding) {
  std::size_t best = 0;
  double best_d = squared_distance(som.nodes[0], embedding);
  for (std::size_t j = 1; j < som.nodes.size(); ++j) {
    const double d = squared_distance(som.nodes[j], embedding);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

double som_similarity_score(const SOMap& som, const Tensor& embedding) {
  return -squared_distance(som.nodes[som_bmu(som, embedding)], embedding);
}

SOMClientReport som_client_step(const SOMap& som, const Tensor& embedding) {
  const std::size_t bmu = som_bmu(som, embedding);
  const double lr = som_learning_rate(som, som.iteration);
  const double radius = som_radius(som, som.iteration);
  const double denom = 2.0 * std::max(radius * radius, 1e-12);
  const auto grid_pos = [&](std::size_t j) {
    return std::pair<double, double>{static_cast<double>(j / som.cols),
                                     static_cast<double>(j % som.cols)};
  };
  const auto [by, bx] = grid_pos(bmu);

  SOMClientReport rep;
  rep.score = -squared_distance(som.nodes[bmu], embedding);
  rep.deltas.resize(som.nodes.size());
  for (std::size_t j = 0; j < som.nodes.size(); ++j) {
    const auto [jy, jx] = grid_pos(j);
    const double gd2 = (jy - by) * (jy - by) + (jx - bx) * (jx - bx);
    const double h = std::exp(-gd2 / denom);
    rep.deltas[j] = Tensor(som.nodes[j].shape);
    const double f = lr * h;
    for (std::size_t i = 0; i < embedding.numel(); ++i)
      rep.deltas[j].data[i] = f * (embedding.data[i] - som.nodes[j].data[i]);
  }
  return rep;
}

void som_apply_report(SOMap& som, const SOMClientReport& report) {
  if (report.deltas.size() != som.nodes.size())
    throw UsageError("SOM report node count does not match the map");
  for (std::size_t j = 0; j < som.nodes.size(); ++j)
    axpy(1.0, report.deltas[j], som.nodes[j]);
  som.iteration += 1;
}

void som_server_round(SOMap& som, const std::vector<SOMClientReport>& reports) {
  if (reports.empty()) throw UsageError("SOM server round needs at least one report");
  std::size_t best = 0;
  for (std::size_t i = 1; i < reports.size(); ++i)
    if (reports[i].score > reports[best].score) best = i;
  som_apply_report(som, reports[best]);
}

std::vector<std::optional<std::size_t>> remap_heads(
    const std::vector<std::size_t>& old_memberships,
    const std::vector<std::size_t>& new_memberships, std::size_t num_nodes) {
  if (old_memberships.size() != new_memberships.size())
    throw UsageError("remap_heads: membership lists cover different user sets");

  // overlap[new][old] = shared user count
  std::vector<std::vector<std::size_t>> overlap(num_nodes,
                                                std::vector<std::size_t>(num_nodes, 0));
  for (std::size_t u = 0; u < old_memberships.size(); ++u)
    overlap[new_memberships[u]][old_memberships[u]] += 1;

  std::vector<std::optional<std::size_t>> assignment(num_nodes);
  std::vector<bool> new_done(num_nodes, false), old_done(num_nodes, false);
  for (std::size_t step = 0; step < num_nodes; ++step) {
    std::size_t best_new = num_nodes, best_old = num_nodes, best_count = 0;
    for (std::size_t n = 0; n < num_nodes; ++n) {
      if (new_done[n]) continue;
      for (std::size_t o = 0; o < num_nodes; ++o) {
        if (old_done[o]) continue;
        if (overlap[n][o] > best_count) {
          best_count = overlap[n][o];
          best_new = n;
          best_old = o;
        }
      }
    }
    if (best_count == 0) break;
    assignment[best_new] = best_old;
    new_done[best_new] = true;
    old_done[best_old] = true;
  }
  return assignment;
}

PrototypeSet make_prototypes(std::size_t count, std::size_t dim, double margin, Rng& rng) {
  if (margin <= 0.0) throw ConfigError("triplet margin must be positive");
  PrototypeSet ps;
  ps.margin = margin;
  ps.prototypes.resize(count);
  for (Tensor& p : ps.prototypes) {
    p = Tensor({dim});
    for (double& v : p.data) v = rng.uniform01();
  }
  return ps;
}

double triplet_loss(const Tensor& emb, const Tensor& pos, const Tensor& neg, double margin) {
  return squared_distance(emb, pos) - squared_distance(emb, neg) + margin;
}

Tensor triplet_update(const Tensor& emb, const Tensor& pos, const Tensor& neg, double /*margin*/,
                      double lr) {
  Tensor out = emb;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] += lr * 2.0 * (pos.data[i] - neg.data[i]);
  return out;
}

std::size_t prototype_assign(const Tensor& embedding, const PrototypeSet& protos) {
  if (protos.prototypes.empty()) throw UsageError("prototype_assign: empty prototype set");
  std::size_t best = 0;
  double best_d = squared_distance(protos.prototypes[0], embedding);
  for (std::size_t k = 1; k < protos.prototypes.size(); ++k) {
    const double d = squared_distance(protos.prototypes[k], embedding);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

void update_prototypes(PrototypeSet& protos,
                       const std::vector<std::vector<const Tensor*>>& grads_per_proto, double lr) {
  for (std::size_t k = 0; k < protos.prototypes.size(); ++k) {
    if (k >= grads_per_proto.size() || grads_per_proto[k].empty()) continue;
    Tensor mean(protos.prototypes[k].shape);
    for (const Tensor* g : grads_per_proto[k]) axpy(1.0, *g, mean);
    scale_inplace(mean, 1.0 / static_cast<double>(grads_per_proto[k].size()));
    axpy(-lr, mean, protos.prototypes[k]);
  }
}

}  // namespace fedsim
