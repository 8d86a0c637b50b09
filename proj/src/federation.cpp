#include "fedsim/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include "fedsim/errors.hpp"

namespace fedsim {

MethodTraits method_behaviors(Method m) {
  MethodTraits t;
  using A = MethodTraits::Assign;
  switch (m) {
    case Method::global:
      t.server_heads = true;
      t.assign = A::head_zero;
      break;
    case Method::global_plus:
      t.server_heads = true;
      t.personal_embeddings = true;
      t.assign = A::head_zero;
      break;
    case Method::fedrep:
    case Method::pfedme:
      t.local_heads = true;
      t.assign = A::own_local;
      break;
    case Method::pfedkm:
      t.server_heads = true;
      t.assign = A::som_gradient;
      break;
    case Method::fedembed_som:
      t.personal_embeddings = true;
      t.server_heads = true;
      t.global_head = true;
      t.kway_head = true;
      t.assign = A::som_embedding;
      break;
    case Method::fedembed_personal:
      t.personal_embeddings = true;
      t.local_heads = true;
      t.global_head = true;
      t.kway_head = true;
      t.assign = A::own_local;
      break;
    case Method::fedembed_prototype:
      t.personal_embeddings = true;
      t.server_heads = true;
      t.global_head = true;
      t.kway_head = true;
      t.assign = A::prototype;
      break;
    case Method::fedembed_type:
      t.personal_embeddings = true;
      t.server_heads = true;
      t.global_head = true;
      t.kway_head = true;
      t.assign = A::ground_truth;
      break;
  }
  return t;
}

std::vector<Tensor*> transmitted_params(ModelParams& params) {
  std::vector<Tensor*> out;
  for (Tensor& t : params.encoder.params) out.push_back(&t);
  for (Network& h : params.subpop_heads)
    for (Tensor& t : h.params) out.push_back(&t);
  if (params.global_pref_head)
    for (Tensor& t : params.global_pref_head->params) out.push_back(&t);
  if (params.kway_head)
    for (Tensor& t : params.kway_head->params) out.push_back(&t);
  return out;
}

std::vector<std::size_t> head_block_offsets(const ModelParams& params) {
  std::vector<std::size_t> offsets;
  std::size_t pos = params.encoder.params.size();
  for (const Network& h : params.subpop_heads) {
    offsets.push_back(pos);
    pos += h.params.size();
  }
  return offsets;
}

namespace {

// Grid for N heads: most-square factorization, wider than tall.
std::pair<std::size_t, std::size_t> som_grid(const ClusteringConfig& c, std::size_t n) {
  if (c.som_rows > 0 && c.som_cols > 0) return {c.som_rows, c.som_cols};
  std::size_t best = 1;
  for (std::size_t d = 1; d * d <= n; ++d)
    if (n % d == 0) best = d;
  return {n / best, best};
}

std::size_t resolve_head_count(const ExperimentConfig& cfg, const MethodTraits& traits) {
  using A = MethodTraits::Assign;
  switch (traits.assign) {
    case A::head_zero:
      return 1;
    case A::own_local:
      return 0;
    case A::som_embedding:
    case A::som_gradient: {
      const auto [r, c] = som_grid(cfg.clustering, cfg.population.num_subpops);
      return r * c;
    }
    case A::prototype:
    case A::ground_truth:
      return cfg.population.num_subpops;
  }
  return 1;
}

GradientPacket empty_packet_like(const ModelParams& params) {
  GradientPacket p;
  p.encoder = zero_grads_like(params.encoder);
  p.heads.reserve(params.subpop_heads.size());
  for (const Network& h : params.subpop_heads) p.heads.push_back(zero_grads_like(h));
  if (params.global_pref_head) p.global_head = zero_grads_like(*params.global_pref_head);
  if (params.kway_head) p.kway_head = zero_grads_like(*params.kway_head);
  return p;
}

std::vector<const Tensor*> packet_grad_refs(const GradientPacket& p) {
  std::vector<const Tensor*> out;
  for (const Tensor& t : p.encoder) out.push_back(&t);
  for (const auto& h : p.heads)
    for (const Tensor& t : h) out.push_back(&t);
  for (const Tensor& t : p.global_head) out.push_back(&t);
  for (const Tensor& t : p.kway_head) out.push_back(&t);
  return out;
}

}  // namespace

ClientResult client_round(UserState& user, const ServerState& server,
                          const ExperimentConfig& cfg, const MethodTraits& traits,
                          std::uint64_t round) {
  const ModelParams& params = server.params;
  ClientResult res;
  using A = MethodTraits::Assign;

  // Head selection (lines 8-14): prototype runs the triplet step first, the
  // SOM paths look up the BMU, type uses ground truth.
  switch (traits.assign) {
    case A::head_zero:
      user.assigned_head = 0;
      break;
    case A::own_local:
      user.assigned_head = static_cast<std::size_t>(user.user_id);
      break;
    case A::som_embedding:
      if (!server.som) throw ConfigError("SOM method without SOM state");
      user.assigned_head = som_bmu(*server.som, user.embedding.vector);
      break;
    case A::som_gradient:
      break;  // assignment lags one round; keep the previous head
    case A::prototype: {
      if (!server.prototypes) throw ConfigError("prototype method without prototype state");
      const PrototypeSet& protos = *server.prototypes;
      // The positive prototype is identified from the local data: the style
      // carried by the user's positively labeled samples.
      std::size_t data_style = user.true_subpop;
      for (const LabeledSample& s : user.data.train)
        if (s.label == 1) {
          data_style = s.sample.style;
          break;
        }
      Rng trip_rng(stream_seed(cfg.seed, "triplet", user.user_id, round));
      std::size_t neg = trip_rng.uniform_index(protos.prototypes.size() - 1);
      if (neg >= data_style) neg += 1;
      user.embedding.vector =
          triplet_update(user.embedding.vector, protos.prototypes[data_style],
                         protos.prototypes[neg], protos.margin, cfg.clustering.triplet_lr);
      user.assigned_head = prototype_assign(user.embedding.vector, protos);
      break;
    }
    case A::ground_truth:
      user.assigned_head = user.true_subpop;
      break;
  }
  if (traits.server_heads && user.assigned_head >= params.subpop_heads.size())
    throw ProtocolError("assigned head " + std::to_string(user.assigned_head) +
                        " out of range for " + std::to_string(params.subpop_heads.size()) +
                        " heads");

  LossSpec loss;
  loss.use_subpop = true;
  loss.use_global = traits.global_head;
  loss.kway_weight = traits.kway_head ? cfg.training.kway_loss_weight : 0.0;
  if (traits.personal_embeddings) {
    if (cfg.method == Method::global_plus) {
      // The single shared head doubles as the global head here.
      loss.embed_from_global = false;
      loss.embed_from_subpop = true;
    } else {
      loss.embed_from_global = true;
      loss.embed_from_subpop = cfg.training.embed_grad_source == "global-and-subpop";
    }
  } else {
    loss.embed_from_global = false;
    loss.embed_from_subpop = false;
  }

  const Network* local_head = traits.local_heads ? &*user.local_head : nullptr;

  res.packet = empty_packet_like(params);
  std::vector<Tensor> local_head_grads =
      traits.local_heads ? zero_grads_like(*user.local_head) : std::vector<Tensor>{};
  Tensor proto_grad_sum({params.embed_dim});
  double loss_sum = 0.0;

  GradSink sink;
  sink.encoder = &res.packet.encoder;
  if (traits.server_heads)
    sink.subpop_head = &res.packet.heads[user.assigned_head];
  else if (traits.local_heads)
    sink.subpop_head = &local_head_grads;
  if (traits.global_head) sink.global_head = &res.packet.global_head;
  if (traits.kway_head) sink.kway_head = &res.packet.kway_head;

  // One full-batch pass (lines 15-21). Parameter gradients accumulate over
  // the batch; the embedding takes a local Adam step after every sample.
  for (const LabeledSample& s : user.data.train) {
    ForwardBundle bundle =
        model_forward(params, user.embedding.vector, s.sample.input, user.assigned_head,
                      local_head);
    loss.pref_label = s.label;
    loss.style_label = traits.kway_head ? static_cast<int>(s.sample.style) : -1;
    SampleGrads grads = model_backward_accumulate(params, bundle, loss, sink, local_head);

    if (traits.personal_embeddings) {
      adam_step(user.embed_opt, {&user.embedding.vector}, {&grads.embedding});
      if (traits.assign == A::prototype) axpy(1.0, grads.embedding_global_path, proto_grad_sum);
    }
    loss_sum += grads.subpop_loss;
  }

  if (traits.local_heads && cfg.method == Method::pfedme) {
    // Proximal pull toward the server-held reference head.
    const Network& ref = *server.pfedme_reference;
    for (std::size_t t = 0; t < local_head_grads.size(); ++t)
      for (std::size_t i = 0; i < local_head_grads[t].numel(); ++i)
        local_head_grads[t].data[i] += cfg.training.pfedme_lambda *
                                       (user.local_head->params[t].data[i] - ref.params[t].data[i]);
  }

  res.assigned_head = user.assigned_head;
  res.train_loss = loss_sum / static_cast<double>(user.data.train.size());
  if (traits.assign == A::prototype) {
    res.proto_embed_grad = proto_grad_sum;
    scale_inplace(res.proto_embed_grad, 1.0 / static_cast<double>(user.data.train.size()));
  }

  res.packet.round = round;
  res.packet.packet_id = mix64(stream_seed(cfg.seed, "packet", round, user.user_id));

  // Clustering reports come from clean local state, before any noise.
  if (traits.assign == A::som_embedding)
    res.som_report = som_client_step(*server.som, user.embedding.vector);
  if (traits.assign == A::som_gradient) {
    res.som_gradient_input = packet_flatten(res.packet);
    res.som_score = som_similarity_score(*server.som, *res.som_gradient_input);
  }

  if (cfg.dp.enabled) {
    // The mechanism covers every computed parameter gradient, including the
    // task head of personal-head methods even though it never leaves the
    // client. Embeddings are exempt: they stay on-device by construction.
    double local_sq = 0.0;
    for (const Tensor& t : local_head_grads)
      for (double v : t.data) local_sq += v * v;
    const double packet_norm = packet_l2_norm(res.packet);
    const double joint_norm = std::sqrt(packet_norm * packet_norm + local_sq);
    if (joint_norm > cfg.dp.clip_norm) {
      const double s = cfg.dp.clip_norm / joint_norm;
      for_each_tensor(res.packet, [&](Tensor& t) { scale_inplace(t, s); });
      for (Tensor& t : local_head_grads) scale_inplace(t, s);
    }
    Rng noise_rng(stream_seed(cfg.seed, "dp-client", user.user_id, round));
    gaussianize(res.packet, cfg.dp.noise_multiplier, cfg.dp.clip_norm, noise_rng);
    const double stddev = cfg.dp.noise_multiplier * cfg.dp.clip_norm;
    if (stddev > 0.0)
      for (Tensor& t : local_head_grads)
        for (double& v : t.data) v += stddev * noise_rng.normal();
  }

  if (traits.local_heads)
    adam_step(user.local_head_opt, user.local_head->params, local_head_grads);
  return res;
}

GradientPacket server_aggregate(const std::vector<GradientPacket>& packets) {
  if (packets.empty()) throw UsageError("server_aggregate: no packets");
  GradientPacket mean = packets[0];
  auto structure_matches = [&](const GradientPacket& p) {
    if (p.encoder.size() != mean.encoder.size() || p.heads.size() != mean.heads.size() ||
        p.global_head.size() != mean.global_head.size() ||
        p.kway_head.size() != mean.kway_head.size())
      return false;
    for (std::size_t i = 0; i < p.encoder.size(); ++i)
      if (!same_shape(p.encoder[i], mean.encoder[i])) return false;
    for (std::size_t h = 0; h < p.heads.size(); ++h) {
      if (p.heads[h].size() != mean.heads[h].size()) return false;
      for (std::size_t i = 0; i < p.heads[h].size(); ++i)
        if (!same_shape(p.heads[h][i], mean.heads[h][i])) return false;
    }
    return true;
  };
  for (std::size_t i = 1; i < packets.size(); ++i) {
    if (!structure_matches(packets[i]))
      throw ProtocolError("packet " + std::to_string(i) + " has a mismatched shape");
    auto it = packet_grad_refs(packets[i]);
    std::size_t t = 0;
    for_each_tensor(mean, [&](Tensor& dst) {
      axpy(1.0, *it[t++], dst);
    });
  }
  const double inv = 1.0 / static_cast<double>(packets.size());
  for_each_tensor(mean, [&](Tensor& t) { scale_inplace(t, inv); });
  return mean;
}

void server_apply(AdamState& central, ModelParams& params, const GradientPacket& mean_bundle) {
  auto refs = transmitted_params(params);
  auto grads = packet_grad_refs(mean_bundle);
  if (refs.size() != grads.size())
    throw ProtocolError("aggregated bundle does not match the model parameter layout");
  adam_step(central, refs, grads);
}

ServerState init_server(const ExperimentConfig& cfg, const MethodTraits& traits) {
  ServerState st;
  ArchConfig arch = cfg.arch;
  arch.num_heads = resolve_head_count(cfg, traits);
  arch.with_global_head = traits.global_head;
  arch.with_kway_head = traits.kway_head;
  st.params = build_model(arch);

  AdamConfig central_cfg;
  central_cfg.lr = cfg.training.central_lr;
  std::vector<Tensor> flat;
  for (Tensor* t : transmitted_params(st.params)) flat.push_back(*t);
  st.central_opt = make_adam(flat, central_cfg);

  using A = MethodTraits::Assign;
  if (traits.assign == A::som_embedding || traits.assign == A::som_gradient) {
    const auto [rows, cols] = som_grid(cfg.clustering, cfg.population.num_subpops);
    Rng som_rng(stream_seed(cfg.seed, "som-init"));
    std::size_t dim = cfg.arch.embed_dim;
    double init_scale = 1.0;
    if (traits.assign == A::som_gradient) {
      GradientPacket probe = empty_packet_like(st.params);
      dim = packet_entry_count(probe);
      init_scale = cfg.clustering.som_gradient_init_scale;
    }
    st.som = make_som(rows, cols, dim, cfg.rounds, init_scale, som_rng);
    st.som->lr0 = cfg.clustering.som_lr0;
  }
  if (traits.assign == A::prototype) {
    Rng proto_rng(stream_seed(cfg.seed, "prototype-init"));
    st.prototypes = make_prototypes(cfg.population.num_subpops, cfg.arch.embed_dim,
                                    cfg.clustering.triplet_margin, proto_rng);
  }
  if (cfg.method == Method::pfedme) {
    Rng ref_rng(stream_seed(cfg.seed, "pfedme-reference"));
    st.pfedme_reference = make_head(st.params, 2, ref_rng);
  }
  return st;
}

void init_users(std::vector<UserState>& users, const ServerState& server,
                const ExperimentConfig& cfg, const MethodTraits& traits) {
  AdamConfig local_cfg;
  local_cfg.lr = cfg.training.local_lr;
  using A = MethodTraits::Assign;
  for (UserState& u : users) {
    u.embedding.owner = u.user_id;
    u.embedding.vector = Tensor({cfg.arch.embed_dim});
    if (traits.personal_embeddings) {
      Rng rng(stream_seed(cfg.seed, "embed-init", u.user_id));
      for (double& v : u.embedding.vector.data) v = rng.uniform01();
    }
    u.embed_opt = make_adam({u.embedding.vector}, local_cfg);
    if (traits.local_heads) {
      Rng rng(stream_seed(cfg.seed, "local-head-init", u.user_id));
      u.local_head = make_head(server.params, 2, rng);
      u.local_head_opt = make_adam(u.local_head->params, local_cfg);
    }
    switch (traits.assign) {
      case A::head_zero:
      case A::som_gradient:
        u.assigned_head = 0;
        break;
      case A::own_local:
        u.assigned_head = static_cast<std::size_t>(u.user_id);
        break;
      case A::som_embedding:
        u.assigned_head = som_bmu(*server.som, u.embedding.vector);
        break;
      case A::prototype:
        u.assigned_head = prototype_assign(u.embedding.vector, *server.prototypes);
        break;
      case A::ground_truth:
        u.assigned_head = u.true_subpop;
        break;
    }
  }
}

namespace {

// Moves head weights (and their central-optimizer moments) to follow the
// clusters found by the latest memberships; unmatched nodes restart fresh.
void apply_head_remap(ServerState& server, const std::vector<std::size_t>& new_members,
                      const ExperimentConfig& cfg, std::uint64_t round) {
  const std::size_t n = server.params.subpop_heads.size();
  if (n == 0) return;
  if (server.members_at_last_remap.size() != new_members.size()) {
    server.members_at_last_remap = new_members;  // first reference point
    return;
  }
  const auto assignment = remap_heads(server.members_at_last_remap, new_members, n);
  const auto offsets = head_block_offsets(server.params);
  const std::size_t per_head = server.params.subpop_heads.empty()
                                   ? 0
                                   : server.params.subpop_heads[0].params.size();

  std::vector<Network> old_heads = server.params.subpop_heads;
  std::vector<Tensor> old_m = server.central_opt.m;
  std::vector<Tensor> old_v = server.central_opt.v;

  for (std::size_t j = 0; j < n; ++j) {
    if (assignment[j]) {
      const std::size_t src = *assignment[j];
      server.params.subpop_heads[j] = old_heads[src];
      for (std::size_t t = 0; t < per_head; ++t) {
        server.central_opt.m[offsets[j] + t] = old_m[offsets[src] + t];
        server.central_opt.v[offsets[j] + t] = old_v[offsets[src] + t];
      }
    } else {
      Rng rng(stream_seed(cfg.seed, "remap-fresh-head", round, j));
      server.params.subpop_heads[j] = make_head(server.params, 2, rng);
      for (std::size_t t = 0; t < per_head; ++t) {
        server.central_opt.m[offsets[j] + t] = Tensor(old_m[offsets[j] + t].shape);
        server.central_opt.v[offsets[j] + t] = Tensor(old_v[offsets[j] + t].shape);
      }
    }
  }
  server.members_at_last_remap = new_members;
}

std::vector<std::size_t> sample_active_users(const ExperimentConfig& cfg, std::size_t total,
                                             std::uint64_t round) {
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  if (cfg.participation >= 1.0) return idx;
  const std::size_t n =
      std::max<std::size_t>(1, static_cast<std::size_t>(cfg.participation * total));
  Rng rng(stream_seed(cfg.seed, "participation", round));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.uniform_index(total - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

RoundStats run_federated_round(ServerState& server, std::vector<UserState>& users,
                               const ExperimentConfig& cfg, const MethodTraits& traits,
                               std::uint64_t round) {
  const auto active = sample_active_users(cfg, users.size(), round);
  std::vector<ClientResult> results(active.size());

  auto worker = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      results[i] = client_round(users[active[i]], server, cfg, traits, round);
  };
  const std::size_t nthreads = std::min<std::size_t>(std::max<std::size_t>(cfg.parallel_clients, 1),
                                                     active.size());
  if (nthreads <= 1) {
    worker(0, active.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (active.size() + nthreads - 1) / nthreads;
    for (std::size_t t = 0; t < nthreads; ++t) {
      const std::size_t b = t * chunk, e = std::min(active.size(), b + chunk);
      if (b < e) pool.emplace_back(worker, b, e);
    }
    for (std::thread& th : pool) th.join();
  }

  using A = MethodTraits::Assign;
  if (traits.assign == A::som_embedding) {
    std::vector<SOMClientReport> reports;
    reports.reserve(results.size());
    for (ClientResult& r : results) reports.push_back(std::move(*r.som_report));
    som_server_round(*server.som, reports);
  } else if (traits.assign == A::som_gradient) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < results.size(); ++i)
      if (results[i].som_score > results[best].som_score) best = i;
    som_apply_report(*server.som,
                     som_client_step(*server.som, *results[best].som_gradient_input));
    for (std::size_t i = 0; i < active.size(); ++i)
      users[active[i]].assigned_head = som_bmu(*server.som, *results[i].som_gradient_input);
  } else if (traits.assign == A::prototype) {
    std::vector<std::vector<const Tensor*>> groups(server.prototypes->prototypes.size());
    for (std::size_t i = 0; i < active.size(); ++i)
      groups[results[i].assigned_head].push_back(&results[i].proto_embed_grad);
    update_prototypes(*server.prototypes, groups, cfg.training.local_lr);
  }

  if ((traits.assign == A::som_embedding || traits.assign == A::som_gradient) &&
      cfg.clustering.remap_interval > 0 && (round + 1) % cfg.clustering.remap_interval == 0) {
    std::vector<std::size_t> members(users.size());
    for (std::size_t i = 0; i < users.size(); ++i) {
      members[i] = traits.assign == A::som_embedding
                       ? som_bmu(*server.som, users[i].embedding.vector)
                       : users[i].assigned_head;
    }
    apply_head_remap(server, members, cfg, round);
  }

  RoundStats stats;
  std::vector<GradientPacket> packets;
  packets.reserve(results.size());
  for (ClientResult& r : results) {
    stats.mean_train_loss += r.train_loss;
    packets.push_back(std::move(r.packet));
  }
  stats.mean_train_loss /= static_cast<double>(results.size());

  GradientPacket bundle = server_aggregate(packets);
  if (cfg.dp.enabled) {
    stats.packets_noised += cfg.dp.noise_multiplier > 0.0 ? packets.size() : 0;
    stats.clip_events += packets.size();  // clipping is unconditional under dp
    if (cfg.dp.server_side) {
      clip_packet(bundle, cfg.dp.clip_norm);
      Rng rng(stream_seed(cfg.seed, "dp-server", round));
      gaussianize(bundle, cfg.dp.noise_multiplier, cfg.dp.clip_norm, rng);
    }
  }
  server_apply(server.central_opt, server.params, bundle);
  return stats;
}

std::vector<StyledSample> load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.type == "mnist")
    return load_mnist_idx(cfg.dataset.images_path, cfg.dataset.labels_path);
  return gen_interpolated_dataset(cfg.dataset.synth);
}

RunReport run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.dp.validate();
  const MethodTraits traits = method_behaviors(cfg.method);

  std::vector<StyledSample> pool;
  std::vector<UserState> users;
  ServerState server;
  std::uint64_t start_round = 0;
  try {
    pool = load_dataset(cfg);
    users = build_population(pool, cfg.population);
    server = init_server(cfg, traits);
    init_users(users, server, cfg, traits);
    if (traits.assign == MethodTraits::Assign::som_embedding ||
        traits.assign == MethodTraits::Assign::som_gradient) {
      server.members_at_last_remap.resize(users.size());
      for (std::size_t i = 0; i < users.size(); ++i)
        server.members_at_last_remap[i] = users[i].assigned_head;
    }
    if (!cfg.checkpoint.resume_from.empty()) {
      load_checkpoint(cfg.checkpoint.resume_from, server, users);
      start_round = server.round;
    }
  } catch (const std::exception& e) {
    throw ConfigError("experiment setup failed: " + std::string(e.what()));
  }

  const PredictHead mode = traits.local_heads ? PredictHead::local : PredictHead::assigned_subpop;
  const std::size_t num_clusters =
      traits.local_heads ? users.size() : server.params.subpop_heads.size();

  RunReport report;
  report.config_echo = config_to_json(cfg);
  report.master_seed = cfg.seed;
  report.emit_timing = cfg.emit_timing;

  auto evaluate = [&](std::size_t round) {
    EvalSnapshot snap = evaluate_population(users, server.params, mode, cfg.population.num_subpops);
    snap.round = round;
    snap.assignment_accuracy =
        matched_diagonal_fraction(cluster_confusion(users, cfg.population.num_subpops, num_clusters));
    report.history.push_back(snap);
  };

  if (start_round == 0) evaluate(0);

  for (std::uint64_t r = start_round; r < cfg.rounds; ++r) {
    RoundStats stats;
    try {
      stats = run_federated_round(server, users, cfg, traits, r);
    } catch (const std::exception& e) {
      throw ProtocolError("round " + std::to_string(r) + ": " + e.what());
    }
    server.round = r + 1;
    report.clip_events += stats.clip_events;
    report.packets_noised += stats.packets_noised;
    if (!cfg.checkpoint.save_path.empty() && cfg.checkpoint.every > 0 &&
        (r + 1) % cfg.checkpoint.every == 0)
      save_checkpoint(cfg.checkpoint.save_path, cfg.checkpoint.format, server, users);
    if (cfg.eval_every > 0 && (r + 1) % cfg.eval_every == 0 && r + 1 < cfg.rounds) evaluate(r + 1);
  }

  if (report.history.empty() || report.history.back().round != cfg.rounds) evaluate(cfg.rounds);
  report.final_eval = report.history.back();
  report.rounds_run = cfg.rounds - start_round;
  report.confusion = cluster_confusion(users, cfg.population.num_subpops, num_clusters);

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    if (cfg.export_embeddings) {
      report.embedding_export = cfg.out_dir + "/embeddings.csv";
      export_embeddings(users, report.embedding_export);
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream f(cfg.out_dir + "/report.json");
    f << report.to_json().dump(2) << "\n";
    if (!f.good()) throw DataError("cannot write report to " + cfg.out_dir);
  } else {
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return report;
}

}  // namespace fedsim
