// Built-in property suite behind `fedsim verify`: gradient checks against
// central finite differences plus the structural identities the simulator
// depends on. Prints one line per check and returns nonzero on any failure.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "fedsim/federation.hpp"

namespace fedsim {

namespace {

int g_failures = 0;

void check(const std::string& name, bool ok) {
  std::printf("[%s] %s\n", ok ? "ok" : "FAIL", name.c_str());
  if (!ok) g_failures += 1;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

double fd_worst(Network& net, const Tensor& input, Rng& rng) {
  Tape tape;
  Tensor out = forward(net, input, &tape);
  Tensor proj(out.shape);
  for (double& v : proj.data) v = rng.uniform(-1.0, 1.0);
  const auto loss = [&](const Tensor& in) { return dot(forward(net, in, nullptr), proj); };
  const auto analytic = backward(net, tape, proj);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t t = 0; t < net.params.size(); ++t)
    for (std::size_t i = 0; i < net.params[t].numel(); ++i) {
      const double saved = net.params[t].data[i];
      net.params[t].data[i] = saved + h;
      const double up = loss(input);
      net.params[t].data[i] = saved - h;
      const double dn = loss(input);
      net.params[t].data[i] = saved;
      worst = std::max(worst, rel_err(analytic.param_grads[t].data[i], (up - dn) / (2 * h)));
    }
  Tensor in = input;
  for (std::size_t i = 0; i < in.numel(); ++i) {
    const double saved = in.data[i];
    in.data[i] = saved + h;
    const double up = loss(in);
    in.data[i] = saved - h;
    const double dn = loss(in);
    in.data[i] = saved;
    worst = std::max(worst, rel_err(analytic.input_grad.data[i], (up - dn) / (2 * h)));
  }
  return worst;
}

void gradient_checks() {
  Rng rng(2024);
  double worst = 0.0;
  const auto probe = [&](std::vector<LayerSpec> layers, std::vector<std::size_t> shape,
                         bool keep_off_zero, int reps) {
    for (int r = 0; r < reps; ++r) {
      Network net = make_network(layers, rng);
      Tensor x(shape);
      for (double& v : x.data) {
        v = rng.uniform(-1.0, 1.0);
        if (keep_off_zero && std::abs(v) < 0.1) v += v < 0 ? -0.1 : 0.1;
      }
      worst = std::max(worst, fd_worst(net, x, rng));
    }
  };
  probe({LayerSpec::Dense(6, 4)}, {6}, false, 5);
  probe({LayerSpec::Conv2d(2, 2, 3, 2, 1)}, {2, 5, 5}, false, 4);
  probe({LayerSpec::AvgPool2d(2, 2)}, {1, 4, 4}, false, 3);
  probe({LayerSpec::LayerNorm({5})}, {5}, false, 4);
  probe({LayerSpec::Conv2d(2, 2, 3, 2, 1), LayerSpec::LayerNorm({2, 3, 3}), LayerSpec::Relu(),
         LayerSpec::Flatten(), LayerSpec::Dense(18, 3)},
        {2, 6, 6}, true, 3);
  check("layer gradients match central finite differences (< 1e-4), worst " +
            std::to_string(worst),
        worst < 1e-4);

  // full model embedding path
  ArchConfig cfg;
  cfg.preset = "small-mlp";
  cfg.image_side = 4;
  cfg.embed_dim = 4;
  cfg.mlp_feature_dim = 4;
  cfg.num_styles = 3;
  cfg.num_heads = 3;
  cfg.seed = 9;
  ModelParams mp = build_model(cfg);
  Tensor img({4, 4});
  for (double& v : img.data) v = rng.uniform01();
  Tensor eps({4});
  for (double& v : eps.data) v = rng.uniform01();
  LossSpec spec;
  spec.pref_label = 1;
  spec.style_label = 2;
  ForwardBundle bundle = model_forward(mp, eps, img, 0);
  ModelGrads grads = model_backward(mp, bundle, spec);
  double worst_e = 0.0;
  for (std::size_t i = 0; i < eps.numel(); ++i) {
    const double h = 1e-5, saved = eps.data[i];
    const auto nu_loss = [&](double v) {
      Tensor e = eps;
      e.data[i] = v;
      ForwardBundle b = model_forward(mp, e, img, 0);
      return cross_entropy(b.global_logits, 1).loss;
    };
    const double fd = (nu_loss(saved + h) - nu_loss(saved - h)) / (2 * h);
    worst_e = std::max(worst_e, rel_err(grads.embedding.data[i], fd));
  }
  check("embedding gradient matches finite differences through both entry points",
        worst_e < 1e-4);
}

void clustering_checks() {
  Rng rng(7);
  bool nn_ok = true;
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 2 + rng.uniform_index(6), d = 1 + rng.uniform_index(5);
    std::vector<Tensor> pool(n);
    for (Tensor& t : pool) {
      t = Tensor({d});
      for (double& v : t.data) v = rng.uniform(-2, 2);
    }
    Tensor q({d});
    for (double& v : q.data) v = rng.uniform(-2, 2);
    std::size_t best = 0;
    double bd = squared_distance(pool[0], q);
    for (std::size_t i = 1; i < n; ++i) {
      const double dd = squared_distance(pool[i], q);
      if (dd < bd) {
        bd = dd;
        best = i;
      }
    }
    SOMap som;
    som.rows = 1;
    som.cols = n;
    som.nodes = pool;
    PrototypeSet ps;
    ps.prototypes = pool;
    if (som_bmu(som, q) != best || prototype_assign(q, ps) != best) nn_ok = false;
  }
  check("nearest-neighbor ops agree with brute force on random instances", nn_ok);

  Tensor e({2}), p({2}), n2({2});
  p.data = {1.0, 0.0};
  n2.data = {0.0, 1.0};
  Tensor moved = triplet_update(e, p, n2, 1.0, 0.1);
  check("triplet step equals lr*2*(pos-neg) exactly",
        moved.data[0] == 0.2 && moved.data[1] == -0.2);
}

void privacy_checks() {
  Rng rng(11);
  bool norms_ok = true;
  for (int rep = 0; rep < 100; ++rep) {
    GradientPacket p;
    p.encoder.push_back(Tensor({50}));
    for (double& v : p.encoder[0].data) v = rng.uniform(-3, 3);
    clip_packet(p, 1.0);
    if (packet_l2_norm(p) > 1.0 + 1e-12) norms_ok = false;
  }
  check("clipped packet norms stay within the bound", norms_ok);

  GradientPacket noise;
  noise.encoder.push_back(Tensor({100000}));
  Rng nrng(17);
  gaussianize(noise, 0.5, 2.0, nrng);
  double mean = 0.0;
  for (double v : noise.encoder[0].data) mean += v;
  mean /= 1e5;
  double var = 0.0;
  for (double v : noise.encoder[0].data) var += (v - mean) * (v - mean);
  var /= 1e5 - 1;
  check("noise variance within 2% of (sigma*C)^2", std::abs(var - 1.0) < 0.02);
}

void federation_checks() {
  GradientPacket a, b;
  a.encoder.push_back(Tensor({3}, 2.0));
  b.encoder.push_back(Tensor({3}, -2.0));
  GradientPacket mean = server_aggregate({a, b});
  bool cancel = true;
  for (double v : mean.encoder[0].data) cancel = cancel && v == 0.0;
  GradientPacket single = server_aggregate({a});
  check("aggregation cancellation and single-packet identities",
        cancel && single.encoder[0].data == a.encoder[0].data);

  // short federated-vs-centralized equivalence
  nlohmann::json j = {{"method", "fedembed-type"},
                      {"seed", 4},
                      {"rounds", 10},
                      {"eval_every", 0},
                      {"dataset",
                       {{"type", "synthetic"},
                        {"n_base_styles", 2},
                        {"num_styles", 2},
                        {"samples_per_style", 30},
                        {"noise_scale", 0.05},
                        {"image_side", 8}}},
                      {"population",
                       {{"num_subpops", 2}, {"proportions", "balanced"}, {"total_users", 2}}},
                      {"arch", {{"preset", "small-mlp"}, {"mlp_feature_dim", 4}}}};
  ExperimentConfig cfg = parse_config_json(j);
  const MethodTraits traits = method_behaviors(cfg.method);
  auto pool = load_dataset(cfg);
  auto users = build_population(pool, cfg.population);
  users.resize(1);
  ServerState fed = init_server(cfg, traits);
  init_users(users, fed, cfg, traits);
  ServerState central = init_server(cfg, traits);
  std::vector<UserState> cuser = users;

  for (std::uint64_t r = 0; r < 10; ++r) run_federated_round(fed, users, cfg, traits, r);
  for (std::uint64_t r = 0; r < 10; ++r) {
    GradientPacket g;
    g.encoder = zero_grads_like(central.params.encoder);
    for (const Network& h : central.params.subpop_heads) g.heads.push_back(zero_grads_like(h));
    g.global_head = zero_grads_like(*central.params.global_pref_head);
    g.kway_head = zero_grads_like(*central.params.kway_head);
    UserState& u = cuser[0];
    u.assigned_head = u.true_subpop;
    for (const LabeledSample& s : u.data.train) {
      ForwardBundle fb = model_forward(central.params, u.embedding.vector, s.sample.input,
                                       u.assigned_head);
      LossSpec spec;
      spec.pref_label = s.label;
      spec.style_label = static_cast<int>(s.sample.style);
      ModelGrads mg = model_backward(central.params, fb, spec);
      for (std::size_t t = 0; t < g.encoder.size(); ++t) axpy(1.0, mg.encoder[t], g.encoder[t]);
      for (std::size_t t = 0; t < mg.subpop_head.size(); ++t)
        axpy(1.0, mg.subpop_head[t], g.heads[u.assigned_head][t]);
      for (std::size_t t = 0; t < mg.global_head.size(); ++t)
        axpy(1.0, mg.global_head[t], g.global_head[t]);
      for (std::size_t t = 0; t < mg.kway_head.size(); ++t)
        axpy(1.0, mg.kway_head[t], g.kway_head[t]);
      adam_step(u.embed_opt, {&u.embedding.vector}, {&mg.embedding});
    }
    server_apply(central.central_opt, central.params, g);
  }
  bool equal = true;
  for (std::size_t t = 0; t < fed.params.encoder.params.size(); ++t)
    equal = equal && fed.params.encoder.params[t].data == central.params.encoder.params[t].data;
  equal = equal && users[0].embedding.vector.data == cuser[0].embedding.vector.data;
  check("one-client federation bit-equals centralized training", equal);

  ExperimentConfig det = cfg;
  det.population.total_users = 4;
  det.rounds = 3;
  det.emit_timing = false;
  nlohmann::json echo = config_to_json(det);
  ExperimentConfig det2 = parse_config_json(echo);
  det2.emit_timing = false;
  const std::string r1 = run_experiment(det).to_json().dump();
  const std::string r2 = run_experiment(det2).to_json().dump();
  check("replayed runs emit byte-identical reports", r1 == r2);
}

}  // namespace

int run_verify_suite() {
  gradient_checks();
  clustering_checks();
  privacy_checks();
  federation_checks();
  std::printf(g_failures == 0 ? "verify: all checks passed\n"
                              : "verify: %d check(s) FAILED\n",
              g_failures);
  return g_failures == 0 ? 0 : 1;
}

}  // namespace fedsim
