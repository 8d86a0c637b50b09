#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "fedsim/clustering.hpp"
#include "fedsim/errors.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

Tensor vec(std::initializer_list<double> vals) {
  Tensor t({vals.size()});
  std::copy(vals.begin(), vals.end(), t.data.begin());
  return t;
}

SOMap fixed_som(std::vector<Tensor> nodes, std::size_t rows, std::size_t cols) {
  SOMap som;
  som.rows = rows;
  som.cols = cols;
  som.nodes = std::move(nodes);
  som.lr0 = 0.5;
  som.radius0 = 1.0;
  som.tau = 100.0;
  return som;
}

}  // namespace

TEST_SUITE_BEGIN("clustering");

TEST_CASE("bmu picks the nearest node with low-index ties") {
  SOMap som = fixed_som({vec({0, 0}), vec({10, 10})}, 1, 2);
  CHECK(som_bmu(som, vec({1, 1})) == 0);

  // equidistant between nodes 2 and 5 of a six-node map
  SOMap tie = fixed_som(
      {vec({9, 9}), vec({9, 9}), vec({1, 0}), vec({9, 9}), vec({9, 9}), vec({-1, 0})}, 2, 3);
  CHECK(som_bmu(tie, vec({0, 0})) == 2);
}

TEST_CASE("bmu and prototype assignment agree with a brute-force scan") {
  Rng rng(101);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 2 + rng.uniform_index(8);
    const std::size_t d = 1 + rng.uniform_index(6);
    std::vector<Tensor> pool(n);
    for (Tensor& t : pool) {
      t = Tensor({d});
      for (double& v : t.data) v = rng.uniform(-3.0, 3.0);
    }
    Tensor q({d});
    for (double& v : q.data) v = rng.uniform(-3.0, 3.0);

    const std::size_t expect = oracles::brute_force_nearest(pool, q);
    SOMap som = fixed_som(pool, 1, n);
    CHECK(som_bmu(som, q) == expect);
    PrototypeSet ps;
    ps.prototypes = pool;
    CHECK(prototype_assign(q, ps) == expect);
  }
}

TEST_CASE("frozen map produces zero deltas") {
  SOMap som = fixed_som({vec({0, 0}), vec({5, 5})}, 1, 2);
  som.lr0 = 0.0;
  auto rep = som_client_step(som, vec({1, 1}));
  for (const Tensor& d : rep.deltas)
    for (double v : d.data) CHECK(v == 0.0);
}

TEST_CASE("single node with unit rate moves onto the input") {
  SOMap som = fixed_som({vec({2, 2})}, 1, 1);
  som.lr0 = 1.0;
  auto rep = som_client_step(som, vec({7, -1}));
  som_apply_report(som, rep);
  CHECK(som.nodes[0].data[0] == doctest::Approx(7.0));
  CHECK(som.nodes[0].data[1] == doctest::Approx(-1.0));
  CHECK(som.iteration == 1);
}

TEST_CASE("an input sitting on a node scores zero and leaves it in place") {
  SOMap som = fixed_som({vec({3, 4}), vec({0, 0})}, 1, 2);
  auto rep = som_client_step(som, vec({3, 4}));
  CHECK(rep.score == 0.0);
  for (double v : rep.deltas[0].data) CHECK(v == 0.0);
}

TEST_CASE("server round applies only the best-scoring report") {
  SOMap som = fixed_som({vec({0, 0})}, 1, 1);
  som.lr0 = 1.0;
  auto good = som_client_step(som, vec({1, 0}));   // score -1
  auto bad = som_client_step(som, vec({3, 0}));    // score -9
  REQUIRE(good.score == doctest::Approx(-1.0));
  REQUIRE(bad.score == doctest::Approx(-9.0));
  som_server_round(som, {bad, good});
  CHECK(som.nodes[0].data[0] == doctest::Approx(1.0));

  SOMap single = fixed_som({vec({0, 0})}, 1, 1);
  single.lr0 = 1.0;
  auto only = som_client_step(single, vec({2, 2}));
  som_server_round(single, {only});
  CHECK(single.nodes[0].data[0] == doctest::Approx(2.0));

  CHECK_THROWS_AS(som_server_round(som, {}), UsageError);
}

TEST_CASE("score ties go to the earliest report") {
  SOMap som = fixed_som({vec({0, 0})}, 1, 1);
  som.lr0 = 1.0;
  auto a = som_client_step(som, vec({1, 0}));
  auto b = som_client_step(som, vec({-1, 0}));
  REQUIRE(a.score == b.score);
  som_server_round(som, {a, b});
  CHECK(som.nodes[0].data[0] == doctest::Approx(1.0));
}

TEST_CASE("best-client rounds reach high purity on separated clusters") {
  // three 6-sigma-separated gaussian clusters in 2d
  const double sigma = 0.5;
  const std::vector<Tensor> centers = {vec({0, 0}), vec({3, 0}), vec({0, 3})};
  Rng rng(55);
  std::vector<Tensor> points;
  std::vector<std::size_t> truth;
  for (std::size_t c = 0; c < 3; ++c)
    for (int i = 0; i < 20; ++i) {
      Tensor p({2});
      p.data[0] = centers[c].data[0] + sigma * rng.normal();
      p.data[1] = centers[c].data[1] + sigma * rng.normal();
      points.push_back(p);
      truth.push_back(c);
    }

  // A small active subset per round keeps the winner rotating across
  // clusters; with every client reporting, the closest one wins every round
  // and the other clusters never contribute.
  Rng init(7);
  Rng active(13);
  SOMap som = make_som(1, 3, 2, 200, 3.0, init);
  for (int round = 0; round < 200; ++round) {
    std::vector<SOMClientReport> reports;
    for (int s = 0; s < 2; ++s)
      reports.push_back(som_client_step(som, points[active.uniform_index(points.size())]));
    som_server_round(som, reports);
  }

  // purity: dominant true cluster per node
  std::vector<std::vector<std::size_t>> counts(3, std::vector<std::size_t>(3, 0));
  for (std::size_t i = 0; i < points.size(); ++i)
    counts[som_bmu(som, points[i])][truth[i]] += 1;
  std::size_t pure = 0;
  for (const auto& row : counts) pure += *std::max_element(row.begin(), row.end());
  CHECK(static_cast<double>(pure) / static_cast<double>(points.size()) >= 0.95);
}

TEST_CASE("identical memberships keep every head") {
  std::vector<std::size_t> m = {0, 0, 1, 1, 2};
  auto a = remap_heads(m, m, 3);
  for (std::size_t j = 0; j < 3; ++j) {
    REQUIRE(a[j].has_value());
    CHECK(*a[j] == j);
  }
}

TEST_CASE("swapped clusters swap heads") {
  std::vector<std::size_t> before = {0, 0, 1, 1};
  std::vector<std::size_t> after = {1, 1, 0, 0};
  auto a = remap_heads(before, after, 2);
  CHECK(*a[0] == 1);
  CHECK(*a[1] == 0);
}

TEST_CASE("overlap matrix matches the exhaustive two-cluster matching") {
  // overlap [[5,1],[2,4]] -> {new0->old0, new1->old1}
  std::vector<std::size_t> old_m, new_m;
  auto add = [&](std::size_t o, std::size_t n, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      old_m.push_back(o);
      new_m.push_back(n);
    }
  };
  add(0, 0, 5);
  add(1, 0, 1);
  add(0, 1, 2);
  add(1, 1, 4);
  auto a = remap_heads(old_m, new_m, 2);
  // brute force over both matchings: identity scores 5+4, swap scores 1+2
  CHECK(*a[0] == 0);
  CHECK(*a[1] == 1);
}

TEST_CASE("remapping is a partial injection") {
  Rng rng(66);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t nodes = 2 + rng.uniform_index(5);
    const std::size_t users = 1 + rng.uniform_index(30);
    std::vector<std::size_t> old_m(users), new_m(users);
    for (std::size_t u = 0; u < users; ++u) {
      old_m[u] = rng.uniform_index(nodes);
      new_m[u] = rng.uniform_index(nodes);
    }
    auto a = remap_heads(old_m, new_m, nodes);
    std::vector<bool> used(nodes, false);
    for (const auto& m : a) {
      if (!m) continue;
      CHECK(!used[*m]);
      used[*m] = true;
    }
  }
}

TEST_CASE("triplet loss evaluates the margin form") {
  CHECK(triplet_loss(vec({0, 0}), vec({1, 0}), vec({0, 1}), 1.0) == doctest::Approx(1.0));
}

TEST_CASE("triplet update steps by lr times twice the prototype difference") {
  Tensor out = triplet_update(vec({0, 0}), vec({1, 0}), vec({0, 1}), 1.0, 0.1);
  CHECK(out.data[0] == doctest::Approx(0.2));
  CHECK(out.data[1] == doctest::Approx(-0.2));
}

TEST_CASE("degenerate triplet leaves the embedding unchanged") {
  Tensor p = vec({0.3, 0.7});
  Tensor out = triplet_update(vec({5, -5}), p, p, 1.0, 0.25);
  CHECK(out.data == std::vector<double>{5.0, -5.0});
}

TEST_CASE("the triplet step is independent of the embedding position") {
  Rng rng(9);
  Tensor p = vec({0.1, 0.9, 0.4});
  Tensor n = vec({0.8, 0.2, 0.3});
  for (int rep = 0; rep < 10; ++rep) {
    Tensor e({3});
    for (double& v : e.data) v = rng.uniform(-10.0, 10.0);
    Tensor moved = triplet_update(e, p, n, 1.0, 0.05);
    // exactly e + lr*2*(p - n), regardless of e
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(moved.data[i] == e.data[i] + 0.05 * 2.0 * (p.data[i] - n.data[i]));
  }
}

TEST_CASE("prototype assignment basics") {
  PrototypeSet ps;
  ps.prototypes = {vec({0, 0}), vec({5, 5})};
  CHECK(prototype_assign(vec({1, 1}), ps) == 0);
  CHECK(prototype_assign(vec({5, 5}), ps) == 1);
}

TEST_CASE("prototype updates average assigned gradients and skip silent ones") {
  PrototypeSet ps;
  ps.prototypes = {vec({1, 1}), vec({2, 2})};
  const Tensor g1 = vec({1, 0});
  const Tensor g2 = vec({-1, 0});

  // no reports: unchanged
  update_prototypes(ps, {{}, {}}, 0.5);
  CHECK(ps.prototypes[0].data == std::vector<double>{1.0, 1.0});

  // cancelling reports: unchanged
  update_prototypes(ps, {{&g1, &g2}, {}}, 0.5);
  CHECK(ps.prototypes[0].data == std::vector<double>{1.0, 1.0});
  CHECK(ps.prototypes[1].data == std::vector<double>{2.0, 2.0});

  // a real mean moves against the gradient by lr
  const Tensor g3 = vec({2, 0});
  update_prototypes(ps, {{}, {&g1, &g3}}, 0.5);
  CHECK(ps.prototypes[1].data[0] == doctest::Approx(2.0 - 0.5 * 1.5));
  CHECK(ps.prototypes[1].data[1] == doctest::Approx(2.0));
}

TEST_SUITE_END();
