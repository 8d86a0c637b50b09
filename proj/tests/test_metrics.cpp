#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedsim/errors.hpp"
#include "fedsim/metrics.hpp"

using namespace fedsim;

namespace {

// A population whose "model" is irrelevant: predictions are produced by an
// oracle or a fixed rule fed straight into f1 computations.
std::vector<UserState> synthetic_users(std::size_t k, std::size_t per_subpop,
                                       std::size_t embed_dim) {
  std::vector<UserState> users;
  std::uint64_t uid = 0;
  for (std::size_t sub = 0; sub < k; ++sub) {
    for (std::size_t i = 0; i < per_subpop; ++i, ++uid) {
      UserState u;
      u.user_id = uid;
      u.true_subpop = sub;
      u.assigned_head = sub;
      u.embedding.vector = Tensor({embed_dim}, 0.25 * static_cast<double>(uid));
      users.push_back(std::move(u));
    }
  }
  return users;
}

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("f1 formula on the spec cases") {
  CHECK(f1_binary({1, 1, 0, 0}, {1, 1, 0, 0}) == 1.0);
  // TP=2, FP=1, FN=1 -> 2/3
  CHECK(f1_binary({1, 1, 1, 0, 0}, {1, 1, 0, 1, 0}) == doctest::Approx(2.0 / 3.0));
  // nothing positive anywhere
  CHECK(f1_binary({0, 0}, {0, 0}) == 0.0);
}

TEST_CASE("constant-positive predictor on a balanced split scores two thirds") {
  std::vector<int> preds(10, 1);
  std::vector<int> labels(10, 0);
  for (std::size_t i = 0; i < 5; ++i) labels[i] = 1;
  // TP=P, FP=N, FN=0 with P=N: 2P/(2P+N) = 2/3
  CHECK(f1_binary(preds, labels) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("coin-flip predictor lands near one half") {
  Rng rng(31);
  double total = 0.0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    std::vector<int> preds(10), labels(10);
    for (std::size_t i = 0; i < 10; ++i) {
      labels[i] = i < 5 ? 1 : 0;
      preds[i] = rng.uniform01() < 0.5 ? 1 : 0;
    }
    total += f1_binary(preds, labels);
  }
  CHECK(total / trials == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("confusion matrix counts users and keeps row sums") {
  auto users = synthetic_users(3, 4, 2);
  users[0].assigned_head = 2;  // one stray
  auto m = cluster_confusion(users, 3, 3);
  std::size_t total = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    std::size_t row = 0;
    for (std::size_t c = 0; c < 3; ++c) row += m[r][c];
    CHECK(row == 4);
    total += row;
  }
  CHECK(total == users.size());
  CHECK(m[0][2] == 1);
  CHECK(m[0][0] == 3);
}

TEST_CASE("collapsed assignment fills a single column") {
  auto users = synthetic_users(3, 4, 2);
  for (auto& u : users) u.assigned_head = 1;
  auto m = cluster_confusion(users, 3, 3);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(m[r][1] == 4);
    CHECK(m[r][0] == 0);
    CHECK(m[r][2] == 0);
  }
  CHECK(matched_diagonal_fraction(m) == doctest::Approx(4.0 / 12.0));
}

TEST_CASE("permutation-diagonal assignment matches perfectly") {
  auto users = synthetic_users(4, 5, 2);
  for (auto& u : users) u.assigned_head = (u.true_subpop + 1) % 4;  // pure relabeling
  auto m = cluster_confusion(users, 4, 4);
  CHECK(matched_diagonal_fraction(m) == 1.0);
}

TEST_CASE("embedding export writes the documented schema deterministically") {
  auto users = synthetic_users(2, 3, 4);
  const std::string path = temp_file("fedsim_embed_test.csv");
  export_embeddings(users, path);

  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "user_id,true_k,assigned,e_0,e_1,e_2,e_3");
  std::size_t rows = 0;
  std::string line;
  std::size_t commas = 0;
  while (std::getline(f, line)) {
    rows += 1;
    commas = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    CHECK(commas == 6);  // 7 columns
  }
  CHECK(rows == 6);

  // re-export without training in between: identical bytes
  const std::string path2 = temp_file("fedsim_embed_test2.csv");
  export_embeddings(users, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
}

TEST_CASE("export to an unwritable path surfaces the path") {
  auto users = synthetic_users(2, 1, 2);
  CHECK_THROWS_WITH_AS(export_embeddings(users, "/nonexistent-dir/x.csv"),
                       doctest::Contains("/nonexistent-dir/x.csv"), DataError);
}

TEST_CASE("macro f1 is invariant to sub-population order") {
  // two orderings of the same per-user scores
  std::vector<double> scores = {1.0, 0.0, 0.5, 0.5};
  // groups {0,1} and {2,3}: macro = (0.5 + 0.5)/2 = 0.5 either way
  const double macro_a = ((scores[0] + scores[1]) / 2 + (scores[2] + scores[3]) / 2) / 2;
  const double macro_b = ((scores[2] + scores[3]) / 2 + (scores[0] + scores[1]) / 2) / 2;
  CHECK(macro_a == macro_b);
}

TEST_CASE("report json isolates timing in one optional block") {
  RunReport r;
  r.config_echo = {{"method", "global"}};
  r.final_eval.macro_f1 = 0.5;
  r.emit_timing = false;
  auto j1 = r.to_json();
  CHECK(!j1.contains("timing"));
  r.emit_timing = true;
  r.wall_seconds = 12.5;
  auto j2 = r.to_json();
  CHECK(j2.contains("timing"));
  j2.erase("timing");
  CHECK(j1 == j2);
}

TEST_SUITE_END();
