#include "doctest.h"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedsim/data.hpp"
#include "fedsim/errors.hpp"

using namespace fedsim;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void push_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(x >> 24);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back(x & 0xff);
}

// Two 2x2 images with labels 1 and 0.
std::pair<std::string, std::string> tiny_idx_fixture() {
  std::vector<std::uint8_t> img;
  push_be32(img, 0x00000803);
  push_be32(img, 2);
  push_be32(img, 2);
  push_be32(img, 2);
  img.insert(img.end(), {0, 51, 102, 255, 255, 204, 153, 0});
  std::vector<std::uint8_t> lab;
  push_be32(lab, 0x00000801);
  push_be32(lab, 2);
  lab.insert(lab.end(), {1, 0});
  const auto ip = temp_path("fedsim_test_images.idx");
  const auto lp = temp_path("fedsim_test_labels.idx");
  write_bytes(ip, img);
  write_bytes(lp, lab);
  return {ip, lp};
}

PopulationSpec basic_spec(std::size_t k, std::size_t users, std::uint64_t seed = 1) {
  PopulationSpec spec;
  spec.num_subpops = k;
  spec.proportions.assign(k, 1.0 / static_cast<double>(k));
  spec.total_users = users;
  spec.seed = seed;
  return spec;
}

std::vector<StyledSample> toy_pool(std::size_t styles, std::size_t per_style,
                                   std::size_t side = 2) {
  SyntheticSpec s;
  s.n_base_styles = styles;
  s.num_styles = styles;
  s.samples_per_style = per_style;
  s.noise_scale = 0.02;
  s.image_side = side;
  s.seed = 77;
  return gen_interpolated_dataset(s);
}

}  // namespace

TEST_SUITE_BEGIN("data");

TEST_CASE("idx loader round-trips the canonical format") {
  const auto [ip, lp] = tiny_idx_fixture();
  auto samples = load_mnist_idx(ip, lp);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].input.shape == std::vector<std::size_t>{2, 2});
  // first label byte after the 8-byte label header
  CHECK(samples[0].style == 1);
  CHECK(samples[1].style == 0);
  CHECK(samples[0].input.data[0] == doctest::Approx(0.0));
  CHECK(samples[0].input.data[1] == doctest::Approx(51.0 / 255.0));
  CHECK(samples[0].input.data[3] == doctest::Approx(1.0));
}

TEST_CASE("labels file passed as images is rejected") {
  const auto [ip, lp] = tiny_idx_fixture();
  CHECK_THROWS_WITH_AS(load_mnist_idx(lp, ip), doctest::Contains("magic"), DataError);
}

TEST_CASE("truncated images report the byte offset") {
  const auto [ip, lp] = tiny_idx_fixture();
  std::vector<std::uint8_t> img;
  push_be32(img, 0x00000803);
  push_be32(img, 2);
  push_be32(img, 2);
  push_be32(img, 2);
  img.insert(img.end(), {0, 51, 102, 255, 9});  // second image missing
  const auto bad = temp_path("fedsim_test_truncated.idx");
  write_bytes(bad, img);
  CHECK_THROWS_WITH_AS(load_mnist_idx(bad, lp), doctest::Contains("offset 20"), DataError);
}

TEST_CASE("idx writer inverts the loader for quantized pixels") {
  auto pool = toy_pool(3, 4, 3);
  const auto ip = temp_path("fedsim_test_rt_images.idx");
  const auto lp = temp_path("fedsim_test_rt_labels.idx");
  write_idx_files(pool, ip, lp);
  auto back = load_mnist_idx(ip, lp);
  REQUIRE(back.size() == pool.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].style == pool[i].style);
    for (std::size_t p = 0; p < back[i].input.numel(); ++p)
      CHECK(back[i].input.data[p] ==
            doctest::Approx(pool[i].input.data[p]).epsilon(0).scale(1).epsilon(0.004));
  }
}

TEST_CASE("zero noise makes every sample equal its style prototype") {
  SyntheticSpec s;
  s.n_base_styles = 2;
  s.num_styles = 2;
  s.samples_per_style = 3;
  s.noise_scale = 0.0;
  s.image_side = 4;
  s.seed = 5;
  auto pool = gen_interpolated_dataset(s);
  REQUIRE(pool.size() == 6);
  for (std::size_t i = 1; i < 3; ++i) CHECK(pool[i].input.data == pool[0].input.data);
  for (std::size_t i = 4; i < 6; ++i) CHECK(pool[i].input.data == pool[3].input.data);
  // K equal to the base count means styles are the pure prototypes
  CHECK(pool[0].input.data != pool[3].input.data);
}

TEST_CASE("twenty styles interpolate eight bases") {
  SyntheticSpec s;
  s.n_base_styles = 8;
  s.num_styles = 20;
  s.samples_per_style = 2;
  s.noise_scale = 0.0;
  s.image_side = 4;
  s.seed = 9;
  auto pool = gen_interpolated_dataset(s);
  CHECK(pool.size() == 40);
  std::set<std::size_t> styles;
  for (const auto& p : pool) styles.insert(p.style);
  CHECK(styles.size() == 20);
  // adjacent styles derived from the same base pair stay close
  const double d_adjacent = squared_distance(pool[0].input, pool[2].input);
  const double d_far = squared_distance(pool[0].input, pool[20].input);
  CHECK(d_adjacent < d_far);
}

TEST_CASE("balanced population splits users evenly") {
  auto counts = subpop_user_counts(basic_spec(10, 300));
  for (std::size_t c : counts) CHECK(c == 30);
}

TEST_CASE("imbalanced counts follow largest-remainder rounding") {
  PopulationSpec spec;
  spec.num_subpops = 10;
  spec.proportions = {0.25, 0.15, 0.10, 0.10, 0.10, 0.10, 0.05, 0.05, 0.05, 0.05};
  spec.total_users = 900;
  auto counts = subpop_user_counts(spec);
  CHECK(counts == std::vector<std::size_t>{225, 135, 90, 90, 90, 90, 45, 45, 45, 45});
}

TEST_CASE("proportions must sum to one") {
  PopulationSpec spec = basic_spec(2, 10);
  spec.proportions = {0.5, 0.4};
  CHECK_THROWS_AS(subpop_user_counts(spec), ConfigError);
}

TEST_CASE("population construction enforces split sizes and label rule") {
  auto pool = toy_pool(4, 40);
  PopulationSpec spec = basic_spec(4, 20);
  auto users = build_population(pool, spec);
  REQUIRE(users.size() == 20);
  for (const UserState& u : users) {
    CHECK(u.data.train.size() == 20);
    CHECK(u.data.test.size() == 10);
    std::size_t train_pos = 0, test_pos = 0;
    for (const auto& s : u.data.train) {
      CHECK((s.label == 1) == (s.sample.style == u.true_subpop));
      train_pos += s.label;
    }
    for (const auto& s : u.data.test) {
      CHECK((s.label == 1) == (s.sample.style == u.true_subpop));
      test_pos += s.label;
    }
    CHECK(train_pos == 10);
    CHECK(test_pos == 5);
  }
}

TEST_CASE("conflicting labels exist across sub-populations") {
  auto pool = toy_pool(3, 30);
  auto users = build_population(pool, basic_spec(3, 9));
  // find one sample carrying opposite labels for users of different groups
  bool conflict = false;
  for (const UserState& a : users)
    for (const UserState& b : users) {
      if (a.true_subpop == b.true_subpop) continue;
      for (const auto& sa : a.data.train)
        for (const auto& sb : b.data.train)
          if (sa.sample.style == sb.sample.style && sa.label != sb.label) conflict = true;
    }
  CHECK(conflict);
}

TEST_CASE("train and test never share a sample within a user") {
  auto pool = toy_pool(3, 30);
  auto users = build_population(pool, basic_spec(3, 9));
  for (const UserState& u : users) {
    for (const auto& tr : u.data.train)
      for (const auto& te : u.data.test) CHECK(tr.sample.input.data != te.sample.input.data);
  }
}

TEST_CASE("the holdout set is the untouched test split") {
  auto pool = toy_pool(2, 20);
  auto users = build_population(pool, basic_spec(2, 4));
  CHECK(&holdout_eval_set(users[0]) == &users[0].data.test);
  CHECK(holdout_eval_set(users[0]).size() == 10);
}

TEST_CASE("populations are reproducible from the seed") {
  auto pool = toy_pool(3, 30);
  auto a = build_population(pool, basic_spec(3, 9, 42));
  auto b = build_population(pool, basic_spec(3, 9, 42));
  auto c = build_population(pool, basic_spec(3, 9, 43));
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t s = 0; s < a[i].data.train.size(); ++s) {
      if (a[i].data.train[s].sample.input.data != b[i].data.train[s].sample.input.data)
        all_same = false;
      if (a[i].data.train[s].sample.input.data != c[i].data.train[s].sample.input.data)
        any_diff = true;
    }
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("a style without samples is a configuration error") {
  auto pool = toy_pool(2, 20);
  CHECK_THROWS_AS(build_population(pool, basic_spec(3, 9)), ConfigError);
}

TEST_SUITE_END();
