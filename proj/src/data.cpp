#include "fedsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::ifstream& f, const std::string& path, std::size_t offset) {
  unsigned char buf[4];
  if (!f.read(reinterpret_cast<char*>(buf), 4))
    throw DataError(path + ": truncated at byte offset " + std::to_string(offset));
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

void write_be32(std::ofstream& f, std::uint32_t v) {
  unsigned char buf[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<char*>(buf), 4);
}

}  // namespace

std::vector<StyledSample> load_mnist_idx(const std::string& images_path,
                                         const std::string& labels_path) {
  std::ifstream imgf(images_path, std::ios::binary);
  if (!imgf) throw DataError("cannot open images file: " + images_path);
  const std::uint32_t img_magic = read_be32(imgf, images_path, 0);
  if (img_magic != kImagesMagic) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "0x%08x", img_magic);
    throw DataError(images_path + ": bad images magic " + hex + " at byte offset 0 (expected 0x00000803)");
  }
  const std::uint32_t count = read_be32(imgf, images_path, 4);
  const std::uint32_t rows = read_be32(imgf, images_path, 8);
  const std::uint32_t cols = read_be32(imgf, images_path, 12);

  std::ifstream labf(labels_path, std::ios::binary);
  if (!labf) throw DataError("cannot open labels file: " + labels_path);
  const std::uint32_t lab_magic = read_be32(labf, labels_path, 0);
  if (lab_magic != kLabelsMagic) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "0x%08x", lab_magic);
    throw DataError(labels_path + ": bad labels magic " + hex + " at byte offset 0 (expected 0x00000801)");
  }
  const std::uint32_t lab_count = read_be32(labf, labels_path, 4);
  if (lab_count != count)
    throw DataError("image/label count mismatch: " + std::to_string(count) + " images vs " +
                    std::to_string(lab_count) + " labels");

  std::vector<StyledSample> out;
  out.reserve(count);
  std::vector<unsigned char> pix(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t img_off = 16 + static_cast<std::size_t>(i) * pix.size();
    if (!imgf.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size())))
      throw DataError(images_path + ": truncated at byte offset " + std::to_string(img_off));
    char lab;
    if (!labf.read(&lab, 1))
      throw DataError(labels_path + ": truncated at byte offset " + std::to_string(8 + i));
    StyledSample s;
    s.input = Tensor({rows, cols});
    for (std::size_t p = 0; p < pix.size(); ++p) s.input.data[p] = pix[p] / 255.0;
    s.style = static_cast<unsigned char>(lab);
    out.push_back(std::move(s));
  }
  return out;
}

void write_idx_files(const std::vector<StyledSample>& samples, const std::string& images_path,
                     const std::string& labels_path) {
  if (samples.empty()) throw UsageError("write_idx_files: no samples");
  const std::size_t rows = samples[0].input.shape[0];
  const std::size_t cols = samples[0].input.shape[1];
  std::ofstream imgf(images_path, std::ios::binary);
  std::ofstream labf(labels_path, std::ios::binary);
  if (!imgf || !labf)
    throw DataError("cannot write IDX files: " + images_path + ", " + labels_path);
  write_be32(imgf, kImagesMagic);
  write_be32(imgf, static_cast<std::uint32_t>(samples.size()));
  write_be32(imgf, static_cast<std::uint32_t>(rows));
  write_be32(imgf, static_cast<std::uint32_t>(cols));
  write_be32(labf, kLabelsMagic);
  write_be32(labf, static_cast<std::uint32_t>(samples.size()));
  std::vector<unsigned char> pix(rows * cols);
  for (const StyledSample& s : samples) {
    for (std::size_t p = 0; p < pix.size(); ++p) {
      const double v = std::clamp(s.input.data[p], 0.0, 1.0);
      pix[p] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    imgf.write(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
    const char lab = static_cast<char>(s.style);
    labf.write(&lab, 1);
  }
}

std::vector<StyledSample> gen_interpolated_dataset(const SyntheticSpec& spec) {
  if (spec.n_base_styles < 2) throw ConfigError("synthetic dataset needs at least 2 base styles");
  if (spec.num_styles < spec.n_base_styles)
    throw ConfigError("num_styles must be >= n_base_styles");

  const std::size_t npix = spec.image_side * spec.image_side;
  Rng proto_rng(stream_seed(spec.seed, "synthetic-prototypes"));

  std::vector<Tensor> bases(spec.n_base_styles);
  for (Tensor& b : bases) {
    b = Tensor({spec.image_side, spec.image_side});
    for (double& v : b.data) v = proto_rng.uniform01();
  }

  // Style k blends two adjacent bases; blend weight sweeps from pure base to
  // midpoint so neighbouring styles overlap.
  std::vector<Tensor> prototypes(spec.num_styles);
  const std::size_t nb = spec.n_base_styles;
  for (std::size_t k = 0; k < spec.num_styles; ++k) {
    prototypes[k] = Tensor({spec.image_side, spec.image_side});
    if (spec.num_styles == nb) {
      prototypes[k].data = bases[k].data;
      continue;
    }
    const std::size_t per_base = (spec.num_styles + nb - 1) / nb;
    const std::size_t a = k / per_base;
    const std::size_t b = (a + 1) % nb;
    const double t = 0.5 * static_cast<double>(k % per_base) / static_cast<double>(per_base);
    for (std::size_t p = 0; p < npix; ++p)
      prototypes[k].data[p] = (1.0 - t) * bases[a].data[p] + t * bases[b].data[p];
  }

  std::vector<StyledSample> out;
  out.reserve(spec.num_styles * spec.samples_per_style);
  for (std::size_t k = 0; k < spec.num_styles; ++k) {
    Rng rng(stream_seed(spec.seed, "synthetic-samples", k));
    for (std::size_t i = 0; i < spec.samples_per_style; ++i) {
      StyledSample s;
      s.style = k;
      s.input = Tensor({spec.image_side, spec.image_side});
      for (std::size_t p = 0; p < npix; ++p) {
        const double v = prototypes[k].data[p] + spec.noise_scale * rng.normal();
        s.input.data[p] = std::clamp(v, 0.0, 1.0);
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<std::size_t> subpop_user_counts(const PopulationSpec& spec) {
  if (spec.proportions.size() != spec.num_subpops)
    throw ConfigError("population: expected " + std::to_string(spec.num_subpops) +
                      " proportions, got " + std::to_string(spec.proportions.size()));
  double total = 0.0;
  for (double p : spec.proportions) total += p;
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("population proportions sum to " + std::to_string(total) + ", expected 1");

  std::vector<std::size_t> counts(spec.num_subpops);
  std::vector<std::pair<double, std::size_t>> remainders;  // (-fraction, k) for stable sort
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < spec.num_subpops; ++k) {
    const double exact = spec.proportions[k] * static_cast<double>(spec.total_users);
    counts[k] = static_cast<std::size_t>(exact);
    assigned += counts[k];
    remainders.push_back({-(exact - static_cast<double>(counts[k])), k});
  }
  std::stable_sort(remainders.begin(), remainders.end());
  for (std::size_t i = 0; assigned < spec.total_users; ++i, ++assigned)
    counts[remainders[i % remainders.size()].second] += 1;

  for (std::size_t k = 0; k < spec.num_subpops; ++k)
    if (counts[k] == 0)
      throw ConfigError("sub-population " + std::to_string(k) +
                        " has zero users; raise total_users or its proportion");
  return counts;
}

std::vector<UserState> build_population(const std::vector<StyledSample>& pool,
                                        const PopulationSpec& spec) {
  if (spec.train_per_user % 2 != 0 || spec.test_per_user % 2 != 0)
    throw ConfigError("per-user sample counts must be even (balanced labels)");
  if (spec.num_subpops < 2)
    throw ConfigError("population needs at least 2 sub-populations (negatives come from other styles)");

  std::vector<std::vector<std::size_t>> by_style(spec.num_subpops);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].style < spec.num_subpops) by_style[pool[i].style].push_back(i);
  }
  const std::size_t pos_needed = (spec.train_per_user + spec.test_per_user) / 2;
  for (std::size_t k = 0; k < spec.num_subpops; ++k) {
    if (by_style[k].empty())
      throw ConfigError("style " + std::to_string(k) + " has no samples in the pool");
    if (by_style[k].size() < pos_needed)
      throw ConfigError("style " + std::to_string(k) + " has only " +
                        std::to_string(by_style[k].size()) + " samples; a user needs " +
                        std::to_string(pos_needed) + " distinct positives");
  }

  const auto counts = subpop_user_counts(spec);
  std::vector<UserState> users;
  users.reserve(spec.total_users);

  std::uint64_t uid = 0;
  for (std::size_t k = 0; k < spec.num_subpops; ++k) {
    for (std::size_t n = 0; n < counts[k]; ++n, ++uid) {
      Rng rng(stream_seed(spec.seed, "user-data", uid));
      UserState u;
      u.user_id = uid;
      u.true_subpop = k;

      // Positives with replacement across users, but distinct train/test pool
      // entries within this user.
      std::vector<std::size_t> pos_idx;
      while (pos_idx.size() < pos_needed) {
        const std::size_t cand = by_style[k][rng.uniform_index(by_style[k].size())];
        if (std::find(pos_idx.begin(), pos_idx.end(), cand) == pos_idx.end())
          pos_idx.push_back(cand);
      }
      const std::size_t neg_needed = pos_needed;
      std::vector<std::size_t> neg_idx;
      while (neg_idx.size() < neg_needed) {
        std::size_t style = rng.uniform_index(spec.num_subpops - 1);
        if (style >= k) style += 1;  // uniform over the K-1 other styles
        const std::size_t cand = by_style[style][rng.uniform_index(by_style[style].size())];
        if (std::find(neg_idx.begin(), neg_idx.end(), cand) == neg_idx.end())
          neg_idx.push_back(cand);
      }

      auto take = [&](std::vector<LabeledSample>& dst, std::size_t count, std::size_t& pi,
                      std::size_t& ni) {
        for (std::size_t i = 0; i < count / 2; ++i) {
          dst.push_back({pool[pos_idx[pi++]], 1});
          dst.push_back({pool[neg_idx[ni++]], 0});
        }
      };
      std::size_t pi = 0, ni = 0;
      take(u.data.train, spec.train_per_user, pi, ni);
      take(u.data.test, spec.test_per_user, pi, ni);
      users.push_back(std::move(u));
    }
  }
  return users;
}

}  // namespace fedsim
