#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/model.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// One image tagged with its user-independent style class (digit identity or
// synthetic style index).
struct StyledSample {
  Tensor input;       // HxW, pixels in [0,1]
  std::size_t style = 0;
};

struct LabeledSample {
  StyledSample sample;
  int label = 0;  // 1 when the owning user prefers this style
};

struct UserDataset {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};

struct PopulationSpec {
  std::size_t num_subpops = 10;       // K
  std::vector<double> proportions;    // K entries summing to 1
  std::size_t total_users = 300;
  std::size_t train_per_user = 20;    // split evenly between labels
  std::size_t test_per_user = 10;
  std::uint64_t seed = 0;
};

// Client-local state for one simulated user. The embedding, local head and
// their optimizer states never leave this struct.
struct UserState {
  std::uint64_t user_id = 0;
  std::size_t true_subpop = 0;
  PersonalEmbedding embedding;
  UserDataset data;
  AdamState embed_opt;
  std::size_t assigned_head = 0;
  std::optional<Network> local_head;
  AdamState local_head_opt;
};

// Reads the canonical big-endian IDX pair (magic 0x00000803 images,
// 0x00000801 labels). Pixels are scaled by 1/255.
std::vector<StyledSample> load_mnist_idx(const std::string& images_path,
                                         const std::string& labels_path);

// Serializes samples back into an IDX pair; inverse of load_mnist_idx for
// pixel values quantized to 1/255 steps.
void write_idx_files(const std::vector<StyledSample>& samples, const std::string& images_path,
                     const std::string& labels_path);

struct SyntheticSpec {
  std::size_t n_base_styles = 8;
  std::size_t num_styles = 20;       // K >= n_base_styles
  std::size_t samples_per_style = 100;
  double noise_scale = 0.05;
  std::size_t image_side = 28;
  std::uint64_t seed = 0;
};

// Styles are convex combinations of random base prototypes; adjacent styles
// share bases so neighbouring clusters overlap. Samples are prototype plus
// Gaussian pixel noise, clipped to [0,1].
std::vector<StyledSample> gen_interpolated_dataset(const SyntheticSpec& spec);

// Per-sub-population user counts under deterministic largest-remainder
// rounding of the configured proportions.
std::vector<std::size_t> subpop_user_counts(const PopulationSpec& spec);

// Builds users with 50/50 positive/negative splits. Positives are drawn from
// the user's style, negatives uniformly from the others; train and test never
// share a pool sample within a user. Embeddings and optimizers are
// initialized later by the federation setup.
std::vector<UserState> build_population(const std::vector<StyledSample>& pool,
                                        const PopulationSpec& spec);

inline const std::vector<LabeledSample>& holdout_eval_set(const UserState& user) {
  return user.data.test;
}

}  // namespace fedsim
