#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/nn.hpp"

namespace fedsim {

// Architecture presets: "mnist-conv" (three conv blocks, 64-dim feature),
// "small-mlp" (flatten -> dense -> layernorm -> relu, for fast runs),
// "synthetic-conv" (lighter conv stack for the interpolated-style dataset).
struct ArchConfig {
  std::string preset = "small-mlp";
  std::size_t image_side = 28;
  std::size_t num_styles = 10;     // logit count of the k-way head
  std::size_t num_heads = 10;      // sub-population head count
  std::size_t embed_dim = 28;      // D_E; must equal image_side
  std::size_t mlp_feature_dim = 8; // small-mlp only
  bool relu_after_norm = true;
  bool with_global_head = true;    // binary head trained from all users
  bool with_kway_head = true;      // style classification head
  std::uint64_t seed = 0;
};

// The full parameter bundle shared through the federation: encoder, one binary
// head per sub-population, and the two optional global heads.
struct ModelParams {
  Network encoder;
  std::vector<Network> subpop_heads;
  std::optional<Network> global_pref_head;
  std::optional<Network> kway_head;
  std::size_t feature_dim = 0;
  std::size_t embed_dim = 0;
  std::size_t image_side = 0;
};

// Per-user embedding vector; lives on the client and is never transmitted.
struct PersonalEmbedding {
  Tensor vector;
  std::uint64_t owner = 0;
};

ModelParams build_model(const ArchConfig& cfg);

// Fresh single-head network matching the model's head geometry (used when a
// remapped cluster needs a new head, and for user-local heads).
Network make_head(const ModelParams& params, std::size_t out_logits, Rng& rng);

// Stack the image with diag(embedding) as a second channel. Requires the
// embedding length to equal the image side.
Tensor embed_input(const Tensor& image, const Tensor& embedding);

struct ForwardBundle {
  Tensor feature;      // flattened encoder output
  Tensor head_input;   // concat(feature, embedding)
  Tensor subpop_logits;
  Tensor global_logits;  // empty when the model has no global head
  Tensor kway_logits;    // empty when the model has no k-way head
  Tape encoder_tape, subpop_tape, global_tape, kway_tape;
  std::size_t head_index = 0;
  std::vector<std::size_t> encoder_out_shape;
};

// Forward through the encoder and the selected sub-population head plus any
// global heads. `head_override` substitutes a caller-owned head network
// (user-local heads); with an override, `head_index` is ignored.
ForwardBundle model_forward(const ModelParams& params, const Tensor& embedding,
                            const Tensor& image, std::size_t head_index,
                            const Network* head_override = nullptr);

// Tape-free forward for evaluation: logits of one head on one sample.
Tensor model_predict_logits(const ModelParams& params, const Tensor& embedding,
                            const Tensor& image, std::size_t head_index,
                            const Network* head_override = nullptr);

// What to differentiate and where the embedding gradient comes from.
struct LossSpec {
  int pref_label = -1;   // y for the sub-population / global heads; -1 disables
  int style_label = -1;  // m for the k-way head; -1 disables
  double kway_weight = 1.0;
  bool use_subpop = true;
  bool use_global = true;
  bool embed_from_global = true;  // embedding grad via the global head path
  bool embed_from_subpop = false; // optionally add the sub-population head path
};

struct ModelGrads {
  std::vector<Tensor> encoder;
  std::vector<Tensor> subpop_head;  // grads for the head used in the forward
  std::vector<Tensor> global_head;
  std::vector<Tensor> kway_head;
  Tensor embedding;              // D_E, summed over the configured sources
  Tensor embedding_global_path;  // D_E, the global-head component alone
  double subpop_loss = 0.0, global_loss = 0.0, kway_loss = 0.0;
};

// Accumulation sinks for batch loops; null members are skipped.
struct GradSink {
  std::vector<Tensor>* encoder = nullptr;
  std::vector<Tensor>* subpop_head = nullptr;
  std::vector<Tensor>* global_head = nullptr;
  std::vector<Tensor>* kway_head = nullptr;
};

// Per-sample outputs that cannot be batch-accumulated: the embedding steps
// after every sample.
struct SampleGrads {
  Tensor embedding;
  Tensor embedding_global_path;
  double subpop_loss = 0.0, global_loss = 0.0, kway_loss = 0.0;
};

// Backward pass over a bundle, adding parameter gradients into the sink.
// Encoder gradients accumulate the sub-population-head and k-way paths only;
// the global-head loss reaches the encoder solely to recover the embedding's
// input-channel gradient, and its parameter gradients there are discarded.
SampleGrads model_backward_accumulate(const ModelParams& params, const ForwardBundle& bundle,
                                      const LossSpec& spec, const GradSink& sink,
                                      const Network* head_override = nullptr);

// Convenience wrapper returning freshly allocated gradients.
ModelGrads model_backward(const ModelParams& params, const ForwardBundle& bundle,
                          const LossSpec& spec, const Network* head_override = nullptr);

}  // namespace fedsim
