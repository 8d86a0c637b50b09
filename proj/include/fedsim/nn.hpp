#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class LayerKind { dense, conv2d, avgpool2d, layernorm, relu, flatten };

// One layer of a feed-forward network. Only the fields for the given kind are
// meaningful; the factory helpers below keep construction readable.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;

  // dense
  std::size_t in_features = 0, out_features = 0;
  // conv2d
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t kernel_h = 0, kernel_w = 0;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  // avgpool2d (stride equals the pool window)
  std::size_t pool_h = 0, pool_w = 0;
  // layernorm
  std::vector<std::size_t> normalized_shape;

  static LayerSpec Dense(std::size_t in, std::size_t out);
  static LayerSpec Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                          std::size_t stride, std::size_t pad);
  static LayerSpec AvgPool2d(std::size_t pool_h, std::size_t pool_w);
  static LayerSpec LayerNorm(std::vector<std::size_t> normalized_shape);
  static LayerSpec Relu();
  static LayerSpec Flatten();
};

// Output shape of a layer applied to `in`; throws ConfigError naming
// `layer_index` when the shapes are incompatible.
std::vector<std::size_t> layer_output_shape(const LayerSpec& spec,
                                            const std::vector<std::size_t>& in,
                                            std::size_t layer_index);

// Parameter tensors a layer owns, in backward-stable order
// (dense/conv: weight, bias; layernorm: scale, shift; others: none).
std::vector<std::vector<std::size_t>> layer_param_shapes(const LayerSpec& spec);

struct Network {
  std::vector<LayerSpec> layers;
  std::vector<Tensor> params;             // flat, layer order
  std::vector<std::size_t> param_offset;  // params of layer i start at param_offset[i]
};

// Deterministic initialization: weights uniform(-s, s) with s = 1/sqrt(fan_in),
// biases zero, layernorm scale one / shift zero.
Network make_network(std::vector<LayerSpec> layers, Rng& rng);

std::size_t param_count(const Network& net);

// Zero gradients shaped like the network's parameters.
std::vector<Tensor> zero_grads_like(const Network& net);

// Activation record from one forward pass; consumed by backward. Input
// values are kept only for layer kinds whose backward reads them
// (dense/conv/relu); the rest record shapes alone.
struct Tape {
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::size_t>> input_shapes;
  std::vector<Tensor> ln_xhat;       // layernorm: normalized input, else empty
  std::vector<double> ln_inv_std;    // layernorm: 1/sqrt(var+eps)
  std::vector<std::size_t> out_shape;
  std::size_t layer_count = 0;
};

// Forward pass; records everything backward needs when `tape` is non-null.
Tensor forward(const Network& net, const Tensor& input, Tape* tape);

struct BackwardResult {
  std::vector<Tensor> param_grads;  // mirrors net.params
  Tensor input_grad;
};

// Reverse pass over a tape produced by forward() on the same network.
BackwardResult backward(const Network& net, const Tape& tape, const Tensor& grad_output);

// Allocation-free variant for hot loops: adds parameter gradients into
// `param_grads` (pre-sized, not zeroed here) and overwrites `input_grad`.
// Either sink may be null to skip that side of the computation entirely.
void backward_accumulate(const Network& net, const Tape& tape, const Tensor& grad_output,
                         std::vector<Tensor>* param_grads, Tensor* input_grad);

struct CrossEntropyResult {
  double loss = 0.0;
  Tensor grad_logits;
};

// Softmax cross-entropy with log-sum-exp stabilization.
CrossEntropyResult cross_entropy(const Tensor& logits, std::size_t label);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor> m;  // first moments, one per parameter tensor
  std::vector<Tensor> v;  // second moments
  std::uint64_t step = 0;
};

AdamState make_adam(const std::vector<Tensor>& params, const AdamConfig& cfg);

// One bias-corrected Adam update in place.
void adam_step(AdamState& state, std::vector<Tensor>& params, const std::vector<Tensor>& grads);

// Same update over scattered tensors (parameters spread across networks).
void adam_step(AdamState& state, const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads);

}  // namespace fedsim
