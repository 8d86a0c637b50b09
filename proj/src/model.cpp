#include "fedsim/model.hpp"

#include <cmath>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

std::vector<LayerSpec> encoder_layers(const ArchConfig& cfg, std::size_t& feature_dim) {
  const std::size_t side = cfg.image_side;
  std::vector<LayerSpec> layers;
  auto push_norm_block = [&](std::vector<std::size_t> shape) {
    layers.push_back(LayerSpec::LayerNorm(std::move(shape)));
    if (cfg.relu_after_norm) layers.push_back(LayerSpec::Relu());
  };
  if (cfg.preset == "mnist-conv" || cfg.preset == "synthetic-conv") {
    if (side != 28)
      throw ConfigError("preset " + cfg.preset + " expects 28x28 images, got side " +
                        std::to_string(side));
    const bool big = cfg.preset == "mnist-conv";
    const std::size_t c1 = big ? 16 : 8, c2 = big ? 32 : 16, c3 = big ? 64 : 32;
    layers.push_back(LayerSpec::Conv2d(2, c1, 3, 2, 1));
    push_norm_block({c1, 14, 14});
    layers.push_back(LayerSpec::Conv2d(c1, c2, 3, 2, 1));
    push_norm_block({c2, 7, 7});
    layers.push_back(LayerSpec::Conv2d(c2, c3, 7, 1, 0));
    push_norm_block({c3, 1, 1});
    layers.push_back(LayerSpec::Flatten());
    feature_dim = c3;
  } else if (cfg.preset == "small-mlp") {
    layers.push_back(LayerSpec::Flatten());
    layers.push_back(LayerSpec::Dense(2 * side * side, cfg.mlp_feature_dim));
    push_norm_block({cfg.mlp_feature_dim});
    feature_dim = cfg.mlp_feature_dim;
  } else {
    throw ConfigError("unknown architecture preset: " + cfg.preset);
  }
  return layers;
}

Network make_single_dense(std::size_t in, std::size_t out, Rng& rng) {
  return make_network({LayerSpec::Dense(in, out)}, rng);
}

}  // namespace

ModelParams build_model(const ArchConfig& cfg) {
  if (cfg.embed_dim != cfg.image_side)
    throw ConfigError("embed_dim " + std::to_string(cfg.embed_dim) +
                      " must equal image side " + std::to_string(cfg.image_side) +
                      " (diagonal input concatenation)");
  if (cfg.with_kway_head && cfg.num_styles < 2)
    throw ConfigError("k-way head needs at least 2 styles");

  ModelParams mp;
  mp.embed_dim = cfg.embed_dim;
  mp.image_side = cfg.image_side;

  Rng rng(stream_seed(cfg.seed, "model-init"));
  mp.encoder = make_network(encoder_layers(cfg, mp.feature_dim), rng);

  const std::size_t head_in = mp.feature_dim + mp.embed_dim;
  mp.subpop_heads.reserve(cfg.num_heads);
  for (std::size_t k = 0; k < cfg.num_heads; ++k)
    mp.subpop_heads.push_back(make_single_dense(head_in, 2, rng));
  if (cfg.with_global_head) mp.global_pref_head = make_single_dense(head_in, 2, rng);
  if (cfg.with_kway_head) mp.kway_head = make_single_dense(head_in, cfg.num_styles, rng);
  return mp;
}

Network make_head(const ModelParams& params, std::size_t out_logits, Rng& rng) {
  return make_single_dense(params.feature_dim + params.embed_dim, out_logits, rng);
}

Tensor embed_input(const Tensor& image, const Tensor& embedding) {
  if (image.shape.size() != 2 || image.shape[0] != image.shape[1])
    throw ConfigError("embed_input: image must be square HxW, got " + shape_str(image.shape));
  const std::size_t side = image.shape[0];
  if (embedding.numel() != side)
    throw ConfigError("embed_input: embedding length " + std::to_string(embedding.numel()) +
                      " must equal image side " + std::to_string(side));
  Tensor out({2, side, side});
  std::copy(image.data.begin(), image.data.end(), out.data.begin());
  for (std::size_t i = 0; i < side; ++i) out.at3(1, i, i) = embedding.data[i];
  return out;
}

ForwardBundle model_forward(const ModelParams& params, const Tensor& embedding,
                            const Tensor& image, std::size_t head_index,
                            const Network* head_override) {
  if (!head_override && head_index >= params.subpop_heads.size())
    throw UsageError("model_forward: head index " + std::to_string(head_index) +
                     " out of range (" + std::to_string(params.subpop_heads.size()) + " heads)");
  ForwardBundle b;
  b.head_index = head_index;

  const Tensor input = embed_input(image, embedding);
  Tensor enc_out = forward(params.encoder, input, &b.encoder_tape);
  b.encoder_out_shape = enc_out.shape;

  b.feature = Tensor({enc_out.numel()});
  b.feature.data = std::move(enc_out.data);

  b.head_input = Tensor({b.feature.numel() + embedding.numel()});
  std::copy(b.feature.data.begin(), b.feature.data.end(), b.head_input.data.begin());
  std::copy(embedding.data.begin(), embedding.data.end(),
            b.head_input.data.begin() + static_cast<std::ptrdiff_t>(b.feature.numel()));

  const Network& head = head_override ? *head_override : params.subpop_heads[head_index];
  b.subpop_logits = forward(head, b.head_input, &b.subpop_tape);
  if (params.global_pref_head)
    b.global_logits = forward(*params.global_pref_head, b.head_input, &b.global_tape);
  if (params.kway_head) b.kway_logits = forward(*params.kway_head, b.head_input, &b.kway_tape);
  return b;
}

Tensor model_predict_logits(const ModelParams& params, const Tensor& embedding,
                            const Tensor& image, std::size_t head_index,
                            const Network* head_override) {
  if (!head_override && head_index >= params.subpop_heads.size())
    throw UsageError("model_predict_logits: head index out of range");
  const Tensor input = embed_input(image, embedding);
  Tensor feat = forward(params.encoder, input, nullptr);
  Tensor head_in({feat.numel() + embedding.numel()});
  std::copy(feat.data.begin(), feat.data.end(), head_in.data.begin());
  std::copy(embedding.data.begin(), embedding.data.end(),
            head_in.data.begin() + static_cast<std::ptrdiff_t>(feat.numel()));
  const Network& head = head_override ? *head_override : params.subpop_heads[head_index];
  return forward(head, head_in, nullptr);
}

namespace {

// Pull the embedding gradient out of an assembled 2xHxW input gradient:
// channel 1 carries diag(embedding).
void add_input_diag(const Tensor& input_grad, Tensor& embed_grad) {
  const std::size_t side = input_grad.shape[1];
  for (std::size_t i = 0; i < side; ++i) embed_grad.data[i] += input_grad.at3(1, i, i);
}

}  // namespace

SampleGrads model_backward_accumulate(const ModelParams& params, const ForwardBundle& bundle,
                                      const LossSpec& spec, const GradSink& sink,
                                      const Network* head_override) {
  SampleGrads out;
  out.embedding = Tensor({params.embed_dim});
  out.embedding_global_path = Tensor({params.embed_dim});

  const std::size_t fdim = bundle.feature.numel();
  const Network& head =
      head_override ? *head_override : params.subpop_heads[bundle.head_index];

  Tensor feat_grad_shared({fdim});   // feature grad from subpop + k-way paths
  Tensor feat_grad_subpop({fdim});   // kept separate only when it feeds the embedding
  Tensor feat_grad_global({fdim});
  Tensor head_in_grad;

  const bool subpop_on = spec.use_subpop && spec.pref_label >= 0;
  const bool global_on =
      spec.use_global && spec.pref_label >= 0 && params.global_pref_head.has_value();
  const bool kway_on =
      spec.style_label >= 0 && spec.kway_weight != 0.0 && params.kway_head.has_value();

  if (subpop_on) {
    auto ce = cross_entropy(bundle.subpop_logits, static_cast<std::size_t>(spec.pref_label));
    out.subpop_loss = ce.loss;
    backward_accumulate(head, bundle.subpop_tape, ce.grad_logits, sink.subpop_head,
                        &head_in_grad);
    for (std::size_t i = 0; i < fdim; ++i) feat_grad_shared.data[i] += head_in_grad.data[i];
    if (spec.embed_from_subpop) {
      for (std::size_t i = 0; i < fdim; ++i) feat_grad_subpop.data[i] = head_in_grad.data[i];
      for (std::size_t i = 0; i < params.embed_dim; ++i)
        out.embedding.data[i] += head_in_grad.data[fdim + i];
    }
  }

  if (kway_on) {
    auto ce = cross_entropy(bundle.kway_logits, static_cast<std::size_t>(spec.style_label));
    out.kway_loss = ce.loss * spec.kway_weight;
    scale_inplace(ce.grad_logits, spec.kway_weight);
    backward_accumulate(*params.kway_head, bundle.kway_tape, ce.grad_logits, sink.kway_head,
                        &head_in_grad);
    for (std::size_t i = 0; i < fdim; ++i) feat_grad_shared.data[i] += head_in_grad.data[i];
  }

  if (global_on) {
    auto ce = cross_entropy(bundle.global_logits, static_cast<std::size_t>(spec.pref_label));
    out.global_loss = ce.loss;
    backward_accumulate(*params.global_pref_head, bundle.global_tape, ce.grad_logits,
                        sink.global_head, &head_in_grad);
    for (std::size_t i = 0; i < fdim; ++i) feat_grad_global.data[i] = head_in_grad.data[i];
    for (std::size_t i = 0; i < params.embed_dim; ++i)
      out.embedding_global_path.data[i] = head_in_grad.data[fdim + i];
    if (spec.embed_from_global) {
      for (std::size_t i = 0; i < params.embed_dim; ++i)
        out.embedding.data[i] += head_in_grad.data[fdim + i];
    }
  }

  auto reshape_to_encoder_out = [&](Tensor& flat) {
    flat.shape = bundle.encoder_out_shape;
    return &flat;
  };

  Tensor input_grad;
  if (subpop_on || kway_on) {
    const bool need_diag_from_shared = subpop_on && spec.embed_from_subpop;
    backward_accumulate(params.encoder, bundle.encoder_tape,
                        *reshape_to_encoder_out(feat_grad_shared), sink.encoder,
                        need_diag_from_shared ? &input_grad : nullptr);
    if (need_diag_from_shared && !kway_on) {
      add_input_diag(input_grad, out.embedding);
    } else if (need_diag_from_shared) {
      // k-way grads are mixed into the shared pass; re-run with the
      // sub-population slice alone to isolate its input-channel contribution.
      backward_accumulate(params.encoder, bundle.encoder_tape,
                          *reshape_to_encoder_out(feat_grad_subpop), nullptr, &input_grad);
      add_input_diag(input_grad, out.embedding);
    }
  }

  if (global_on && spec.embed_from_global) {
    // Parameter gradients of this pass are intentionally dropped: the global
    // head's loss must not steer the shared encoder.
    backward_accumulate(params.encoder, bundle.encoder_tape,
                        *reshape_to_encoder_out(feat_grad_global), nullptr, &input_grad);
    add_input_diag(input_grad, out.embedding);
    add_input_diag(input_grad, out.embedding_global_path);
  }

  return out;
}

ModelGrads model_backward(const ModelParams& params, const ForwardBundle& bundle,
                          const LossSpec& spec, const Network* head_override) {
  ModelGrads out;
  out.encoder = zero_grads_like(params.encoder);
  const Network& head =
      head_override ? *head_override : params.subpop_heads[bundle.head_index];
  out.subpop_head = zero_grads_like(head);
  if (params.global_pref_head) out.global_head = zero_grads_like(*params.global_pref_head);
  if (params.kway_head) out.kway_head = zero_grads_like(*params.kway_head);

  GradSink sink;
  sink.encoder = &out.encoder;
  sink.subpop_head = &out.subpop_head;
  sink.global_head = params.global_pref_head ? &out.global_head : nullptr;
  sink.kway_head = params.kway_head ? &out.kway_head : nullptr;

  SampleGrads s = model_backward_accumulate(params, bundle, spec, sink, head_override);
  out.embedding = std::move(s.embedding);
  out.embedding_global_path = std::move(s.embedding_global_path);
  out.subpop_loss = s.subpop_loss;
  out.global_loss = s.global_loss;
  out.kway_loss = s.kway_loss;
  return out;
}

}  // namespace fedsim
