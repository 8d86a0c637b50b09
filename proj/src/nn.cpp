#include "fedsim/nn.hpp"

#include <algorithm>
#include <cmath>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {
constexpr double kLayerNormEps = 1e-5;

std::string kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::layernorm: return "layernorm";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

[[noreturn]] void shape_error(std::size_t layer_index, const LayerSpec& spec,
                              const std::vector<std::size_t>& in, const std::string& why) {
  throw ConfigError("layer " + std::to_string(layer_index) + " (" + kind_name(spec.kind) +
                    "): input shape " + shape_str(in) + " " + why);
}
}  // namespace

LayerSpec LayerSpec::Dense(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_features = in;
  s.out_features = out;
  return s;
}

LayerSpec LayerSpec::Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                            std::size_t stride, std::size_t pad) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.kernel_h = s.kernel_w = kernel;
  s.stride_h = s.stride_w = stride;
  s.pad_h = s.pad_w = pad;
  return s;
}

LayerSpec LayerSpec::AvgPool2d(std::size_t pool_h, std::size_t pool_w) {
  LayerSpec s;
  s.kind = LayerKind::avgpool2d;
  s.pool_h = pool_h;
  s.pool_w = pool_w;
  return s;
}

LayerSpec LayerSpec::LayerNorm(std::vector<std::size_t> normalized_shape) {
  LayerSpec s;
  s.kind = LayerKind::layernorm;
  s.normalized_shape = std::move(normalized_shape);
  return s;
}

LayerSpec LayerSpec::Relu() {
  LayerSpec s;
  s.kind = LayerKind::relu;
  return s;
}

LayerSpec LayerSpec::Flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

std::vector<std::size_t> layer_output_shape(const LayerSpec& spec,
                                            const std::vector<std::size_t>& in,
                                            std::size_t layer_index) {
  switch (spec.kind) {
    case LayerKind::dense: {
      if (in.size() != 1 || in[0] != spec.in_features)
        shape_error(layer_index, spec, in,
                    "does not match in_features " + std::to_string(spec.in_features));
      return {spec.out_features};
    }
    case LayerKind::conv2d: {
      if (in.size() != 3 || in[0] != spec.in_channels)
        shape_error(layer_index, spec, in,
                    "does not match in_channels " + std::to_string(spec.in_channels));
      const std::size_t h = in[1] + 2 * spec.pad_h;
      const std::size_t w = in[2] + 2 * spec.pad_w;
      if (h < spec.kernel_h || w < spec.kernel_w)
        shape_error(layer_index, spec, in, "is smaller than the kernel");
      const std::size_t oh = (h - spec.kernel_h) / spec.stride_h + 1;
      const std::size_t ow = (w - spec.kernel_w) / spec.stride_w + 1;
      return {spec.out_channels, oh, ow};
    }
    case LayerKind::avgpool2d: {
      if (in.size() != 3) shape_error(layer_index, spec, in, "must be rank 3 (C,H,W)");
      if (in[1] < spec.pool_h || in[2] < spec.pool_w)
        shape_error(layer_index, spec, in, "is smaller than the pool window");
      return {in[0], (in[1] - spec.pool_h) / spec.pool_h + 1,
              (in[2] - spec.pool_w) / spec.pool_w + 1};
    }
    case LayerKind::layernorm: {
      if (in != spec.normalized_shape)
        shape_error(layer_index, spec, in,
                    "does not match normalized shape " + shape_str(spec.normalized_shape));
      return in;
    }
    case LayerKind::relu:
      return in;
    case LayerKind::flatten:
      return {Tensor::numel_of(in)};
  }
  throw ConfigError("unknown layer kind");
}

std::vector<std::vector<std::size_t>> layer_param_shapes(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::dense:
      return {{spec.out_features, spec.in_features}, {spec.out_features}};
    case LayerKind::conv2d:
      return {{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w},
              {spec.out_channels}};
    case LayerKind::layernorm:
      return {spec.normalized_shape, spec.normalized_shape};
    default:
      return {};
  }
}

Network make_network(std::vector<LayerSpec> layers, Rng& rng) {
  Network net;
  net.layers = std::move(layers);
  net.param_offset.reserve(net.layers.size() + 1);
  for (const LayerSpec& spec : net.layers) {
    net.param_offset.push_back(net.params.size());
    const auto shapes = layer_param_shapes(spec);
    if (shapes.empty()) continue;
    std::size_t fan_in = 0;
    if (spec.kind == LayerKind::dense) fan_in = spec.in_features;
    if (spec.kind == LayerKind::conv2d) fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
    if (spec.kind == LayerKind::layernorm) {
      net.params.emplace_back(shapes[0], 1.0);  // scale
      net.params.emplace_back(shapes[1], 0.0);  // shift
      continue;
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w(shapes[0]);
    for (double& v : w.data) v = rng.uniform(-s, s);
    net.params.push_back(std::move(w));
    net.params.emplace_back(shapes[1], 0.0);  // bias
  }
  net.param_offset.push_back(net.params.size());
  return net;
}

std::size_t param_count(const Network& net) {
  std::size_t n = 0;
  for (const Tensor& p : net.params) n += p.numel();
  return n;
}

std::vector<Tensor> zero_grads_like(const Network& net) {
  std::vector<Tensor> g;
  g.reserve(net.params.size());
  for (const Tensor& p : net.params) g.emplace_back(p.shape);
  return g;
}

namespace {

void dense_forward(const LayerSpec& spec, const Tensor& w, const Tensor& b, const Tensor& x,
                   Tensor& out) {
  const std::size_t in = spec.in_features, on = spec.out_features;
  for (std::size_t o = 0; o < on; ++o) {
    const double* wrow = w.data.data() + o * in;
    double acc = b.data[o];
    for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * x.data[i];
    out.data[o] = acc;
  }
}

void conv2d_forward(const LayerSpec& spec, const Tensor& w, const Tensor& b, const Tensor& x,
                    Tensor& out) {
  const std::size_t ic = spec.in_channels, oc = spec.out_channels;
  const std::size_t h = x.shape[1], wd = x.shape[2];
  const std::size_t oh = out.shape[1], ow = out.shape[2];
  for (std::size_t co = 0; co < oc; ++co) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = b.data[co];
        for (std::size_t ci = 0; ci < ic; ++ci) {
          for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride_h + ky) -
                                      static_cast<std::ptrdiff_t>(spec.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* wrow = w.data.data() + ((co * ic + ci) * spec.kernel_h + ky) * spec.kernel_w;
            const double* xrow = x.data.data() + (ci * h + iy) * wd;
            for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride_w + kx) -
                                        static_cast<std::ptrdiff_t>(spec.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              acc += wrow[kx] * xrow[ix];
            }
          }
        }
        out.at3(co, oy, ox) = acc;
      }
    }
  }
}

}  // namespace

namespace {

bool backward_reads_input(LayerKind k) {
  return k == LayerKind::dense || k == LayerKind::conv2d || k == LayerKind::relu;
}

}  // namespace

Tensor forward(const Network& net, const Tensor& input, Tape* tape) {
  if (tape) {
    tape->inputs.clear();
    tape->input_shapes.clear();
    tape->ln_xhat.assign(net.layers.size(), Tensor{});
    tape->ln_inv_std.assign(net.layers.size(), 0.0);
    tape->layer_count = net.layers.size();
  }
  Tensor cur = input;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& spec = net.layers[li];
    const auto out_shape = layer_output_shape(spec, cur.shape, li);
    if (tape) tape->input_shapes.push_back(cur.shape);
    Tensor out;
    if (spec.kind != LayerKind::flatten) out = Tensor(out_shape);
    const std::size_t poff = net.param_offset[li];
    switch (spec.kind) {
      case LayerKind::dense:
        dense_forward(spec, net.params[poff], net.params[poff + 1], cur, out);
        break;
      case LayerKind::conv2d:
        conv2d_forward(spec, net.params[poff], net.params[poff + 1], cur, out);
        break;
      case LayerKind::avgpool2d: {
        const double inv = 1.0 / static_cast<double>(spec.pool_h * spec.pool_w);
        for (std::size_t c = 0; c < out.shape[0]; ++c)
          for (std::size_t oy = 0; oy < out.shape[1]; ++oy)
            for (std::size_t ox = 0; ox < out.shape[2]; ++ox) {
              double acc = 0.0;
              for (std::size_t py = 0; py < spec.pool_h; ++py)
                for (std::size_t px = 0; px < spec.pool_w; ++px)
                  acc += cur.at3(c, oy * spec.pool_h + py, ox * spec.pool_w + px);
              out.at3(c, oy, ox) = acc * inv;
            }
        break;
      }
      case LayerKind::layernorm: {
        const Tensor& scale = net.params[poff];
        const Tensor& shift = net.params[poff + 1];
        const std::size_t n = cur.numel();
        double mean = 0.0;
        for (double v : cur.data) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : cur.data) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
        Tensor xhat(cur.shape);
        for (std::size_t i = 0; i < n; ++i) {
          xhat.data[i] = (cur.data[i] - mean) * inv_std;
          out.data[i] = xhat.data[i] * scale.data[i] + shift.data[i];
        }
        if (tape) {
          tape->ln_xhat[li] = std::move(xhat);
          tape->ln_inv_std[li] = inv_std;
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < cur.numel(); ++i)
          out.data[i] = cur.data[i] > 0.0 ? cur.data[i] : 0.0;
        break;
      case LayerKind::flatten:
        out.shape = out_shape;
        out.data = std::move(cur.data);
        break;
    }
    if (tape) {
      if (backward_reads_input(spec.kind))
        tape->inputs.push_back(std::move(cur));
      else
        tape->inputs.emplace_back();
    }
    cur = std::move(out);
  }
  if (tape) tape->out_shape = cur.shape;
  return cur;
}

void backward_accumulate(const Network& net, const Tape& tape, const Tensor& grad_output,
                         std::vector<Tensor>* param_grads, Tensor* input_grad) {
  if (tape.layer_count != net.layers.size() || tape.inputs.size() != net.layers.size() ||
      tape.input_shapes.size() != net.layers.size())
    throw UsageError("backward: tape does not match network (stale or foreign tape)");
  if (grad_output.shape != tape.out_shape)
    throw UsageError("backward: grad_output shape " + shape_str(grad_output.shape) +
                     " does not match forward output " + shape_str(tape.out_shape));
  if (param_grads && param_grads->size() != net.params.size())
    throw UsageError("backward: gradient sink does not match the parameter count");

  // Below this layer there are no parameters; the chain can stop early when
  // the caller does not want the input gradient.
  std::size_t lowest_param = net.layers.size();
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (!layer_param_shapes(net.layers[i]).empty()) {
      lowest_param = i;
      break;
    }

  Tensor g = grad_output;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const LayerSpec& spec = net.layers[i];
    const Tensor& x = tape.inputs[i];
    const std::size_t poff = net.param_offset[i];
    const bool want_params = param_grads != nullptr;
    const bool want_gin = input_grad != nullptr || (lowest_param < i);
    if (!want_params && !want_gin) return;
    Tensor gin;
    if (want_gin && spec.kind != LayerKind::flatten && spec.kind != LayerKind::relu)
      gin = Tensor(tape.input_shapes[i]);
    switch (spec.kind) {
      case LayerKind::dense: {
        const Tensor& w = net.params[poff];
        const std::size_t in = spec.in_features, on = spec.out_features;
        for (std::size_t o = 0; o < on; ++o) {
          const double go = g.data[o];
          const double* wrow = w.data.data() + o * in;
          if (want_params) {
            (*param_grads)[poff + 1].data[o] += go;
            double* dwrow = (*param_grads)[poff].data.data() + o * in;
            if (want_gin) {
              for (std::size_t k = 0; k < in; ++k) {
                dwrow[k] += go * x.data[k];
                gin.data[k] += wrow[k] * go;
              }
            } else {
              for (std::size_t k = 0; k < in; ++k) dwrow[k] += go * x.data[k];
            }
          } else {
            for (std::size_t k = 0; k < in; ++k) gin.data[k] += wrow[k] * go;
          }
        }
        break;
      }
      case LayerKind::conv2d: {
        const Tensor& w = net.params[poff];
        const std::size_t ic = spec.in_channels, oc = spec.out_channels;
        const std::size_t h = x.shape[1], wd = x.shape[2];
        const std::size_t oh = g.shape[1], ow = g.shape[2];
        for (std::size_t co = 0; co < oc; ++co) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double go = g.at3(co, oy, ox);
              if (want_params) (*param_grads)[poff + 1].data[co] += go;
              for (std::size_t ci = 0; ci < ic; ++ci) {
                for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride_h + ky) -
                                            static_cast<std::ptrdiff_t>(spec.pad_h);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  const std::size_t row = ((co * ic + ci) * spec.kernel_h + ky) * spec.kernel_w;
                  const double* wrow = w.data.data() + row;
                  const double* xrow = x.data.data() + (ci * h + iy) * wd;
                  double* dwrow = want_params ? (*param_grads)[poff].data.data() + row : nullptr;
                  double* grow = want_gin ? gin.data.data() + (ci * h + iy) * wd : nullptr;
                  for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride_w + kx) -
                                              static_cast<std::ptrdiff_t>(spec.pad_w);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                    if (dwrow) dwrow[kx] += go * xrow[ix];
                    if (grow) grow[ix] += wrow[kx] * go;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::avgpool2d: {
        if (!want_gin) break;
        const double inv = 1.0 / static_cast<double>(spec.pool_h * spec.pool_w);
        for (std::size_t c = 0; c < g.shape[0]; ++c)
          for (std::size_t oy = 0; oy < g.shape[1]; ++oy)
            for (std::size_t ox = 0; ox < g.shape[2]; ++ox) {
              const double go = g.at3(c, oy, ox) * inv;
              for (std::size_t py = 0; py < spec.pool_h; ++py)
                for (std::size_t px = 0; px < spec.pool_w; ++px)
                  gin.at3(c, oy * spec.pool_h + py, ox * spec.pool_w + px) += go;
            }
        break;
      }
      case LayerKind::layernorm: {
        const Tensor& scale = net.params[poff];
        const Tensor& xhat = tape.ln_xhat[i];
        const double inv_std = tape.ln_inv_std[i];
        const std::size_t n = xhat.numel();
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double dxhat = g.data[k] * scale.data[k];
          if (want_params) {
            (*param_grads)[poff].data[k] += g.data[k] * xhat.data[k];
            (*param_grads)[poff + 1].data[k] += g.data[k];
          }
          m1 += dxhat;
          m2 += dxhat * xhat.data[k];
        }
        if (want_gin) {
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (std::size_t k = 0; k < n; ++k) {
            const double dxhat = g.data[k] * scale.data[k];
            gin.data[k] = inv_std * (dxhat - m1 - xhat.data[k] * m2);
          }
        }
        break;
      }
      case LayerKind::relu:
        if (!want_gin) break;
        gin.shape = tape.input_shapes[i];
        gin.data = std::move(g.data);
        for (std::size_t k = 0; k < x.numel(); ++k)
          if (x.data[k] <= 0.0) gin.data[k] = 0.0;
        break;
      case LayerKind::flatten:
        if (!want_gin) break;
        gin.shape = tape.input_shapes[i];
        gin.data = std::move(g.data);
        break;
    }
    if (!want_gin) return;
    g = std::move(gin);
  }
  if (input_grad) *input_grad = std::move(g);
}

BackwardResult backward(const Network& net, const Tape& tape, const Tensor& grad_output) {
  BackwardResult res;
  res.param_grads = zero_grads_like(net);
  backward_accumulate(net, tape, grad_output, &res.param_grads, &res.input_grad);
  return res;
}

CrossEntropyResult cross_entropy(const Tensor& logits, std::size_t label) {
  if (logits.numel() < 2) throw UsageError("cross_entropy: need at least 2 logits");
  if (label >= logits.numel())
    throw UsageError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(logits.numel()) + " logits");
  const double mx = *std::max_element(logits.data.begin(), logits.data.end());
  double sum = 0.0;
  for (double v : logits.data) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  CrossEntropyResult res;
  res.loss = lse - logits.data[label];
  res.grad_logits = Tensor(logits.shape);
  for (std::size_t i = 0; i < logits.numel(); ++i)
    res.grad_logits.data[i] = std::exp(logits.data[i] - lse);
  res.grad_logits.data[label] -= 1.0;
  return res;
}

AdamState make_adam(const std::vector<Tensor>& params, const AdamConfig& cfg) {
  AdamState st;
  st.cfg = cfg;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Tensor& p : params) {
    st.m.emplace_back(p.shape);
    st.v.emplace_back(p.shape);
  }
  return st;
}

void adam_step(AdamState& state, const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads) {
  if (params.size() != state.m.size() || grads.size() != params.size())
    throw UsageError("adam_step: parameter/gradient/state count mismatch");
  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (!same_shape(*params[t], *grads[t]))
      throw UsageError("adam_step: grad shape mismatch at tensor " + std::to_string(t));
    double* p = params[t]->data.data();
    double* m = state.m[t].data.data();
    double* v = state.v[t].data.data();
    const double* g = grads[t]->data.data();
    const std::size_t n = params[t]->numel();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
}

void adam_step(AdamState& state, std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  std::vector<Tensor*> p;
  std::vector<const Tensor*> g;
  p.reserve(params.size());
  g.reserve(grads.size());
  for (Tensor& t : params) p.push_back(&t);
  for (const Tensor& t : grads) g.push_back(&t);
  adam_step(state, p, g);
}

}  // namespace fedsim
