#pragma once

// Test-only oracles. Everything here recomputes expectations from first
// principles (finite differences, exhaustive scans, hand-rolled traces) and
// stays independent of the library's backward/aggregation paths.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace oracles {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Central finite difference of a scalar function at x[i].
inline double central_fd(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Scalarizes a network's output through a fixed random projection, then
// checks every parameter entry and every input entry of backward() against
// central finite differences. Returns the max relative error seen.
inline double fd_check_network(fedsim::Network& net, const fedsim::Tensor& input,
                               fedsim::Rng& rng, double h = 1e-5) {
  fedsim::Tape tape;
  fedsim::Tensor out = fedsim::forward(net, input, &tape);
  fedsim::Tensor proj(out.shape);
  for (double& v : proj.data) v = rng.uniform(-1.0, 1.0);

  const auto loss_now = [&](const fedsim::Tensor& in) {
    fedsim::Tensor o = fedsim::forward(net, in, nullptr);
    return fedsim::dot(o, proj);
  };

  const auto analytic = fedsim::backward(net, tape, proj);
  double worst = 0.0;

  for (std::size_t t = 0; t < net.params.size(); ++t) {
    for (std::size_t i = 0; i < net.params[t].numel(); ++i) {
      const double saved = net.params[t].data[i];
      const double fd = central_fd(
          [&](double v) {
            net.params[t].data[i] = v;
            const double l = loss_now(input);
            return l;
          },
          saved, h);
      net.params[t].data[i] = saved;
      worst = std::max(worst, rel_err(analytic.param_grads[t].data[i], fd));
    }
  }
  fedsim::Tensor in = input;
  for (std::size_t i = 0; i < in.numel(); ++i) {
    const double saved = in.data[i];
    const double fd = central_fd(
        [&](double v) {
          in.data[i] = v;
          return loss_now(in);
        },
        saved, h);
    in.data[i] = saved;
    worst = std::max(worst, rel_err(analytic.input_grad.data[i], fd));
  }
  return worst;
}

// Exhaustive nearest-vector scan.
inline std::size_t brute_force_nearest(const std::vector<fedsim::Tensor>& pool,
                                       const fedsim::Tensor& query) {
  std::size_t best = 0;
  double best_d = fedsim::squared_distance(pool[0], query);
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const double d = fedsim::squared_distance(pool[i], query);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

// Hand-rolled scalar Adam trace following the update equations directly.
struct ScalarAdamTrace {
  double m = 0.0, v = 0.0;
  std::uint64_t t = 0;

  double step(double param, double grad, const fedsim::AdamConfig& cfg) {
    t += 1;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
    return param - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
};

}  // namespace oracles
