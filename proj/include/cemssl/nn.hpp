#pragma once

// Dense feed-forward networks in double precision: forward pass with a
// backprop cache, reverse-mode gradients, Adam, and a central-difference
// gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "cemssl/errors.hpp"
#include "cemssl/random.hpp"

namespace cemssl {

// Row-major so that one row is one sample of a batch.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { ReLU, Sigmoid, Identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "identity") return Activation::Identity;
  throw UsageError("unknown activation '" + std::string(s) + "'");
}

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

struct NetworkParams {
  std::vector<std::size_t> layer_sizes;
  std::vector<Matrix> weights;  // weights[i] is layer_sizes[i+1] x layer_sizes[i]
  std::vector<Vector> biases;
  Activation hidden_activation = Activation::ReLU;
  Activation output_activation = Activation::Sigmoid;

  std::size_t layer_count() const { return weights.size(); }
  std::size_t input_size() const { return layer_sizes.front(); }
  std::size_t output_size() const { return layer_sizes.back(); }

  Activation activation_of(std::size_t layer) const {
    return layer + 1 == layer_count() ? output_activation : hidden_activation;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < weights.size(); ++i)
      n += static_cast<std::size_t>(weights[i].size() + biases[i].size());
    return n;
  }

  void validate() const {
    if (layer_sizes.size() < 2) throw ShapeError("network needs at least two layer sizes");
    if (weights.size() + 1 != layer_sizes.size() || biases.size() != weights.size())
      throw ShapeError("layer count does not match layer_sizes");
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const auto in = static_cast<Eigen::Index>(layer_sizes[i]);
      const auto out = static_cast<Eigen::Index>(layer_sizes[i + 1]);
      if (weights[i].rows() != out || weights[i].cols() != in)
        throw ShapeError("layer " + std::to_string(i) + " weight is " + shape_string(weights[i]) +
                         ", expected " + std::to_string(out) + "x" + std::to_string(in));
      if (biases[i].size() != out)
        throw ShapeError("layer " + std::to_string(i) + " bias has " +
                         std::to_string(biases[i].size()) + " entries, expected " +
                         std::to_string(out));
    }
  }

  // Canonical flat order: per layer, weights row-major then biases.
  template <class F>
  void for_each_parameter(F&& f) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      for (Eigen::Index k = 0; k < weights[i].size(); ++k) f(weights[i].data()[k]);
      for (Eigen::Index k = 0; k < biases[i].size(); ++k) f(biases[i].data()[k]);
    }
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      for (Eigen::Index k = 0; k < weights[i].size(); ++k) f(weights[i].data()[k]);
      for (Eigen::Index k = 0; k < biases[i].size(); ++k) f(biases[i].data()[k]);
    }
  }

  std::vector<double*> parameter_pointers() {
    std::vector<double*> out;
    out.reserve(parameter_count());
    for_each_parameter([&](double& v) { out.push_back(&v); });
    return out;
  }

  // Human-readable location of flat parameter index `flat`.
  std::string describe_parameter(std::size_t flat) const {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const auto nw = static_cast<std::size_t>(weights[i].size());
      if (flat < nw) {
        const auto cols = static_cast<std::size_t>(weights[i].cols());
        return "layer " + std::to_string(i) + " weight(" + std::to_string(flat / cols) + "," +
               std::to_string(flat % cols) + ")";
      }
      flat -= nw;
      const auto nb = static_cast<std::size_t>(biases[i].size());
      if (flat < nb) return "layer " + std::to_string(i) + " bias(" + std::to_string(flat) + ")";
      flat -= nb;
    }
    return "out of range";
  }

  bool operator==(const NetworkParams& o) const {
    if (layer_sizes != o.layer_sizes || hidden_activation != o.hidden_activation ||
        output_activation != o.output_activation)
      return false;
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (weights[i] != o.weights[i] || biases[i] != o.biases[i]) return false;
    return true;
  }
};

// Gradients share the exact layout of the parameters they belong to.
struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static Gradients zeros_like(const NetworkParams& p) {
    Gradients g;
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
      g.weights.push_back(Matrix::Zero(p.weights[i].rows(), p.weights[i].cols()));
      g.biases.push_back(Vector::Zero(p.biases[i].size()));
    }
    return g;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.insert(out.end(), weights[i].data(), weights[i].data() + weights[i].size());
      out.insert(out.end(), biases[i].data(), biases[i].data() + biases[i].size());
    }
    return out;
  }
};

inline NetworkParams init_params(std::vector<std::size_t> layer_sizes,
                                 Activation hidden, Activation output, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ShapeError("network needs at least two layer sizes");
  for (std::size_t s : layer_sizes)
    if (s == 0) throw ShapeError("layer sizes must be positive");

  NetworkParams p;
  p.layer_sizes = std::move(layer_sizes);
  p.hidden_activation = hidden;
  p.output_activation = output;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t layers = p.layer_sizes.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const auto in = static_cast<Eigen::Index>(p.layer_sizes[i]);
    const auto out = static_cast<Eigen::Index>(p.layer_sizes[i + 1]);
    // He for rectified layers, Xavier for the squashing/linear head.
    const Activation act = i + 1 == layers ? output : hidden;
    const bool rectified = act == Activation::ReLU;
    const double stddev = rectified ? std::sqrt(2.0 / static_cast<double>(in))
                                    : std::sqrt(2.0 / static_cast<double>(in + out));
    Matrix w(out, in);
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = stddev * normal(rng);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vector::Zero(out));
  }
  return p;
}

namespace detail {

// Sigmoid kept strictly inside (0,1) even where exp saturates.
inline double sigmoid(double x) {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  return std::clamp(1.0 / (1.0 + std::exp(-x)), lo, hi);
}

inline void apply_activation(Activation a, Matrix& m) {
  switch (a) {
    case Activation::ReLU: m = m.cwiseMax(0.0); break;
    case Activation::Sigmoid: m = m.unaryExpr([](double x) { return sigmoid(x); }); break;
    case Activation::Identity: break;
  }
}

// Multiplies `upstream` in place by the activation derivative.
inline void apply_activation_grad(Activation a, const Matrix& pre, const Matrix& post,
                                  Matrix& upstream) {
  switch (a) {
    case Activation::ReLU:
      upstream = (pre.array() > 0.0).select(upstream, 0.0);
      break;
    case Activation::Sigmoid:
      upstream.array() *= post.array() * (1.0 - post.array());
      break;
    case Activation::Identity: break;
  }
}

}  // namespace detail

struct ForwardCache {
  std::vector<Matrix> activations;  // activations[0] is the input, back() the output
  std::vector<Matrix> pre_activations;

  const Matrix& output() const { return activations.back(); }
};

inline void check_input(const NetworkParams& params, const Matrix& input) {
  if (static_cast<std::size_t>(input.cols()) != params.input_size())
    throw ShapeError("input has " + std::to_string(input.cols()) + " columns, network expects " +
                     std::to_string(params.input_size()));
}

inline ForwardCache forward(const NetworkParams& params, const Matrix& input) {
  check_input(params, input);
  ForwardCache cache;
  cache.activations.reserve(params.layer_count() + 1);
  cache.pre_activations.reserve(params.layer_count());
  cache.activations.push_back(input);
  for (std::size_t i = 0; i < params.layer_count(); ++i) {
    Matrix z = cache.activations.back() * params.weights[i].transpose();
    z.rowwise() += params.biases[i].transpose();
    Matrix a = z;
    detail::apply_activation(params.activation_of(i), a);
    cache.pre_activations.push_back(std::move(z));
    cache.activations.push_back(std::move(a));
  }
  return cache;
}

// Forward without keeping intermediates.
inline Matrix predict(const NetworkParams& params, const Matrix& input) {
  check_input(params, input);
  Matrix a = input;
  for (std::size_t i = 0; i < params.layer_count(); ++i) {
    Matrix z = a * params.weights[i].transpose();
    z.rowwise() += params.biases[i].transpose();
    detail::apply_activation(params.activation_of(i), z);
    a = std::move(z);
  }
  return a;
}

// Backpropagates dL/d(output) through the cached forward pass. When
// `input_grad` is non-null it receives dL/d(input).
inline Gradients backward(const NetworkParams& params, const ForwardCache& cache,
                          const Matrix& output_grad, Matrix* input_grad = nullptr) {
  if (cache.activations.size() != params.layer_count() + 1 ||
      cache.pre_activations.size() != params.layer_count())
    throw ShapeError("forward cache does not belong to this network");
  for (std::size_t i = 0; i < params.layer_count(); ++i)
    if (static_cast<std::size_t>(cache.pre_activations[i].cols()) != params.layer_sizes[i + 1] ||
        static_cast<std::size_t>(cache.activations[i].cols()) != params.layer_sizes[i])
      throw ShapeError("forward cache layer " + std::to_string(i) + " has stale shape");
  if (output_grad.rows() != cache.output().rows() || output_grad.cols() != cache.output().cols())
    throw ShapeError("output gradient is " + shape_string(output_grad) + ", output is " +
                     shape_string(cache.output()));

  Gradients g;
  g.weights.resize(params.layer_count());
  g.biases.resize(params.layer_count());
  Matrix delta = output_grad;
  for (std::size_t i = params.layer_count(); i-- > 0;) {
    detail::apply_activation_grad(params.activation_of(i), cache.pre_activations[i],
                                  cache.activations[i + 1], delta);
    g.weights[i] = delta.transpose() * cache.activations[i];
    g.biases[i] = delta.colwise().sum().transpose();
    if (i > 0 || input_grad != nullptr) {
      Matrix next = delta * params.weights[i];
      delta = std::move(next);
    }
  }
  if (input_grad != nullptr) *input_grad = std::move(delta);
  return g;
}

// Squared error summed over output components, averaged over the batch.
inline double mse_loss(const Matrix& output, const Matrix& target) {
  if (output.rows() != target.rows() || output.cols() != target.cols())
    throw ShapeError("target is " + shape_string(target) + ", output is " + shape_string(output));
  if (output.rows() == 0) return 0.0;
  return (output - target).squaredNorm() / static_cast<double>(output.rows());
}

inline Matrix mse_loss_grad(const Matrix& output, const Matrix& target) {
  if (output.rows() != target.rows() || output.cols() != target.cols())
    throw ShapeError("target is " + shape_string(target) + ", output is " + shape_string(output));
  return (2.0 / static_cast<double>(std::max<Eigen::Index>(output.rows(), 1))) * (output - target);
}

inline Gradients backward_mse(const NetworkParams& params, const ForwardCache& cache,
                              const Matrix& target) {
  return backward(params, cache, mse_loss_grad(cache.output(), target));
}

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;
  Gradients first_moment;
  Gradients second_moment;

  static AdamState for_params(const NetworkParams& p, double learning_rate) {
    AdamState s;
    s.learning_rate = learning_rate;
    s.first_moment = Gradients::zeros_like(p);
    s.second_moment = Gradients::zeros_like(p);
    return s;
  }
};

inline void adam_step(NetworkParams& params, const Gradients& grads, AdamState& state) {
  if (grads.weights.size() != params.layer_count() || grads.biases.size() != params.layer_count())
    throw ShapeError("gradient layer count does not match network");
  for (std::size_t i = 0; i < params.layer_count(); ++i) {
    if (grads.weights[i].rows() != params.weights[i].rows() ||
        grads.weights[i].cols() != params.weights[i].cols() ||
        grads.biases[i].size() != params.biases[i].size())
      throw ShapeError("gradient shape mismatch at layer " + std::to_string(i));
    if (!grads.weights[i].allFinite() || !grads.biases[i].allFinite())
      throw NumericError("non-finite gradient in layer " + std::to_string(i));
  }
  if (state.first_moment.weights.size() != params.layer_count())
    state = AdamState::for_params(params, state.learning_rate);

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon, lr = state.learning_rate;

  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t i = 0; i < params.layer_count(); ++i) {
    update(params.weights[i], grads.weights[i], state.first_moment.weights[i],
           state.second_moment.weights[i]);
    update(params.biases[i], grads.biases[i], state.first_moment.biases[i],
           state.second_moment.biases[i]);
  }
}

// Which ReLU units are strictly active, per layer, sample and unit.
inline std::vector<bool> activation_pattern(const NetworkParams& params, const Matrix& input) {
  std::vector<bool> out;
  const ForwardCache c = forward(params, input);
  for (std::size_t i = 0; i < params.layer_count(); ++i) {
    if (params.activation_of(i) != Activation::ReLU) continue;
    const Matrix& z = c.pre_activations[i];
    for (Eigen::Index k = 0; k < z.size(); ++k) out.push_back(z.data()[k] > 0.0);
  }
  return out;
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_parameter_index = 0;
  std::string worst_parameter;
  std::size_t probe_count = 0;
  std::size_t kink_skips = 0;  // probes redrawn because +-eps crossed a ReLU kink
};

// Central differences on `probe_count` randomly chosen entries of a flat
// parameter vector. `loss` is evaluated with the parameters perturbed in
// place; `analytic` must follow the same flat order as `params`. When
// `pattern` is given it returns the current piecewise-linear regime (for
// example which ReLU units are active); probes whose +-eps points fall in a
// different regime from the unperturbed point are redrawn, because finite
// differences across a kink do not estimate the derivative.
inline GradCheckReport grad_check_flat(const std::vector<double*>& params,
                                       const std::vector<double>& analytic,
                                       const std::function<double()>& loss,
                                       std::size_t probe_count, double eps, std::uint64_t seed,
                                       const std::function<std::string(std::size_t)>& describe = {},
                                       const std::function<std::vector<bool>()>& pattern = {}) {
  if (eps <= 0.0) throw UsageError("grad_check eps must be positive");
  if (probe_count == 0) throw UsageError("grad_check needs at least one probe");
  if (params.size() != analytic.size() || params.empty())
    throw ShapeError("analytic gradient length does not match parameter count");

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  GradCheckReport report;
  report.probe_count = probe_count;
  const std::size_t max_skips = 100 * probe_count;
  for (std::size_t n = 0; n < probe_count;) {
    const std::size_t k = pick(rng);
    double& theta = *params[k];
    const double saved = theta;
    const std::vector<bool> base = pattern ? pattern() : std::vector<bool>{};
    theta = saved + eps;
    const double up = loss();
    const bool kink_up = pattern && pattern() != base;
    theta = saved - eps;
    const double down = loss();
    const bool kink_down = pattern && pattern() != base;
    theta = saved;
    if ((kink_up || kink_down) && report.kink_skips < max_skips) {
      ++report.kink_skips;
      continue;
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    const double rel = std::abs(a - numeric) / denom;
    if (n == 0 || rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_parameter_index = k;
      report.worst_parameter = describe ? describe(k) : std::to_string(k);
    }
    ++n;
  }
  return report;
}

inline GradCheckReport grad_check(NetworkParams params, const Matrix& input, const Matrix& target,
                                  std::size_t probe_count, double eps, std::uint64_t seed = 0) {
  const ForwardCache cache = forward(params, input);
  const std::vector<double> analytic = backward_mse(params, cache, target).flatten();
  const auto ptrs = params.parameter_pointers();
  return grad_check_flat(
      ptrs, analytic, [&] { return mse_loss(predict(params, input), target); }, probe_count, eps,
      seed, [&](std::size_t k) { return params.describe_parameter(k); },
      [&] { return activation_pattern(params, input); });
}

}  // namespace cemssl
