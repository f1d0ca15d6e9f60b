#pragma once

// Small feed-forward networks with hand-written backpropagation and Adam.
//
// A DenseNet is a stack of affine layers. Hidden layers apply an activation
// (identity or ReLU); the last layer feeds a probability head: a softmax over
// the outputs, or an element-wise logistic (one-vs-rest, or a single binary
// output). All parameters live in one flat array in a fixed order:
// for each layer, the weight matrix row-major (out x in), then the bias.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "haiblbf/errors.hpp"
#include "haiblbf/random.hpp"

namespace haiblbf::nn {

enum class Activation { kIdentity, kRelu };
enum class Head { kSoftmax, kSigmoid };

inline const char* to_string(Activation a) { return a == Activation::kRelu ? "relu" : "identity"; }
inline const char* to_string(Head h) { return h == Head::kSoftmax ? "softmax" : "sigmoid"; }

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::kIdentity;  // ignored on the last layer

  bool operator==(const LayerShape&) const = default;
};

/// Partial derivatives of a scalar objective, in the owning net's parameter order.
struct Gradient {
  std::vector<double> values;

  Gradient() = default;
  explicit Gradient(std::size_t n) : values(n, 0.0) {}

  std::size_t size() const { return values.size(); }
  void zero() { std::fill(values.begin(), values.end(), 0.0); }
  Gradient& operator*=(double s) {
    for (double& v : values) v *= s;
    return *this;
  }
};

/// Activations recorded by a forward pass, consumed by backward().
struct ForwardCache {
  std::vector<double> input;
  std::vector<std::vector<double>> pre;   // affine outputs per layer
  std::vector<std::vector<double>> post;  // activations per layer; last = head output
  std::vector<double> delta;
  std::vector<double> delta_prev;
  std::size_t param_count = 0;
  bool valid = false;
};

inline double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Max-subtracted softmax, in place.
inline void softmax_inplace(std::span<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

class DenseNet {
 public:
  DenseNet() = default;

  DenseNet(std::size_t input_dim, const std::vector<std::size_t>& hidden,
           Activation hidden_activation, std::size_t output_dim, Head head)
      : head_(head) {
    std::size_t in = input_dim;
    for (std::size_t width : hidden) {
      layers_.push_back({in, width, hidden_activation});
      in = width;
    }
    layers_.push_back({in, output_dim, Activation::kIdentity});
    finalize_layout();
  }

  DenseNet(std::vector<LayerShape> layers, Head head) : layers_(std::move(layers)), head_(head) {
    finalize_layout();
  }

  /// Glorot-uniform weights, zero biases.
  void init_glorot(Rng& rng) {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& s = layers_[l];
      const double limit = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
      double* w = params_.data() + offsets_[l];
      for (std::size_t k = 0; k < s.in * s.out; ++k) w[k] = uniform(rng, -limit, limit);
      std::fill(w + s.in * s.out, w + s.in * s.out + s.out, 0.0);
    }
  }

  std::size_t input_dim() const { return layers_.front().in; }
  std::size_t output_dim() const { return layers_.back().out; }
  std::size_t num_params() const { return params_.size(); }
  Head head() const { return head_; }
  const std::vector<LayerShape>& layers() const { return layers_; }
  bool empty() const { return layers_.empty(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  double& weight(std::size_t layer, std::size_t out, std::size_t in) {
    return params_[offsets_[layer] + out * layers_[layer].in + in];
  }
  double& bias(std::size_t layer, std::size_t out) {
    const auto& s = layers_[layer];
    return params_[offsets_[layer] + s.in * s.out + out];
  }
  double weight(std::size_t layer, std::size_t out, std::size_t in) const {
    return params_[offsets_[layer] + out * layers_[layer].in + in];
  }
  double bias(std::size_t layer, std::size_t out) const {
    const auto& s = layers_[layer];
    return params_[offsets_[layer] + s.in * s.out + out];
  }

  std::span<const double> forward(std::span<const double> x, ForwardCache& cache) const {
    check_input(x);
    const std::size_t n_layers = layers_.size();
    cache.pre.resize(n_layers);
    cache.post.resize(n_layers);
    cache.input.assign(x.begin(), x.end());
    std::span<const double> a = cache.input;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto& s = layers_[l];
      const double* w = params_.data() + offsets_[l];
      const double* b = w + s.in * s.out;
      auto& z = cache.pre[l];
      auto& out = cache.post[l];
      z.resize(s.out);
      out.resize(s.out);
      for (std::size_t o = 0; o < s.out; ++o) {
        double acc = b[o];
        const double* row = w + o * s.in;
        for (std::size_t i = 0; i < s.in; ++i) acc += row[i] * a[i];
        z[o] = acc;
      }
      if (l + 1 < n_layers) {
        for (std::size_t o = 0; o < s.out; ++o) {
          out[o] = (s.activation == Activation::kRelu && z[o] < 0.0) ? 0.0 : z[o];
        }
      } else if (head_ == Head::kSoftmax) {
        std::copy(z.begin(), z.end(), out.begin());
        softmax_inplace(out);
      } else {
        for (std::size_t o = 0; o < s.out; ++o) out[o] = stable_sigmoid(z[o]);
      }
      a = out;
    }
    cache.param_count = params_.size();
    cache.valid = true;
    return cache.post.back();
  }

  std::vector<double> forward(std::span<const double> x) const {
    ForwardCache cache;
    const auto out = forward(x, cache);
    return {out.begin(), out.end()};
  }

  /// Adds d(objective)/d(params) to `grad`, given d(objective)/d(head output).
  void backward(ForwardCache& cache, std::span<const double> upstream, Gradient& grad) const {
    if (!cache.valid || cache.param_count != params_.size() || cache.post.size() != layers_.size()) {
      throw UsageError("backward() called without a matching forward pass");
    }
    if (upstream.size() != output_dim()) {
      throw ShapeError("upstream has " + std::to_string(upstream.size()) + " entries, expected " +
                       std::to_string(output_dim()));
    }
    if (grad.size() != params_.size()) grad = Gradient(params_.size());

    const auto& y = cache.post.back();
    auto& delta = cache.delta;
    delta.resize(y.size());
    if (head_ == Head::kSoftmax) {
      double dot = 0.0;
      for (std::size_t k = 0; k < y.size(); ++k) dot += upstream[k] * y[k];
      for (std::size_t k = 0; k < y.size(); ++k) delta[k] = y[k] * (upstream[k] - dot);
    } else {
      for (std::size_t k = 0; k < y.size(); ++k) delta[k] = upstream[k] * y[k] * (1.0 - y[k]);
    }
    backprop(cache, grad);
  }

  /// Adds d(objective)/d(params) to `grad`, given d(objective)/d(last-layer logits).
  /// Cross-entropy losses use this: for softmax + log-loss the logit
  /// partials are (p - target), which avoids dividing by small probabilities.
  void backward_from_logits(ForwardCache& cache, std::span<const double> dlogits, Gradient& grad) const {
    if (!cache.valid || cache.param_count != params_.size() || cache.post.size() != layers_.size()) {
      throw UsageError("backward_from_logits() called without a matching forward pass");
    }
    if (dlogits.size() != output_dim()) throw ShapeError("logit partials have the wrong size");
    if (grad.size() != params_.size()) grad = Gradient(params_.size());
    cache.delta.assign(dlogits.begin(), dlogits.end());
    backprop(cache, grad);
  }

  Gradient backward(std::span<const double> upstream, std::span<const double> x) const {
    ForwardCache cache;
    forward(x, cache);
    Gradient g(params_.size());
    backward(cache, upstream, g);
    return g;
  }

 private:
  void backprop(ForwardCache& cache, Gradient& grad) const {
    auto& delta = cache.delta;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& s = layers_[l];
      const std::span<const double> a_in =
          l == 0 ? std::span<const double>(cache.input) : std::span<const double>(cache.post[l - 1]);
      const double* w = params_.data() + offsets_[l];
      double* gw = grad.values.data() + offsets_[l];
      double* gb = gw + s.in * s.out;
      for (std::size_t o = 0; o < s.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        double* grow = gw + o * s.in;
        for (std::size_t i = 0; i < s.in; ++i) grow[i] += d * a_in[i];
        gb[o] += d;
      }
      if (l == 0) break;
      auto& prev = cache.delta_prev;
      prev.assign(s.in, 0.0);
      for (std::size_t o = 0; o < s.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = w + o * s.in;
        for (std::size_t i = 0; i < s.in; ++i) prev[i] += row[i] * d;
      }
      if (layers_[l - 1].activation == Activation::kRelu) {
        const auto& z_prev = cache.pre[l - 1];
        for (std::size_t i = 0; i < s.in; ++i) {
          if (z_prev[i] < 0.0) prev[i] = 0.0;
        }
      }
      std::swap(delta, prev);
    }
  }

 public:

  // Text format, one token group per line:
  //   haiblbf-densenet 1
  //   head <softmax|sigmoid>
  //   layers <L>
  //   layer <in> <out> <identity|relu>      (L lines)
  //   params <P>
  //   <value>                                (P lines, shortest round-trip decimal)
  void write(std::ostream& os) const {
    os << "haiblbf-densenet 1\n";
    os << "head " << to_string(head_) << "\n";
    os << "layers " << layers_.size() << "\n";
    for (const auto& s : layers_) os << "layer " << s.in << ' ' << s.out << ' ' << to_string(s.activation) << "\n";
    os << "params " << params_.size() << "\n";
    char buf[64];
    for (double v : params_) {
      auto res = std::to_chars(buf, buf + sizeof(buf), v);
      os.write(buf, res.ptr - buf);
      os << '\n';
    }
  }

  static DenseNet read(std::istream& is) {
    std::string tag;
    int version = 0;
    if (!(is >> tag >> version) || tag != "haiblbf-densenet" || version != 1) {
      throw DataError("not a haiblbf-densenet v1 stream");
    }
    std::string key, value;
    is >> key >> value;
    if (key != "head" || (value != "softmax" && value != "sigmoid")) throw DataError("bad head line");
    const Head head = value == "softmax" ? Head::kSoftmax : Head::kSigmoid;
    std::size_t n_layers = 0;
    if (!(is >> key >> n_layers) || key != "layers" || n_layers == 0) throw DataError("bad layers line");
    std::vector<LayerShape> shapes(n_layers);
    for (auto& s : shapes) {
      std::string act;
      if (!(is >> key >> s.in >> s.out >> act) || key != "layer") throw DataError("bad layer line");
      if (act == "relu") {
        s.activation = Activation::kRelu;
      } else if (act == "identity") {
        s.activation = Activation::kIdentity;
      } else {
        throw DataError("unknown activation '" + act + "'");
      }
    }
    DenseNet net(std::move(shapes), head);
    std::size_t n_params = 0;
    if (!(is >> key >> n_params) || key != "params" || n_params != net.num_params()) {
      throw DataError("parameter count does not match layer shapes");
    }
    for (double& p : net.params_) {
      std::string tok;
      if (!(is >> tok)) throw DataError("truncated parameter list");
      auto res = std::from_chars(tok.data(), tok.data() + tok.size(), p);
      if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) throw DataError("bad parameter '" + tok + "'");
    }
    return net;
  }

  std::string to_text() const {
    std::ostringstream os;
    write(os);
    return os.str();
  }

  bool operator==(const DenseNet& o) const {
    return head_ == o.head_ && layers_ == o.layers_ && params_ == o.params_;
  }

 private:
  void finalize_layout() {
    if (layers_.empty()) throw ShapeError("a network needs at least one layer");
    offsets_.clear();
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& s = layers_[l];
      if (s.in == 0 || s.out == 0) throw ShapeError("layer dimensions must be positive");
      if (l > 0 && layers_[l - 1].out != s.in) {
        throw ShapeError("layer " + std::to_string(l) + " input does not match previous output");
      }
      offsets_.push_back(off);
      off += s.in * s.out + s.out;
    }
    params_.assign(off, 0.0);
  }

  void check_input(std::span<const double> x) const {
    if (layers_.empty()) throw UsageError("forward() on an empty network");
    if (x.size() != input_dim()) {
      throw ShapeError("input has dimension " + std::to_string(x.size()) + ", network expects " +
                       std::to_string(input_dim()));
    }
  }

  std::vector<LayerShape> layers_;
  Head head_ = Head::kSoftmax;
  std::vector<double> params_;
  std::vector<std::size_t> offsets_;
};

inline std::vector<double> forward(const DenseNet& net, std::span<const double> x) { return net.forward(x); }

inline Gradient backward(const DenseNet& net, std::span<const double> upstream, std::span<const double> x) {
  return net.backward(upstream, x);
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(const DenseNet& net, double lr = 1e-3)
      : m(net.num_params(), 0.0), v(net.num_params(), 0.0), learning_rate(lr) {}
};

/// One bias-corrected Adam step that descends along `g`.
inline void adam_step(DenseNet& net, AdamState& state, const Gradient& g) {
  auto params = net.params();
  if (g.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("gradient / optimizer state do not match the network");
  }
  for (double x : g.values) {
    if (!std::isfinite(x)) throw NumericError("non-finite gradient entry");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double gi = g.values[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gi;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gi * gi;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

/// An objective value together with its analytic gradient.
struct Evaluation {
  double value = 0.0;
  Gradient gradient;
};

/// Central-difference gradient of `value_of(net)`.
template <class ValueFn>
Gradient central_difference(const DenseNet& net, ValueFn&& value_of, double step = 1e-5) {
  DenseNet probe = net;
  Gradient g(net.num_params());
  auto p = probe.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    const double up = value_of(static_cast<const DenseNet&>(probe));
    p[i] = orig - step;
    const double down = value_of(static_cast<const DenseNet&>(probe));
    p[i] = orig;
    g.values[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// Max over parameters of |analytic - numeric| / (|numeric| + 1e-8).
/// `objective(net)` must return an Evaluation.
template <class Objective>
double finite_diff_check(const DenseNet& net, Objective&& objective, double step = 1e-5) {
  const Evaluation analytic = objective(net);
  if (analytic.gradient.size() != net.num_params()) throw ShapeError("objective gradient has the wrong size");
  const Gradient numeric =
      central_difference(net, [&](const DenseNet& n) { return objective(n).value; }, step);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double err = std::abs(analytic.gradient.values[i] - numeric.values[i]) /
                       (std::abs(numeric.values[i]) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace haiblbf::nn
