#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "subtag/error.hpp"
#include "subtag/random.hpp"

// Minimal building blocks for the tagger: a named parameter store, seeded
// initialisation, inverted dropout, LSTM layers with hand-written
// backpropagation through time, and Adam. Sequences are matrices with one
// column per time step.
namespace subtag::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Mat<T>> values;

  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    names.push_back(std::move(name));
    values.push_back(Mat<T>::Zero(rows, cols));
    return values.size() - 1;
  }

  std::size_t size() const noexcept { return values.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto &v : values) n += static_cast<std::size_t>(v.size());
    return n;
  }

  std::vector<Mat<T>> zeros_like() const {
    std::vector<Mat<T>> out;
    out.reserve(values.size());
    for (const auto &v : values) out.push_back(Mat<T>::Zero(v.rows(), v.cols()));
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    out.names = names;
    for (const auto &v : values) out.values.push_back(v.template cast<U>());
    return out;
  }
};

template <typename T>
using Gradients = std::vector<Mat<T>>;

template <typename T>
void fill_uniform(Mat<T> &m, double limit, Rng &rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<T>(rng.uniform(-limit, limit));
}

/// Uniform with variance 1/fan_in.
template <typename T>
void init_fan_in(Mat<T> &m, std::size_t fan_in, Rng &rng) {
  fill_uniform(m, std::sqrt(3.0 / static_cast<double>(fan_in)), rng);
}

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

/// Inverted dropout: kept units are scaled by 1/(1-rate).
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng &rng) {
  Mat<T> mask(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) mask(i, j) = rng.bernoulli(rate) ? T(0) : keep;
  return mask;
}

/// Randomness and mode for one forward pass. Without an rng no dropout is
/// applied.
struct PassContext {
  bool train = false;
  Rng *rng = nullptr;

  bool dropout_active(double rate) const { return train && rng != nullptr && rate > 0.0; }
};

// ---------------------------------------------------------------------------
// LSTM

/// Parameter indices of one unidirectional LSTM; gate order i, f, g, o.
struct LstmLayer {
  std::size_t input = 0;
  std::size_t hidden = 0;
  std::size_t wx = 0;  // 4H x I
  std::size_t wh = 0;  // 4H x H
  std::size_t b = 0;   // 4H x 1

  template <typename T>
  static LstmLayer create(ParamStore<T> &store, const std::string &name, std::size_t input,
                          std::size_t hidden) {
    LstmLayer l;
    l.input = input;
    l.hidden = hidden;
    const auto h4 = static_cast<Eigen::Index>(4 * hidden);
    l.wx = store.add(name + ".Wx", h4, static_cast<Eigen::Index>(input));
    l.wh = store.add(name + ".Wh", h4, static_cast<Eigen::Index>(hidden));
    l.b = store.add(name + ".b", h4, 1);
    return l;
  }

  template <typename T>
  void initialize(ParamStore<T> &store, Rng &rng) const {
    init_fan_in(store.values[wx], input, rng);
    init_fan_in(store.values[wh], hidden, rng);
    auto &bias = store.values[b];
    bias.setZero();
    bias.block(static_cast<Eigen::Index>(hidden), 0, static_cast<Eigen::Index>(hidden), 1).setOnes();
  }
};

template <typename T>
struct LstmCache {
  Mat<T> x;      // I x T
  Mat<T> gates;  // 4H x T, activated
  Mat<T> c;      // H x T
  Mat<T> h;      // H x T
  bool reverse = false;
};

/// Runs the LSTM over the columns of x (right to left when reverse); the
/// returned states are indexed by original position.
template <typename T>
const Mat<T> &lstm_forward(const ParamStore<T> &store, const LstmLayer &layer, const Mat<T> &x,
                           bool reverse, LstmCache<T> &cache) {
  const auto H = static_cast<Eigen::Index>(layer.hidden);
  const Eigen::Index steps = x.cols();
  const auto &Wh = store.values[layer.wh];
  cache.x = x;
  cache.reverse = reverse;
  cache.gates.noalias() = store.values[layer.wx] * x;
  cache.gates.colwise() += store.values[layer.b].col(0);
  cache.c.resize(H, steps);
  cache.h.resize(H, steps);
  Vec<T> h_prev = Vec<T>::Zero(H);
  Vec<T> c_prev = Vec<T>::Zero(H);
  Vec<T> a(4 * H);
  for (Eigen::Index s = 0; s < steps; ++s) {
    const Eigen::Index t = reverse ? steps - 1 - s : s;
    a.noalias() = Wh * h_prev;
    a += cache.gates.col(t);
    for (Eigen::Index k = 0; k < H; ++k) {
      const T ig = sigmoid(a(k));
      const T fg = sigmoid(a(H + k));
      const T gg = std::tanh(a(2 * H + k));
      const T og = sigmoid(a(3 * H + k));
      const T c = fg * c_prev(k) + ig * gg;
      const T h = og * std::tanh(c);
      cache.gates(k, t) = ig;
      cache.gates(H + k, t) = fg;
      cache.gates(2 * H + k, t) = gg;
      cache.gates(3 * H + k, t) = og;
      cache.c(k, t) = c;
      cache.h(k, t) = h;
      c_prev(k) = c;
      h_prev(k) = h;
    }
  }
  return cache.h;
}

/// Backpropagation through time. Accumulates parameter gradients and
/// returns the gradient with respect to the input.
template <typename T>
Mat<T> lstm_backward(const ParamStore<T> &store, Gradients<T> &grads, const LstmLayer &layer,
                     const LstmCache<T> &cache, const Mat<T> &d_h) {
  const auto H = static_cast<Eigen::Index>(layer.hidden);
  const Eigen::Index steps = cache.x.cols();
  const auto &Wh = store.values[layer.wh];
  Mat<T> d_a(4 * H, steps);
  Mat<T> h_prev_all = Mat<T>::Zero(H, steps);
  Vec<T> dh_next = Vec<T>::Zero(H);
  Vec<T> dc_next = Vec<T>::Zero(H);
  for (Eigen::Index s = steps - 1; s >= 0; --s) {
    const Eigen::Index t = cache.reverse ? steps - 1 - s : s;
    const Eigen::Index tp = cache.reverse ? t + 1 : t - 1;  // previous step
    const bool has_prev = s > 0;
    if (has_prev) h_prev_all.col(t) = cache.h.col(tp);
    for (Eigen::Index k = 0; k < H; ++k) {
      const T ig = cache.gates(k, t);
      const T fg = cache.gates(H + k, t);
      const T gg = cache.gates(2 * H + k, t);
      const T og = cache.gates(3 * H + k, t);
      const T tc = std::tanh(cache.c(k, t));
      const T dh = d_h(k, t) + dh_next(k);
      const T d_o = dh * tc;
      const T dc = dh * og * (T(1) - tc * tc) + dc_next(k);
      const T c_prev = has_prev ? cache.c(k, tp) : T(0);
      d_a(k, t) = dc * gg * ig * (T(1) - ig);
      d_a(H + k, t) = dc * c_prev * fg * (T(1) - fg);
      d_a(2 * H + k, t) = dc * ig * (T(1) - gg * gg);
      d_a(3 * H + k, t) = d_o * og * (T(1) - og);
      dc_next(k) = dc * fg;
    }
    dh_next.noalias() = Wh.transpose() * d_a.col(t);
  }
  grads[layer.wx].noalias() += d_a * cache.x.transpose();
  grads[layer.wh].noalias() += d_a * h_prev_all.transpose();
  grads[layer.b] += d_a.rowwise().sum();
  return store.values[layer.wx].transpose() * d_a;
}

// ---------------------------------------------------------------------------
// Stacked bidirectional LSTM. Dropout is applied to the input of every layer.

struct BiLstmStack {
  std::vector<LstmLayer> forward;
  std::vector<LstmLayer> backward;
  double dropout = 0.0;

  std::size_t output_width() const { return forward.empty() ? 0 : 2 * forward.back().hidden; }

  template <typename T>
  static BiLstmStack create(ParamStore<T> &store, const std::string &name, std::size_t input,
                            std::size_t hidden, std::size_t layers, double dropout) {
    BiLstmStack s;
    s.dropout = dropout;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t in = l == 0 ? input : 2 * hidden;
      const std::string prefix = name + ".l" + std::to_string(l);
      s.forward.push_back(LstmLayer::create(store, prefix + ".fwd", in, hidden));
      s.backward.push_back(LstmLayer::create(store, prefix + ".bwd", in, hidden));
    }
    return s;
  }

  template <typename T>
  void initialize(ParamStore<T> &store, Rng &rng) const {
    for (std::size_t l = 0; l < forward.size(); ++l) {
      forward[l].initialize(store, rng);
      backward[l].initialize(store, rng);
    }
  }
};

template <typename T>
struct BiLstmCache {
  std::vector<Mat<T>> masks;  // empty matrix when no dropout was applied
  std::vector<LstmCache<T>> fwd;
  std::vector<LstmCache<T>> bwd;
};

template <typename T>
Mat<T> bilstm_forward(const ParamStore<T> &store, const BiLstmStack &stack, const Mat<T> &x,
                      const PassContext &ctx, BiLstmCache<T> &cache) {
  const std::size_t layers = stack.forward.size();
  cache.masks.assign(layers, Mat<T>());
  cache.fwd.resize(layers);
  cache.bwd.resize(layers);
  Mat<T> input = x;
  for (std::size_t l = 0; l < layers; ++l) {
    if (ctx.dropout_active(stack.dropout)) {
      cache.masks[l] = dropout_mask<T>(input.rows(), input.cols(), stack.dropout, *ctx.rng);
      input = input.cwiseProduct(cache.masks[l]);
    }
    const auto H = static_cast<Eigen::Index>(stack.forward[l].hidden);
    Mat<T> out(2 * H, input.cols());
    out.topRows(H) = lstm_forward(store, stack.forward[l], input, false, cache.fwd[l]);
    out.bottomRows(H) = lstm_forward(store, stack.backward[l], input, true, cache.bwd[l]);
    input = std::move(out);
  }
  return input;
}

template <typename T>
Mat<T> bilstm_backward(const ParamStore<T> &store, Gradients<T> &grads, const BiLstmStack &stack,
                       const BiLstmCache<T> &cache, const Mat<T> &d_out) {
  Mat<T> d = d_out;
  for (std::size_t l = stack.forward.size(); l-- > 0;) {
    const auto H = static_cast<Eigen::Index>(stack.forward[l].hidden);
    Mat<T> d_in = lstm_backward(store, grads, stack.forward[l], cache.fwd[l], Mat<T>(d.topRows(H)));
    d_in += lstm_backward(store, grads, stack.backward[l], cache.bwd[l], Mat<T>(d.bottomRows(H)));
    if (cache.masks[l].size() > 0) d_in = d_in.cwiseProduct(cache.masks[l]);
    d = std::move(d_in);
  }
  return d;
}

// ---------------------------------------------------------------------------

template <typename T>
double squared_norm(const Gradients<T> &grads) {
  double s = 0.0;
  for (const auto &g : grads) s += static_cast<double>(g.squaredNorm());
  return s;
}

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_gradients(Gradients<T> &grads, double max_norm) {
  const double norm = std::sqrt(squared_norm(grads));
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto &g : grads) g *= scale;
  }
  return norm;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(const ParamStore<T> &store, AdamConfig cfg = {})
      : cfg_(cfg), m_(store.zeros_like()), v_(store.zeros_like()) {}

  void step(ParamStore<T> &store, const Gradients<T> &grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.learning_rate * std::sqrt(c2) / c1);
    const T eps = static_cast<T>(cfg_.epsilon * std::sqrt(c2));
    for (std::size_t p = 0; p < store.values.size(); ++p) {
      m_[p] = b1 * m_[p] + (T(1) - b1) * grads[p];
      v_[p] = b2 * v_[p] + (T(1) - b2) * grads[p].cwiseProduct(grads[p]);
      store.values[p].array() -= lr * m_[p].array() / (v_[p].array().sqrt() + eps);
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  Gradients<T> m_;
  Gradients<T> v_;
  std::size_t t_ = 0;
};

}  // namespace subtag::nn
