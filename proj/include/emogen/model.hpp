#pragma once

// Decoder-only transformer: learned positions, pre-norm residual blocks with
// causal multi-head self-attention and a GELU MLP, final layer norm, and an
// output projection tied to the token embedding table.
//
// All routines are templated on the scalar type so the same code runs in
// float for training and in double for gradient checking.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emogen/random.hpp"
#include "emogen/tokenizer.hpp"

namespace emogen {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int vocab_size = 2048;
  int context_length = 128;
  int num_layers = 2;
  int num_heads = 4;
  int model_dim = 128;
  int mlp_dim = 512;
  std::uint64_t seed = 0;

  int head_dim() const { return model_dim / num_heads; }

  void validate() const {
    if (vocab_size <= 0 || context_length <= 0 || num_layers <= 0 || num_heads <= 0 ||
        model_dim <= 0 || mlp_dim <= 0) {
      throw std::invalid_argument("model config sizes must be positive");
    }
    if (model_dim % num_heads != 0) {
      throw std::invalid_argument("model_dim must be divisible by num_heads");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
  Matrix<T> ln1_gain, ln1_bias;                     // 1 x D
  Matrix<T> w_query, w_key, w_value, w_out;         // D x D
  Matrix<T> ln2_gain, ln2_bias;                     // 1 x D
  Matrix<T> w_fc, b_fc;                             // D x M, 1 x M
  Matrix<T> w_proj, b_proj;                         // M x D, 1 x D
};

template <typename T>
struct ParameterSet {
  ModelConfig config;
  Matrix<T> token_embedding;     // V x D
  Matrix<T> position_embedding;  // C x D
  std::vector<LayerParams<T>> layers;
  Matrix<T> final_ln_gain, final_ln_bias;  // 1 x D

  // Tied: the logits are final hidden states times the embedding table transposed.
  const Matrix<T>& output_projection() const { return token_embedding; }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Matrix<T>* value;
};

// Every tensor in a fixed order. The order defines checkpoint layout and
// initialization draws.
template <typename T>
std::vector<NamedTensor<T>> tensors(ParameterSet<T>& p) {
  std::vector<NamedTensor<T>> out;
  out.push_back({"token_embedding", &p.token_embedding});
  out.push_back({"position_embedding", &p.position_embedding});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.push_back({pre + "ln1_gain", &L.ln1_gain});
    out.push_back({pre + "ln1_bias", &L.ln1_bias});
    out.push_back({pre + "w_query", &L.w_query});
    out.push_back({pre + "w_key", &L.w_key});
    out.push_back({pre + "w_value", &L.w_value});
    out.push_back({pre + "w_out", &L.w_out});
    out.push_back({pre + "ln2_gain", &L.ln2_gain});
    out.push_back({pre + "ln2_bias", &L.ln2_bias});
    out.push_back({pre + "w_fc", &L.w_fc});
    out.push_back({pre + "b_fc", &L.b_fc});
    out.push_back({pre + "w_proj", &L.w_proj});
    out.push_back({pre + "b_proj", &L.b_proj});
  }
  out.push_back({"final_ln_gain", &p.final_ln_gain});
  out.push_back({"final_ln_bias", &p.final_ln_bias});
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> tensors(const ParameterSet<T>& p) {
  return tensors(const_cast<ParameterSet<T>&>(p));
}

inline bool is_gain(const std::string& name) { return name.ends_with("_gain"); }
inline bool is_bias(const std::string& name) {
  return name.ends_with("_bias") || name.ends_with(".b_fc") || name.ends_with(".b_proj");
}

// Same shapes as `config` describes, all zero.
template <typename T>
ParameterSet<T> zero_params(const ModelConfig& config) {
  config.validate();
  const int D = config.model_dim, M = config.mlp_dim;
  ParameterSet<T> p;
  p.config = config;
  p.token_embedding = Matrix<T>::Zero(config.vocab_size, D);
  p.position_embedding = Matrix<T>::Zero(config.context_length, D);
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& L : p.layers) {
    L.ln1_gain = Matrix<T>::Zero(1, D);
    L.ln1_bias = Matrix<T>::Zero(1, D);
    L.w_query = Matrix<T>::Zero(D, D);
    L.w_key = Matrix<T>::Zero(D, D);
    L.w_value = Matrix<T>::Zero(D, D);
    L.w_out = Matrix<T>::Zero(D, D);
    L.ln2_gain = Matrix<T>::Zero(1, D);
    L.ln2_bias = Matrix<T>::Zero(1, D);
    L.w_fc = Matrix<T>::Zero(D, M);
    L.b_fc = Matrix<T>::Zero(1, M);
    L.w_proj = Matrix<T>::Zero(M, D);
    L.b_proj = Matrix<T>::Zero(1, D);
  }
  p.final_ln_gain = Matrix<T>::Zero(1, D);
  p.final_ln_bias = Matrix<T>::Zero(1, D);
  return p;
}

template <typename T>
ParameterSet<T> zeros_like(const ParameterSet<T>& p) {
  return zero_params<T>(p.config);
}

inline constexpr double kInitStd = 0.02;

// Weights ~ N(0, 0.02^2), gains 1, biases 0; deterministic under config.seed.
template <typename T>
ParameterSet<T> init_params(const ModelConfig& config) {
  auto p = zero_params<T>(config);
  Rng rng(mix_seed(config.seed, 0x1417));
  for (auto& t : tensors(p)) {
    if (is_gain(t.name)) {
      t.value->setOnes();
    } else if (!is_bias(t.name)) {
      for (Eigen::Index i = 0; i < t.value->size(); ++i) {
        t.value->data()[i] = static_cast<T>(kInitStd * rng.normal());
      }
    }
  }
  return p;
}

template <typename T, typename U>
ParameterSet<U> cast_params(const ParameterSet<T>& p) {
  auto out = zero_params<U>(p.config);
  auto src = tensors(p);
  auto dst = tensors(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].value = src[i].value->template cast<U>();
  return out;
}

template <typename T>
bool all_finite(const ParameterSet<T>& p) {
  for (const auto& t : tensors(p)) {
    if (!t.value->allFinite()) return false;
  }
  return true;
}

template <typename T>
std::size_t parameter_count(const ParameterSet<T>& p) {
  std::size_t n = 0;
  for (const auto& t : tensors(p)) n += static_cast<std::size_t>(t.value->size());
  return n;
}

// ---------------------------------------------------------------------------
// Building blocks

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  Vector<T> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                     LayerNormCache<T>& cache) {
  const auto n = x.rows();
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    auto centered = (x.row(r).array() - mean).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(x.cols());
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    cache.xhat.row(r) = centered * rs;
    cache.rstd(r) = rs;
  }
  Matrix<T> y = (cache.xhat.array().rowwise() * gain.row(0).array()).matrix();
  y.rowwise() += bias.row(0);
  return y;
}

// Returns dL/dx; accumulates into gain/bias gradients.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LayerNormCache<T>& cache,
                              const Matrix<T>& gain, Matrix<T>& d_gain, Matrix<T>& d_bias) {
  d_gain += (dy.array() * cache.xhat.array()).matrix().colwise().sum();
  d_bias += dy.colwise().sum();
  Matrix<T> dxhat = (dy.array().rowwise() * gain.row(0).array()).matrix();
  Matrix<T> dx(dy.rows(), dy.cols());
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_dxhat = dxhat.row(r).sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.row(r).dot(cache.xhat.row(r)) * inv_d;
    dx.row(r) = cache.rstd(r) *
                (dxhat.row(r).array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat)
                    .matrix();
  }
  return dx;
}

// tanh approximation used by GPT-2.
template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T a = static_cast<T>(0.044715);
  const T u = c * (x + a * x * x * x);
  const T th = std::tanh(u);
  return static_cast<T>(0.5) * (T(1) + th) +
         static_cast<T>(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * a * x * x);
}

// ---------------------------------------------------------------------------
// Forward pass over packed sequences

// Several independent sequences stored back to back. Attention never crosses
// a sequence boundary and positions restart at 0 for every sequence.
struct PackedTokens {
  TokenSequence tokens;
  std::vector<std::size_t> starts{0};  // starts.back() == tokens.size()

  void add(std::span<const TokenId> seq) {
    tokens.insert(tokens.end(), seq.begin(), seq.end());
    starts.push_back(tokens.size());
  }
  std::size_t num_sequences() const { return starts.size() - 1; }
};

template <typename T>
struct LayerCache {
  Matrix<T> x_in;
  LayerNormCache<T> ln1;
  Matrix<T> ln1_out, q, k, v;
  std::vector<Matrix<T>> probs;  // [sequence * num_heads + head], n x n, zero above diagonal
  Matrix<T> attn;                // heads concatenated, N x D
  Matrix<T> x_mid;
  LayerNormCache<T> ln2;
  Matrix<T> ln2_out, fc_pre, fc_act;
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  Matrix<T> x_final;
  LayerNormCache<T> lnf;
  Matrix<T> hidden;  // final normed states, N x D
};

inline void check_tokens(const ModelConfig& config, const PackedTokens& packed) {
  for (std::size_t s = 0; s < packed.num_sequences(); ++s) {
    const auto n = packed.starts[s + 1] - packed.starts[s];
    if (n == 0) throw std::invalid_argument("empty sequence");
    if (n > static_cast<std::size_t>(config.context_length)) {
      throw std::invalid_argument("sequence of " + std::to_string(n) +
                                  " tokens exceeds context length " +
                                  std::to_string(config.context_length));
    }
  }
  for (auto id : packed.tokens) {
    if (id < 0 || id >= config.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

// Fills `cache` through the final layer norm; logits are left to the caller.
template <typename T>
void forward_hidden(const ParameterSet<T>& p, const PackedTokens& packed, ForwardCache<T>& cache) {
  const auto& cfg = p.config;
  check_tokens(cfg, packed);
  const auto N = static_cast<Eigen::Index>(packed.tokens.size());
  const int D = cfg.model_dim, H = cfg.num_heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> x(N, D);
  for (std::size_t s = 0; s < packed.num_sequences(); ++s) {
    for (auto i = packed.starts[s]; i < packed.starts[s + 1]; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      x.row(r) = p.token_embedding.row(packed.tokens[i]) +
                 p.position_embedding.row(static_cast<Eigen::Index>(i - packed.starts[s]));
    }
  }

  cache.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& c = cache.layers[l];
    c.x_in = x;
    c.ln1_out = layer_norm(x, L.ln1_gain, L.ln1_bias, c.ln1);
    c.q.noalias() = c.ln1_out * L.w_query;
    c.k.noalias() = c.ln1_out * L.w_key;
    c.v.noalias() = c.ln1_out * L.w_value;
    c.attn.setZero(N, D);
    c.probs.assign(packed.num_sequences() * static_cast<std::size_t>(H), Matrix<T>());

    for (std::size_t s = 0; s < packed.num_sequences(); ++s) {
      const auto s0 = static_cast<Eigen::Index>(packed.starts[s]);
      const auto n = static_cast<Eigen::Index>(packed.starts[s + 1]) - s0;
      for (int h = 0; h < H; ++h) {
        auto& P = c.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        P.setZero(n, n);
        const auto col = static_cast<Eigen::Index>(h) * dh;
        for (Eigen::Index i = 0; i < n; ++i) {
          const auto qi = c.q.row(s0 + i).segment(col, dh);
          T max_score = -std::numeric_limits<T>::infinity();
          for (Eigen::Index j = 0; j <= i; ++j) {
            const T sc = qi.dot(c.k.row(s0 + j).segment(col, dh)) * scale;
            P(i, j) = sc;
            if (sc > max_score) max_score = sc;
          }
          T sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            P(i, j) = std::exp(P(i, j) - max_score);
            sum += P(i, j);
          }
          const T inv = T(1) / sum;
          auto out = c.attn.row(s0 + i).segment(col, dh);
          for (Eigen::Index j = 0; j <= i; ++j) {
            P(i, j) *= inv;
            out += P(i, j) * c.v.row(s0 + j).segment(col, dh);
          }
        }
      }
    }

    x.noalias() += c.attn * L.w_out;
    c.x_mid = x;
    c.ln2_out = layer_norm(x, L.ln2_gain, L.ln2_bias, c.ln2);
    c.fc_pre.noalias() = c.ln2_out * L.w_fc;
    c.fc_pre.rowwise() += L.b_fc.row(0);
    c.fc_act = c.fc_pre.unaryExpr([](T v) { return gelu(v); });
    x.noalias() += c.fc_act * L.w_proj;
    x.rowwise() += L.b_proj.row(0);
  }
  cache.x_final = x;
  cache.hidden = layer_norm(x, p.final_ln_gain, p.final_ln_bias, cache.lnf);
}

// Next-token scores for every position of one sequence (n x vocab).
template <typename T>
Matrix<T> forward(const ParameterSet<T>& p, std::span<const TokenId> tokens,
                  ForwardCache<T>* cache_out = nullptr) {
  PackedTokens packed;
  packed.add(tokens);
  ForwardCache<T> local;
  auto& cache = cache_out ? *cache_out : local;
  forward_hidden(p, packed, cache);
  Matrix<T> logits;
  logits.noalias() = cache.hidden * p.output_projection().transpose();
  return logits;
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
double log_softmax_at(const Eigen::Ref<const Matrix<T>>& row, Eigen::Index target) {
  const double m = static_cast<double>(row.maxCoeff());
  double sum = 0;
  for (Eigen::Index j = 0; j < row.cols(); ++j) sum += std::exp(static_cast<double>(row(0, j)) - m);
  return static_cast<double>(row(0, target)) - m - std::log(sum);
}

// Mean negative log-likelihood over positions where mask is set.
template <typename T>
double loss(const Matrix<T>& logits, std::span<const TokenId> targets,
            std::span<const std::uint8_t> mask) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size() || targets.size() != mask.size()) {
    throw std::invalid_argument("logits, targets and mask lengths differ");
  }
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= logits.cols()) throw std::out_of_range("target id out of range");
    total -= log_softmax_at<T>(logits.row(static_cast<Eigen::Index>(i)), targets[i]);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("loss over an all-masked batch");
  return total / static_cast<double>(count);
}

// One training sequence: inputs[i] predicts targets[i] when mask[i] is set.
struct Example {
  TokenSequence inputs;
  TokenSequence targets;
  std::vector<std::uint8_t> mask;
};

struct LossSum {
  double total_nll = 0;
  std::size_t count = 0;
  double mean() const { return count ? total_nll / static_cast<double>(count) : 0.0; }
};

template <typename T>
PackedTokens pack_inputs(std::span<const Example> batch) {
  PackedTokens packed;
  for (const auto& ex : batch) {
    if (ex.inputs.size() != ex.targets.size() || ex.inputs.size() != ex.mask.size()) {
      throw std::invalid_argument("example inputs, targets and mask lengths differ");
    }
    packed.add(ex.inputs);
  }
  return packed;
}

// Summed NLL over masked positions, no gradients.
template <typename T>
LossSum batch_nll(const ParameterSet<T>& p, std::span<const Example> batch) {
  const auto packed = pack_inputs<T>(batch);
  ForwardCache<T> cache;
  forward_hidden(p, packed, cache);
  std::vector<Eigen::Index> rows;
  std::vector<TokenId> targets;
  std::size_t row = 0;
  for (const auto& ex : batch) {
    for (std::size_t i = 0; i < ex.inputs.size(); ++i, ++row) {
      if (!ex.mask[i]) continue;
      rows.push_back(static_cast<Eigen::Index>(row));
      targets.push_back(ex.targets[i]);
    }
  }
  LossSum out;
  if (rows.empty()) return out;
  Matrix<T> h_sel(static_cast<Eigen::Index>(rows.size()), p.config.model_dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    h_sel.row(static_cast<Eigen::Index>(r)) = cache.hidden.row(rows[r]);
  }
  Matrix<T> logits;
  logits.noalias() = h_sel * p.output_projection().transpose();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (targets[r] < 0 || targets[r] >= p.config.vocab_size) throw std::out_of_range("target id out of range");
    out.total_nll -= log_softmax_at<T>(logits.row(static_cast<Eigen::Index>(r)), targets[r]);
    ++out.count;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

// Mean masked NLL over the whole batch; `grads` is overwritten with its
// exact gradient.
template <typename T>
double loss_and_gradients(const ParameterSet<T>& p, std::span<const Example> batch,
                          ParameterSet<T>& grads) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const auto& cfg = p.config;
  const auto packed = pack_inputs<T>(batch);
  ForwardCache<T> cache;
  forward_hidden(p, packed, cache);

  std::vector<Eigen::Index> rows;
  std::vector<TokenId> targets;
  {
    std::size_t row = 0;
    for (const auto& ex : batch) {
      for (std::size_t i = 0; i < ex.inputs.size(); ++i, ++row) {
        if (!ex.mask[i]) continue;
        if (ex.targets[i] < 0 || ex.targets[i] >= cfg.vocab_size) {
          throw std::out_of_range("target id out of range");
        }
        rows.push_back(static_cast<Eigen::Index>(row));
        targets.push_back(ex.targets[i]);
      }
    }
  }
  if (rows.empty()) throw std::invalid_argument("loss over an all-masked batch");
  const auto M = static_cast<Eigen::Index>(rows.size());

  grads = zeros_like(p);
  const auto& E = p.output_projection();

  // Only masked rows contribute to the loss.
  Matrix<T> h_sel(M, cfg.model_dim);
  for (Eigen::Index r = 0; r < M; ++r) h_sel.row(r) = cache.hidden.row(rows[static_cast<std::size_t>(r)]);
  Matrix<T> dlogits;
  dlogits.noalias() = h_sel * E.transpose();
  double total = 0;
  const T inv_m = T(1) / static_cast<T>(M);
  for (Eigen::Index r = 0; r < M; ++r) {
    auto row = dlogits.row(r);
    const T mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    const T sum = row.sum();
    const auto t = targets[static_cast<std::size_t>(r)];
    total -= std::log(static_cast<double>(row(t)) / static_cast<double>(sum));
    row *= inv_m / sum;
    row(t) -= inv_m;
  }

  grads.token_embedding.noalias() += dlogits.transpose() * h_sel;
  Matrix<T> dh_sel;
  dh_sel.noalias() = dlogits * E;
  Matrix<T> dhidden = Matrix<T>::Zero(cache.hidden.rows(), cfg.model_dim);
  for (Eigen::Index r = 0; r < M; ++r) dhidden.row(rows[static_cast<std::size_t>(r)]) = dh_sel.row(r);

  Matrix<T> dx = layer_norm_backward(dhidden, cache.lnf, p.final_ln_gain, grads.final_ln_gain,
                                     grads.final_ln_bias);

  const int H = cfg.num_heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& L = p.layers[l];
    auto& G = grads.layers[l];
    const auto& c = cache.layers[l];

    // MLP branch.
    G.w_proj.noalias() += c.fc_act.transpose() * dx;
    G.b_proj += dx.colwise().sum();
    Matrix<T> dact;
    dact.noalias() = dx * L.w_proj.transpose();
    Matrix<T> dpre = (dact.array() * c.fc_pre.unaryExpr([](T v) { return gelu_grad(v); }).array()).matrix();
    G.w_fc.noalias() += c.ln2_out.transpose() * dpre;
    G.b_fc += dpre.colwise().sum();
    Matrix<T> dln2;
    dln2.noalias() = dpre * L.w_fc.transpose();
    dx += layer_norm_backward(dln2, c.ln2, L.ln2_gain, G.ln2_gain, G.ln2_bias);

    // Attention branch.
    G.w_out.noalias() += c.attn.transpose() * dx;
    Matrix<T> dattn;
    dattn.noalias() = dx * L.w_out.transpose();
    Matrix<T> dq = Matrix<T>::Zero(dx.rows(), dx.cols());
    Matrix<T> dk = Matrix<T>::Zero(dx.rows(), dx.cols());
    Matrix<T> dv = Matrix<T>::Zero(dx.rows(), dx.cols());
    std::vector<T> dprob;
    for (std::size_t s = 0; s < packed.num_sequences(); ++s) {
      const auto s0 = static_cast<Eigen::Index>(packed.starts[s]);
      const auto n = static_cast<Eigen::Index>(packed.starts[s + 1]) - s0;
      dprob.resize(static_cast<std::size_t>(n));
      for (int h = 0; h < H; ++h) {
        const auto& P = c.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        const auto col = static_cast<Eigen::Index>(h) * dh;
        for (Eigen::Index i = 0; i < n; ++i) {
          const auto dout = dattn.row(s0 + i).segment(col, dh);
          T weighted = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            const T dp = dout.dot(c.v.row(s0 + j).segment(col, dh));
            dprob[static_cast<std::size_t>(j)] = dp;
            weighted += dp * P(i, j);
            dv.row(s0 + j).segment(col, dh) += P(i, j) * dout;
          }
          auto dqi = dq.row(s0 + i).segment(col, dh);
          const auto qi = c.q.row(s0 + i).segment(col, dh);
          for (Eigen::Index j = 0; j <= i; ++j) {
            const T ds = P(i, j) * (dprob[static_cast<std::size_t>(j)] - weighted) * scale;
            dqi += ds * c.k.row(s0 + j).segment(col, dh);
            dk.row(s0 + j).segment(col, dh) += ds * qi;
          }
        }
      }
    }
    G.w_query.noalias() += c.ln1_out.transpose() * dq;
    G.w_key.noalias() += c.ln1_out.transpose() * dk;
    G.w_value.noalias() += c.ln1_out.transpose() * dv;
    Matrix<T> dln1;
    dln1.noalias() = dq * L.w_query.transpose();
    dln1.noalias() += dk * L.w_key.transpose();
    dln1.noalias() += dv * L.w_value.transpose();
    dx += layer_norm_backward(dln1, c.ln1, L.ln1_gain, G.ln1_gain, G.ln1_bias);
  }

  for (std::size_t s = 0; s < packed.num_sequences(); ++s) {
    for (auto i = packed.starts[s]; i < packed.starts[s + 1]; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      grads.token_embedding.row(packed.tokens[i]) += dx.row(r);
      grads.position_embedding.row(static_cast<Eigen::Index>(i - packed.starts[s])) += dx.row(r);
    }
  }
  return total / static_cast<double>(M);
}

// ---------------------------------------------------------------------------
// Incremental decoding with a key/value cache

template <typename T>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ParameterSet<T>& p) : p_(&p) {
    const auto& cfg = p.config;
    keys_.assign(p.layers.size(), Matrix<T>(cfg.context_length, cfg.model_dim));
    values_.assign(p.layers.size(), Matrix<T>(cfg.context_length, cfg.model_dim));
  }

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return static_cast<std::size_t>(p_->config.context_length); }

  // Feeds one token and returns the next-token scores (1 x vocab).
  Matrix<T> push(TokenId token) {
    const auto& p = *p_;
    const auto& cfg = p.config;
    if (length_ >= capacity()) throw std::invalid_argument("decoder context is full");
    if (token < 0 || token >= cfg.vocab_size) throw std::out_of_range("token id outside vocabulary");
    const int H = cfg.num_heads, dh = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto pos = static_cast<Eigen::Index>(length_);

    Matrix<T> x = p.token_embedding.row(token) + p.position_embedding.row(pos);
    LayerNormCache<T> scratch;
    std::vector<T> w(length_ + 1);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const auto& L = p.layers[l];
      Matrix<T> a = layer_norm(x, L.ln1_gain, L.ln1_bias, scratch);
      Matrix<T> q = a * L.w_query;
      keys_[l].row(pos) = a * L.w_key;
      values_[l].row(pos) = a * L.w_value;
      Matrix<T> attn = Matrix<T>::Zero(1, cfg.model_dim);
      for (int h = 0; h < H; ++h) {
        const auto col = static_cast<Eigen::Index>(h) * dh;
        const auto qh = q.row(0).segment(col, dh);
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j <= pos; ++j) {
          w[static_cast<std::size_t>(j)] = qh.dot(keys_[l].row(j).segment(col, dh)) * scale;
          mx = std::max(mx, w[static_cast<std::size_t>(j)]);
        }
        T sum = 0;
        for (Eigen::Index j = 0; j <= pos; ++j) {
          w[static_cast<std::size_t>(j)] = std::exp(w[static_cast<std::size_t>(j)] - mx);
          sum += w[static_cast<std::size_t>(j)];
        }
        auto out = attn.row(0).segment(col, dh);
        for (Eigen::Index j = 0; j <= pos; ++j) {
          out += (w[static_cast<std::size_t>(j)] / sum) * values_[l].row(j).segment(col, dh);
        }
      }
      x += attn * L.w_out;
      Matrix<T> m = layer_norm(x, L.ln2_gain, L.ln2_bias, scratch);
      Matrix<T> f = m * L.w_fc + L.b_fc;
      f = f.unaryExpr([](T v) { return gelu(v); });
      x += f * L.w_proj + L.b_proj;
    }
    Matrix<T> hidden = layer_norm(x, p.final_ln_gain, p.final_ln_bias, scratch);
    ++length_;
    return hidden * p.output_projection().transpose();
  }

 private:
  const ParameterSet<T>* p_;
  std::vector<Matrix<T>> keys_;
  std::vector<Matrix<T>> values_;
  std::size_t length_ = 0;
};

}  // namespace emogen
