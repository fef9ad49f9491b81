#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "deepcot/attention.hpp"
#include "deepcot/config.hpp"
#include "deepcot/error.hpp"
#include "deepcot/numerics.hpp"
#include "deepcot/positional.hpp"

namespace deepcot {

// Parameters of one encoder layer. Matrices act on row vectors: y = x * W + b.
// Heads occupy contiguous column blocks of wq/wk/wv.
template <std::floating_point T>
struct LayerWeights {
  Matrix<T> wq, wk, wv, wo;
  Matrix<T> ff1, ff2;
  std::vector<T> bq, bk, bv, bo;
  std::vector<T> ff1_bias, ff2_bias;
  std::vector<T> norm1_gain, norm1_bias;
  std::vector<T> norm2_gain, norm2_bias;
  T rezero_scale{1};

  static LayerWeights zeros(const ModelConfig& cfg) {
    const std::size_t d = cfg.dim;
    const std::size_t f = cfg.ff_dim();
    LayerWeights w;
    w.wq = w.wk = w.wv = w.wo = Matrix<T>(d, d);
    w.ff1 = Matrix<T>(d, f);
    w.ff2 = Matrix<T>(f, d);
    w.bq = w.bk = w.bv = w.bo = w.ff2_bias = std::vector<T>(d, T{0});
    w.ff1_bias = std::vector<T>(f, T{0});
    w.norm1_gain = w.norm2_gain = std::vector<T>(d, T{1});
    w.norm1_bias = w.norm2_bias = std::vector<T>(d, T{0});
    w.rezero_scale = static_cast<T>(cfg.norm.kind == NormKind::Kind::ReZero ? cfg.rezero_constant() : 1.0);
    return w;
  }

  bool has_nonzero_bias() const {
    for (const auto* b : {&bq, &bk, &bv, &bo, &ff1_bias, &ff2_bias}) {
      for (T x : *b) {
        if (x != T{0}) return true;
      }
    }
    return false;
  }

  void validate(const ModelConfig& cfg) const {
    const std::size_t d = cfg.dim;
    const std::size_t f = cfg.ff_dim();
    auto check_m = [](const Matrix<T>& m, std::size_t r, std::size_t c, const char* name) {
      if (m.rows() != r || m.cols() != c) {
        throw ShapeError(std::string("layer weight ") + name + " is " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
      }
      if (!all_finite<T>(m.data())) throw NumericError(std::string("layer weight ") + name + " is not finite");
    };
    auto check_v = [](const std::vector<T>& v, std::size_t n, const char* name) {
      if (v.size() != n) throw ShapeError(std::string("layer vector ") + name + " has wrong length");
      if (!all_finite<T>(v)) throw NumericError(std::string("layer vector ") + name + " is not finite");
    };
    check_m(wq, d, d, "wq");
    check_m(wk, d, d, "wk");
    check_m(wv, d, d, "wv");
    check_m(wo, d, d, "wo");
    check_m(ff1, d, f, "ff1");
    check_m(ff2, f, d, "ff2");
    check_v(bq, d, "bq");
    check_v(bk, d, "bk");
    check_v(bv, d, "bv");
    check_v(bo, d, "bo");
    check_v(ff1_bias, f, "ff1_bias");
    check_v(ff2_bias, d, "ff2_bias");
    check_v(norm1_gain, d, "norm1_gain");
    check_v(norm1_bias, d, "norm1_bias");
    check_v(norm2_gain, d, "norm2_gain");
    check_v(norm2_bias, d, "norm2_bias");
    if (!std::isfinite(rezero_scale)) throw NumericError("rezero scale is not finite");
  }

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

// Scale of both residual branches under ReZero.
template <std::floating_point T>
T residual_scale(const ModelConfig& cfg, const LayerWeights<T>& w) {
  if (cfg.norm.scale_mode == NormKind::ScaleMode::Learned) return w.rezero_scale;
  return static_cast<T>(cfg.rezero_constant());
}

template <std::floating_point T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <std::floating_point T>
void layer_norm_inplace(std::span<T> x, std::span<const T> gain, std::span<const T> bias, T eps = T{1e-5}) {
  const T n = static_cast<T>(x.size());
  T mean{0};
  for (T v : x) mean += v;
  mean /= n;
  T var{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= n;
  const T inv = T{1} / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

// Composite linear feed-forward map ff1 * ff2 (d x d). Only defined without the activation.
template <std::floating_point T>
Matrix<T> combined_ff(const LayerWeights<T>& w, const ModelConfig& cfg) {
  if (cfg.ff != FeedForwardKind::Linear) throw ConfigError("combined_ff requires a linear feed-forward block");
  return matmul(w.ff1, w.ff2);
}

// Per-token intermediate values of one layer.
template <std::floating_point T>
struct LayerTrace {
  std::vector<T> attention;  // concatenated head outputs, before the out projection
  std::vector<T> output;
};

template <std::floating_point T>
struct Projection {
  std::vector<T> q, k, v;
};

// Query/key/value projections of one token; RoPE (if configured) rotates each
// query and key head at the token's absolute position.
template <std::floating_point T>
Projection<T> project_token(std::span<const T> x, const LayerWeights<T>& w, const ModelConfig& cfg,
                            std::uint64_t position, std::span<const T> value_input = {}) {
  if (x.size() != cfg.dim) {
    throw ShapeError("token has " + std::to_string(x.size()) + " features, model dim is " + std::to_string(cfg.dim));
  }
  Projection<T> p{vec_mat<T>(x, w.wq, w.bq), vec_mat<T>(x, w.wk, w.bk),
                  vec_mat<T>(value_input.empty() ? x : value_input, w.wv, w.bv)};
  if (const auto* rope = std::get_if<RopePositional>(&cfg.positional)) {
    const std::size_t dh = cfg.head_dim();
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      rope_rotate_inplace<T>(std::span<T>(p.q).subspan(h * dh, dh), position, rope->base);
      rope_rotate_inplace<T>(std::span<T>(p.k).subspan(h * dh, dh), position, rope->base);
    }
  }
  return p;
}

template <std::floating_point T>
std::vector<T> feed_forward(std::span<const T> z, const LayerWeights<T>& w, const ModelConfig& cfg) {
  auto hidden = vec_mat<T>(z, w.ff1, w.ff1_bias);
  if (cfg.ff == FeedForwardKind::Nonlinear) {
    for (auto& x : hidden) x = gelu(x);
  }
  return vec_mat<T>(hidden, w.ff2, w.ff2_bias);
}

// Everything after attention: out projection, residuals, normalization, feed-forward.
// Post-norm for LayerNorm; x + s*F(x) for ReZero.
template <std::floating_point T>
std::vector<T> finish_layer(std::span<const T> x, std::span<const T> attention, const LayerWeights<T>& w,
                            const ModelConfig& cfg) {
  const auto projected = vec_mat<T>(attention, w.wo, w.bo);
  std::vector<T> z(x.begin(), x.end());
  if (cfg.norm.kind == NormKind::Kind::LayerNorm) {
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += projected[i];
    layer_norm_inplace<T>(z, w.norm1_gain, w.norm1_bias);
    auto y = feed_forward<T>(z, w, cfg);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += z[i];
    layer_norm_inplace<T>(y, w.norm2_gain, w.norm2_bias);
    return y;
  }
  const T s = residual_scale(cfg, w);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += s * projected[i];
  auto y = feed_forward<T>(z, w, cfg);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = z[i] + s * y[i];
  detail::require_finite<T>(y, "encoder layer");
  return y;
}

// One continual single-output layer step. `memories` holds one KVMemory per head
// and is updated in place.
template <std::floating_point T>
std::vector<T> layer_step_continual(std::span<const T> x, const LayerWeights<T>& w, std::span<KVMemory<T>> memories,
                                    const ModelConfig& cfg, std::uint64_t position, LayerTrace<T>* trace = nullptr) {
  if (memories.size() != cfg.heads) throw ConfigError("layer_step_continual: one memory per head required");
  const std::size_t dh = cfg.head_dim();
  const auto p = project_token<T>(x, w, cfg, position);
  std::vector<T> attention(cfg.dim);
  std::vector<T> scratch;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto off = h * dh;
    continual_so_step<T>(std::span<const T>(p.q).subspan(off, dh), std::span<const T>(p.k).subspan(off, dh),
                         std::span<const T>(p.v).subspan(off, dh), memories[h], cfg.activation,
                         std::span<T>(attention).subspan(off, dh), scratch);
  }
  auto y = finish_layer<T>(x, attention, w, cfg);
  if (trace != nullptr) {
    trace->attention = attention;
    trace->output = y;
  }
  return y;
}

// Full-window (non-continual) version of the same layer. Row r sits at absolute
// position first_position + r. `value_input`, when given, replaces X as the input
// of the value projection only. `attention_out` receives the pre-projection
// attention rows.
template <std::floating_point T>
Matrix<T> layer_forward_window(const Matrix<T>& x, const LayerWeights<T>& w, const ModelConfig& cfg,
                               AttentionMask mask, std::uint64_t first_position = 0,
                               const Matrix<T>* value_input = nullptr, Matrix<T>* attention_out = nullptr) {
  if (x.cols() != cfg.dim) throw ShapeError("layer_forward_window: input width != model dim");
  if (value_input != nullptr && (value_input->rows() != x.rows() || value_input->cols() != x.cols())) {
    throw ShapeError("layer_forward_window: value input shape mismatch");
  }
  const std::size_t n = x.rows();
  const std::size_t dh = cfg.head_dim();
  std::vector<Matrix<T>> qh(cfg.heads, Matrix<T>(n, dh)), kh = qh, vh = qh;
  for (std::size_t r = 0; r < n; ++r) {
    const auto p = project_token<T>(x.row(r), w, cfg, first_position + r,
                                    value_input != nullptr ? value_input->row(r) : std::span<const T>{});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      qh[h].set_row(r, std::span<const T>(p.q).subspan(h * dh, dh));
      kh[h].set_row(r, std::span<const T>(p.k).subspan(h * dh, dh));
      vh[h].set_row(r, std::span<const T>(p.v).subspan(h * dh, dh));
    }
  }
  Matrix<T> attention(n, cfg.dim);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto a = base_attention(qh[h], kh[h], vh[h], cfg.activation, mask);
    for (std::size_t r = 0; r < n; ++r) {
      std::copy(a.row(r).begin(), a.row(r).end(), attention.row(r).begin() + static_cast<std::ptrdiff_t>(h * dh));
    }
  }
  Matrix<T> out(n, cfg.dim);
  for (std::size_t r = 0; r < n; ++r) out.set_row(r, finish_layer<T>(x.row(r), attention.row(r), w, cfg));
  if (attention_out != nullptr) *attention_out = std::move(attention);
  return out;
}

// m-output continual layer step over a block of m new tokens.
template <std::floating_point T>
Matrix<T> layer_block_continual(const Matrix<T>& x, const LayerWeights<T>& w, std::span<KVMemory<T>> memories,
                                const ModelConfig& cfg, std::uint64_t first_position) {
  if (memories.size() != cfg.heads) throw ConfigError("layer_block_continual: one memory per head required");
  if (x.cols() != cfg.dim) throw ShapeError("layer_block_continual: input width != model dim");
  const std::size_t m = x.rows();
  const std::size_t dh = cfg.head_dim();
  std::vector<Matrix<T>> qh(cfg.heads, Matrix<T>(m, dh)), kh = qh, vh = qh;
  for (std::size_t r = 0; r < m; ++r) {
    const auto p = project_token<T>(x.row(r), w, cfg, first_position + r);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      qh[h].set_row(r, std::span<const T>(p.q).subspan(h * dh, dh));
      kh[h].set_row(r, std::span<const T>(p.k).subspan(h * dh, dh));
      vh[h].set_row(r, std::span<const T>(p.v).subspan(h * dh, dh));
    }
  }
  Matrix<T> attention(m, cfg.dim);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto a = m_output_step(qh[h], kh[h], vh[h], memories[h], cfg.activation);
    for (std::size_t r = 0; r < m; ++r) {
      std::copy(a.row(r).begin(), a.row(r).end(), attention.row(r).begin() + static_cast<std::ptrdiff_t>(h * dh));
    }
  }
  Matrix<T> out(m, cfg.dim);
  for (std::size_t r = 0; r < m; ++r) out.set_row(r, finish_layer<T>(x.row(r), attention.row(r), w, cfg));
  return out;
}

}  // namespace deepcot
