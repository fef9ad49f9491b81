#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deepcot/attention.hpp"
#include "deepcot/config.hpp"
#include "deepcot/encoder.hpp"
#include "deepcot/error.hpp"
#include "deepcot/model.hpp"
#include "deepcot/numerics.hpp"

namespace deepcot {

// Differences between the continual stack and the sliding-window base stack,
// measured at the newest step t over the window positions t-n+1..t.
struct DeltaReport {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::size_t length = 0;
  std::size_t newest = 0;
  std::vector<std::size_t> positions;
  // [layer][k]: L2 norm of (continual - base) for window position positions[k].
  std::vector<std::vector<double>> attention_delta;
  std::vector<std::vector<double>> output_delta;
  // [layer]: raw attention differences, one row per window position.
  std::vector<Matrix<double>> attention_diff;
  // Max abs gap between the measured first-layer attention difference and the
  // explicit two-range reconstruction: attention over the tokens only the continual
  // window of i sees, minus attention over the tokens after i that only the base window sees.
  double first_layer_reconstruction_error = 0.0;
};

template <std::floating_point T>
DeltaReport measure_deltas(const Model<T>& model, const Matrix<T>& x, std::uint64_t seed = 0) {
  model.validate();
  const auto& cfg = model.config;
  const std::size_t n = cfg.window;
  const std::size_t length = x.rows();
  if (length < n) {
    throw ConfigError("measure_deltas: stream length " + std::to_string(length) + " shorter than window " +
                      std::to_string(n));
  }
  const std::size_t t = length - 1;
  const std::size_t first = t + 1 - n;

  // Continual stack: stream everything, keep traces of the window positions.
  StreamState<T> state(cfg);
  std::vector<StepTrace<T>> traces(n);
  for (std::size_t i = 0; i < length; ++i) {
    StepTrace<T> tr;
    stream_step<T>(model, state, x.row(i), &tr);
    if (i >= first) traces[i - first] = std::move(tr);
  }

  // Base stack: bidirectional attention over the most recent n tokens.
  Matrix<T> win(n, cfg.dim);
  for (std::size_t r = 0; r < n; ++r) win.set_row(r, x.row(first + r));
  std::vector<Matrix<T>> base_att;
  const auto base = window_stack(model, win, AttentionMask::full(), first, &base_att);

  DeltaReport rep;
  rep.config = cfg;
  rep.seed = seed;
  rep.length = length;
  rep.newest = t;
  for (std::size_t r = 0; r < n; ++r) rep.positions.push_back(first + r);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    std::vector<double> att_d(n), out_d(n);
    Matrix<double> diff(n, cfg.dim);
    for (std::size_t r = 0; r < n; ++r) {
      const auto& tr = traces[r][l];
      for (std::size_t c = 0; c < cfg.dim; ++c) {
        diff(r, c) = static_cast<double>(tr.attention[c]) - static_cast<double>(base_att[l](r, c));
      }
      att_d[r] = l2_norm<double>(diff.row(r));
      double acc = 0.0;
      for (std::size_t c = 0; c < cfg.dim; ++c) {
        const double dv = static_cast<double>(tr.output[c]) - static_cast<double>(base[l + 1](r, c));
        acc += dv * dv;
      }
      out_d[r] = std::sqrt(acc);
    }
    rep.attention_delta.push_back(std::move(att_d));
    rep.output_delta.push_back(std::move(out_d));
    rep.attention_diff.push_back(std::move(diff));
  }

  // Two-range reconstruction of the first-layer difference: tokens only the
  // continual window sees, minus tokens only the base window sees.
  const auto& w0 = model.layers.front();
  const std::size_t dh = cfg.head_dim();
  std::vector<Matrix<T>> kh(cfg.heads, Matrix<T>(length, dh)), vh = kh;
  std::vector<Projection<T>> proj;
  proj.reserve(length);
  for (std::size_t j = 0; j < length; ++j) {
    const auto e = embed_input(model, x.row(j), j);
    proj.push_back(project_token<T>(e, w0, cfg, j));
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      kh[h].set_row(j, std::span<const T>(proj[j].k).subspan(h * dh, dh));
      vh[h].set_row(j, std::span<const T>(proj[j].v).subspan(h * dh, dh));
    }
  }
  double worst = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = first + r;
    const std::size_t only_cont_lo = i + 1 >= n ? i + 1 - n : 0;
    const std::size_t only_cont_hi = std::max(only_cont_lo, first);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto q = std::span<const T>(proj[i].q).subspan(h * dh, dh);
      const auto gained = attend_rows<T>(q, kh[h], vh[h], only_cont_lo, only_cont_hi, cfg.activation);
      const auto lost = attend_rows<T>(q, kh[h], vh[h], i + 1, t + 1, cfg.activation);
      for (std::size_t c = 0; c < dh; ++c) {
        const double recon = static_cast<double>(gained[c]) - static_cast<double>(lost[c]);
        worst = std::max(worst, std::abs(recon - rep.attention_diff[0](r, h * dh + c)));
      }
    }
  }
  rep.first_layer_reconstruction_error = worst;
  return rep;
}

// Linear maps carrying a scaled attention difference of layer l into the key and
// value inputs of layer l+1 in the decoupled profile (row-vector convention):
//   residual_map = wo (I + s ff1 ff2)
//   key_map      = residual_map wk[l+1],  value_map = residual_map wv[l+1]
// where s is the ReZero scale.
template <std::floating_point T>
struct PropagationFactors {
  Matrix<T> residual_map;
  Matrix<T> key_map;
  Matrix<T> value_map;
};

template <std::floating_point T>
PropagationFactors<T> propagation_factors(const Model<T>& model, std::size_t layer) {
  const auto& cfg = model.config;
  if (!cfg.is_decoupled()) throw ConfigError("propagation factors are only defined for the decoupled profile");
  if (layer + 1 >= model.layers.size()) throw ConfigError("propagation factors need a following layer");
  const auto& w = model.layers[layer];
  const auto& next = model.layers[layer + 1];
  const T s = residual_scale(cfg, w);
  auto inner = combined_ff(w, cfg);
  for (auto& v : inner.data()) v *= s;
  for (std::size_t i = 0; i < cfg.dim; ++i) inner(i, i) += T{1};
  auto residual = matmul(w.wo, inner);
  auto keys = matmul(residual, next.wk);
  auto values = matmul(residual, next.wv);
  return {std::move(residual), std::move(keys), std::move(values)};
}

struct PropagationReport {
  double max_key_error = 0.0;     // max |measured key gap - predicted| over window rows
  double max_value_error = 0.0;
  double max_measured = 0.0;      // scale of the measured differences
  double newest_query_gap = 0.0;  // |continual - base| of the layer-1 input at t
};

// Checks, for the boundary 0 -> 1, that the layer-1 key/value inputs of the two
// stacks differ by exactly the ReZero-scaled first-layer attention differences
// pushed through key_map / value_map.
template <std::floating_point T>
PropagationReport verify_linear_propagation(const Model<T>& model, const Matrix<T>& x) {
  model.validate();
  const auto& cfg = model.config;
  if (!cfg.is_decoupled()) throw ConfigError("verify_linear_propagation requires SOFT + ReZero + linear FF");
  if (cfg.depth < 2) throw ConfigError("verify_linear_propagation needs depth >= 2");
  const std::size_t n = cfg.window;
  if (x.rows() < n) throw ConfigError("verify_linear_propagation: stream shorter than window");
  const std::size_t t = x.rows() - 1;
  const std::size_t first = t + 1 - n;

  StreamState<T> state(cfg);
  std::vector<StepTrace<T>> traces(n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    StepTrace<T> tr;
    stream_step<T>(model, state, x.row(i), &tr);
    if (i >= first) traces[i - first] = std::move(tr);
  }
  Matrix<T> win(n, cfg.dim);
  for (std::size_t r = 0; r < n; ++r) win.set_row(r, x.row(first + r));
  std::vector<Matrix<T>> base_att;
  const auto base = window_stack(model, win, AttentionMask::full(), first, &base_att);

  const auto f = propagation_factors(model, 0);
  const auto& next = model.layers[1];
  const T s = residual_scale(cfg, model.layers[0]);
  PropagationReport rep;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& tr = traces[r][0];
    std::vector<T> delta(cfg.dim);
    for (std::size_t c = 0; c < cfg.dim; ++c) delta[c] = s * (tr.attention[c] - base_att[0](r, c));
    const auto pk = vec_mat<T>(delta, f.key_map);
    const auto pv = vec_mat<T>(delta, f.value_map);
    const auto kc = vec_mat<T>(tr.output, next.wk, next.bk);
    const auto kb = vec_mat<T>(base[1].row(r), next.wk, next.bk);
    const auto vc = vec_mat<T>(tr.output, next.wv, next.bv);
    const auto vb = vec_mat<T>(base[1].row(r), next.wv, next.bv);
    for (std::size_t c = 0; c < cfg.dim; ++c) {
      const double dk = static_cast<double>(kc[c]) - static_cast<double>(kb[c]);
      const double dv = static_cast<double>(vc[c]) - static_cast<double>(vb[c]);
      rep.max_key_error = std::max(rep.max_key_error, std::abs(dk - static_cast<double>(pk[c])));
      rep.max_value_error = std::max(rep.max_value_error, std::abs(dv - static_cast<double>(pv[c])));
      rep.max_measured = std::max({rep.max_measured, std::abs(dk), std::abs(dv)});
    }
  }
  rep.newest_query_gap =
      static_cast<double>(max_abs_diff<T>(traces[n - 1][0].output, base[1].row(n - 1)));
  return rep;
}

// |att(q, rows [0,b)) - att(q, rows [0,c)) - att(q, rows [c,b))|_2 for one query.
template <std::floating_point T>
double additive_split_check(std::span<const T> q, const Matrix<T>& keys, const Matrix<T>& values, std::size_t split,
                            ActivationKind activation) {
  if (keys.rows() != values.rows()) throw ShapeError("additive_split_check: key/value row mismatch");
  if (split == 0 || split >= keys.rows()) {
    throw ShapeError("additive_split_check: split " + std::to_string(split) + " must lie strictly inside 0.." +
                     std::to_string(keys.rows()));
  }
  const auto whole = attend_rows<T>(q, keys, values, 0, keys.rows(), activation);
  const auto left = attend_rows<T>(q, keys, values, 0, split, activation);
  const auto right = attend_rows<T>(q, keys, values, split, keys.rows(), activation);
  double acc = 0.0;
  for (std::size_t c = 0; c < whole.size(); ++c) {
    const double d = static_cast<double>(whole[c]) - static_cast<double>(left[c]) - static_cast<double>(right[c]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace deepcot
