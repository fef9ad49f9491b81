#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "deepcot/attention.hpp"
#include "deepcot/config.hpp"
#include "deepcot/encoder.hpp"
#include "deepcot/error.hpp"
#include "deepcot/numerics.hpp"
#include "deepcot/positional.hpp"

namespace deepcot {

template <std::floating_point T>
struct Model {
  ModelConfig config;
  std::vector<LayerWeights<T>> layers;
  Matrix<T> recycling_table;  // period x dim; empty unless positional is Recycling

  void validate() const {
    config.validate();
    if (std::holds_alternative<AbsolutePositional>(config.positional)) {
      throw ConfigError("absolute positional embeddings cannot be run; convert the model to a circular embedding");
    }
    if (layers.size() != config.depth) {
      throw ShapeError("model has " + std::to_string(layers.size()) + " layers, config depth is " +
                       std::to_string(config.depth));
    }
    for (const auto& l : layers) l.validate(config);
    const std::size_t period = config.recycling_period();
    if (period > 0 && (recycling_table.rows() != period || recycling_table.cols() != config.dim)) {
      throw ShapeError("recycling table must be " + std::to_string(period) + "x" + std::to_string(config.dim));
    }
    if (config.is_decoupled()) {
      for (const auto& l : layers) {
        if (l.has_nonzero_bias()) throw ConfigError("decoupled profile requires zero biases");
      }
    }
  }

  friend bool operator==(const Model&, const Model&) = default;
};

struct RandomInit {
  bool biases = true;       // ignored (forced off) in the decoupled profile
  double weight_gain = 1.0; // multiplies the 1/sqrt(fan_in) standard deviation
};

// Gaussian weights with std gain/sqrt(fan_in); norm gains near 1.
template <std::floating_point T>
Model<T> random_model(const ModelConfig& cfg, std::uint64_t seed, RandomInit init = {}) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Matrix<T>& m) {
    const double sd = init.weight_gain / std::sqrt(static_cast<double>(m.rows()));
    for (auto& x : m.data()) x = static_cast<T>(sd * normal(rng));
  };
  auto fill_v = [&](std::vector<T>& v, double sd, double mean = 0.0) {
    for (auto& x : v) x = static_cast<T>(mean + sd * normal(rng));
  };
  const bool biases = init.biases && !cfg.is_decoupled();
  Model<T> model{cfg, {}, {}};
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    auto w = LayerWeights<T>::zeros(cfg);
    for (auto* m : {&w.wq, &w.wk, &w.wv, &w.wo, &w.ff1, &w.ff2}) fill(*m);
    if (biases) {
      for (auto* b : {&w.bq, &w.bk, &w.bv, &w.bo, &w.ff1_bias, &w.ff2_bias}) fill_v(*b, 0.1);
    }
    fill_v(w.norm1_gain, 0.1, 1.0);
    fill_v(w.norm2_gain, 0.1, 1.0);
    fill_v(w.norm1_bias, 0.1);
    fill_v(w.norm2_bias, 0.1);
    if (cfg.norm.kind == NormKind::Kind::ReZero && cfg.norm.scale_mode == NormKind::ScaleMode::Learned) {
      w.rezero_scale = static_cast<T>(0.2 + 0.6 * std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    }
    model.layers.push_back(std::move(w));
  }
  if (const std::size_t period = cfg.recycling_period(); period > 0) {
    model.recycling_table = Matrix<T>(period, cfg.dim);
    for (auto& x : model.recycling_table.data()) x = static_cast<T>(0.5 * normal(rng));
  }
  return model;
}

// I.i.d. standard normal tokens, one per row.
template <std::floating_point T>
Matrix<T> random_tokens(std::size_t count, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<T> x(count, dim);
  for (auto& v : x.data()) v = static_cast<T>(normal(rng));
  return x;
}

// Per-stream state: one KVMemory per (layer, head) plus the absolute step index.
template <std::floating_point T>
class StreamState {
 public:
  // `block` is the number of tokens consumed per call (1 for single-output models).
  explicit StreamState(const ModelConfig& cfg, std::size_t block = 1, std::uint64_t first_step = 0)
      : block_(block), step_(first_step) {
    if (block == 0 || block > cfg.window) {
      throw ConfigError("block size " + std::to_string(block) + " must be in [1, window]");
    }
    memories_.assign(cfg.depth, std::vector<KVMemory<T>>(cfg.heads, KVMemory<T>(cfg.window - block, cfg.head_dim())));
  }

  std::uint64_t step() const noexcept { return step_; }
  std::size_t block() const noexcept { return block_; }
  std::span<KVMemory<T>> memories(std::size_t layer) { return memories_.at(layer); }
  std::span<const KVMemory<T>> memories(std::size_t layer) const { return memories_.at(layer); }

  void advance() noexcept { step_ += block_; }

  void reset() noexcept {
    for (auto& layer : memories_) {
      for (auto& m : layer) m.clear();
    }
    step_ = 0;
  }

  friend bool operator==(const StreamState&, const StreamState&) = default;

 private:
  std::size_t block_;
  std::uint64_t step_;
  std::vector<std::vector<KVMemory<T>>> memories_;
};

template <std::floating_point T>
void reset(StreamState<T>& state) noexcept {
  state.reset();
}

template <std::floating_point T>
std::vector<T> embed_input(const Model<T>& model, std::span<const T> x, std::uint64_t position) {
  if (x.size() != model.config.dim) {
    throw ShapeError("input token has " + std::to_string(x.size()) + " features, model dim is " +
                     std::to_string(model.config.dim));
  }
  if (std::holds_alternative<RecyclingPositional>(model.config.positional)) {
    return recycling_embed<T>(x, position, model.recycling_table);
  }
  return {x.begin(), x.end()};
}

// Per-layer traces of one stream step (index l = output of layer l).
template <std::floating_point T>
using StepTrace = std::vector<LayerTrace<T>>;

// Consumes one token and returns the attended output of the newest position.
template <std::floating_point T>
std::vector<T> stream_step(const Model<T>& model, StreamState<T>& state, std::span<const T> x,
                           StepTrace<T>* trace = nullptr) {
  if (state.block() != 1) throw ConfigError("stream_step needs a single-output stream state");
  const auto position = state.step();
  auto h = embed_input(model, x, position);
  if (trace != nullptr) trace->assign(model.layers.size(), {});
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    h = layer_step_continual<T>(h, model.layers[l], state.memories(l), model.config, position,
                                trace != nullptr ? &(*trace)[l] : nullptr);
  }
  state.advance();
  return h;
}

// m-output variant: consumes m = state.block() tokens at once and returns m outputs.
template <std::floating_point T>
Matrix<T> stream_block(const Model<T>& model, StreamState<T>& state, const Matrix<T>& x) {
  if (x.rows() != state.block()) {
    throw ShapeError("stream_block: got " + std::to_string(x.rows()) + " tokens, state expects " +
                     std::to_string(state.block()));
  }
  if (x.rows() > model.config.window) throw ConfigError("stream_block: block larger than window");
  const auto first = state.step();
  Matrix<T> h(x.rows(), model.config.dim);
  for (std::size_t r = 0; r < x.rows(); ++r) h.set_row(r, embed_input(model, x.row(r), first + r));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    h = layer_block_continual<T>(h, model.layers[l], state.memories(l), model.config, first);
  }
  state.advance();
  return h;
}

// Runs the whole stack over one block of tokens with a fixed mask.
// Returns depth+1 matrices: the embedded input, then each layer's output.
// `attentions`, when given, receives each layer's pre-projection attention rows.
template <std::floating_point T>
std::vector<Matrix<T>> window_stack(const Model<T>& model, const Matrix<T>& x, AttentionMask mask,
                                    std::uint64_t first_position = 0, std::vector<Matrix<T>>* attentions = nullptr) {
  Matrix<T> h(x.rows(), model.config.dim);
  for (std::size_t r = 0; r < x.rows(); ++r) h.set_row(r, embed_input(model, x.row(r), first_position + r));
  std::vector<Matrix<T>> outs{h};
  if (attentions != nullptr) attentions->clear();
  for (const auto& layer : model.layers) {
    Matrix<T> att;
    outs.push_back(layer_forward_window<T>(outs.back(), layer, model.config, mask, first_position, nullptr, &att));
    if (attentions != nullptr) attentions->push_back(std::move(att));
  }
  return outs;
}

// Full recomputation reference.
//  - CausalBanded: one pass over all L tokens with the given band at every layer.
//  - FullBidirectional: the sliding-window base model; row t is the last row of
//    the stack evaluated on the most recent min(t+1, n) tokens.
template <std::floating_point T>
Matrix<T> oracle_forward(const Model<T>& model, const Matrix<T>& x, AttentionMask mask) {
  if (x.rows() == 0) throw ShapeError("oracle_forward: need at least one token");
  if (x.cols() != model.config.dim) throw ShapeError("oracle_forward: input width != model dim");
  if (mask.kind == AttentionMask::Kind::CausalBanded) return window_stack(model, x, mask).back();
  const std::size_t n = model.config.window;
  Matrix<T> out(x.rows(), model.config.dim);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const std::size_t first = t + 1 >= n ? t + 1 - n : 0;
    Matrix<T> win(t + 1 - first, x.cols());
    for (std::size_t r = first; r <= t; ++r) win.set_row(r - first, x.row(r));
    const auto stack = window_stack(model, win, mask, first);
    out.set_row(t, stack.back().row(win.rows() - 1));
  }
  return out;
}

// Number of inputs (including the current one) that can reach the newest output
// of an l-layer continual stack with window n.
constexpr std::size_t effective_receptive_field(std::size_t depth, std::size_t window) {
  return depth * (window - 1) + 1;
}

}  // namespace deepcot
