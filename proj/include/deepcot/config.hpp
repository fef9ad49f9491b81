#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "deepcot/error.hpp"
#include "deepcot/numerics.hpp"
#include "deepcot/positional.hpp"

namespace deepcot {

struct NormKind {
  enum class Kind { LayerNorm, ReZero };
  enum class ScaleMode { Constant, Learned };

  Kind kind = Kind::LayerNorm;
  ScaleMode scale_mode = ScaleMode::Constant;
  // Constant ReZero scale; unset means 1/depth.
  std::optional<double> constant;

  static NormKind layer_norm() { return {}; }
  static NormKind rezero_constant(std::optional<double> scale = std::nullopt) {
    return {Kind::ReZero, ScaleMode::Constant, scale};
  }
  static NormKind rezero_learned() { return {Kind::ReZero, ScaleMode::Learned, std::nullopt}; }

  friend bool operator==(const NormKind&, const NormKind&) = default;
};

enum class FeedForwardKind { Nonlinear, Linear };

enum class ExecutionMode { Continual, OracleBidirectional, OracleCausalBanded };

inline std::string_view to_string(FeedForwardKind k) { return k == FeedForwardKind::Linear ? "linear" : "nonlinear"; }

inline std::string_view to_string(ExecutionMode m) {
  switch (m) {
    case ExecutionMode::Continual: return "continual";
    case ExecutionMode::OracleBidirectional: return "oracle_bidirectional";
    case ExecutionMode::OracleCausalBanded: return "oracle_causal_banded";
  }
  return "?";
}

inline ExecutionMode parse_mode(std::string_view s) {
  if (s == "continual") return ExecutionMode::Continual;
  if (s == "oracle_bidirectional" || s == "bidirectional") return ExecutionMode::OracleBidirectional;
  if (s == "oracle_causal_banded" || s == "causal_banded") return ExecutionMode::OracleCausalBanded;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t depth = 1;
  std::size_t window = 4;
  std::size_t dim = 8;
  std::size_t heads = 1;
  std::size_t d_ff = 0;  // 0 means 4 * dim
  ActivationKind activation = ActivationKind::Softmax;
  NormKind norm{};
  FeedForwardKind ff = FeedForwardKind::Nonlinear;
  PositionalKind positional = NoPositional{};
  ExecutionMode mode = ExecutionMode::Continual;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t ff_dim() const { return d_ff == 0 ? 4 * dim : d_ff; }

  double rezero_constant() const {
    return norm.constant.value_or(1.0 / static_cast<double>(depth));
  }

  // SOFT + ReZero + linear feed-forward: the profile in which token
  // contributions stay additive through a whole layer.
  bool is_decoupled() const {
    return activation == ActivationKind::Soft && norm.kind == NormKind::Kind::ReZero &&
           ff == FeedForwardKind::Linear;
  }

  std::size_t recycling_period() const {
    const auto* rec = std::get_if<RecyclingPositional>(&positional);
    if (rec == nullptr) return 0;
    return rec->period == 0 ? window : rec->period;
  }

  void validate() const {
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (window < 1) throw ConfigError("window must be >= 1");
    if (dim < 1) throw ConfigError("dim must be >= 1");
    if (heads < 1 || dim % heads != 0) {
      throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    }
    if (std::holds_alternative<RopePositional>(positional)) {
      if (head_dim() % 2 != 0) throw ConfigError("rope needs an even head_dim");
      if (!(std::get<RopePositional>(positional).base > 0.0)) throw ConfigError("rope base must be positive");
    }
    if (std::holds_alternative<RecyclingPositional>(positional) && recycling_period() < window) {
      throw ConfigError("recycling period must be >= window");
    }
    if (norm.constant && !std::isfinite(*norm.constant)) {
      throw ConfigError("rezero constant must be finite");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace deepcot
