#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "deepcot/error.hpp"
#include "deepcot/numerics.hpp"

namespace deepcot {

struct NoPositional {
  friend bool operator==(const NoPositional&, const NoPositional&) = default;
};

// Rotary embedding applied to queries and keys inside every attention block.
struct RopePositional {
  double base = 10000.0;
  friend bool operator==(const RopePositional&, const RopePositional&) = default;
};

// Additive table indexed by step modulo period. The table itself is a model
// parameter and lives with the weights; period 0 means "use the window size".
struct RecyclingPositional {
  std::size_t period = 0;
  friend bool operator==(const RecyclingPositional&, const RecyclingPositional&) = default;
};

// Learned absolute positions. Only representable so that conversion can reject it:
// an absolute table has no meaning past its last row in an unbounded stream.
struct AbsolutePositional {
  std::size_t max_positions = 0;
  friend bool operator==(const AbsolutePositional&, const AbsolutePositional&) = default;
};

using PositionalKind =
    std::variant<NoPositional, RopePositional, RecyclingPositional, AbsolutePositional>;

inline bool is_circular(const PositionalKind& kind) {
  return !std::holds_alternative<AbsolutePositional>(kind);
}

// Rotates consecutive pairs (x[2i], x[2i+1]) by position * base^(-2i/head_dim).
template <std::floating_point T>
void rope_rotate_inplace(std::span<T> x, std::uint64_t position, double base) {
  const std::size_t head_dim = x.size();
  if (head_dim % 2 != 0) throw ShapeError("rope: head_dim must be even, got " + std::to_string(head_dim));
  if (position == 0) return;
  const double pos = static_cast<double>(position);
  for (std::size_t i = 0; i < head_dim / 2; ++i) {
    const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double angle = pos * theta;
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(std::sin(angle));
    const T a = x[2 * i];
    const T b = x[2 * i + 1];
    x[2 * i] = a * c - b * s;
    x[2 * i + 1] = a * s + b * c;
  }
}

template <std::floating_point T>
std::vector<T> rope_rotate(std::span<const T> x, std::uint64_t position, double base = 10000.0) {
  std::vector<T> out(x.begin(), x.end());
  rope_rotate_inplace<T>(out, position, base);
  return out;
}

template <std::floating_point T>
std::vector<T> recycling_embed(std::span<const T> token, std::uint64_t step, const Matrix<T>& table) {
  if (table.rows() == 0) throw ShapeError("recycling_embed: empty table");
  if (table.cols() != token.size()) {
    throw ShapeError("recycling_embed: token has " + std::to_string(token.size()) +
                     " features, table has " + std::to_string(table.cols()));
  }
  const auto row = table.row(static_cast<std::size_t>(step % table.rows()));
  std::vector<T> out(token.begin(), token.end());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] += row[c];
  return out;
}

}  // namespace deepcot
