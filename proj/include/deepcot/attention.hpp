#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "deepcot/error.hpp"
#include "deepcot/numerics.hpp"

namespace deepcot {

namespace testing {

// Fault-injection hook for the verification suite: when set, a full KVMemory
// overwrites its newest row instead of its oldest one.
inline std::atomic<bool>& eviction_fault() {
  static std::atomic<bool> flag{false};
  return flag;
}

}  // namespace testing

// Fixed-capacity FIFO of key rows and value rows for one attention head.
// Logical index 0 is the oldest row.
template <std::floating_point T>
class KVMemory {
 public:
  KVMemory(std::size_t capacity, std::size_t head_dim)
      : capacity_(capacity), head_dim_(head_dim), keys_(capacity * head_dim), values_(capacity * head_dim) {}

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t head_dim() const noexcept { return head_dim_; }
  std::size_t fill() const noexcept { return fill_; }
  bool full() const noexcept { return fill_ == capacity_; }

  std::span<const T> key(std::size_t logical) const { return slot(keys_, physical(logical)); }
  std::span<const T> value(std::size_t logical) const { return slot(values_, physical(logical)); }

  void push(std::span<const T> k, std::span<const T> v) {
    if (k.size() != head_dim_ || v.size() != head_dim_) {
      throw ShapeError("KVMemory::push: row width != head_dim " + std::to_string(head_dim_));
    }
    if (capacity_ == 0) return;
    std::size_t target;
    if (fill_ < capacity_) {
      target = (oldest_ + fill_) % capacity_;
      ++fill_;
    } else if (testing::eviction_fault().load(std::memory_order_relaxed)) {
      target = (oldest_ + fill_ - 1) % capacity_;
    } else {
      target = oldest_;
      oldest_ = (oldest_ + 1) % capacity_;
    }
    std::copy(k.begin(), k.end(), keys_.begin() + static_cast<std::ptrdiff_t>(target * head_dim_));
    std::copy(v.begin(), v.end(), values_.begin() + static_cast<std::ptrdiff_t>(target * head_dim_));
  }

  void clear() noexcept {
    fill_ = 0;
    oldest_ = 0;
    std::fill(keys_.begin(), keys_.end(), T{0});
    std::fill(values_.begin(), values_.end(), T{0});
  }

  friend bool operator==(const KVMemory& a, const KVMemory& b) {
    if (a.capacity_ != b.capacity_ || a.head_dim_ != b.head_dim_ || a.fill_ != b.fill_) return false;
    for (std::size_t i = 0; i < a.fill_; ++i) {
      if (!std::ranges::equal(a.key(i), b.key(i)) || !std::ranges::equal(a.value(i), b.value(i))) return false;
    }
    return true;
  }

 private:
  std::size_t physical(std::size_t logical) const {
    if (logical >= fill_) throw ShapeError("KVMemory: logical index out of range");
    return (oldest_ + logical) % capacity_;
  }
  std::span<const T> slot(const std::vector<T>& buf, std::size_t p) const {
    return {buf.data() + p * head_dim_, head_dim_};
  }

  std::size_t capacity_;
  std::size_t head_dim_;
  std::size_t fill_ = 0;
  std::size_t oldest_ = 0;
  std::vector<T> keys_;
  std::vector<T> values_;
};

struct AttentionMask {
  enum class Kind { FullBidirectional, CausalBanded };
  Kind kind = Kind::FullBidirectional;
  std::size_t band = 0;

  static AttentionMask full() { return {Kind::FullBidirectional, 0}; }
  static AttentionMask causal_banded(std::size_t band) {
    if (band == 0) throw ConfigError("causal banded mask needs band >= 1");
    return {Kind::CausalBanded, band};
  }
};

namespace detail {

// Attended value of one query over `count` key/value rows, in index order.
// Every attention path (window, continual, m-output) funnels through here so
// that equal inputs in equal order give bit-identical outputs.
template <std::floating_point T, class KeyAt, class ValueAt>
void attend(std::span<const T> q, std::size_t count, KeyAt&& key_at, ValueAt&& value_at,
            ActivationKind activation, std::span<T> out, std::vector<T>& weights) {
  std::fill(out.begin(), out.end(), T{0});
  if (count == 0) return;
  const std::size_t head_dim = q.size();
  weights.resize(count);
  if (activation == ActivationKind::Softmax) {
    const T scale = T{1} / std::sqrt(static_cast<T>(head_dim));
    for (std::size_t j = 0; j < count; ++j) weights[j] = dot<T>(q, key_at(j)) * scale;
    softmax_inplace<T>(std::span<T>(weights.data(), count));
  } else {
    for (std::size_t j = 0; j < count; ++j) weights[j] = soft_weight<T>(q, key_at(j), head_dim);
  }
  for (std::size_t j = 0; j < count; ++j) {
    const auto v = value_at(j);
    const T w = weights[j];
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += w * v[c];
  }
  require_finite<T>(out, "attention");
}

}  // namespace detail

// Attention of q over rows [first, last) of K/V. An empty range yields zeros.
template <std::floating_point T>
std::vector<T> attend_rows(std::span<const T> q, const Matrix<T>& keys, const Matrix<T>& values,
                           std::size_t first, std::size_t last, ActivationKind activation) {
  if (keys.cols() != q.size() || values.rows() != keys.rows()) throw ShapeError("attend_rows: shape mismatch");
  if (first > last || last > keys.rows()) throw ShapeError("attend_rows: bad row range");
  std::vector<T> out(values.cols());
  std::vector<T> scratch;
  detail::attend<T>(
      q, last - first, [&](std::size_t j) { return keys.row(first + j); },
      [&](std::size_t j) { return values.row(first + j); }, activation, out, scratch);
  return out;
}

// Non-continual reference attention over a whole block of n tokens.
template <std::floating_point T>
Matrix<T> base_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                         ActivationKind activation, AttentionMask mask) {
  const std::size_t n = q.rows();
  if (k.rows() != n || v.rows() != n || k.cols() != q.cols()) {
    throw ShapeError("base_attention: Q/K/V shapes disagree");
  }
  if (mask.kind == AttentionMask::Kind::CausalBanded && mask.band == 0) {
    throw ConfigError("base_attention: band must be >= 1");
  }
  Matrix<T> out(n, v.cols());
  std::vector<T> scratch;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t lo = 0;
    std::size_t hi = n;
    if (mask.kind == AttentionMask::Kind::CausalBanded) {
      lo = i + 1 >= mask.band ? i + 1 - mask.band : 0;
      hi = i + 1;
    }
    detail::attend<T>(
        q.row(i), hi - lo, [&](std::size_t j) { return k.row(lo + j); },
        [&](std::size_t j) { return v.row(lo + j); }, activation, out.row(i), scratch);
  }
  return out;
}

// One single-output step: q_t attends over [memory; k_t], then (k_t, v_t) is pushed.
template <std::floating_point T>
void continual_so_step(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                       KVMemory<T>& mem, ActivationKind activation, std::span<T> out,
                       std::vector<T>& scratch) {
  const std::size_t dh = mem.head_dim();
  if (q.size() != dh || k.size() != dh || v.size() != dh || out.size() != dh) {
    throw ShapeError("continual_so_step: vector width != head_dim " + std::to_string(dh));
  }
  const std::size_t stored = mem.fill();
  detail::attend<T>(
      q, stored + 1, [&](std::size_t j) { return j < stored ? mem.key(j) : k; },
      [&](std::size_t j) { return j < stored ? mem.value(j) : v; }, activation, out, scratch);
  mem.push(k, v);
}

template <std::floating_point T>
std::vector<T> continual_so_step(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                                 KVMemory<T>& mem, ActivationKind activation) {
  std::vector<T> out(mem.head_dim());
  std::vector<T> scratch;
  continual_so_step<T>(q, k, v, mem, activation, out, scratch);
  return out;
}

// m-output step: each of the m new queries attends jointly over every stored row
// followed by all m new rows; afterwards the m new rows are pushed.
// The window size is implied as mem.capacity() + m.
template <std::floating_point T>
Matrix<T> m_output_step(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, KVMemory<T>& mem,
                        ActivationKind activation) {
  const std::size_t m = q.rows();
  const std::size_t dh = mem.head_dim();
  if (m == 0) throw ShapeError("m_output_step: need at least one new token");
  if (k.rows() != m || v.rows() != m || q.cols() != dh || k.cols() != dh || v.cols() != dh) {
    throw ShapeError("m_output_step: new-token block shape mismatch");
  }
  Matrix<T> out(m, dh);
  std::vector<T> scratch;
  const std::size_t stored = mem.fill();
  for (std::size_t r = 0; r < m; ++r) {
    detail::attend<T>(
        q.row(r), stored + m, [&](std::size_t j) { return j < stored ? mem.key(j) : k.row(j - stored); },
        [&](std::size_t j) { return j < stored ? mem.value(j) : v.row(j - stored); }, activation, out.row(r),
        scratch);
  }
  for (std::size_t r = 0; r < m; ++r) mem.push(k.row(r), v.row(r));
  return out;
}

}  // namespace deepcot
