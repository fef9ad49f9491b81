#include <gtest/gtest.h>

#include <cmath>

#include "deepcot/diffanalysis.hpp"
#include "deepcot/encoder.hpp"
#include "deepcot/model.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using deepcot::ActivationKind;
using deepcot::FeedForwardKind;
using deepcot::Matrix;
using deepcot::ModelConfig;
using deepcot::NormKind;

namespace {

ModelConfig small_config(ActivationKind act, NormKind norm, FeedForwardKind ff, std::size_t heads = 2) {
  ModelConfig cfg;
  cfg.depth = 1;
  cfg.window = 4;
  cfg.dim = 8;
  cfg.heads = heads;
  cfg.activation = act;
  cfg.norm = norm;
  cfg.ff = ff;
  return cfg;
}

oracle::Rows mat_rows(const Matrix<double>& m) { return test_support::to_rows(m); }

std::vector<double> row_times(const std::vector<double>& x, const Matrix<double>& w, const std::vector<double>& b) {
  const auto r = oracle::matmul({x}, mat_rows(w));
  auto out = r[0];
  for (std::size_t c = 0; c < out.size(); ++c) out[c] += b[c];
  return out;
}

void ln(std::vector<double>& x, const std::vector<double>& g, const std::vector<double>& b) {
  long double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>((x[i] - mean) / std::sqrt(var + 1e-5L)) * g[i] + b[i];
}

// Independent single-layer reference for the last token of a window, all heads.
std::vector<double> reference_layer_last(const Matrix<double>& x, const deepcot::LayerWeights<double>& w,
                                         const ModelConfig& cfg) {
  const std::size_t n = x.rows(), dh = cfg.head_dim();
  oracle::Rows q, k, v;
  for (std::size_t r = 0; r < n; ++r) {
    const std::vector<double> xr(x.row(r).begin(), x.row(r).end());
    q.push_back(row_times(xr, w.wq, w.bq));
    k.push_back(row_times(xr, w.wk, w.bk));
    v.push_back(row_times(xr, w.wv, w.bv));
  }
  std::vector<double> att(cfg.dim);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    oracle::Rows kh, vh;
    for (std::size_t r = 0; r < n; ++r) {
      kh.emplace_back(k[r].begin() + h * dh, k[r].begin() + (h + 1) * dh);
      vh.emplace_back(v[r].begin() + h * dh, v[r].begin() + (h + 1) * dh);
    }
    const std::vector<double> qh(q[n - 1].begin() + h * dh, q[n - 1].begin() + (h + 1) * dh);
    const auto a = oracle::attend(qh, kh, vh, 0, n, cfg.activation == ActivationKind::Softmax);
    std::copy(a.begin(), a.end(), att.begin() + h * dh);
  }
  const std::vector<double> xl(x.row(n - 1).begin(), x.row(n - 1).end());
  const auto o = row_times(att, w.wo, w.bo);
  const bool rezero = cfg.norm.kind == NormKind::Kind::ReZero;
  const double s = rezero ? deepcot::residual_scale(cfg, w) : 1.0;
  std::vector<double> z(cfg.dim);
  for (std::size_t c = 0; c < cfg.dim; ++c) z[c] = xl[c] + s * o[c];
  if (!rezero) ln(z, w.norm1_gain, w.norm1_bias);
  auto hid = row_times(z, w.ff1, w.ff1_bias);
  if (cfg.ff == FeedForwardKind::Nonlinear) {
    for (auto& e : hid) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
  }
  const auto f = row_times(hid, w.ff2, w.ff2_bias);
  std::vector<double> y(cfg.dim);
  for (std::size_t c = 0; c < cfg.dim; ++c) y[c] = z[c] + s * f[c];
  if (!rezero) ln(y, w.norm2_gain, w.norm2_bias);
  return y;
}

}  // namespace

TEST(Encoder, ZeroRezeroScaleIsIdentity) {
  auto cfg = small_config(ActivationKind::Softmax, NormKind::rezero_constant(0.0), FeedForwardKind::Nonlinear);
  const auto model = deepcot::random_model<double>(cfg, 1);
  const auto x = deepcot::random_tokens<double>(6, cfg.dim, 2);
  deepcot::StreamState<double> st(cfg);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto y = deepcot::stream_step<double>(model, st, x.row(t));
    EXPECT_EQ(y, std::vector<double>(x.row(t).begin(), x.row(t).end()));
  }
}

TEST(Encoder, LayerMatchesIndependentReference) {
  for (auto act : {ActivationKind::Softmax, ActivationKind::Soft}) {
    for (auto norm : {NormKind::layer_norm(), NormKind::rezero_constant(), NormKind::rezero_learned()}) {
      for (auto ff : {FeedForwardKind::Nonlinear, FeedForwardKind::Linear}) {
        for (std::size_t heads : {1u, 2u}) {
          const auto cfg = small_config(act, norm, ff, heads);
          const auto model = deepcot::random_model<double>(cfg, 7);
          const auto x = deepcot::random_tokens<double>(cfg.window, cfg.dim, 8);
          const auto got =
              deepcot::layer_forward_window<double>(x, model.layers[0], cfg, deepcot::AttentionMask::full());
          const auto want = reference_layer_last(x, model.layers[0], cfg);
          for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_NEAR(got(cfg.window - 1, c), want[c], 1e-10);
        }
      }
    }
  }
}

// A single head with d=2, hand-constructed weights: identity projections, one
// memory row, softmax. Checks the attention mixing numerically.
TEST(Encoder, HandComputedSingleHead) {
  ModelConfig cfg = small_config(ActivationKind::Softmax, NormKind::rezero_constant(1.0), FeedForwardKind::Linear, 1);
  cfg.dim = 2;
  cfg.d_ff = 2;
  cfg.window = 2;
  auto w = deepcot::LayerWeights<double>::zeros(cfg);
  w.wq = w.wk = w.wv = w.wo = Matrix<double>::identity(2);
  std::vector<deepcot::KVMemory<double>> mem(1, deepcot::KVMemory<double>(1, 2));
  const std::vector<double> x0{1.0, 0.0}, x1{0.0, 1.0};
  (void)deepcot::layer_step_continual<double>(x0, w, mem, cfg, 0);
  const auto y = deepcot::layer_step_continual<double>(x1, w, mem, cfg, 1);
  // scores: q1.k0 = 0, q1.k1 = 1, scaled by 1/sqrt(2)
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double p1 = e / (1.0 + e), p0 = 1.0 / (1.0 + e);
  // FF is zero, so y = x1 + attention.
  EXPECT_NEAR(y[0], p0, 1e-15);
  EXPECT_NEAR(y[1], 1.0 + p1, 1e-15);
}

TEST(Encoder, StreamMatchesCausalRecomputeAllVariants) {
  for (auto act : {ActivationKind::Softmax, ActivationKind::Soft}) {
    for (auto norm : {NormKind::layer_norm(), NormKind::rezero_constant(), NormKind::rezero_learned()}) {
      for (auto ff : {FeedForwardKind::Nonlinear, FeedForwardKind::Linear}) {
        for (deepcot::PositionalKind pos :
             {deepcot::PositionalKind{deepcot::NoPositional{}}, deepcot::PositionalKind{deepcot::RopePositional{}},
              deepcot::PositionalKind{deepcot::RecyclingPositional{}}}) {
          auto cfg = small_config(act, norm, ff);
          cfg.depth = 2;
          cfg.positional = pos;
          const auto model = deepcot::random_model<double>(cfg, 31);
          const auto x = deepcot::random_tokens<double>(3 * cfg.window, cfg.dim, 32);
          const auto full = deepcot::oracle_forward(model, x, deepcot::AttentionMask::causal_banded(cfg.window));
          deepcot::StreamState<double> st(cfg);
          for (std::size_t t = 0; t < x.rows(); ++t) {
            const auto y = deepcot::stream_step<double>(model, st, x.row(t));
            EXPECT_LE(deepcot::max_abs_diff<double>(y, full.row(t)), 1e-10);
          }
        }
      }
    }
  }
}

// Decoupled profile: the gap between attending over the full window and over the
// newest token alone is the memory contribution pushed through W_O (I + s W_FF).
TEST(Encoder, DecoupledLayerIsAffineInMemoryContribution) {
  auto cfg = small_config(ActivationKind::Soft, NormKind::rezero_learned(), FeedForwardKind::Linear);
  cfg.depth = 2;
  const auto model = deepcot::random_model<double>(cfg, 41);
  const auto& w = model.layers[0];
  const auto x = deepcot::random_tokens<double>(cfg.window, cfg.dim, 42);
  const auto full = deepcot::layer_forward_window<double>(x, w, cfg, deepcot::AttentionMask::full());
  Matrix<double> last(1, cfg.dim);
  last.set_row(0, x.row(cfg.window - 1));
  Matrix<double> self_att;
  const auto alone = deepcot::layer_forward_window<double>(last, w, cfg, deepcot::AttentionMask::full(), 0, nullptr,
                                                           &self_att);
  Matrix<double> full_att;
  (void)deepcot::layer_forward_window<double>(x, w, cfg, deepcot::AttentionMask::full(), 0, nullptr, &full_att);
  const auto residual = deepcot::propagation_factors(model, 0).residual_map;
  const double s = deepcot::residual_scale(cfg, w);
  std::vector<double> mem_part(cfg.dim);
  for (std::size_t c = 0; c < cfg.dim; ++c) mem_part[c] = s * (full_att(cfg.window - 1, c) - self_att(0, c));
  const auto predicted = deepcot::vec_mat<double>(mem_part, residual);
  for (std::size_t c = 0; c < cfg.dim; ++c) {
    EXPECT_NEAR(full(cfg.window - 1, c) - alone(0, c), predicted[c], 1e-10);
  }
}

TEST(Encoder, CombinedFeedForward) {
  auto cfg = small_config(ActivationKind::Soft, NormKind::rezero_constant(), FeedForwardKind::Linear);
  const auto model = deepcot::random_model<double>(cfg, 51);
  const auto wff = deepcot::combined_ff(model.layers[0], cfg);
  EXPECT_EQ(wff.rows(), cfg.dim);
  EXPECT_EQ(wff.cols(), cfg.dim);
  const auto z = test_support::random_vector(cfg.dim, 52);
  const auto direct = deepcot::feed_forward<double>(z, model.layers[0], cfg);
  const auto fused = deepcot::vec_mat<double>(z, wff);
  for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_NEAR(direct[c], fused[c], 1e-12);

  cfg.ff = FeedForwardKind::Nonlinear;
  EXPECT_THROW(deepcot::combined_ff(model.layers[0], cfg), deepcot::ConfigError);
}

TEST(Encoder, GeluValues) {
  EXPECT_EQ(deepcot::gelu(0.0), 0.0);
  EXPECT_NEAR(deepcot::gelu(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(deepcot::gelu(-1.0), -0.15865525393145707, 1e-15);
}

TEST(Encoder, WrongTokenWidthRejected) {
  const auto cfg = small_config(ActivationKind::Softmax, NormKind::layer_norm(), FeedForwardKind::Nonlinear);
  const auto model = deepcot::random_model<double>(cfg, 1);
  deepcot::StreamState<double> st(cfg);
  const std::vector<double> bad(cfg.dim + 1, 0.0);
  EXPECT_THROW(deepcot::stream_step<double>(model, st, bad), deepcot::ShapeError);
}

TEST(Encoder, LayerWeightsValidateShapes) {
  const auto cfg = small_config(ActivationKind::Softmax, NormKind::layer_norm(), FeedForwardKind::Nonlinear);
  auto w = deepcot::LayerWeights<double>::zeros(cfg);
  EXPECT_NO_THROW(w.validate(cfg));
  w.ff1 = Matrix<double>(cfg.dim, cfg.dim);
  EXPECT_THROW(w.validate(cfg), deepcot::ShapeError);
  w = deepcot::LayerWeights<double>::zeros(cfg);
  w.wq(0, 0) = std::nan("");
  EXPECT_THROW(w.validate(cfg), deepcot::NumericError);
}

TEST(Encoder, CombinedFeedForwardTrivialFactors) {
  auto cfg = small_config(ActivationKind::Soft, NormKind::rezero_constant(), FeedForwardKind::Linear);
  cfg.d_ff = cfg.dim;
  auto w = deepcot::LayerWeights<double>::zeros(cfg);
  w.ff1 = w.ff2 = Matrix<double>::identity(cfg.dim);
  EXPECT_EQ(deepcot::combined_ff(w, cfg), Matrix<double>::identity(cfg.dim));
  w.ff2 = Matrix<double>(cfg.dim, cfg.dim);
  EXPECT_EQ(deepcot::combined_ff(w, cfg), Matrix<double>(cfg.dim, cfg.dim));
}
