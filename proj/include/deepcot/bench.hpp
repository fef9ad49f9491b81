#pragma once

#include <algorithm>
#include <barrier>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <iomanip>
#include <new>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "deepcot/config.hpp"
#include "deepcot/error.hpp"
#include "deepcot/model.hpp"

namespace deepcot {

// Analytic FLOP counts (multiply-add = 2). Continual mode counts one step; the
// oracle modes count one full window recomputation, which is also their per-step cost.
struct LayerFlops {
  std::uint64_t qkv_proj = 0;
  std::uint64_t scores = 0;
  std::uint64_t activation = 0;
  std::uint64_t weighted_sum = 0;
  std::uint64_t out_proj = 0;
  std::uint64_t ff = 0;

  std::uint64_t total() const { return qkv_proj + scores + activation + weighted_sum + out_proj + ff; }
  friend bool operator==(const LayerFlops&, const LayerFlops&) = default;
};

struct FlopsBreakdown {
  ExecutionMode mode = ExecutionMode::Continual;
  std::size_t window = 0;
  std::vector<LayerFlops> layers;
  std::uint64_t per_step = 0;
  std::uint64_t per_window = 0;  // cost of producing outputs for n consecutive tokens
};

// Per-score cost of the activation: one exp for softmax; distance, scale and exp for SOFT.
constexpr std::uint64_t activation_cost(ActivationKind a) { return a == ActivationKind::Softmax ? 1 : 4; }

inline FlopsBreakdown count_flops(const ModelConfig& cfg, ExecutionMode mode, std::size_t n) {
  cfg.validate();
  if (n == 0) throw ConfigError("count_flops: window must be >= 1");
  const std::uint64_t d = cfg.dim;
  const std::uint64_t f = cfg.ff_dim();
  const std::uint64_t w = n;
  const std::uint64_t c = activation_cost(cfg.activation);
  LayerFlops layer;
  if (mode == ExecutionMode::Continual) {
    layer.qkv_proj = 6 * d * d;
    layer.scores = 2 * w * d;
    layer.activation = w * c;
    layer.weighted_sum = 2 * w * d;
    layer.out_proj = 2 * d * d;
    layer.ff = 4 * d * f;
  } else {
    layer.qkv_proj = 6 * w * d * d;
    layer.scores = 2 * w * w * d;
    layer.activation = w * w * c;
    layer.weighted_sum = 2 * w * w * d;
    layer.out_proj = 2 * w * d * d;
    layer.ff = 4 * w * d * f;
  }
  FlopsBreakdown out{mode, n, std::vector<LayerFlops>(cfg.depth, layer), 0, 0};
  for (const auto& l : out.layers) out.per_step += l.total();
  out.per_window = mode == ExecutionMode::Continual ? out.per_step * w : out.per_step;
  return out;
}

struct SweepRow {
  ExecutionMode mode = ExecutionMode::Continual;
  std::size_t n = 0;
  std::size_t batch = 0;
  std::size_t steps = 0;
  double seconds_per_token = 0.0;
  double tokens_per_second = 0.0;
  bool oom = false;
};

struct SweepResult {
  std::vector<SweepRow> rows;

  std::optional<SweepRow> find(ExecutionMode mode, std::size_t n) const {
    for (const auto& r : rows) {
      if (r.mode == mode && r.n == n) return r;
    }
    return std::nullopt;
  }
};

struct SweepOptions {
  std::vector<ExecutionMode> modes{ExecutionMode::Continual, ExecutionMode::OracleBidirectional};
  std::size_t batch = 1;
  std::size_t steps = 64;   // includes warmup
  std::size_t warmup = 8;   // discarded before timing
  std::uint64_t seed = 0;
};

namespace detail {

// One independent stream. Continual lanes keep a StreamState; oracle lanes keep
// the last n tokens and recompute the window stack every step.
class SweepLane {
 public:
  SweepLane(const Model<float>& model, ExecutionMode mode, std::uint64_t seed)
      : model_(model), mode_(mode), state_(model.config), rng_(seed), token_(model.config.dim) {}

  void step() {
    for (auto& v : token_) v = static_cast<float>(normal_(rng_));
    if (mode_ == ExecutionMode::Continual) {
      sink_ += stream_step<float>(model_, state_, token_).front();
      return;
    }
    push_history();
    const std::size_t n = history_.size();
    Matrix<float> win(n, model_.config.dim);
    for (std::size_t r = 0; r < n; ++r) win.set_row(r, history_[r]);
    const auto mask = mode_ == ExecutionMode::OracleBidirectional ? AttentionMask::full()
                                                                  : AttentionMask::causal_banded(model_.config.window);
    const auto out = window_stack(model_, win, mask, position_ + 1 - n);
    sink_ += out.back()(n - 1, 0);
    ++position_;
  }

  // Fills memory/history without timing so measured steps see a full window.
  void prime() {
    const std::size_t fill = model_.config.window - 1;
    for (std::size_t i = 0; i < fill; ++i) {
      for (auto& v : token_) v = static_cast<float>(normal_(rng_));
      if (mode_ == ExecutionMode::Continual) {
        stream_step<float>(model_, state_, token_);
      } else {
        push_history();
        ++position_;
      }
    }
  }

  float sink() const { return sink_; }

 private:
  void push_history() {
    history_.push_back(token_);
    if (history_.size() > model_.config.window) history_.pop_front();
  }

  const Model<float>& model_;
  ExecutionMode mode_;
  StreamState<float> state_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::vector<float> token_;
  std::deque<std::vector<float>> history_;
  std::uint64_t position_ = 0;
  float sink_ = 0.0f;
};

inline SweepRow time_cell(const ModelConfig& base, ExecutionMode mode, std::size_t n, const SweepOptions& opt) {
  ModelConfig cfg = base;
  cfg.window = n;
  cfg.mode = mode;
  if (auto* rec = std::get_if<RecyclingPositional>(&cfg.positional)) rec->period = std::max(rec->period, n);
  SweepRow row{mode, n, opt.batch, opt.steps, 0.0, 0.0, false};
  try {
    const auto model = random_model<float>(cfg, opt.seed ^ (n * 0x9E3779B97F4A7C15ull));
    std::vector<SweepLane> lanes;
    lanes.reserve(opt.batch);
    for (std::size_t b = 0; b < opt.batch; ++b) lanes.emplace_back(model, mode, opt.seed + 1000003ull * (b + 1));
    const std::size_t timed = opt.steps - opt.warmup;
    // Lanes stamp their own start and end; the main thread may not be scheduled
    // promptly when a barrier releases, so it does not read the clock itself.
    using Clock = std::chrono::steady_clock;
    std::barrier sync(static_cast<std::ptrdiff_t>(opt.batch));
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(opt.batch);
    std::vector<Clock::time_point> starts(opt.batch), ends(opt.batch);
    for (std::size_t b = 0; b < opt.batch; ++b) {
      workers.emplace_back([&, b] {
        try {
          lanes[b].prime();
          for (std::size_t s = 0; s < opt.warmup; ++s) lanes[b].step();
        } catch (...) {
          errors[b] = std::current_exception();
        }
        sync.arrive_and_wait();
        starts[b] = Clock::now();
        if (!errors[b]) {
          try {
            for (std::size_t s = 0; s < timed; ++s) lanes[b].step();
          } catch (...) {
            errors[b] = std::current_exception();
          }
        }
        ends[b] = Clock::now();
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    const auto t0 = *std::min_element(starts.begin(), starts.end());
    const auto t1 = *std::max_element(ends.begin(), ends.end());
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    row.seconds_per_token = secs / static_cast<double>(timed * opt.batch);
    row.tokens_per_second = 1.0 / row.seconds_per_token;
  } catch (const std::bad_alloc&) {
    row.oom = true;
  }
  return row;
}

}  // namespace detail

// Wall-clock latency per token for each (mode, n). Synthetic i.i.d. normal tokens,
// random float32 weights, one thread per batch lane.
inline SweepResult latency_sweep(const ModelConfig& cfg, const std::vector<std::size_t>& windows,
                                 const SweepOptions& opt) {
  cfg.validate();
  if (opt.steps == 0) throw ConfigError("latency_sweep: steps must be > 0");
  if (opt.batch == 0) throw ConfigError("latency_sweep: batch must be > 0");
  if (opt.steps < 2 * opt.warmup || opt.steps == opt.warmup) {
    throw ConfigError("latency_sweep: steps must be at least twice the warmup");
  }
  if (windows.empty()) throw ConfigError("latency_sweep: no window sizes");
  SweepResult out;
  for (const auto mode : opt.modes) {
    for (const auto n : windows) {
      if (n == 0) throw ConfigError("latency_sweep: window sizes must be >= 1");
      out.rows.push_back(detail::time_cell(cfg, mode, n, opt));
    }
  }
  return out;
}

// Least-squares slope of seconds_per_token against n for one mode.
inline double latency_slope(const SweepResult& r, ExecutionMode mode) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0, k = 0;
  for (const auto& row : r.rows) {
    if (row.mode != mode || row.oom) continue;
    const double x = static_cast<double>(row.n);
    sx += x;
    sy += row.seconds_per_token;
    sxx += x * x;
    sxy += x * row.seconds_per_token;
    k += 1;
  }
  const double den = k * sxx - sx * sx;
  return den == 0 ? 0.0 : (k * sxy - sx * sy) / den;
}

inline void write_csv(std::ostream& os, const SweepResult& r) {
  os << "mode,n,batch,steps,seconds_per_token,tokens_per_second\n";
  for (const auto& row : r.rows) {
    os << to_string(row.mode) << ',' << row.n << ',' << row.batch << ',' << row.steps << ',';
    if (row.oom) {
      os << "oom,oom\n";
    } else {
      os << std::setprecision(9) << row.seconds_per_token << ',' << row.tokens_per_second << '\n';
    }
  }
}

// Minimal SVG line chart of seconds_per_token vs n (log-log axes), one line per mode.
inline std::string render_svg(const SweepResult& r) {
  const double width = 640, height = 400, margin = 60;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& row : r.rows) {
    if (row.oom) continue;
    xmin = std::min(xmin, std::log10(static_cast<double>(row.n)));
    xmax = std::max(xmax, std::log10(static_cast<double>(row.n)));
    ymin = std::min(ymin, std::log10(row.seconds_per_token));
    ymax = std::max(ymax, std::log10(row.seconds_per_token));
  }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  auto px = [&](double x) { return margin + (x - xmin) / (xmax - xmin) * (width - 2 * margin); };
  auto py = [&](double y) { return height - margin - (y - ymin) / (ymax - ymin) * (height - 2 * margin); };
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"" << height - 15
     << "\" text-anchor=\"middle\" font-size=\"12\">window size n (log)</text>\n";
  os << "<text x=\"15\" y=\"" << height / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 " << height / 2
     << ")\" text-anchor=\"middle\">seconds per token (log)</text>\n";
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c"};
  int series = 0;
  for (const auto mode : {ExecutionMode::Continual, ExecutionMode::OracleBidirectional,
                          ExecutionMode::OracleCausalBanded}) {
    std::ostringstream pts;
    pts << std::fixed << std::setprecision(1);
    bool any = false;
    for (const auto& row : r.rows) {
      if (row.mode != mode || row.oom) continue;
      pts << px(std::log10(static_cast<double>(row.n))) << ',' << py(std::log10(row.seconds_per_token)) << ' ';
      any = true;
    }
    if (!any) continue;
    os << "<polyline fill=\"none\" stroke=\"" << colors[series % 3] << "\" stroke-width=\"2\" points=\""
       << pts.str() << "\"/>\n";
    os << "<text x=\"" << margin + 10 << "\" y=\"" << margin + 16 * series << "\" font-size=\"12\" fill=\""
       << colors[series % 3] << "\">" << to_string(mode) << "</text>\n";
    ++series;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace deepcot
