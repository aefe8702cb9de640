#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchmixer/rng.hpp"
#include "patchmixer/tensor.hpp"

// CSV ingestion, chronological splits, per-variable standardization, and
// channel-independent sliding windows.

namespace pm {

struct IndexRange {
  Index begin = 0;
  Index end = 0;  // half-open
  Index size() const { return end - begin; }
};

enum class Split { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

enum class SplitProfile { etth, ettm, generic };

SplitProfile parse_split_profile(const std::string& name);
std::string split_profile_name(SplitProfile profile);

struct Scaler1d {
  double mean = 0.0;
  double std = 1.0;  // floored at kScalerStdFloor

  double transform(double x) const { return (x - mean) / std; }
  double invert(double z) const { return z * std + mean; }
};

inline constexpr double kScalerStdFloor = 1e-8;

// Multivariate series with chronological borders and train-fitted scalers.
// Values are stored in double regardless of the training precision; window
// batches are cast on extraction.
struct SeriesDataset {
  std::vector<std::string> names;       // M variable names
  std::vector<std::string> timestamps;  // total_steps entries, reporting only
  Tensor<double> values;                // [M, total_steps]
  std::string frequency;
  std::array<IndexRange, 3> borders{};  // train / val / test
  std::vector<Scaler1d> scaler;         // per variable, fit on train
  bool standardized = false;

  Index variable_count() const { return values.rank() == 2 ? values.shape[0] : 0; }
  Index total_steps() const { return values.rank() == 2 ? values.shape[1] : 0; }
  const IndexRange& border(Split s) const {
    return borders[static_cast<std::size_t>(s)];
  }
};

// Parse an ETT-style CSV: header row, first column a timestamp string,
// remaining columns numeric, one variable per column.
SeriesDataset load_csv(const std::string& path);

struct GenericRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

// Set borders for the given protocol, fit scalers on the train slice only,
// and standardize the whole series with them.
SeriesDataset make_splits(SeriesDataset ds, SplitProfile profile,
                          GenericRatios ratios = {});

// One univariate training example: an L-step look-back and its T-step target.
template <typename T>
struct WindowSample {
  Tensor<T> input;   // [1, L]
  Tensor<T> target;  // [1, T]
  Index variable_index = 0;
  Index start_index = 0;
};

template <typename T>
struct WindowBatch {
  Tensor<T> inputs;   // [B, L]
  Tensor<T> targets;  // [B, T]
  std::vector<Index> variable_index;
  std::vector<Index> start_index;
  Index size() const { return inputs.rank() ? inputs.shape[0] : 0; }
};

// First admissible input start for a split. Validation and test inputs may
// reach back across the split border by up to L steps; targets never do.
Index window_low(const SeriesDataset& ds, Split split, Index lookback);

// Number of (variable, start) samples in one epoch over a split.
Index window_count(const SeriesDataset& ds, Split split, Index lookback, Index horizon);

void require_windowable(const SeriesDataset& ds, Split split, Index lookback,
                        Index horizon);

template <typename T>
WindowSample<T> window_at(const SeriesDataset& ds, Index variable, Index start,
                          Index lookback, Index horizon) {
  WindowSample<T> s;
  s.variable_index = variable;
  s.start_index = start;
  s.input = Tensor<T>({1, lookback});
  s.target = Tensor<T>({1, horizon});
  const double* row = ds.values.data.data() + variable * ds.total_steps();
  for (Index i = 0; i < lookback; ++i) s.input[i] = static_cast<T>(row[start + i]);
  for (Index i = 0; i < horizon; ++i)
    s.target[i] = static_cast<T>(row[start + lookback + i]);
  return s;
}

// Streams every valid (variable, start) pair of a split exactly once,
// stacked into [B, L] / [B, T] batches; the last partial batch is kept.
// Sample order is variable-major and deterministic; pass a shuffle seed to
// permute it.
template <typename T>
class WindowStream {
 public:
  WindowStream(const SeriesDataset& ds, Split split, Index lookback, Index horizon,
               Index batch_size, std::optional<std::uint64_t> shuffle_seed = {})
      : ds_(&ds), lookback_(lookback), horizon_(horizon), batch_size_(batch_size) {
    require_windowable(ds, split, lookback, horizon);
    if (batch_size < 1) throw std::invalid_argument("iter_windows: batch_size must be >= 1");
    const Index lo = window_low(ds, split, lookback);
    const Index hi = ds.border(split).end - lookback - horizon;  // inclusive
    order_.reserve(static_cast<std::size_t>(ds.variable_count() * (hi - lo + 1)));
    for (Index v = 0; v < ds.variable_count(); ++v)
      for (Index s = lo; s <= hi; ++s) order_.push_back({v, s});
    if (shuffle_seed) {
      Rng rng(*shuffle_seed);
      rng.shuffle(order_);
    }
  }

  Index sample_count() const { return static_cast<Index>(order_.size()); }

  std::optional<WindowBatch<T>> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const Index n = std::min<Index>(batch_size_,
                                    static_cast<Index>(order_.size() - cursor_));
    WindowBatch<T> batch;
    batch.inputs = Tensor<T>({n, lookback_});
    batch.targets = Tensor<T>({n, horizon_});
    batch.variable_index.resize(static_cast<std::size_t>(n));
    batch.start_index.resize(static_cast<std::size_t>(n));
    const Index steps = ds_->total_steps();
    for (Index i = 0; i < n; ++i) {
      const auto [v, s] = order_[cursor_ + static_cast<std::size_t>(i)];
      batch.variable_index[static_cast<std::size_t>(i)] = v;
      batch.start_index[static_cast<std::size_t>(i)] = s;
      const double* row = ds_->values.data.data() + v * steps;
      T* in = batch.inputs.data.data() + i * lookback_;
      T* tg = batch.targets.data.data() + i * horizon_;
      for (Index j = 0; j < lookback_; ++j) in[j] = static_cast<T>(row[s + j]);
      for (Index j = 0; j < horizon_; ++j)
        tg[j] = static_cast<T>(row[s + lookback_ + j]);
    }
    cursor_ += static_cast<std::size_t>(n);
    return batch;
  }

  // Sample identities in iteration order, for permutation checks.
  const std::vector<std::pair<Index, Index>>& order() const { return order_; }

 private:
  const SeriesDataset* ds_;
  Index lookback_;
  Index horizon_;
  Index batch_size_;
  std::vector<std::pair<Index, Index>> order_;
  std::size_t cursor_ = 0;
};

}  // namespace pm
