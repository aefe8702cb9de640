#include "patchmixer/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace pm {

namespace {

// Minute-of-timeline for "YYYY-MM-DD hh:mm[:ss]"; good enough to difference
// two adjacent stamps for the frequency label.
std::optional<long> stamp_minutes(const std::string& s) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0;
  if (std::sscanf(s.c_str(), "%d-%d-%d %d:%d", &y, &mo, &d, &h, &mi) != 5) {
    return std::nullopt;
  }
  return ((static_cast<long>(y) * 12 + mo) * 31 + d) * 24 * 60 + h * 60 + mi;
}

std::string infer_frequency(const std::vector<std::string>& stamps) {
  if (stamps.size() < 2) return "unknown";
  auto a = stamp_minutes(stamps[0]);
  auto b = stamp_minutes(stamps[1]);
  if (!a || !b || *b <= *a) return "unknown";
  const long diff = *b - *a;
  if (diff == 60) return "1 Hour";
  if (diff % 60 == 0) return std::to_string(diff / 60) + " Hours";
  return std::to_string(diff) + " Minutes";
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  if (!cells.empty() && !cells.back().empty() && cells.back().back() == '\r') {
    cells.back().pop_back();
  }
  return cells;
}

double parse_cell(const std::string& cell, std::size_t line_no, std::size_t col_no) {
  double value = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  while (first != last && *first == ' ') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) {
    throw std::runtime_error("csv parse error at line " + std::to_string(line_no) +
                             ", column " + std::to_string(col_no + 1) +
                             ": cannot parse '" + cell + "' as a number");
  }
  return value;
}

}  // namespace

SplitProfile parse_split_profile(const std::string& name) {
  if (name == "etth") return SplitProfile::etth;
  if (name == "ettm") return SplitProfile::ettm;
  if (name == "generic") return SplitProfile::generic;
  throw std::invalid_argument("unknown split profile '" + name +
                              "' (expected etth|ettm|generic)");
}

std::string split_profile_name(SplitProfile profile) {
  switch (profile) {
    case SplitProfile::etth: return "etth";
    case SplitProfile::ettm: return "ettm";
    default: return "generic";
  }
}

SeriesDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);

  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("csv structural error: " + path + " is empty");
  }
  auto header = split_line(line);
  if (header.size() < 2) {
    throw std::runtime_error(
        "csv structural error: need a timestamp column plus at least one "
        "variable column, got " +
        std::to_string(header.size()));
  }
  const std::size_t columns = header.size();

  SeriesDataset ds;
  ds.names.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_line(line);
    if (cells.size() != columns) {
      throw std::runtime_error("csv structural error at line " + std::to_string(line_no) +
                               ": ragged row with " + std::to_string(cells.size()) +
                               " cells, expected " + std::to_string(columns));
    }
    ds.timestamps.push_back(cells[0]);
    std::vector<double> row(columns - 1);
    for (std::size_t c = 1; c < columns; ++c) {
      row[c - 1] = parse_cell(cells[c], line_no, c);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) {
    throw std::runtime_error("csv structural error: " + path + " has no data rows");
  }

  const Index m = static_cast<Index>(columns - 1);
  const Index steps = static_cast<Index>(rows.size());
  ds.values = Tensor<double>({m, steps});
  for (Index t = 0; t < steps; ++t)
    for (Index v = 0; v < m; ++v)
      ds.values.at2(v, t) = rows[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)];
  ds.frequency = infer_frequency(ds.timestamps);
  ds.scaler.assign(static_cast<std::size_t>(m), Scaler1d{});
  return ds;
}

SeriesDataset make_splits(SeriesDataset ds, SplitProfile profile, GenericRatios ratios) {
  const Index total = ds.total_steps();
  if (total < 3) throw std::invalid_argument("make_splits: dataset too small");

  Index train_end = 0, val_end = 0, test_end = 0;
  switch (profile) {
    case SplitProfile::etth:
      // 12 / 4 / 4 months of hourly data, 30-day months.
      train_end = 12 * 30 * 24;
      val_end = 16 * 30 * 24;
      test_end = 20 * 30 * 24;
      break;
    case SplitProfile::ettm:
      // Same months at 15-minute resolution.
      train_end = 12 * 30 * 24 * 4;
      val_end = 16 * 30 * 24 * 4;
      test_end = 20 * 30 * 24 * 4;
      break;
    case SplitProfile::generic: {
      if (!(ratios.train > 0.0) || !(ratios.val >= 0.0) || !(ratios.test > 0.0) ||
          std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
        throw std::invalid_argument("make_splits: ratios must be positive and sum to 1");
      }
      const Index n_train = static_cast<Index>(ratios.train * static_cast<double>(total));
      const Index n_test = static_cast<Index>(ratios.test * static_cast<double>(total));
      train_end = n_train;
      val_end = total - n_test;
      test_end = total;
      break;
    }
  }
  train_end = std::min(train_end, total);
  val_end = std::min(val_end, total);
  test_end = std::min(test_end, total);
  if (!(0 < train_end && train_end < val_end && val_end < test_end)) {
    throw std::invalid_argument("make_splits: profile '" + split_profile_name(profile) +
                                "' does not fit dataset length " + std::to_string(total));
  }
  ds.borders = {IndexRange{0, train_end}, IndexRange{train_end, val_end},
                IndexRange{val_end, test_end}};

  const Index m = ds.variable_count();
  ds.scaler.assign(static_cast<std::size_t>(m), Scaler1d{});
  for (Index v = 0; v < m; ++v) {
    double* row = ds.values.data.data() + v * ds.total_steps();
    double s = 0.0, s2 = 0.0;
    for (Index t = 0; t < train_end; ++t) {
      s += row[t];
      s2 += row[t] * row[t];
    }
    const double mean = s / static_cast<double>(train_end);
    const double var = std::max(0.0, s2 / static_cast<double>(train_end) - mean * mean);
    Scaler1d sc;
    sc.mean = mean;
    sc.std = std::max(std::sqrt(var), kScalerStdFloor);
    ds.scaler[static_cast<std::size_t>(v)] = sc;
    for (Index t = 0; t < total; ++t) row[t] = sc.transform(row[t]);
  }
  ds.standardized = true;
  return ds;
}

Index window_low(const SeriesDataset& ds, Split split, Index lookback) {
  const IndexRange& range = ds.border(split);
  if (split == Split::train) return range.begin;
  return std::max<Index>(0, range.begin - lookback);
}

Index window_count(const SeriesDataset& ds, Split split, Index lookback, Index horizon) {
  const Index lo = window_low(ds, split, lookback);
  const Index hi = ds.border(split).end - lookback - horizon;
  if (hi < lo) return 0;
  return ds.variable_count() * (hi - lo + 1);
}

void require_windowable(const SeriesDataset& ds, Split split, Index lookback,
                        Index horizon) {
  if (lookback < 1 || horizon < 1) {
    throw std::invalid_argument("iter_windows: lookback and horizon must be >= 1");
  }
  if (ds.border(Split::test).end == 0) {
    throw std::invalid_argument("iter_windows: dataset has no split borders; call make_splits first");
  }
  if (window_count(ds, split, lookback, horizon) == 0) {
    const IndexRange& r = ds.border(split);
    throw std::invalid_argument(std::string(split_name(split)) +
                                " split too short: need lookback+horizon=" +
                                std::to_string(lookback + horizon) +
                                " reachable steps, border [" + std::to_string(r.begin) +
                                "," + std::to_string(r.end) + ")");
  }
}

}  // namespace pm
