#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace mpo {

enum class Metric { Cer = 0, SpeakerSim = 1, Prosody = 2 };
inline constexpr std::array<Metric, 3> kAllMetrics = {
    Metric::Cer, Metric::SpeakerSim, Metric::Prosody};

enum class Polarity { HigherIsBetter, LowerIsBetter };

constexpr Polarity polarity(Metric m) {
  return m == Metric::SpeakerSim ? Polarity::HigherIsBetter
                                 : Polarity::LowerIsBetter;
}

constexpr std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::Cer: return "cer";
    case Metric::SpeakerSim: return "spk_sim";
    case Metric::Prosody: return "prosody";
  }
  return "?";
}

Metric parse_metric(std::string_view name);

struct MetricScores {
  double cer = 0.0;
  double spk_sim = 1.0;
  double prosody_rmse = 0.0;

  double get(Metric m) const {
    switch (m) {
      case Metric::Cer: return cer;
      case Metric::SpeakerSim: return spk_sim;
      case Metric::Prosody: return prosody_rmse;
    }
    return 0.0;
  }
  bool valid() const {
    return std::isfinite(cer) && std::isfinite(spk_sim) &&
           std::isfinite(prosody_rmse) && cer >= 0.0 && spk_sim >= -1.0 &&
           spk_sim <= 1.0 && prosody_rmse >= 0.0;
  }
  bool operator==(const MetricScores&) const = default;
};

/// True when `a` is strictly better than `b` under the metric's polarity.
constexpr bool better(Metric m, double a, double b) {
  return polarity(m) == Polarity::HigherIsBetter ? a > b : a < b;
}

/// Unit-cost Levenshtein distance, two-row dynamic program.
template <typename Symbol>
std::size_t edit_distance(std::span<const Symbol> a, std::span<const Symbol> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Edit distance over reference length; can exceed 1.
template <typename Symbol>
double cer(std::span<const Symbol> hypothesis, std::span<const Symbol> reference) {
  if (reference.empty()) throw std::invalid_argument("cer: empty reference");
  return static_cast<double>(edit_distance(hypothesis, reference)) /
         static_cast<double>(reference.size());
}

template <typename Symbol>
double cer(const std::vector<Symbol>& hypothesis,
           const std::vector<Symbol>& reference) {
  return cer(std::span<const Symbol>(hypothesis),
             std::span<const Symbol>(reference));
}

/// Cosine similarity clamped to [-1, 1].
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar speaker_similarity(const Eigen::MatrixBase<DerivedA>& a,
                                             const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() != b.size()) {
    throw std::invalid_argument("speaker_similarity: dimension mismatch");
  }
  const Scalar aa = a.squaredNorm();
  const Scalar bb = b.squaredNorm();
  if (aa == Scalar(0) || bb == Scalar(0)) {
    throw std::invalid_argument("speaker_similarity: zero-norm embedding");
  }
  // sqrt(aa * aa) == aa exactly, so identical inputs give exactly 1.
  const Scalar c = a.dot(b) / std::sqrt(aa * bb);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

template <typename Scalar>
struct DtwResult {
  Scalar cost = 0;           // summed |log g - log r| along the path
  Scalar rmse = 0;           // root mean squared log difference along the path
  std::size_t path_length = 0;
};

/// Full DTW between log-contours with steps (1,0), (0,1), (1,1), from (0,0)
/// to (n-1,m-1). Among equal-cost predecessors the diagonal wins, then the
/// vertical step.
template <typename Scalar>
DtwResult<Scalar> dtw_log_align(std::span<const Scalar> generated,
                                std::span<const Scalar> reference) {
  if (generated.empty() || reference.empty()) {
    throw std::invalid_argument("log_f0_rmse_dtw: empty contour");
  }
  auto positive = [](Scalar v) { return v > Scalar(0) && std::isfinite(v); };
  if (!std::all_of(generated.begin(), generated.end(), positive) ||
      !std::all_of(reference.begin(), reference.end(), positive)) {
    throw std::invalid_argument("log_f0_rmse_dtw: contour values must be > 0");
  }
  const std::size_t n = generated.size();
  const std::size_t m = reference.size();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lg(n), lr(m);
  for (std::size_t i = 0; i < n; ++i) lg(i) = std::log(generated[i]);
  for (std::size_t j = 0; j < m; ++j) lr(j) = std::log(reference[j]);

  struct Cell {
    Scalar cost;
    Scalar sq;
    std::size_t len;
  };
  const Scalar inf = std::numeric_limits<Scalar>::infinity();
  std::vector<Cell> dp(n * m, Cell{inf, 0, 0});
  auto at = [&](std::size_t i, std::size_t j) -> Cell& { return dp[i * m + j]; };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const Scalar d = lg(i) - lr(j);
      const Scalar local = std::abs(d);
      Cell best{0, 0, 0};
      if (i > 0 || j > 0) {
        best = Cell{inf, 0, 0};
        if (i > 0 && j > 0) best = at(i - 1, j - 1);
        if (i > 0 && at(i - 1, j).cost < best.cost) best = at(i - 1, j);
        if (j > 0 && at(i, j - 1).cost < best.cost) best = at(i, j - 1);
      }
      at(i, j) = Cell{best.cost + local, best.sq + d * d, best.len + 1};
    }
  }
  const Cell& end = at(n - 1, m - 1);
  return {end.cost, std::sqrt(end.sq / static_cast<Scalar>(end.len)), end.len};
}

template <typename Scalar>
Scalar log_f0_rmse_dtw(std::span<const Scalar> generated,
                       std::span<const Scalar> reference) {
  return dtw_log_align(generated, reference).rmse;
}

template <typename Scalar>
Scalar log_f0_rmse_dtw(const std::vector<Scalar>& generated,
                       const std::vector<Scalar>& reference) {
  return log_f0_rmse_dtw(std::span<const Scalar>(generated),
                         std::span<const Scalar>(reference));
}

}  // namespace mpo
