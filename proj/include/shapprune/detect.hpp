#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace shapprune {

/// Median; even counts average the two middle values. Rejects empty input.
double median(std::vector<double> values);

/// Standard normal quantile Phi^{-1}(q), q in (0,1). Acklam's rational
/// approximation refined by one Halley step; absolute error below 1e-9.
double normal_quantile(double q);

struct MadSigma {
  double median = 0.0;
  std::vector<double> deviations;  // |norm_i - median| for every class
  std::vector<std::size_t> below;  // classes with norm strictly below the median
  std::vector<double> d_small;     // deviations of `below`, same order
  double mad = 0.0;                // median of d_small
  double sigma = 0.0;              // 1.4826 * mad
  bool degenerate = false;         // mad == 0
};

/// Rejects fewer than four norms and negative or non-finite norms.
MadSigma mad_sigma(std::span<const double> norms);

struct AnomalyIndex {
  std::size_t cls = 0;
  double index = 0.0;  // d_i / sigma
};

struct DetectionReport {
  std::vector<double> norms;
  double p = 0.99;
  MadSigma stats;
  double bound = 0.0;                // Phi^{-1}((p+1)/2)
  std::vector<AnomalyIndex> indices;  // below-median classes; empty when degenerate
  std::vector<std::size_t> flagged;   // ascending class order
  std::optional<std::string> warning;
  bool poisoned() const noexcept { return !flagged.empty(); }
  /// Flagged class with the smallest norm, if any.
  std::optional<std::size_t> primary_target() const;
};

DetectionReport detect(std::span<const double> norms, double p = 0.99);

nlohmann::json to_json(const DetectionReport& report);
DetectionReport detection_from_json(const nlohmann::json& j);

}  // namespace shapprune
