#include "shapprune/detect.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "shapprune/errors.hpp"

namespace shapprune {

namespace {

constexpr double kMadScale = 1.4826;

double acklam(double q) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double low = 0.02425, high = 1.0 - low;
  if (q < low) {
    const double t = std::sqrt(-2.0 * std::log(q));
    return (((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) /
           ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + 1.0);
  }
  if (q > high) {
    const double t = std::sqrt(-2.0 * std::log(1.0 - q));
    return -(((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) /
           ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + 1.0);
  }
  const double u = q - 0.5, r = u * u;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

double normal_quantile(double q) {
  if (!(q > 0.0 && q < 1.0)) throw InvalidArgument("normal quantile needs q in (0,1)");
  double x = acklam(q);
  // Halley refinement against the exact CDF.
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - q;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
  x -= u / (1.0 + x * u / 2.0);
  return x;
}

MadSigma mad_sigma(std::span<const double> norms) {
  if (norms.size() < 4) throw InvalidArgument("MAD detection needs at least four classes");
  for (double v : norms)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("trigger norms must be finite and non-negative");
  MadSigma s;
  s.median = median({norms.begin(), norms.end()});
  for (std::size_t i = 0; i < norms.size(); ++i) {
    s.deviations.push_back(std::abs(norms[i] - s.median));
    if (norms[i] < s.median) {
      s.below.push_back(i);
      s.d_small.push_back(s.deviations.back());
    }
  }
  s.mad = s.d_small.empty() ? 0.0 : median(s.d_small);
  s.sigma = kMadScale * s.mad;
  s.degenerate = s.mad == 0.0;
  return s;
}

std::optional<std::size_t> DetectionReport::primary_target() const {
  if (flagged.empty()) return std::nullopt;
  return *std::min_element(flagged.begin(), flagged.end(),
                           [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
}

DetectionReport detect(std::span<const double> norms, double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("confidence p must lie in (0,1)");
  DetectionReport r;
  r.norms.assign(norms.begin(), norms.end());
  r.p = p;
  r.stats = mad_sigma(norms);
  r.bound = normal_quantile((p + 1.0) / 2.0);
  if (r.stats.degenerate) {
    r.warning = "MAD of below-median deviations is zero; anomaly indices undefined, reporting clean";
    return r;
  }
  for (std::size_t k = 0; k < r.stats.below.size(); ++k) {
    const std::size_t c = r.stats.below[k];
    const double index = r.stats.d_small[k] / r.stats.sigma;
    r.indices.push_back({c, index});
    if (index > r.bound) r.flagged.push_back(c);
  }
  return r;
}

nlohmann::json to_json(const DetectionReport& r) {
  nlohmann::json indices = nlohmann::json::array();
  for (const auto& a : r.indices) indices.push_back({{"class", a.cls}, {"index", a.index}});
  nlohmann::json j{{"norms", r.norms},
                   {"median", r.stats.median},
                   {"mad", r.stats.mad},
                   {"sigma", r.stats.sigma},
                   {"bound", r.bound},
                   {"indices", indices},
                   {"flagged", r.flagged},
                   {"verdict", r.poisoned() ? "poisoned" : "clean"},
                   {"p", r.p},
                   {"degenerate", r.stats.degenerate}};
  if (r.warning) j["warning"] = *r.warning;
  return j;
}

DetectionReport detection_from_json(const nlohmann::json& j) {
  try {
    return detect(j.at("norms").get<std::vector<double>>(), j.at("p").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed detection report: ") + e.what());
  }
}

}  // namespace shapprune
