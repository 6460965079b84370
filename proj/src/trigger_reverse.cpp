#include "shapprune/trigger_reverse.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "shapprune/attack.hpp"
#include "shapprune/errors.hpp"
#include "shapprune/rng.hpp"

namespace shapprune {

namespace {

float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }

Tensor squash(const Tensor& raw) {
  Tensor out(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = sigmoid(raw[i]);
  return out;
}

struct Adam {
  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  void step(Tensor& param, const Tensor& grad, float lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t)), c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      param[i] -= static_cast<float>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
  std::vector<double> m, v;
  std::size_t t = 0;
};

}  // namespace

double mask_l1(const Tensor& mask) {
  double s = 0.0;
  for (float v : mask.data()) s += std::abs(static_cast<double>(v));
  return s;
}

ReverseObjective reverse_objective(const Model& model, const Tensor& clean_images, const Tensor& mask_raw,
                                   const Tensor& pattern_raw, double lambda, int target_class, bool gradients) {
  const std::size_t n = clean_images.dim(0), ch = clean_images.dim(1), plane = clean_images.dim(2) * clean_images.dim(3);
  ReverseObjective out;
  out.mask = squash(mask_raw);
  out.pattern = squash(pattern_raw);
  const Tensor blended = inject_trigger(clean_images, out.mask, out.pattern);
  const ForwardTrace ft = forward_trace(model, blended, Mode::Inference);
  const std::vector<int> labels(n, target_class);
  const CrossEntropy ce = cross_entropy(ft.output, labels);
  out.ce = ce.loss;
  out.l1 = mask_l1(out.mask);
  out.objective = out.ce + lambda * out.l1;
  if (!gradients || !std::isfinite(out.objective)) return out;

  // Chain rule through (1-M)*a + M*T and the sigmoids.
  const Gradients g = backpropagate(model, ft, ce.grad, {}, false, true);
  out.grad_mask = Tensor(mask_raw.shape(), 0.0f);
  out.grad_pattern = Tensor(pattern_raw.shape(), 0.0f);
  for (std::size_t b = 0; b < n; ++b) {
    const float* a = clean_images.ptr() + b * ch * plane;
    const float* d = g.input.ptr() + b * ch * plane;
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = c * plane + i;
        out.grad_mask[i] += d[k] * (out.pattern[k] - a[k]);
        out.grad_pattern[k] += d[k] * out.mask[i];
      }
  }
  const auto lam = static_cast<float>(lambda);
  for (std::size_t i = 0; i < plane; ++i) {
    const float m = out.mask[i];
    out.grad_mask[i] = (out.grad_mask[i] + lam) * m * (1.0f - m);
  }
  for (std::size_t k = 0; k < out.pattern.size(); ++k) {
    const float t = out.pattern[k];
    out.grad_pattern[k] *= t * (1.0f - t);
  }
  return out;
}

TriggerSpec reverse_trigger_for_class(const Model& model, const Tensor& clean_images, const ReverseConfig& config,
                                      int target_class) {
  if (config.iterations == 0) throw InvalidArgument("trigger reverse needs at least one iteration");
  if (!(config.lambda >= 0.0)) throw InvalidArgument("lambda must be non-negative");
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= model.class_count())
    throw InvalidArgument("class " + std::to_string(target_class) + " outside the model's classes");
  if (clean_images.rank() != 4 || clean_images.dim(0) == 0)
    throw ShapeError("trigger reverse needs a nonempty [N,C,H,W] batch, got " + shape_str(clean_images.shape()));

  const std::size_t ch = clean_images.dim(1), h = clean_images.dim(2), w = clean_images.dim(3);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<float> jitter(-0.1f, 0.1f);
  Tensor mask_raw({1, h, w});
  for (auto& v : mask_raw.data()) v = jitter(rng);
  Tensor pattern_raw({ch, h, w}, 0.0f);
  const auto lr = static_cast<float>(config.learning_rate);
  Adam mask_adam(mask_raw.size()), pattern_adam(pattern_raw.size());

  TriggerSpec best;
  best.target_class = target_class;
  best.best_objective = std::numeric_limits<double>::infinity();
  std::vector<double> trace;
  trace.reserve(config.iterations);

  for (std::size_t it = 0; it < config.iterations; ++it) {
    const bool last = it + 1 == config.iterations;
    ReverseObjective obj = reverse_objective(model, clean_images, mask_raw, pattern_raw, config.lambda, target_class, !last);
    trace.push_back(obj.objective);
    if (!std::isfinite(obj.objective)) {
      std::string tail;
      for (std::size_t k = trace.size() > 5 ? trace.size() - 5 : 0; k < trace.size(); ++k)
        tail += " " + std::to_string(trace[k]);
      throw NumericError("class " + std::to_string(target_class) + ": non-finite objective at iteration " +
                         std::to_string(it) + "; last objectives:" + tail);
    }
    if (obj.objective < best.best_objective) {
      best.best_objective = obj.objective;
      best.best_iteration = it;
      best.mask = std::move(obj.mask);
      best.pattern = std::move(obj.pattern);
      best.l1_norm = obj.l1;
    }
    if (last) break;
    if (config.optimizer == ReverseOptimizer::Adam) {
      mask_adam.step(mask_raw, obj.grad_mask, lr);
      pattern_adam.step(pattern_raw, obj.grad_pattern, lr);
    } else {
      for (std::size_t i = 0; i < mask_raw.size(); ++i) mask_raw[i] -= lr * obj.grad_mask[i];
      for (std::size_t k = 0; k < pattern_raw.size(); ++k) pattern_raw[k] -= lr * obj.grad_pattern[k];
    }
  }
  best.loss_trace = std::move(trace);
  return best;
}

std::vector<double> ReverseAll::norms() const {
  std::vector<double> out;
  out.reserve(triggers.size());
  for (const auto& t : triggers) out.push_back(t.l1_norm);
  return out;
}

ReverseAll reverse_all(const Model& model, const Tensor& clean_images, const ReverseConfig& config) {
  ReverseAll out;
  for (std::size_t c = 0; c < model.class_count(); ++c) {
    ReverseConfig per_class = config;
    per_class.seed = derive_seed(config.seed, c);
    try {
      out.triggers.push_back(reverse_trigger_for_class(model, clean_images, per_class, static_cast<int>(c)));
    } catch (const Error& e) {
      out.failures.push_back({static_cast<int>(c), e.what()});
    }
  }
  return out;
}

}  // namespace shapprune
