#include "shapprune/datafree.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <variant>

#include "shapprune/errors.hpp"

namespace shapprune {

namespace {

struct View {
  std::size_t batch, channels, spatial;
};

View channel_view(const Tensor& t) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1), 1};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2) * t.dim(3)};
  throw ShapeError("batchnorm input must be rank 2 or 4, got " + shape_str(t.shape()));
}

BatchNormStats stats_of(std::size_t layer, const Tensor& x) {
  const View v = channel_view(x);
  const double count = static_cast<double>(v.batch * v.spatial);
  BatchNormStats s{layer, std::vector<double>(v.channels, 0.0), std::vector<double>(v.channels, 0.0)};
  for (std::size_t c = 0; c < v.channels; ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < v.batch; ++b) {
      const float* p = x.ptr() + (b * v.channels + c) * v.spatial;
      for (std::size_t i = 0; i < v.spatial; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t b = 0; b < v.batch; ++b) {
      const float* p = x.ptr() + (b * v.channels + c) * v.spatial;
      for (std::size_t i = 0; i < v.spatial; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    s.mean[c] = mean;
    s.var[c] = sq / count;
  }
  return s;
}

void check_bn_input(const Model& model, const Tensor& x) {
  const bool any_bn = std::any_of(model.layers().begin(), model.layers().end(),
                                  [](const Layer& l) { return std::holds_alternative<BatchNormLayer>(l); });
  if (!any_bn) throw InvalidArgument("batchnorm matching needs a model with a batchnorm layer");
  if (x.rank() < 1 || x.dim(0) < 2) throw InvalidArgument("batchnorm matching needs a batch of at least two images");
}

// Loss and per-layer input gradients from a recorded inference trace.
double bn_terms(const Model& model, const ForwardTrace& trace, std::vector<Tensor>* grads, double scale) {
  double loss = 0.0;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const auto* bn = std::get_if<BatchNormLayer>(&model.layers()[i]);
    if (!bn) continue;
    const Tensor& x = trace.layers[i].input;
    const BatchNormStats s = stats_of(i, x);
    const View v = channel_view(x);
    const double count = static_cast<double>(v.batch * v.spatial);
    std::vector<double> dmean(v.channels), dvar(v.channels);
    for (std::size_t c = 0; c < v.channels; ++c) {
      dmean[c] = s.mean[c] - bn->running_mean[c];
      dvar[c] = s.var[c] - bn->running_var[c];
      loss += dmean[c] * dmean[c] + dvar[c] * dvar[c];
    }
    if (!grads) continue;
    Tensor g(x.shape());
    for (std::size_t b = 0; b < v.batch; ++b)
      for (std::size_t c = 0; c < v.channels; ++c) {
        const std::size_t base = (b * v.channels + c) * v.spatial;
        for (std::size_t k = 0; k < v.spatial; ++k) {
          const double d = 2.0 * dmean[c] / count + 4.0 * dvar[c] * (x[base + k] - s.mean[c]) / count;
          g[base + k] = static_cast<float>(scale * d);
        }
      }
    (*grads)[i] = std::move(g);
  }
  return loss;
}

struct ImageView {
  std::size_t images, channels, h, w;
};

ImageView image_view(const Tensor& x) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw ShapeError("prior loss needs [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
}

}  // namespace

std::vector<BatchNormStats> batch_bn_statistics(const Model& model, const Tensor& x) {
  check_bn_input(model, x);
  const ForwardTrace trace = forward_trace(model, x, Mode::Inference);
  std::vector<BatchNormStats> out;
  for (std::size_t i = 0; i < model.layers().size(); ++i)
    if (std::holds_alternative<BatchNormLayer>(model.layers()[i])) out.push_back(stats_of(i, trace.layers[i].input));
  return out;
}

double bn_loss(const Model& model, const Tensor& x) {
  check_bn_input(model, x);
  return bn_terms(model, forward_trace(model, x, Mode::Inference), nullptr, 1.0);
}

Tensor bn_loss_gradient(const Model& model, const Tensor& x) {
  check_bn_input(model, x);
  const ForwardTrace trace = forward_trace(model, x, Mode::Inference);
  std::vector<Tensor> extra(model.layers().size());
  bn_terms(model, trace, &extra, 1.0);
  const Tensor zero(trace.output.shape(), 0.0f);
  return backpropagate(model, trace, zero, extra, false, true).input;
}

double variation_loss(const Tensor& x) {
  const ImageView v = image_view(x);
  double s = 0.0;
  for (std::size_t p = 0; p < v.images * v.channels; ++p) {
    const float* img = x.ptr() + p * v.h * v.w;
    for (std::size_t y = 0; y < v.h; ++y)
      for (std::size_t c = 0; c < v.w; ++c) {
        const double here = img[y * v.w + c];
        if (c + 1 < v.w) s += (img[y * v.w + c + 1] - here) * (img[y * v.w + c + 1] - here);
        if (y + 1 < v.h) s += (img[(y + 1) * v.w + c] - here) * (img[(y + 1) * v.w + c] - here);
      }
  }
  return s;
}

double norm_loss(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += static_cast<double>(v) * v;
  return s;
}

double prior_loss(const Tensor& x, double alpha1, double alpha2) {
  const ImageView v = image_view(x);
  return (alpha1 * variation_loss(x) + alpha2 * norm_loss(x)) / static_cast<double>(v.images);
}

Tensor prior_loss_gradient(const Tensor& x, double alpha1, double alpha2) {
  const ImageView v = image_view(x);
  const double scale = 1.0 / static_cast<double>(v.images);
  Tensor g(x.shape());
  for (std::size_t p = 0; p < v.images * v.channels; ++p) {
    const float* img = x.ptr() + p * v.h * v.w;
    float* out = g.ptr() + p * v.h * v.w;
    for (std::size_t y = 0; y < v.h; ++y)
      for (std::size_t c = 0; c < v.w; ++c) {
        const std::size_t k = y * v.w + c;
        double d = 2.0 * alpha2 * img[k];
        if (c + 1 < v.w) d -= 2.0 * alpha1 * (img[k + 1] - img[k]);
        if (c > 0) d += 2.0 * alpha1 * (img[k] - img[k - 1]);
        if (y + 1 < v.h) d -= 2.0 * alpha1 * (img[k + v.w] - img[k]);
        if (y > 0) d += 2.0 * alpha1 * (img[k] - img[k - v.w]);
        out[k] = static_cast<float>(scale * d);
      }
  }
  return g;
}

void validate(const RecoveryConfig& config, const Model& model) {
  for (double w : {config.alpha, config.beta, config.gamma, config.alpha1, config.alpha2})
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("recovery loss weights must be finite and non-negative");
  if (config.per_label == 0) throw InvalidArgument("recovery needs at least one image per label");
  if (config.iterations == 0) throw InvalidArgument("recovery needs at least one iteration");
  if (!(config.learning_rate > 0.0)) throw InvalidArgument("recovery learning rate must be positive");
  for (int y : config.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= model.class_count())
      throw InvalidArgument("recovery label " + std::to_string(y) + " outside the model's classes");
}

namespace {

LossTerms evaluate(const Model& model, const Tensor& x, const std::vector<int>& labels, const RecoveryConfig& config,
                   Tensor* grad) {
  const ForwardTrace trace = forward_trace(model, x, Mode::Inference);
  const CrossEntropy ce = cross_entropy(trace.output, labels);
  std::vector<Tensor> extra(model.layers().size());
  LossTerms t;
  t.ce = ce.loss;
  t.bn = bn_terms(model, trace, grad ? &extra : nullptr, config.beta);
  t.prior = prior_loss(x, config.alpha1, config.alpha2);
  t.total = config.alpha * t.ce + config.beta * t.bn + config.gamma * t.prior;
  if (grad) {
    Tensor g_logits = ce.grad;
    for (auto& v : g_logits.data()) v *= static_cast<float>(config.alpha);
    *grad = backpropagate(model, trace, g_logits, extra, false, true).input;
    const Tensor gp = prior_loss_gradient(x, config.alpha1, config.alpha2);
    for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] += static_cast<float>(config.gamma) * gp[i];
  }
  return t;
}

}  // namespace

LossTerms total_loss(const Model& model, const Tensor& x, const std::vector<int>& labels,
                     const RecoveryConfig& config) {
  check_bn_input(model, x);
  return evaluate(model, x, labels, config, nullptr);
}

Recovery recover_images(const Model& model, const RecoveryConfig& config) {
  validate(config, model);
  std::vector<int> classes = config.labels;
  if (classes.empty())
    for (std::size_t c = 0; c < model.class_count(); ++c) classes.push_back(static_cast<int>(c));
  std::vector<int> labels;
  for (std::size_t k = 0; k < config.per_label; ++k) labels.insert(labels.end(), classes.begin(), classes.end());
  if (labels.size() < 2) throw InvalidArgument("recovery batch must hold at least two images");

  Shape shape{labels.size()};
  shape.insert(shape.end(), model.input_shape().begin(), model.input_shape().end());
  Tensor x(shape);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  for (auto& v : x.data()) v = unit(rng);
  check_bn_input(model, x);

  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m1(x.size(), 0.0), m2(x.size(), 0.0);
  Recovery out;
  out.trace.reserve(config.iterations);
  Tensor grad;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const LossTerms t = evaluate(model, x, labels, config, &grad);
    out.trace.push_back(t);
    if (!std::isfinite(t.total))
      throw NumericError("image recovery diverged at iteration " + std::to_string(it) + " (ce " + std::to_string(t.ce) +
                         ", bn " + std::to_string(t.bn) + ", prior " + std::to_string(t.prior) + ")");
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(it + 1));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(it + 1));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
      m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
      const double step = config.learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
      x[i] = std::clamp(static_cast<float>(x[i] - step), 0.0f, 1.0f);
    }
  }
  out.final_loss = evaluate(model, x, labels, config, nullptr);
  out.images.images = std::move(x);
  out.images.labels = std::move(labels);
  return out;
}

DataFreeOutcome datafree_mitigate(const Model& model, const RecoveryConfig& recovery, const DefenseConfig& defense) {
  DataFreeOutcome out;
  out.recovery = recover_images(model, recovery);
  DefenseConfig c = defense;
  c.tune_without_target = true;
  out.defense = defend(model, out.recovery.images, c);
  return out;
}

}  // namespace shapprune
