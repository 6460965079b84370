#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "shapprune/defense.hpp"
#include "shapprune/model.hpp"
#include "shapprune/tensor.hpp"
#include "shapprune/train.hpp"

namespace shapprune {

/// Per-channel batch mean and biased variance at one batchnorm layer's input.
struct BatchNormStats {
  std::size_t layer = 0;
  std::vector<double> mean;
  std::vector<double> var;
};

/// Statistics of `x` at every batchnorm input (inference-mode forward).
std::vector<BatchNormStats> batch_bn_statistics(const Model& model, const Tensor& x);

/// Sum over batchnorm layers and channels of (mean(x) - running_mean)^2 +
/// (var(x) - running_var)^2. Needs a batch of at least two.
double bn_loss(const Model& model, const Tensor& x);
Tensor bn_loss_gradient(const Model& model, const Tensor& x);

/// Sum of squared horizontal and vertical neighbour differences.
double variation_loss(const Tensor& x);
/// Sum of squared pixels.
double norm_loss(const Tensor& x);
/// alpha1 * L_V + alpha2 * L_norm for one [C,H,W] image. A [N,C,H,W] batch
/// gives the mean over its images.
double prior_loss(const Tensor& x, double alpha1, double alpha2);
Tensor prior_loss_gradient(const Tensor& x, double alpha1, double alpha2);

struct RecoveryConfig {
  double alpha = 1.0;    // cross-entropy
  double beta = 100.0;   // batchnorm matching
  double gamma = 0.01;   // prior
  double alpha1 = 1e-2;  // variation
  double alpha2 = 1e-4;  // norm
  std::vector<int> labels;  // empty: every class
  std::size_t per_label = 10;
  std::size_t iterations = 1000;
  double learning_rate = 0.05;  // Adam step size
  std::uint64_t seed = 1;
};

struct LossTerms {
  double total = 0.0;
  double ce = 0.0;
  double bn = 0.0;
  double prior = 0.0;
};

/// alpha*CE(f(x), y) + beta*L_bn(x) + gamma*L_pr(x), parts kept separately.
LossTerms total_loss(const Model& model, const Tensor& x, const std::vector<int>& labels, const RecoveryConfig& config);

struct Recovery {
  LabeledSet images;             // class-interleaved, values in [0,1]
  std::vector<LossTerms> trace;  // per iteration, before the step
  LossTerms final_loss;
};

/// Surrogate images from the model alone: uniform noise optimized on x by
/// Adam, projected onto [0,1] after every step.
Recovery recover_images(const Model& model, const RecoveryConfig& config);

void validate(const RecoveryConfig& config, const Model& model);

struct DataFreeOutcome {
  Recovery recovery;
  DefenseOutcome defense;
};

/// Recovers images, then runs the few-shot defense on them in place of clean
/// data, fine-tuning without the target class. No real image is read.
DataFreeOutcome datafree_mitigate(const Model& model, const RecoveryConfig& recovery, const DefenseConfig& defense);

}  // namespace shapprune
