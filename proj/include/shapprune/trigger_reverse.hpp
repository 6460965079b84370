#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "shapprune/model.hpp"
#include "shapprune/tensor.hpp"
#include "shapprune/train.hpp"

namespace shapprune {

/// A reversed trigger for one class.
struct TriggerSpec {
  int target_class = 0;
  Tensor mask;     // [1,H,W], broadcast over channels, values in [0,1]
  Tensor pattern;  // [C,H,W], values in [0,1]
  double l1_norm = 0.0;
  std::vector<double> loss_trace;  // objective of iterate t, before step t
  std::size_t best_iteration = 0;
  double best_objective = 0.0;
};

double mask_l1(const Tensor& mask);

enum class ReverseOptimizer { GradientDescent, Adam };

struct ReverseConfig {
  double lambda = 0.01;
  std::size_t iterations = 1000;
  double learning_rate = 0.1;
  ReverseOptimizer optimizer = ReverseOptimizer::Adam;
  std::uint64_t seed = 1;
};

struct ReverseObjective {
  double objective = 0.0;  // ce + lambda * l1
  double ce = 0.0;
  double l1 = 0.0;
  Tensor mask;          // sigmoid(mask_raw)
  Tensor pattern;       // sigmoid(pattern_raw)
  Tensor grad_mask;     // d objective / d mask_raw
  Tensor grad_pattern;  // d objective / d pattern_raw
};

/// Objective at raw (pre-sigmoid) parameters; gradients are left empty
/// unless requested or when the objective is not finite.
ReverseObjective reverse_objective(const Model& model, const Tensor& clean_images, const Tensor& mask_raw,
                                   const Tensor& pattern_raw, double lambda, int target_class, bool gradients = true);

/// Minimizes mean CE(c, f((1-M)*a + M*T)) over the clean images + lambda*|M|_1
/// with M = sigmoid(m), T = sigmoid(t), by gradient descent (plain or Adam) on m and t.
/// One (M, T) is shared by every image. Returns the best iterate.
TriggerSpec reverse_trigger_for_class(const Model& model, const Tensor& clean_images, const ReverseConfig& config,
                                      int target_class);

struct ReverseFailure {
  int target_class = 0;
  std::string message;
};

struct ReverseAll {
  std::vector<TriggerSpec> triggers;  // successful classes, ascending
  std::vector<ReverseFailure> failures;
  bool complete() const noexcept { return failures.empty(); }
  std::vector<double> norms() const;
};

/// Every class with the same config and a per-class seed derived from config.seed.
ReverseAll reverse_all(const Model& model, const Tensor& clean_images, const ReverseConfig& config);

}  // namespace shapprune
