#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "shapprune/model.hpp"
#include "shapprune/tensor.hpp"

namespace shapprune {

/// Images [N, C, H, W] with one class label each.
struct LabeledSet {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  LabeledSet subset(std::span<const std::size_t> rows) const;
};

/// Throws ShapeError unless images and labels agree.
void validate(const LabeledSet& set);

enum class BatchNormUpdate {
  Batch,   // batch statistics in the forward pass, running statistics updated
  Frozen,  // running statistics used and left untouched
};

struct TrainConfig {
  float learning_rate = 0.05f;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
  BatchNormUpdate batchnorm = BatchNormUpdate::Batch;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

/// Minibatch SGD with momentum. Deterministic for a given seed; masked
/// neurons stay masked. Throws NumericError on a non-finite loss.
Model train_sgd(Model model, const LabeledSet& data, const TrainConfig& config,
                const std::function<void(const EpochStats&)>& on_epoch = {});

/// Argmax class per image.
std::vector<int> predict(const Model& model, const Tensor& images);

double accuracy(const Model& model, const LabeledSet& data);

/// Fraction of triggered images whose true class differs from `target` that
/// are classified as `target`. Rejects sets with no such image.
double attack_success_rate(const Model& model, const LabeledSet& triggered, int target);

}  // namespace shapprune
