#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "shapprune/tensor.hpp"
#include "shapprune/train.hpp"

namespace shapprune {

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 200;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::uint64_t seed = 1;
  float noise = 0.08f;
};

/// Number of distinct pattern families the generator can draw.
constexpr std::size_t kSyntheticFamilies = 10;

/// Class c renders pattern family c (stripes, checkerboards, a disk, a
/// half-plane, grid lines, a frame, diagonals) with a random foreground/background color, random
/// placement jitter and Gaussian pixel noise. Labels are interleaved
/// 0,1,..,K-1,0,1,...
LabeledSet make_synthetic_dataset(const SyntheticSpec& spec);

/// A blend trigger: a = (1 - M) * a + M * T, clamped to [0, 1].
/// The mask is [1, H, W] (broadcast over channels) or the full image shape.
struct Trigger {
  Tensor mask;
  Tensor pattern;  // [C, H, W]
  int target_class = 0;
};

/// Solid `patch` x `patch` square in the bottom-right corner with a seeded
/// saturated color.
Trigger make_patch_trigger(const Shape& image_shape, std::size_t patch, int target_class, std::uint64_t seed);

/// Throws unless the mask is in [0,1] and pattern in [0,1] with matching shapes.
void validate(const Trigger& trigger, const Shape& image_shape);

/// Blends the trigger into one image [C,H,W] or a batch [N,C,H,W].
Tensor inject_trigger(const Tensor& images, const Tensor& mask, const Tensor& pattern);
inline Tensor inject_trigger(const Tensor& images, const Trigger& trigger) {
  return inject_trigger(images, trigger.mask, trigger.pattern);
}

struct PoisonConfig {
  Trigger trigger;
  double injection_ratio = 0.01;
  std::uint64_t seed = 1;
};

struct PoisonedData {
  LabeledSet train;                          // same cardinality as the clean training set
  std::vector<std::size_t> poisoned_indices;  // sorted rows of `train` that carry the trigger
  LabeledSet clean_test;
  LabeledSet triggered_test;  // every non-target test image, triggered, true labels
};

/// Triggers and relabels floor(ratio * n) seed-chosen non-target training images.
PoisonedData poison_dataset(const LabeledSet& train, const LabeledSet& test, const PoisonConfig& config);

/// Triggered copy of every image whose label differs from the target.
LabeledSet triggered_copy(const LabeledSet& clean, const Tensor& mask, const Tensor& pattern, int target);

struct FewShotSplit {
  LabeledSet defender;    // `per_class` images of every class
  LabeledSet evaluation;  // everything else
};

/// Seeded draw of `per_class` images per class for the defender.
FewShotSplit few_shot_split(const LabeledSet& data, std::size_t classes, std::size_t per_class, std::uint64_t seed);

}  // namespace shapprune
