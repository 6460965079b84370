#include "shapprune/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "shapprune/errors.hpp"

namespace shapprune {

namespace {

struct Placement {
  double cx, cy;     // shape center
  double radius;     // disks, rings, frames
  long phase_x, phase_y;
};

// 1 where the family's foreground covers pixel (x, y).
bool covers(std::size_t family, long x, long y, const Placement& p) {
  const double dx = static_cast<double>(x) - p.cx, dy = static_cast<double>(y) - p.cy;
  const double dist = std::hypot(dx, dy);
  switch (family) {
    case 0: return ((y + p.phase_y) / 2) % 2 == 0;
    case 1: return ((x + p.phase_x) / 2) % 2 == 0;
    case 2: return ((x + y + p.phase_x) / 2) % 2 == 0;
    case 3: return ((x - y + p.phase_x + 64) / 2) % 2 == 0;
    case 4: return ((x + p.phase_x) / 2 + (y + p.phase_y) / 2) % 2 == 0;
    case 5: return dist <= p.radius;
    case 6: return dx < 0.0;
    case 7: return (x + p.phase_x) % 4 == 0 || (y + p.phase_y) % 4 == 0;
    case 8: {
      const double r = std::max(std::abs(dx), std::abs(dy));
      return r <= p.radius && r >= p.radius - 1.0;
    }
    case 9: return std::abs(dx - dy) <= 1.0 || std::abs(dx + dy) <= 1.0;
    default: return false;
  }
}

}  // namespace

LabeledSet make_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.classes > kSyntheticFamilies)
    throw InvalidArgument("synthetic dataset supports 2.." + std::to_string(kSyntheticFamilies) + " classes, got " +
                          std::to_string(spec.classes));
  if (spec.image_size < 8) throw InvalidArgument("synthetic image size must be at least 8");
  if (spec.per_class == 0 || spec.channels == 0) throw InvalidArgument("per_class and channels must be positive");

  const std::size_t n = spec.classes * spec.per_class, s = spec.image_size, ch = spec.channels;
  const double scale = static_cast<double>(s) / 16.0;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<float> noise(0.0f, spec.noise);

  LabeledSet out;
  out.images = Tensor({n, ch, s, s});
  out.labels.resize(n);
  std::vector<float> fg(ch), bg(ch);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t family = i % spec.classes;
    out.labels[i] = static_cast<int>(family);
    for (std::size_t c = 0; c < ch; ++c) {
      fg[c] = static_cast<float>(0.55 + 0.45 * unit(rng));
      bg[c] = static_cast<float>(0.45 * unit(rng));
    }
    const double jitter = 2.0 * scale;
    Placement p{};
    p.cx = (static_cast<double>(s) - 1.0) / 2.0 + (2.0 * unit(rng) - 1.0) * jitter;
    p.cy = (static_cast<double>(s) - 1.0) / 2.0 + (2.0 * unit(rng) - 1.0) * jitter;
    p.radius = (3.0 + 2.0 * unit(rng)) * scale;
    p.phase_x = static_cast<long>(unit(rng) * 6.0);
    p.phase_y = static_cast<long>(unit(rng) * 6.0);
    auto img = out.images.row(i);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const bool on = covers(family, static_cast<long>(x), static_cast<long>(y), p);
        for (std::size_t c = 0; c < ch; ++c) {
          const float v = (on ? fg[c] : bg[c]) + noise(rng);
          img[(c * s + y) * s + x] = std::clamp(v, 0.0f, 1.0f);
        }
      }
  }
  return out;
}

Trigger make_patch_trigger(const Shape& image_shape, std::size_t patch, int target_class, std::uint64_t seed) {
  if (image_shape.size() != 3) throw ShapeError("trigger needs a [C,H,W] image shape");
  const std::size_t ch = image_shape[0], h = image_shape[1], w = image_shape[2];
  if (patch == 0 || patch > h || patch > w) throw InvalidArgument("patch size does not fit the image");
  if (target_class < 0) throw InvalidArgument("target class must be non-negative");

  // Saturated color: stretch a random color so its channels span [0, 1].
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::vector<float> color(ch);
  for (auto& c : color) c = unit(rng);
  const auto [lo, hi] = std::minmax_element(color.begin(), color.end());
  const float min_c = *lo, span = *hi - *lo;
  if (ch > 1 && span > 1e-3f)
    for (auto& c : color) c = (c - min_c) / span;

  Trigger t;
  t.target_class = target_class;
  t.mask = Tensor({1, h, w});
  t.pattern = Tensor({ch, h, w});
  for (std::size_t y = h - patch; y < h; ++y)
    for (std::size_t x = w - patch; x < w; ++x) {
      t.mask[y * w + x] = 1.0f;
      for (std::size_t c = 0; c < ch; ++c) t.pattern[(c * h + y) * w + x] = color[c];
    }
  return t;
}

void validate(const Trigger& trigger, const Shape& image_shape) {
  if (trigger.pattern.shape() != image_shape)
    throw ShapeError("trigger pattern " + shape_str(trigger.pattern.shape()) + " does not match image " +
                     shape_str(image_shape));
  const auto& ms = trigger.mask.shape();
  if (ms.size() != 3 || (ms[0] != 1 && ms[0] != image_shape[0]) || ms[1] != image_shape[1] || ms[2] != image_shape[2])
    throw ShapeError("trigger mask " + shape_str(ms) + " does not match image " + shape_str(image_shape));
  for (float v : trigger.mask.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw InvalidArgument("trigger mask values must lie in [0,1]");
  for (float v : trigger.pattern.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw InvalidArgument("trigger pattern values must lie in [0,1]");
}

Tensor inject_trigger(const Tensor& images, const Tensor& mask, const Tensor& pattern) {
  const bool single = images.rank() == 3;
  if (!single && images.rank() != 4) throw ShapeError("expected an image or batch, got " + shape_str(images.shape()));
  const Shape image_shape(images.shape().end() - 3, images.shape().end());
  if (pattern.shape() != image_shape)
    throw ShapeError("pattern " + shape_str(pattern.shape()) + " does not match image " + shape_str(image_shape));
  const auto& ms = mask.shape();
  if (ms.size() != 3 || (ms[0] != 1 && ms[0] != image_shape[0]) || ms[1] != image_shape[1] ||
      ms[2] != image_shape[2])
    throw ShapeError("mask " + shape_str(ms) + " does not match image " + shape_str(image_shape));

  const std::size_t ch = image_shape[0], plane = image_shape[1] * image_shape[2];
  const std::size_t count = single ? 1 : images.dim(0);
  const bool broadcast = ms[0] == 1;
  Tensor out = images;
  for (std::size_t b = 0; b < count; ++b) {
    float* img = out.ptr() + b * ch * plane;
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const float m = mask[(broadcast ? 0 : c) * plane + i];
        const float v = (1.0f - m) * img[c * plane + i] + m * pattern[c * plane + i];
        img[c * plane + i] = std::clamp(v, 0.0f, 1.0f);
      }
  }
  return out;
}

LabeledSet triggered_copy(const LabeledSet& clean, const Tensor& mask, const Tensor& pattern, int target) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < clean.size(); ++i)
    if (clean.labels[i] != target) rows.push_back(i);
  if (rows.empty()) throw InvalidArgument("no non-target images to trigger");
  LabeledSet out = clean.subset(rows);
  out.images = inject_trigger(out.images, mask, pattern);
  return out;
}

PoisonedData poison_dataset(const LabeledSet& train, const LabeledSet& test, const PoisonConfig& config) {
  validate(train);
  validate(test);
  validate(config.trigger, train.image_shape());
  if (!(config.injection_ratio > 0.0 && config.injection_ratio < 1.0))
    throw InvalidArgument("injection ratio must lie in (0,1)");
  const auto count = static_cast<std::size_t>(std::floor(config.injection_ratio * static_cast<double>(train.size())));
  if (count == 0)
    throw InvalidArgument("injection ratio " + std::to_string(config.injection_ratio) + " selects no image out of " +
                          std::to_string(train.size()));

  const int target = config.trigger.target_class;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (train.labels[i] != target) candidates.push_back(i);
  if (candidates.size() < count) throw InvalidArgument("not enough non-target images to poison");

  std::mt19937_64 rng(config.seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(count);
  std::sort(candidates.begin(), candidates.end());

  PoisonedData out;
  out.train = train;
  for (auto i : candidates) {
    auto img = out.train.images.row(i);
    const Tensor src(train.image_shape(), std::vector<float>(img.begin(), img.end()));
    const Tensor dirty = inject_trigger(src, config.trigger);
    std::copy(dirty.data().begin(), dirty.data().end(), img.begin());
    out.train.labels[i] = target;
  }
  out.poisoned_indices = std::move(candidates);
  out.clean_test = test;
  out.triggered_test = triggered_copy(test, config.trigger.mask, config.trigger.pattern, target);
  return out;
}

FewShotSplit few_shot_split(const LabeledSet& data, std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  validate(data);
  if (per_class == 0) throw InvalidArgument("defender needs at least one image per class");
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto y = static_cast<std::size_t>(data.labels[i]);
    if (y >= classes) throw InvalidArgument("label " + std::to_string(y) + " outside class range");
    by_class[y].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> taken(data.size(), 0);
  std::vector<std::size_t> defender;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& rows = by_class[c];
    if (rows.size() <= per_class)
      throw InvalidArgument("class " + std::to_string(c) + " has too few images for the defender split");
    std::shuffle(rows.begin(), rows.end(), rng);
    for (std::size_t k = 0; k < per_class; ++k) taken[rows[k]] = 1;
  }
  // Defender images ordered class-major so batches mix every class.
  for (std::size_t k = 0; k < per_class; ++k)
    for (std::size_t c = 0; c < classes; ++c) defender.push_back(by_class[c][k]);
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!taken[i]) rest.push_back(i);
  return {data.subset(defender), data.subset(rest)};
}

}  // namespace shapprune
