#include "shapprune/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "shapprune/errors.hpp"

namespace shapprune {

LabeledSet LabeledSet::subset(std::span<const std::size_t> rows) const {
  LabeledSet out;
  out.images = images.gather_rows(rows);
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(labels.at(r));
  return out;
}

void validate(const LabeledSet& set) {
  if (set.images.rank() < 2 || set.images.dim(0) != set.labels.size())
    throw ShapeError("dataset has " + std::to_string(set.labels.size()) + " labels for images " +
                     shape_str(set.images.shape()));
}

namespace {

constexpr std::size_t kEvalChunk = 256;

void update_running_stats(Model& model, const ForwardTrace& trace) {
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    auto* bn = std::get_if<BatchNormLayer>(&model.layers()[i]);
    if (!bn) continue;
    const auto& cache = trace.layers[i];
    for (std::size_t c = 0; c < bn->channels; ++c) {
      bn->running_mean[c] = (1.0f - bn->momentum) * bn->running_mean[c] + bn->momentum * cache.batch_mean[c];
      const float v = (1.0f - bn->momentum) * bn->running_var[c] + bn->momentum * cache.batch_var[c];
      bn->running_var[c] = std::max(v, std::numeric_limits<float>::min());
    }
  }
}

}  // namespace

Model train_sgd(Model model, const LabeledSet& data, const TrainConfig& config,
                const std::function<void(const EpochStats&)>& on_epoch) {
  validate(data);
  if (data.empty()) throw InvalidArgument("cannot train on an empty dataset");
  if (config.batch_size == 0) throw InvalidArgument("batch_size must be positive");

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  // Momentum buffers, same nesting as trainable_parameters().
  std::vector<std::vector<std::vector<float>>> velocity(model.layers().size());
  for (std::size_t i = 0; i < model.layers().size(); ++i)
    for (const Tensor* p : trainable_parameters(model.layers()[i])) velocity[i].emplace_back(p->size(), 0.0f);

  const Mode mode = config.batchnorm == BatchNormUpdate::Batch ? Mode::Training : Mode::Inference;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      // Batch statistics of a single sample are degenerate.
      if (mode == Mode::Training && end - start < 2 && start > 0) continue;
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const LabeledSet batch = data.subset(rows);

      auto trace = forward_trace(model, batch.images, mode);
      auto ce = cross_entropy(trace.output, batch.labels);
      if (!std::isfinite(ce.loss))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", sample offset " +
                           std::to_string(start));
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto row = trace.output.row(b);
        if (std::max_element(row.begin(), row.end()) - row.begin() == batch.labels[b]) ++correct;
      }
      loss_sum += ce.loss * static_cast<double>(batch.size());
      auto grads = backpropagate(model, trace, ce.grad, {}, true, false);

      for (std::size_t i = 0; i < model.layers().size(); ++i) {
        auto params = trainable_parameters(model.layers()[i]);
        for (std::size_t p = 0; p < params.size(); ++p) {
          auto w = params[p]->data();
          const auto g = grads.params[i][p].data();
          auto& v = velocity[i][p];
          for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = config.momentum * v[j] + g[j] + config.weight_decay * w[j];
            w[j] -= config.learning_rate * v[j];
          }
        }
      }
      if (mode == Mode::Training) update_running_stats(model, trace);
    }
    if (on_epoch)
      on_epoch({epoch, loss_sum / static_cast<double>(data.size()),
                static_cast<double>(correct) / static_cast<double>(data.size())});
  }
  return model;
}

std::vector<int> predict(const Model& model, const Tensor& images) {
  std::vector<int> out;
  out.reserve(images.dim(0));
  for (std::size_t start = 0; start < images.dim(0); start += kEvalChunk) {
    const auto end = std::min(images.dim(0), start + kEvalChunk);
    const Tensor logits = forward(model, start == 0 && end == images.dim(0) ? images : images.slice_rows(start, end));
    for (std::size_t b = 0; b < logits.dim(0); ++b) {
      const auto row = logits.row(b);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double accuracy(const Model& model, const LabeledSet& data) {
  validate(data);
  if (data.empty()) throw InvalidArgument("accuracy of an empty dataset is undefined");
  const auto pred = predict(model, data.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double attack_success_rate(const Model& model, const LabeledSet& triggered, int target) {
  validate(triggered);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < triggered.size(); ++i)
    if (triggered.labels[i] != target) rows.push_back(i);
  if (rows.empty()) throw InvalidArgument("attack success rate needs at least one non-target-class image");
  const auto pred = predict(model, triggered.images.gather_rows(rows));
  const auto hits = std::count(pred.begin(), pred.end(), target);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace shapprune
