#include "shapprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "shapprune/errors.hpp"
#include "shapprune/kernels.hpp"

namespace shapprune {

namespace kp = kernels::parallel;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

LayerKind layer_kind(const Layer& layer) { return static_cast<LayerKind>(layer.index()); }

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

std::vector<Tensor*> trainable_parameters(Layer& layer) {
  return std::visit(overloaded{
                        [](DenseLayer& l) -> std::vector<Tensor*> { return {&l.weight, &l.bias}; },
                        [](Conv2dLayer& l) -> std::vector<Tensor*> { return {&l.weight, &l.bias}; },
                        [](BatchNormLayer& l) -> std::vector<Tensor*> { return {&l.gamma, &l.beta}; },
                        [](auto&) -> std::vector<Tensor*> { return {}; },
                    },
                    layer);
}

std::vector<const Tensor*> trainable_parameters(const Layer& layer) {
  auto params = trainable_parameters(const_cast<Layer&>(layer));
  return {params.begin(), params.end()};
}

// ---------------------------------------------------------------------------
// Construction and neuron indexing

namespace {

std::string at_layer(std::size_t i, const Layer& l) {
  return "layer " + std::to_string(i) + " (" + layer_kind_name(layer_kind(l)) + "): ";
}

void expect_shape(const Tensor& t, const Shape& shape, const std::string& what) {
  if (t.shape() != shape)
    throw ShapeError(what + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(shape));
}

Shape infer_output(std::size_t i, const Layer& layer, const Shape& in) {
  const auto where = at_layer(i, layer);
  return std::visit(
      overloaded{
          [&](const DenseLayer& l) -> Shape {
            if (in.size() != 1 || in[0] != l.in_units)
              throw ShapeError(where + "expects [" + std::to_string(l.in_units) + "], got " + shape_str(in));
            expect_shape(l.weight, {l.out_units, l.in_units}, where + "weight");
            expect_shape(l.bias, {l.out_units}, where + "bias");
            return {l.out_units};
          },
          [&](const Conv2dLayer& l) -> Shape {
            if (in.size() != 3 || in[0] != l.in_channels)
              throw ShapeError(where + "expects " + std::to_string(l.in_channels) + " input channels, got " +
                               shape_str(in));
            if (l.stride == 0 || l.kernel == 0 || in[1] + 2 * l.padding < l.kernel ||
                in[2] + 2 * l.padding < l.kernel)
              throw ShapeError(where + "kernel does not fit input " + shape_str(in));
            expect_shape(l.weight, {l.out_channels, l.in_channels, l.kernel, l.kernel}, where + "weight");
            expect_shape(l.bias, {l.out_channels}, where + "bias");
            kernels::ConvGeometry g{1, in[0], in[1], in[2], l.out_channels, l.kernel, l.stride, l.padding};
            return {l.out_channels, g.out_height(), g.out_width()};
          },
          [&](const BatchNormLayer& l) -> Shape {
            if ((in.size() != 1 && in.size() != 3) || in[0] != l.channels)
              throw ShapeError(where + "expects " + std::to_string(l.channels) + " channels, got " + shape_str(in));
            for (const Tensor* t : {&l.gamma, &l.beta, &l.running_mean, &l.running_var})
              expect_shape(*t, {l.channels}, where + "statistics");
            for (float v : l.running_var.data())
              if (!(v > 0.0f)) throw InvalidArgument(where + "running variance must be strictly positive");
            return in;
          },
          [&](const ReluLayer&) -> Shape { return in; },
          [&](const MaxPoolLayer& l) -> Shape {
            if (in.size() != 3 || l.window == 0 || in[1] < l.window || in[2] < l.window)
              throw ShapeError(where + "window does not fit input " + shape_str(in));
            return {in[0], in[1] / l.window, in[2] / l.window};
          },
          [&](const FlattenLayer&) -> Shape { return {shape_size(in)}; },
      },
      layer);
}

}  // namespace

Model::Model(Shape input_shape, std::size_t class_count, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), class_count_(class_count), layers_(std::move(layers)) {
  if (class_count_ == 0) throw InvalidArgument("class_count must be positive");
  if (layers_.empty()) throw InvalidArgument("model needs at least one layer");
  Shape shape = input_shape_;
  for (auto e : shape)
    if (e == 0) throw ShapeError("input shape " + shape_str(shape) + " has a zero extent");
  output_shapes_.clear();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    shape = infer_output(i, layers_[i], shape);
    output_shapes_.push_back(shape);
  }
  if (shape != Shape{class_count_})
    throw ShapeError("model output " + shape_str(shape) + " does not match class_count " +
                     std::to_string(class_count_));
  index_neurons();
}

void Model::index_neurons() {
  neurons_.clear();
  mask_site_.assign(layers_.size(), npos);
  masked_at_.assign(layers_.size(), npos);
  first_neuron_.assign(layers_.size(), npos);
  // The last dense/conv layer produces logits and is not prunable.
  std::size_t last_linear = npos;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto k = layer_kind(layers_[i]);
    if (k == LayerKind::Dense || k == LayerKind::Conv2d) last_linear = i;
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto k = layer_kind(layers_[i]);
    if ((k != LayerKind::Dense && k != LayerKind::Conv2d) || i == last_linear) continue;
    std::size_t site = i;
    while (site + 1 < layers_.size()) {
      const auto next = layer_kind(layers_[site + 1]);
      if (next != LayerKind::BatchNorm && next != LayerKind::Relu) break;
      ++site;
    }
    mask_site_[i] = site;
    masked_at_[site] = i;
    first_neuron_[i] = neurons_.size();
    for (std::size_t c = 0; c < output_shapes_[i][0]; ++c) neurons_.push_back({i, c});
  }
  mask_.assign(neurons_.size(), 1);
}

NeuronId Model::neuron(std::size_t flat) const {
  if (flat >= neurons_.size())
    throw InvalidArgument("neuron index " + std::to_string(flat) + " out of range (n=" +
                          std::to_string(neurons_.size()) + ")");
  return neurons_[flat];
}

bool Model::is_valid(NeuronId id) const noexcept {
  return id.layer < layers_.size() && first_neuron_[id.layer] != npos && id.channel < output_shapes_[id.layer][0];
}

std::size_t Model::neuron_index(NeuronId id) const {
  if (!is_valid(id))
    throw InvalidArgument("no prunable neuron at layer " + std::to_string(id.layer) + " channel " +
                          std::to_string(id.channel));
  return first_neuron_[id.layer] + id.channel;
}

void Model::set_prune_mask(std::vector<std::uint8_t> mask) {
  if (mask.size() != neurons_.size())
    throw InvalidArgument("prune mask has " + std::to_string(mask.size()) + " entries, model has " +
                          std::to_string(neurons_.size()) + " neurons");
  for (auto& m : mask) m = m ? 1 : 0;
  mask_ = std::move(mask);
}

std::size_t Model::pruned_count() const noexcept {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{0}));
}

Model apply_prune_mask(const Model& model, std::span<const NeuronId> dead) {
  Model out = model;
  for (const auto& id : dead) out.set_alive(model.neuron_index(id), false);
  return out;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

// [N, C, spatial...] -> (N, C, spatial size)
struct ChannelView {
  std::size_t batch, channels, spatial;
};

ChannelView channel_view(const Tensor& t) {
  const auto n = t.dim(0), c = t.dim(1);
  return {n, c, t.size() / (n * c)};
}

Tensor layer_forward(const Layer& layer, const Shape& out_shape, const Tensor& x, Mode mode, LayerCache* cache) {
  const std::size_t n = x.dim(0);
  Tensor y(batched(n, out_shape));
  std::visit(overloaded{
                 [&](const DenseLayer& l) {
                   kp::dense_forward(x.data(), l.weight.data(), l.bias.data(), n, l.in_units, l.out_units, y.data());
                 },
                 [&](const Conv2dLayer& l) {
                   kernels::ConvGeometry g{n, l.in_channels, x.dim(2), x.dim(3), l.out_channels, l.kernel, l.stride,
                                           l.padding};
                   kp::conv2d_forward(g, x.data(), l.weight.data(), l.bias.data(), y.data());
                 },
                 [&](const BatchNormLayer& l) {
                   const auto v = channel_view(x);
                   std::vector<float> mean(v.channels), var(v.channels);
                   if (mode == Mode::Training) {
                     for (std::size_t c = 0; c < v.channels; ++c) {
                       double s = 0.0;
                       for (std::size_t b = 0; b < v.batch; ++b) {
                         const float* p = x.ptr() + (b * v.channels + c) * v.spatial;
                         for (std::size_t i = 0; i < v.spatial; ++i) s += p[i];
                       }
                       const double m = s / static_cast<double>(v.batch * v.spatial);
                       double sq = 0.0;
                       for (std::size_t b = 0; b < v.batch; ++b) {
                         const float* p = x.ptr() + (b * v.channels + c) * v.spatial;
                         for (std::size_t i = 0; i < v.spatial; ++i) sq += (p[i] - m) * (p[i] - m);
                       }
                       mean[c] = static_cast<float>(m);
                       var[c] = static_cast<float>(sq / static_cast<double>(v.batch * v.spatial));
                     }
                   } else {
                     std::copy(l.running_mean.data().begin(), l.running_mean.data().end(), mean.begin());
                     std::copy(l.running_var.data().begin(), l.running_var.data().end(), var.begin());
                   }
                   Tensor xhat(x.shape());
                   for (std::size_t b = 0; b < v.batch; ++b)
                     for (std::size_t c = 0; c < v.channels; ++c) {
                       const float inv = 1.0f / std::sqrt(var[c] + l.epsilon);
                       const std::size_t off = (b * v.channels + c) * v.spatial;
                       for (std::size_t i = 0; i < v.spatial; ++i) {
                         const float h = (x[off + i] - mean[c]) * inv;
                         xhat[off + i] = h;
                         y[off + i] = l.gamma[c] * h + l.beta[c];
                       }
                     }
                   if (cache) {
                     cache->batch_mean = std::move(mean);
                     cache->batch_var = std::move(var);
                     cache->normalized = std::move(xhat);
                   }
                 },
                 [&](const ReluLayer&) {
                   for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
                 },
                 [&](const MaxPoolLayer& l) {
                   kernels::PoolGeometry g{n * x.dim(1), x.dim(2), x.dim(3), l.window};
                   std::vector<std::uint32_t> argmax(y.size());
                   kp::maxpool_forward(g, x.data(), y.data(), argmax);
                   if (cache) cache->argmax = std::move(argmax);
                 },
                 [&](const FlattenLayer&) { std::copy(x.data().begin(), x.data().end(), y.data().begin()); },
             },
             layer);
  return y;
}

void check_batch(const Model& model, const Tensor& batch) {
  if (batch.rank() != model.input_shape().size() + 1 ||
      !std::equal(model.input_shape().begin(), model.input_shape().end(), batch.shape().begin() + 1))
    throw ShapeError("batch shape " + shape_str(batch.shape()) + " does not match model input [N," +
                     shape_str(model.input_shape()).substr(1));
}

}  // namespace

void apply_mask_at(const Model& model, std::size_t site, Tensor& activation) {
  const std::size_t layer = model.masked_layer_at(site);
  if (layer == Model::npos) return;
  const auto& mask = model.prune_mask();
  const std::size_t first = model.first_neuron(layer);
  const auto v = channel_view(activation);
  for (std::size_t c = 0; c < v.channels; ++c) {
    if (mask[first + c]) continue;
    for (std::size_t b = 0; b < v.batch; ++b) {
      float* p = activation.ptr() + (b * v.channels + c) * v.spatial;
      std::fill(p, p + v.spatial, 0.0f);
    }
  }
}

ForwardTrace forward_trace(const Model& model, const Tensor& batch, Mode mode) {
  check_batch(model, batch);
  ForwardTrace trace;
  trace.mode = mode;
  trace.layers.resize(model.layers().size());
  Tensor act = batch;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    auto& cache = trace.layers[i];
    Tensor out = layer_forward(model.layers()[i], model.layer_output_shape(i), act, mode, &cache);
    apply_mask_at(model, i, out);
    cache.input = std::move(act);
    act = std::move(out);
  }
  trace.output = std::move(act);
  return trace;
}

Tensor forward_from(const Model& model, std::size_t first, Tensor activation, std::vector<Tensor>* layer_outputs) {
  for (std::size_t i = first; i < model.layers().size(); ++i) {
    activation = layer_forward(model.layers()[i], model.layer_output_shape(i), activation, Mode::Inference, nullptr);
    apply_mask_at(model, i, activation);
    if (layer_outputs) (*layer_outputs)[i] = activation;
  }
  return activation;
}

Tensor forward(const Model& model, const Tensor& batch, Mode mode) {
  check_batch(model, batch);
  if (mode == Mode::Inference) return forward_from(model, 0, batch);
  return forward_trace(model, batch, mode).output;
}

// ---------------------------------------------------------------------------
// Loss and backward

CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("logits must be [batch, classes], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(n));
  CrossEntropy out;
  out.grad = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw InvalidArgument("label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    const auto row = logits.row(b);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float v : row) z += std::exp(static_cast<double>(v) - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[y];
    auto g = out.grad.row(b);
    for (std::size_t c = 0; c < k; ++c) {
      const double p = std::exp(static_cast<double>(row[c]) - log_z);
      g[c] = static_cast<float>((p - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

namespace {

Tensor layer_backward(const Layer& layer, const LayerCache& cache, Mode mode, const Tensor& gy,
                      std::vector<Tensor>* pgrads, bool need_input) {
  const Tensor& x = cache.input;
  const std::size_t n = x.dim(0);
  Tensor gx;
  if (need_input) gx = Tensor(x.shape());
  std::visit(
      overloaded{
          [&](const DenseLayer& l) {
            Tensor gw(l.weight.shape()), gb(l.bias.shape());
            kp::dense_backward(x.data(), l.weight.data(), gy.data(), n, l.in_units, l.out_units,
                               need_input ? gx.data() : std::span<float>{}, gw.data(), gb.data());
            if (pgrads) *pgrads = {std::move(gw), std::move(gb)};
          },
          [&](const Conv2dLayer& l) {
            kernels::ConvGeometry g{n, l.in_channels, x.dim(2), x.dim(3), l.out_channels, l.kernel, l.stride,
                                    l.padding};
            if (need_input) kp::conv2d_backward_input(g, l.weight.data(), gy.data(), gx.data());
            if (pgrads) {
              Tensor gw(l.weight.shape()), gb(l.bias.shape());
              kp::conv2d_backward_weight(g, x.data(), gy.data(), gw.data(), gb.data());
              *pgrads = {std::move(gw), std::move(gb)};
            }
          },
          [&](const BatchNormLayer& l) {
            const auto v = channel_view(x);
            const double m = static_cast<double>(v.batch * v.spatial);
            Tensor ggamma({l.channels}), gbeta({l.channels});
            for (std::size_t c = 0; c < v.channels; ++c) {
              double sum_g = 0.0, sum_gh = 0.0;
              for (std::size_t b = 0; b < v.batch; ++b) {
                const std::size_t off = (b * v.channels + c) * v.spatial;
                for (std::size_t i = 0; i < v.spatial; ++i) {
                  sum_g += gy[off + i];
                  sum_gh += static_cast<double>(gy[off + i]) * cache.normalized[off + i];
                }
              }
              ggamma[c] = static_cast<float>(sum_gh);
              gbeta[c] = static_cast<float>(sum_g);
              if (!need_input) continue;
              const float inv = 1.0f / std::sqrt(cache.batch_var[c] + l.epsilon);
              for (std::size_t b = 0; b < v.batch; ++b) {
                const std::size_t off = (b * v.channels + c) * v.spatial;
                for (std::size_t i = 0; i < v.spatial; ++i) {
                  if (mode == Mode::Training) {
                    // d/dx of gamma * (x - mean(x)) / sqrt(var(x) + eps)
                    const double t = static_cast<double>(gy[off + i]) - sum_g / m -
                                     cache.normalized[off + i] * sum_gh / m;
                    gx[off + i] = static_cast<float>(l.gamma[c] * inv * t);
                  } else {
                    gx[off + i] = l.gamma[c] * inv * gy[off + i];
                  }
                }
              }
            }
            if (pgrads) *pgrads = {std::move(ggamma), std::move(gbeta)};
          },
          [&](const ReluLayer&) {
            if (need_input)
              for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0.0f ? gy[i] : 0.0f;
          },
          [&](const MaxPoolLayer& l) {
            if (!need_input) return;
            kernels::PoolGeometry g{n * x.dim(1), x.dim(2), x.dim(3), l.window};
            kp::maxpool_backward(g, gy.data(), cache.argmax, gx.data());
          },
          [&](const FlattenLayer&) {
            if (need_input) std::copy(gy.data().begin(), gy.data().end(), gx.data().begin());
          },
      },
      layer);
  return gx;
}

}  // namespace

Gradients backpropagate(const Model& model, const ForwardTrace& trace, const Tensor& grad_output,
                        std::span<const Tensor> extra_input_grads, bool param_grads, bool input_grad) {
  const auto& layers = model.layers();
  if (trace.layers.size() != layers.size()) throw InvalidArgument("trace does not belong to this model");
  if (grad_output.shape() != trace.output.shape())
    throw ShapeError("output gradient " + shape_str(grad_output.shape()) + " vs output " +
                     shape_str(trace.output.shape()));
  if (!extra_input_grads.empty() && extra_input_grads.size() != layers.size())
    throw InvalidArgument("extra gradients must cover every layer");

  Gradients out;
  out.params.resize(layers.size());
  Tensor g = grad_output;
  for (std::size_t i = layers.size(); i-- > 0;) {
    apply_mask_at(model, i, g);
    const bool need_input = i > 0 || input_grad;
    g = layer_backward(layers[i], trace.layers[i], trace.mode, g, param_grads ? &out.params[i] : nullptr,
                       need_input);
    if (!extra_input_grads.empty() && !extra_input_grads[i].empty()) {
      const Tensor& e = extra_input_grads[i];
      if (e.shape() != g.shape()) throw ShapeError("extra gradient shape mismatch at layer " + std::to_string(i));
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += e[j];
    }
  }
  out.input = std::move(g);
  return out;
}

Gradients backward(const Model& model, const Tensor& batch, std::span<const int> labels, Mode mode) {
  auto trace = forward_trace(model, batch, mode);
  auto ce = cross_entropy(trace.output, labels);
  auto grads = backpropagate(model, trace, ce.grad, {}, true, true);
  grads.loss = ce.loss;
  return grads;
}

// ---------------------------------------------------------------------------

Model make_reference_model(const Shape& input_shape, std::size_t class_count, std::uint64_t seed) {
  if (input_shape.size() != 3) throw ShapeError("reference model expects [C,H,W] input");
  std::mt19937_64 rng(seed);
  auto he = [&](Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  auto conv = [&](std::size_t in, std::size_t out) {
    return Conv2dLayer{in, out, 3, 1, 1, he({out, in, 3, 3}, in * 9), Tensor({out})};
  };
  auto bn = [](std::size_t c) {
    return BatchNormLayer{c, 0.1f, 1e-5f, Tensor({c}, 1.0f), Tensor({c}), Tensor({c}), Tensor({c}, 1.0f)};
  };
  auto dense = [&](std::size_t in, std::size_t out) {
    return DenseLayer{in, out, he({out, in}, in), Tensor({out})};
  };
  const std::size_t c = input_shape[0], h = input_shape[1] / 4, w = input_shape[2] / 4;
  std::vector<Layer> layers{conv(c, 16),  bn(16),         ReluLayer{},       MaxPoolLayer{2},
                            conv(16, 32), bn(32),         ReluLayer{},       MaxPoolLayer{2},
                            FlattenLayer{}, dense(32 * h * w, 64), ReluLayer{}, dense(64, class_count)};
  return Model(input_shape, class_count, std::move(layers));
}

}  // namespace shapprune
