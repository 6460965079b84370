#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "shapprune/tensor.hpp"

namespace shapprune {

struct DenseLayer {
  std::size_t in_units = 0;
  std::size_t out_units = 0;
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct Conv2dLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
};

/// Normalizes per channel of a [N,C,H,W] input or per feature of [N,F].
struct BatchNormLayer {
  std::size_t channels = 0;
  float momentum = 0.1f;
  float epsilon = 1e-5f;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;  // biased batch variance, strictly positive
};

struct ReluLayer {};

struct MaxPoolLayer {
  std::size_t window = 2;
};

struct FlattenLayer {};

using Layer = std::variant<DenseLayer, Conv2dLayer, BatchNormLayer, ReluLayer, MaxPoolLayer, FlattenLayer>;

enum class LayerKind : std::uint32_t { Dense = 0, Conv2d = 1, BatchNorm = 2, Relu = 3, MaxPool = 4, Flatten = 5 };

LayerKind layer_kind(const Layer& layer);
const char* layer_kind_name(LayerKind kind);

/// Trainable parameters of a layer in a fixed order (weight, bias / gamma, beta).
std::vector<Tensor*> trainable_parameters(Layer& layer);
std::vector<const Tensor*> trainable_parameters(const Layer& layer);

/// One prunable unit: an output channel of a conv layer or an output unit of
/// a hidden dense layer.
struct NeuronId {
  std::size_t layer = 0;
  std::size_t channel = 0;

  auto operator<=>(const NeuronId&) const = default;
};

enum class Mode { Inference, Training };

/// Ordered layer stack with a per-neuron output mask.
///
/// Every conv2d layer and every dense layer except the final (logit) layer
/// contributes one neuron per output channel/unit. A neuron's mask is applied
/// after the last batchnorm/relu that directly follows its layer, so a dead
/// neuron emits exactly zero downstream regardless of its parameters.
class Model {
 public:
  Model() = default;
  /// Validates shape compatibility; throws ShapeError with the offending layer.
  Model(Shape input_shape, std::size_t class_count, std::vector<Layer> layers);

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t class_count() const noexcept { return class_count_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  /// Output shape of layer i for a batch of one (without the batch axis).
  const Shape& layer_output_shape(std::size_t i) const { return output_shapes_.at(i); }

  std::size_t neuron_count() const noexcept { return neurons_.size(); }
  const std::vector<NeuronId>& neurons() const noexcept { return neurons_; }
  NeuronId neuron(std::size_t flat) const;
  /// Flat index of a neuron; throws InvalidArgument when it does not exist.
  std::size_t neuron_index(NeuronId id) const;
  bool is_valid(NeuronId id) const noexcept;

  /// 1 = alive, 0 = pruned, indexed by flat neuron index.
  const std::vector<std::uint8_t>& prune_mask() const noexcept { return mask_; }
  void set_prune_mask(std::vector<std::uint8_t> mask);
  bool alive(NeuronId id) const { return mask_[neuron_index(id)] != 0; }
  void set_alive(std::size_t flat, bool alive) { mask_.at(flat) = alive ? 1 : 0; }
  std::size_t pruned_count() const noexcept;

  /// Layer after whose output the mask for prunable layer `layer` applies.
  std::size_t mask_site(std::size_t layer) const { return mask_site_.at(layer); }
  /// Prunable layer whose mask applies after layer `site`, or npos.
  std::size_t masked_layer_at(std::size_t site) const { return masked_at_.at(site); }
  /// First flat neuron index of a prunable layer.
  std::size_t first_neuron(std::size_t layer) const { return first_neuron_.at(layer); }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  void index_neurons();

  Shape input_shape_;
  std::size_t class_count_ = 0;
  std::vector<Layer> layers_;
  std::vector<Shape> output_shapes_;
  std::vector<NeuronId> neurons_;
  std::vector<std::uint8_t> mask_;
  std::vector<std::size_t> mask_site_;
  std::vector<std::size_t> masked_at_;
  std::vector<std::size_t> first_neuron_;
};

/// Per-layer scratch recorded during a forward pass for use by backward.
struct LayerCache {
  Tensor input;
  std::vector<std::uint32_t> argmax;  // maxpool
  std::vector<float> batch_mean;      // batchnorm, training mode
  std::vector<float> batch_var;
  Tensor normalized;                  // batchnorm x-hat
};

struct ForwardTrace {
  Mode mode = Mode::Inference;
  std::vector<LayerCache> layers;
  Tensor output;
};

/// Logits [batch, class_count].
Tensor forward(const Model& model, const Tensor& batch, Mode mode = Mode::Inference);
ForwardTrace forward_trace(const Model& model, const Tensor& batch, Mode mode);

/// Runs layers [first, end) on `activation`, which must be the output of
/// layer first-1 (or the model input when first == 0) with masks already
/// applied. Used for incremental re-evaluation after pruning.
Tensor forward_from(const Model& model, std::size_t first, Tensor activation,
                    std::vector<Tensor>* layer_outputs = nullptr);

/// Zeroes the channels of `activation` (output of layer `site`) whose neurons are pruned.
void apply_mask_at(const Model& model, std::size_t site, Tensor& activation);

struct Gradients {
  double loss = 0.0;
  /// Same nesting as trainable_parameters(layer) for every layer.
  std::vector<std::vector<Tensor>> params;
  Tensor input;
};

struct CrossEntropy {
  double loss = 0.0;  // mean over batch
  Tensor grad;        // d loss / d logits
};

CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Backpropagates `grad_output` (d loss / d logits) through a recorded trace.
/// `extra_input_grads[i]`, when non-empty, is added to the gradient arriving
/// at layer i's input (for losses defined on intermediate activations).
Gradients backpropagate(const Model& model, const ForwardTrace& trace, const Tensor& grad_output,
                        std::span<const Tensor> extra_input_grads = {}, bool param_grads = true,
                        bool input_grad = true);

/// Mean cross-entropy and gradients for every trainable parameter and the input.
Gradients backward(const Model& model, const Tensor& batch, std::span<const int> labels,
                   Mode mode = Mode::Training);

/// Returns a copy with `dead` additionally switched off.
Model apply_prune_mask(const Model& model, std::span<const NeuronId> dead);

/// conv(16)-BN-ReLU-pool-conv(32)-BN-ReLU-pool-dense(64)-ReLU-dense(K), He-initialized.
Model make_reference_model(const Shape& input_shape, std::size_t class_count, std::uint64_t seed);

}  // namespace shapprune
