#include "shapprune/checkpoint.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "shapprune/errors.hpp"

namespace shapprune {

namespace {

constexpr std::array<std::uint8_t, 8> kMagic{'S', 'H', 'P', 'R', 'U', 'N', 'E', '\0'};
constexpr std::size_t kDescriptorWords = 8;

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void tensor(const Tensor& t) {
    for (float v : t.data()) f32(v);
  }
  void raw(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  Tensor tensor(Shape shape) {
    if (shape_size(shape) > remaining() / 4)
      throw CheckpointError(CheckpointError::Cause::Malformed, "tensor " + shape_str(shape) + " larger than file");
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = f32();
    return t;
  }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw CheckpointError(CheckpointError::Cause::Malformed, "checkpoint ends inside a field");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t narrow(std::size_t v) {
  if (v > 0xffffffffu) throw InvalidArgument("value too large for checkpoint field");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  Writer w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(narrow(model.class_count()));
  w.u32(narrow(model.input_shape().size()));
  for (auto e : model.input_shape()) w.u32(narrow(e));
  w.u32(narrow(model.layers().size()));

  for (const auto& layer : model.layers()) {
    std::array<std::uint32_t, kDescriptorWords> d{};
    d[0] = static_cast<std::uint32_t>(layer_kind(layer));
    if (const auto* l = std::get_if<DenseLayer>(&layer)) {
      d[1] = narrow(l->in_units);
      d[2] = narrow(l->out_units);
    } else if (const auto* l = std::get_if<Conv2dLayer>(&layer)) {
      d[1] = narrow(l->in_channels);
      d[2] = narrow(l->out_channels);
      d[3] = narrow(l->kernel);
      d[4] = narrow(l->stride);
      d[5] = narrow(l->padding);
    } else if (const auto* l = std::get_if<BatchNormLayer>(&layer)) {
      d[1] = narrow(l->channels);
      d[2] = std::bit_cast<std::uint32_t>(l->momentum);
      d[3] = std::bit_cast<std::uint32_t>(l->epsilon);
    } else if (const auto* l = std::get_if<MaxPoolLayer>(&layer)) {
      d[1] = narrow(l->window);
    }
    for (auto v : d) w.u32(v);
  }

  for (const auto& layer : model.layers()) {
    if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      for (const Tensor* t : {&bn->gamma, &bn->beta, &bn->running_mean, &bn->running_var}) w.tensor(*t);
    } else {
      for (const Tensor* t : trainable_parameters(layer)) w.tensor(*t);
    }
  }

  const auto& mask = model.prune_mask();
  w.u32(narrow(mask.size()));
  std::vector<std::uint8_t> bits((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  w.raw(bits);

  w.u32(crc32_of(w.bytes()));
  return std::move(w.bytes());
}

namespace {

Model decode_body(std::span<const std::uint8_t> body);

}  // namespace

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using Cause = CheckpointError::Cause;
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw CheckpointError(Cause::BadMagic, "not a checkpoint: bad magic bytes");
  if (bytes.size() < kMagic.size() + 8)
    throw CheckpointError(Cause::BadChecksum, "checkpoint truncated before checksum");
  {
    Reader r(bytes.subspan(kMagic.size(), 4));
    const auto version = r.u32();
    if (version != kCheckpointVersion)
      throw CheckpointError(Cause::BadVersion, "unsupported checkpoint version " + std::to_string(version) +
                                                   " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  if (crc32_of(body) != tail.u32())
    throw CheckpointError(Cause::BadChecksum, "checkpoint checksum mismatch (file truncated or corrupted)");
  try {
    return decode_body(body);
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(Cause::Malformed, std::string("checkpoint describes an invalid model: ") + e.what());
  }
}

namespace {

Model decode_body(std::span<const std::uint8_t> body) {
  using Cause = CheckpointError::Cause;
  Reader r(body);
  r.raw(kMagic.size());
  r.u32();
  const std::size_t classes = r.u32();
  Shape input(r.u32());
  for (auto& e : input) e = r.u32();
  const std::size_t layer_count = r.u32();
  if (layer_count > r.remaining() / (4 * kDescriptorWords))
    throw CheckpointError(Cause::Malformed, "layer table larger than file");

  std::vector<std::array<std::uint32_t, kDescriptorWords>> table(layer_count);
  for (auto& d : table)
    for (auto& v : d) v = r.u32();

  std::vector<Layer> layers;
  layers.reserve(layer_count);
  for (const auto& d : table) {
    switch (static_cast<LayerKind>(d[0])) {
      case LayerKind::Dense: {
        DenseLayer l{d[1], d[2], {}, {}};
        l.weight = r.tensor({l.out_units, l.in_units});
        l.bias = r.tensor({l.out_units});
        layers.emplace_back(std::move(l));
        break;
      }
      case LayerKind::Conv2d: {
        Conv2dLayer l{d[1], d[2], d[3], d[4], d[5], {}, {}};
        l.weight = r.tensor({l.out_channels, l.in_channels, l.kernel, l.kernel});
        l.bias = r.tensor({l.out_channels});
        layers.emplace_back(std::move(l));
        break;
      }
      case LayerKind::BatchNorm: {
        BatchNormLayer l;
        l.channels = d[1];
        l.momentum = std::bit_cast<float>(d[2]);
        l.epsilon = std::bit_cast<float>(d[3]);
        l.gamma = r.tensor({l.channels});
        l.beta = r.tensor({l.channels});
        l.running_mean = r.tensor({l.channels});
        l.running_var = r.tensor({l.channels});
        layers.emplace_back(std::move(l));
        break;
      }
      case LayerKind::Relu: layers.emplace_back(ReluLayer{}); break;
      case LayerKind::MaxPool: layers.emplace_back(MaxPoolLayer{d[1]}); break;
      case LayerKind::Flatten: layers.emplace_back(FlattenLayer{}); break;
      default: throw CheckpointError(Cause::Malformed, "unknown layer kind " + std::to_string(d[0]));
    }
  }

  Model model(std::move(input), classes, std::move(layers));
  const std::size_t n = r.u32();
  if (n != model.neuron_count())
    throw CheckpointError(Cause::Malformed, "prune mask covers " + std::to_string(n) + " neurons, model has " +
                                                std::to_string(model.neuron_count()));
  const auto bits = r.raw((n + 7) / 8);
  std::vector<std::uint8_t> mask(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = (bits[i / 8] >> (i % 8)) & 1u;
  model.set_prune_mask(std::move(mask));
  if (r.remaining() != 0) throw CheckpointError(Cause::Malformed, "trailing bytes after prune mask");
  return model;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace shapprune
