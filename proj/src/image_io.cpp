#include "shapprune/image_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

#include "shapprune/errors.hpp"

namespace shapprune {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

void write_pnm(const std::filesystem::path& path, const Tensor& image, std::size_t channels) {
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1), plane = h * w;
  auto out = open_out(path);
  out << (channels == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
  std::vector<char> bytes(plane * channels);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < channels; ++c) bytes[i * channels + c] = static_cast<char>(to_byte(image[c * plane + i]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

void put_be32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct IdxFile {
  std::uint8_t type = 0;
  Shape shape;
  std::size_t offset = 0;
  std::vector<std::uint8_t> bytes;
};

IdxFile parse_idx(const std::filesystem::path& path) {
  IdxFile f;
  f.bytes = slurp(path);
  const auto& b = f.bytes;
  if (b.size() < 4 || b[0] != 0 || b[1] != 0) throw IoError(path.string() + ": not an IDX file");
  f.type = b[2];
  const std::size_t rank = b[3];
  if (rank == 0 || b.size() < 4 + 4 * rank) throw IoError(path.string() + ": truncated IDX header");
  for (std::size_t i = 0; i < rank; ++i) f.shape.push_back(be32(b, 4 + 4 * i));
  f.offset = 4 + 4 * rank;
  std::size_t width = 0;
  switch (f.type) {
    case 0x08: width = 1; break;
    case 0x0D: width = 4; break;
    default: throw IoError(path.string() + ": unsupported IDX element type " + std::to_string(f.type));
  }
  for (auto e : f.shape)
    if (e == 0) throw IoError(path.string() + ": IDX file has an empty dimension");
  if (b.size() != f.offset + shape_size(f.shape) * width)
    throw IoError(path.string() + ": IDX payload size does not match its header");
  return f;
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (!(image.rank() == 2 || (image.rank() == 3 && image.dim(0) == 1)))
    throw ShapeError("PGM needs [H,W] or [1,H,W], got " + shape_str(image.shape()));
  write_pnm(path, image, 1);
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("PPM needs [3,H,W], got " + shape_str(image.shape()));
  write_pnm(path, image, 3);
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() == 3 && image.dim(0) == 3) return write_ppm(path, image);
  write_pgm(path, image);
}

Tensor read_pnm(const std::filesystem::path& path) {
  const auto b = slurp(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos])) t.push_back(static_cast<char>(b[pos++]));
    if (t.empty()) throw IoError(path.string() + ": truncated PNM header");
    return t;
  };
  const auto magic = token();
  if (magic != "P5" && magic != "P6") throw IoError(path.string() + ": only binary PGM/PPM are supported");
  const std::size_t channels = magic == "P5" ? 1 : 3;
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed PNM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw IoError(path.string() + ": unsupported PNM geometry");
  ++pos;  // single whitespace after maxval
  const std::size_t plane = w * h;
  if (b.size() < pos + plane * channels) throw IoError(path.string() + ": truncated PNM payload");
  Tensor out({channels, h, w});
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      out[c * plane + i] = static_cast<float>(b[pos + i * channels + c]) / static_cast<float>(maxval);
  return out;
}

Tensor read_idx(const std::filesystem::path& path) {
  const auto f = parse_idx(path);
  Tensor out(f.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (f.type == 0x08) {
      out[i] = static_cast<float>(f.bytes[f.offset + i]) / 255.0f;
    } else {
      out[i] = std::bit_cast<float>(be32(f.bytes, f.offset + 4 * i));
    }
  }
  return out;
}

void write_idx(const std::filesystem::path& path, const Tensor& tensor) {
  if (tensor.rank() == 0 || tensor.rank() > 255) throw ShapeError("IDX needs rank 1..255");
  std::string s{'\0', '\0', '\x0d', static_cast<char>(tensor.rank())};
  for (auto e : tensor.shape()) put_be32(s, static_cast<std::uint32_t>(e));
  for (float v : tensor.data()) put_be32(s, std::bit_cast<std::uint32_t>(v));
  auto out = open_out(path);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto f = parse_idx(path);
  if (f.type != 0x08 || f.shape.size() != 1) throw IoError(path.string() + ": labels must be a rank-1 unsigned-byte IDX file");
  return {f.bytes.begin() + static_cast<std::ptrdiff_t>(f.offset), f.bytes.end()};
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
  std::string s{'\0', '\0', '\x08', '\x01'};
  put_be32(s, static_cast<std::uint32_t>(labels.size()));
  for (int y : labels) {
    if (y < 0 || y > 255) throw InvalidArgument("IDX labels must lie in [0,255]");
    s.push_back(static_cast<char>(y));
  }
  auto out = open_out(path);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

LabeledSet read_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels) {
  LabeledSet set;
  set.images = read_idx(images);
  if (set.images.rank() == 3) {
    auto s = set.images.shape();
    set.images = set.images.reshaped({s[0], 1, s[1], s[2]});
  }
  if (set.images.rank() != 4) throw ShapeError(images.string() + ": expected [N,H,W] or [N,C,H,W] images");
  set.labels = read_idx_labels(labels);
  validate(set);
  return set;
}

void write_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, const LabeledSet& set) {
  validate(set);
  write_idx(images, set.images);
  write_idx_labels(labels, set.labels);
}

}  // namespace shapprune
