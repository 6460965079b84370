#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "shapprune/checkpoint.hpp"
#include "shapprune/errors.hpp"
#include "shapprune/image_io.hpp"
#include "support.hpp"

using namespace shapprune;
using testing::random_tensor;

namespace {

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / "shapprune_test_io";
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

CheckpointError::Cause cause_of(std::span<const std::uint8_t> bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.cause();
  }
  FAIL("checkpoint was accepted");
  return CheckpointError::Cause::Malformed;
}

std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t{b[at]} | std::uint32_t{b[at + 1]} << 8 | std::uint32_t{b[at + 2]} << 16 |
         std::uint32_t{b[at + 3]} << 24;
}

// Bitwise CRC-32 (reflected polynomial 0xEDB88320), written over the trailing four bytes.
void reseal(std::vector<std::uint8_t>& b) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i + 4 < b.size(); ++i) {
    crc ^= b[i];
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  crc ^= 0xFFFFFFFFu;
  for (int k = 0; k < 4; ++k) b[b.size() - 4 + k] = static_cast<std::uint8_t>(crc >> (8 * k));
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  Model m = make_reference_model({3, 16, 16}, 10, 3);
  const std::vector<NeuronId> dead{{0, 5}, {9, 63}};
  m = apply_prune_mask(m, dead);
  const auto path = scratch_dir() / "round.ckpt";
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  const auto again = scratch_dir() / "round2.ckpt";
  save_checkpoint(back, again);
  CHECK(read_bytes(path) == read_bytes(again));
  CHECK(back.prune_mask() == m.prune_mask());
  const Tensor x = random_tensor({5, 3, 16, 16}, 2, 0.0f, 1.0f);
  CHECK(forward(back, x) == forward(m, x));
}

TEST_CASE("checkpoint header follows the documented layout") {
  const Model m = make_reference_model({3, 16, 16}, 10, 3);
  const auto b = encode_checkpoint(m);
  CHECK(std::memcmp(b.data(), "SHPRUNE\0", 8) == 0);
  CHECK(read_u32(b, 8) == kCheckpointVersion);
  CHECK(read_u32(b, 12) == 10);
  CHECK(read_u32(b, 16) == 3);
  CHECK(read_u32(b, 20) == 3);
  CHECK(read_u32(b, 32) == m.layers().size());
  // mask: 112 bits in 14 bytes, all alive, before the checksum
  CHECK(read_u32(b, b.size() - 4 - 14 - 4) == 112);
  for (std::size_t i = b.size() - 18; i < b.size() - 4; ++i) CHECK(b[i] == 0xFF);
}

TEST_CASE("corrupt checkpoints are rejected with a specific cause") {
  const auto good = encode_checkpoint(make_reference_model({3, 16, 16}, 10, 3));
  auto bad = good;
  bad[0] = 'X';
  CHECK(cause_of(bad) == CheckpointError::Cause::BadMagic);
  bad = good;
  reseal(bad);
  CHECK(bad == good);
  bad[8] = 9;
  CHECK(cause_of(bad) == CheckpointError::Cause::BadVersion);
  bad = good;
  bad[200] ^= 0x40;
  CHECK(cause_of(bad) == CheckpointError::Cause::BadChecksum);
  bad.assign(good.begin(), good.end() - 100);
  CHECK(cause_of(bad) == CheckpointError::Cause::BadChecksum);
  bad.assign(good.begin(), good.begin() + 6);
  CHECK(cause_of(bad) == CheckpointError::Cause::BadMagic);
  // A correctly checksummed file whose first conv claims 2^20 output channels.
  bad = good;
  bad[36 + 8] = 0;
  bad[36 + 8 + 2] = 0x10;
  reseal(bad);
  CHECK(cause_of(bad) == CheckpointError::Cause::Malformed);
  bad = good;
  bad[12] = 0;  // zero classes
  reseal(bad);
  CHECK(cause_of(bad) == CheckpointError::Cause::Malformed);
  CHECK_THROWS_AS(load_checkpoint(scratch_dir() / "missing.ckpt"), IoError);
}

TEST_CASE("PNM images round trip at 8-bit precision") {
  const Tensor rgb = random_tensor({3, 5, 7}, 4, 0.0f, 1.0f);
  const auto p = scratch_dir() / "img.ppm";
  write_image(p, rgb);
  const Tensor back = read_pnm(p);
  REQUIRE(back.shape() == rgb.shape());
  for (std::size_t i = 0; i < rgb.size(); ++i) CHECK(std::abs(back[i] - rgb[i]) <= 0.5f / 255.0f + 1e-6f);
  const Tensor gray = random_tensor({1, 4, 4}, 5, 0.0f, 1.0f);
  write_image(scratch_dir() / "img.pgm", gray);
  CHECK(read_pnm(scratch_dir() / "img.pgm").shape() == gray.shape());
  CHECK_THROWS_AS(write_image(scratch_dir() / "bad.ppm", random_tensor({2, 4, 4}, 6)), ShapeError);
}

TEST_CASE("IDX datasets round trip exactly") {
  LabeledSet set{random_tensor({6, 3, 4, 4}, 7, 0.0f, 1.0f), {0, 1, 2, 0, 1, 2}};
  const auto dir = scratch_dir();
  write_idx_dataset(dir / "x.idx", dir / "y.idx", set);
  const auto back = read_idx_dataset(dir / "x.idx", dir / "y.idx");
  CHECK(back.images == set.images);
  CHECK(back.labels == set.labels);
  write_idx_labels(dir / "short.idx", {0, 1});
  CHECK_THROWS_AS(read_idx_dataset(dir / "x.idx", dir / "short.idx"), ShapeError);
}

TEST_CASE("unsigned-byte IDX files are scaled to the unit range") {
  const auto p = scratch_dir() / "u8.idx";
  {
    std::ofstream out(p, std::ios::binary);
    const unsigned char header[] = {0, 0, 0x08, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2};
    const unsigned char pixels[] = {0, 51, 204, 255};
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    out.write(reinterpret_cast<const char*>(pixels), sizeof pixels);
  }
  const Tensor t = read_idx(p);
  CHECK(t.shape() == Shape{1, 2, 2});
  CHECK(t[1] == doctest::Approx(0.2f));
  CHECK(t[3] == 1.0f);
}
