#pragma once

#include <filesystem>

#include "shapprune/tensor.hpp"
#include "shapprune/train.hpp"

namespace shapprune {

/// Binary PGM (P5) of a [1,H,W] or [H,W] tensor with values in [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& image);
/// Binary PPM (P6) of a [3,H,W] tensor with values in [0,1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
/// PGM for one channel, PPM for three; rejects other channel counts.
void write_image(const std::filesystem::path& path, const Tensor& image);
/// Reads P5/P6 back as [C,H,W] scaled to [0,1] (maxval must be <= 255).
Tensor read_pnm(const std::filesystem::path& path);

/// IDX files (the MNIST container). Unsigned-byte payloads are scaled to
/// [0,1]; float payloads are read as-is. Rank-1 files are label vectors.
Tensor read_idx(const std::filesystem::path& path);
/// Writes a float32 IDX file (type code 0x0D), big-endian as the format requires.
void write_idx(const std::filesystem::path& path, const Tensor& tensor);
std::vector<int> read_idx_labels(const std::filesystem::path& path);
void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels);

/// Images from an IDX file ([N,H,W] becomes [N,1,H,W]) paired with a label file.
LabeledSet read_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, const LabeledSet& set);

}  // namespace shapprune
