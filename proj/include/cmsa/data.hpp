#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmsa/tensor.hpp"

namespace cmsa {

inline constexpr int kImageSide = 32;
inline constexpr int kImageBytes = 3 * kImageSide * kImageSide;

/// One image as stored on disk: channel-planar R, G, B, each row-major 32x32.
using Image = std::array<std::uint8_t, kImageBytes>;

enum class CifarKind { cifar10, cifar100 };
enum class Split { train, test };

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;
    int classes = 10;
    /// True when read from a directory written by write_synthetic_cifar.
    bool synthetic = false;

    std::int64_t size() const { return static_cast<std::int64_t>(images.size()); }
};

/// "cifar10" / "cifar100"; anything else is a ConfigError.
CifarKind cifar_kind(std::string_view name);

/// Reads the binary distribution from `dir` or its canonical subdirectory
/// (cifar-10-batches-bin, cifar-100-binary). CIFAR-10 records are 1 label
/// byte + 3072 pixels, CIFAR-100 records 2 label bytes (coarse, fine) + 3072;
/// the fine label is used. Record counts must be 50000 / 10000 unless the
/// directory carries the synthetic marker. Missing files raise IoError;
/// partial records, wrong counts or labels out of range raise DataError.
Dataset read_cifar(const std::string& dir, CifarKind kind, Split split);

/// Writes a small dataset in the same layout plus a marker file. Each class
/// has a smooth random colour pattern; images add per-pixel noise to it.
void write_synthetic_cifar(const std::string& dir, CifarKind kind, int train_count, int test_count,
                           std::uint64_t seed);

/// FNV-1a 64 over the dataset files that read_cifar consumes, in order.
std::uint64_t dataset_digest(const std::string& dir, CifarKind kind);

/// Zero-padded shift: output(y, x) = input(y + dy - padding, x + dx - padding),
/// zero outside the image. dy, dx in [0, 2 * padding].
Image crop_image(const Image& image, int dy, int dx, int padding);
Image flip_image(const Image& image);

/// Random pad-and-crop (padding 0 disables) and a probability-0.5 flip.
Image augment(const Image& image, std::mt19937_64& rng, int padding, bool flip);

/// Stacks images into an NHWC float batch normalized per channel:
/// (pixel / 255 - mean[c]) / std[c].
Tensor to_batch(std::span<const Image> images, std::span<const double> mean, std::span<const double> std);

}  // namespace cmsa
