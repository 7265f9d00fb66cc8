#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedleak/tensor.hpp"

namespace fedleak {

// One client's training batch. Pixels are in [0, 1]; enforced on
// construction since every downstream equation assumes the unit range.
struct ImageBatch {
  std::vector<Tensor> images;  // each C x H x W
  std::vector<int> labels;
  int client_id = -1;

  void validate() const;
  std::size_t size() const { return images.size(); }
};

struct BrightnessProfile {
  double mean = 0.0;
  double sd = 0.0;  // >= 0; 0 is the degenerate point mass
};

// Weighted Gaussian components over summed-channel mean intensity. A single
// component reproduces the plain Gaussian generator; several components give
// the class-driven multi-modal shapes of real image datasets.
struct BrightnessMixture {
  std::vector<double> weights;  // positive, normalized on use
  std::vector<BrightnessProfile> components;

  static BrightnessMixture single(BrightnessProfile p) {
    return BrightnessMixture{{1.0}, {p}};
  }
  // Mean and sd of the mixture distribution.
  BrightnessProfile moments() const;
  void validate() const;
};

struct ImagePool {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t size() const { return images.size(); }
};

// Summed-channel mean intensity: sum over channels of the per-channel mean,
// i.e. sum(pixels) / (H*W). Lives in [0, C] for unit-range images. This is
// the quantity the FC1 measurement rows compute.
double summed_channel_mean(const Tensor& image);

// MNIST-style IDX files (big-endian magic 2051 images / 2049 labels).
// Pixels are scaled to [0, 1]; images come out 1 x rows x cols.
ImagePool load_mnist(const std::string& images_path,
                     const std::string& labels_path);

enum class CifarVariant { cifar10, cifar100 };

// CIFAR binary batches: records of 1 (cifar10) or 2 (cifar100, coarse then
// fine) label bytes followed by 3072 channel-planar pixel bytes. cifar100
// keeps the fine label.
ImagePool load_cifar(const std::vector<std::string>& binary_paths,
                     CifarVariant variant);

// Seeded noise images rescaled so each image's summed-channel mean equals a
// draw from the profile (clamped to the feasible [0, C]); labels are uniform
// over num_classes.
ImagePool synth_dataset(const BrightnessProfile& profile, std::size_t count,
                        std::size_t channels, std::size_t height,
                        std::size_t width, std::uint64_t seed,
                        std::size_t num_classes = 10);

// Mixture variant; the label of each image is its component index.
ImagePool synth_dataset(const BrightnessMixture& mixture, std::size_t count,
                        std::size_t channels, std::size_t height,
                        std::size_t width, std::uint64_t seed);

// Per-client generators with individual brightness profiles.
std::vector<ImagePool> synth_noniid(
    const std::vector<BrightnessProfile>& client_profiles, std::size_t count,
    std::size_t channels, std::size_t height, std::size_t width,
    std::uint64_t seed, std::size_t num_classes = 10);

// Single synthetic image; the building block all generators share.
Tensor synth_image(const BrightnessProfile& profile, std::size_t channels,
                   std::size_t height, std::size_t width, std::uint64_t seed);

// Binary PGM (P5) for 1 channel, PPM (P6) for 3. 8-bit, maxval 255,
// row-major; values are clamped to [0, 1] and rounded.
void write_image(const Tensor& image, const std::string& path);

// Reads back P5/P6 files produced by write_image (values scaled to [0, 1]).
Tensor read_image(const std::string& path);

// Tiles images (all the same shape) into a grid with 1-pixel separators;
// empty tensors render as black cells.
void write_image_grid(const std::vector<Tensor>& images, std::size_t cols,
                      std::size_t channels, std::size_t height,
                      std::size_t width, const std::string& path);

}  // namespace fedleak
