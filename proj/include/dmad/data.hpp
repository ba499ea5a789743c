#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmad/rng.hpp"
#include "dmad/tensor.hpp"

namespace dmad {

inline constexpr int kImageSize = 32;
inline constexpr int kImageChannels = 3;
inline constexpr std::size_t kImageNumel = std::size_t(kImageChannels) * kImageSize * kImageSize;

/// CHW image with values in [-1, 1].
struct Image {
  int channels = kImageChannels;
  int height = kImageSize;
  int width = kImageSize;
  std::vector<float> data;

  float& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
};

enum class ShapeClass { Circle = 0, Square = 1, Triangle = 2 };

struct ShapeInstance {
  ShapeClass kind;
  double cx, cy;  // centre in pixels
  double size;    // radius / half-side
};

/// Outlines over low-amplitude noise (x) and the same shapes filled with a
/// per-class colour on black (y).
struct SamplePair {
  std::uint64_t id = 0;
  Image x;
  Image y;
  std::vector<ShapeInstance> shapes;
};

struct Dataset {
  std::vector<SamplePair> train;
  std::vector<SamplePair> test;
};

/// Pixel-centre membership test used by the rasteriser.
bool shape_contains(const ShapeInstance& s, double px, double py);

/// Regenerates sample `id` from (seed, id) alone.
SamplePair generate_sample(std::uint64_t seed, std::uint64_t id);

/// Train ids are 0..n_train-1, test ids follow, so the splits are disjoint.
Dataset generate_dataset(std::uint64_t seed, int n_train, int n_test);

/// Stacks images into an [N, C, H, W] tensor.
Tensor<float> stack_images(const std::vector<const Image*>& images);
std::vector<Image> unstack_images(const Tensor<float>& batch);

/// Dataset split cache in the checkpoint container ("x", "y", "ids").
void save_split(const std::vector<SamplePair>& split, const std::filesystem::path& path);
std::vector<SamplePair> load_split(const std::filesystem::path& path);

// ---- image I/O --------------------------------------------------------------

/// Binary P6, values mapped from [-1, 1] to 0..255 by round((v + 1) * 127.5).
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_ppm(const Image& image);
Image decode_ppm(const std::vector<std::uint8_t>& bytes);

/// Tiles equally sized images row-major into a rows x cols grid.
Image image_grid(const std::vector<Image>& images, int rows, int cols);

// ---- toy Frechet ------------------------------------------------------------

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// 8x8 grayscale (channel mean) average-pooled features, flattened to 64.
Eigen::VectorXd frechet_features(const Image& image);

/// Sample mean and unbiased covariance of the rows of `features` [N, d], with
/// 1e-6 added to the diagonal.
GaussianSummary fit_gaussian(const Eigen::MatrixXd& features);

/// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the trace term is taken
/// through the symmetric form sqrt(S_a) S_b sqrt(S_a).
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

double toy_frechet(const std::vector<Image>& a, const std::vector<Image>& b);

/// Symmetric PSD square root via eigendecomposition; eigenvalues below zero
/// are clamped.
Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m);

double mean_abs_error(const std::vector<Image>& a, const std::vector<Image>& b);

}  // namespace dmad
