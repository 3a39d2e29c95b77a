#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace spx {

// Pixel intensities in [0, 1], stored planar: all of channel 0 row-major,
// then channel 1, and so on.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int c);

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  double& at(int c, int r, int col) { return pixels[c * plane_size() + r * width + col]; }
  double at(int c, int r, int col) const { return pixels[c * plane_size() + r * width + col]; }

  // Throws ConsistencyError when the pixel count or intensity range is off.
  void validate() const;
};

enum class Split { train, val, test };

std::string to_string(Split split);

struct LabeledDataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::train;

  std::size_t size() const { return images.size(); }
  void validate() const;
};

// Reads an IDX image tensor (magic 0x00000803) and label vector
// (magic 0x00000801). Bytes are scaled by 1/255.
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

// Writes grayscale images as IDX, quantizing intensities with round(x * 255).
void save_idx(const LabeledDataset& ds, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

// Portable pixmap I/O: P5 gives one channel, P6 three.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const Image& img, const std::filesystem::path& path);

// Manifest layout: first line `resize: HxW` or `resize: none`, then one
// `relative/path<TAB>class_index` line per image. With a resize, every image
// is center-cropped to the target aspect ratio and bilinearly resampled.
LabeledDataset load_image_dir(const std::filesystem::path& root,
                              const std::filesystem::path& manifest);

Image center_crop_resize(const Image& img, int height, int width);

// Per-class shuffled index split. Each class's members are divided by the
// largest-remainder rule so every part is within one sample of its fraction.
// Returned index lists are sorted ascending.
std::vector<std::vector<std::size_t>> stratified_indices(std::span<const int> labels,
                                                         std::span<const double> fractions,
                                                         std::uint64_t seed);

std::vector<LabeledDataset> stratified_split(const LabeledDataset& ds,
                                             std::span<const double> fractions,
                                             std::uint64_t seed);

LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices);

}  // namespace spx
