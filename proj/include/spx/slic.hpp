#pragma once

#include <cstdint>
#include <vector>

#include "spx/imaging.hpp"

namespace spx {

struct SlicConfig {
  int n_superpixels = 75;
  // Weight m of the spatial term. Colors are compared on a 0..100 scale
  // (CIELAB for RGB, intensity * 100 for grayscale).
  double compactness = 10.0;
  int max_iters = 10;
  bool enforce_connectivity = true;
  // Stop once no center moves more than this, in combined distance units.
  double convergence_tol = 1e-3;
  // Connected fragments smaller than this fraction of S^2 are merged away.
  double min_fragment_fraction = 0.25;

  void validate(std::int64_t pixel_count) const;
};

struct Segmentation {
  std::vector<std::int32_t> labels;  // row-major
  int num_segments = 0;
  int height = 0;
  int width = 0;

  std::int32_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
};

struct SegmentStats {
  double centroid_row = 0.0;
  double centroid_col = 0.0;
  std::vector<double> mean_color;  // one entry per image channel, in [0, 1]
  std::int64_t pixel_count = 0;
};

// Seeding grid step S = sqrt(H * W / n).
double slic_grid_step(int height, int width, int n_superpixels);

Segmentation slic_segment(const Image& img, const SlicConfig& cfg);

std::vector<SegmentStats> segment_stats(const Segmentation& seg, const Image& img);

// sRGB in [0,1] to CIELAB under D65.
struct Lab {
  double l, a, b;
};
Lab srgb_to_lab(double r, double g, double b);

// True when every segment's pixels form one 4-connected component.
bool is_four_connected(const Segmentation& seg);

}  // namespace spx
