#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "spx/imaging.hpp"
#include "spx/slic.hpp"

namespace spx {

enum class FeatureMode {
  grayscale,  // (mean intensity, row/H, col/W)
  rgb,        // (L/100, (a+128)/255, (b+128)/255, row/H, col/W)
};

struct GraphConfig {
  // Edge distance threshold in pixels; unset means the image diagonal, which
  // leaves the neighbor cap as the only active constraint.
  std::optional<double> radius;
  int max_neighbors = 5;
  // Unset means: pick from the image channel count.
  std::optional<FeatureMode> feature_mode;

  void validate() const;
};

struct SuperpixelGraph {
  std::uint32_t num_nodes = 0;
  std::uint32_t feature_dim = 0;
  std::vector<float> node_features;  // num_nodes x feature_dim, row-major
  // Undirected edges stored once as (i, j) with i < j, sorted.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  std::int32_t label = 0;

  float feature(std::uint32_t node, std::uint32_t dim) const {
    return node_features[static_cast<std::size_t>(node) * feature_dim + dim];
  }
  void validate() const;

  friend bool operator==(const SuperpixelGraph&, const SuperpixelGraph&) = default;
};

// Undirected edge list for points under the radius rule with a per-node
// nearest-neighbor cap (union semantics). Ties at equal distance keep the
// lower node id. Uses a uniform-grid search.
std::vector<std::pair<std::uint32_t, std::uint32_t>> radius_neighbor_edges(
    std::span<const std::pair<double, double>> points, double radius, int max_neighbors);

SuperpixelGraph build_radius_graph(std::span<const SegmentStats> stats, int height, int width,
                                   const GraphConfig& cfg, std::int32_t label);

// One graph per image, order-aligned with the dataset. `threads` > 1
// converts images concurrently; output does not depend on it.
std::vector<SuperpixelGraph> radius_graph_dataset(const LabeledDataset& ds,
                                                  const SlicConfig& slic_cfg,
                                                  const GraphConfig& graph_cfg, int threads = 1);

// Binary graph-dataset file: "SPXG", u32 version, u32 count, then per
// record u32 num_nodes, u32 feature_dim, f32 features, u32 edge count,
// u32 pairs, i32 label. Little-endian throughout.
inline constexpr std::uint32_t kGraphFileVersion = 1;

void save_graphs(std::span<const SuperpixelGraph> graphs, const std::filesystem::path& path);
std::vector<SuperpixelGraph> load_graphs(const std::filesystem::path& path);

}  // namespace spx
