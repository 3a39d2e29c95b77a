#include "spx/graphgen.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

#include "binary_io.hpp"
#include "spx/error.hpp"

namespace spx {

namespace fs = std::filesystem;

namespace {

constexpr char kGraphMagic[4] = {'S', 'P', 'X', 'G'};

using Candidate = std::pair<double, std::uint32_t>;  // (squared distance, id)

class PointGrid {
 public:
  PointGrid(std::span<const std::pair<double, double>> points, double cell)
      : points_(points), cell_(cell) {
    min_x_ = max_x_ = points.front().first;
    min_y_ = max_y_ = points.front().second;
    for (const auto& [x, y] : points) {
      min_x_ = std::min(min_x_, x);
      max_x_ = std::max(max_x_, x);
      min_y_ = std::min(min_y_, y);
      max_y_ = std::max(max_y_, y);
    }
    nx_ = static_cast<int>((max_x_ - min_x_) / cell_) + 1;
    ny_ = static_cast<int>((max_y_ - min_y_) / cell_) + 1;
    buckets_.resize(static_cast<std::size_t>(nx_) * ny_);
    for (std::uint32_t i = 0; i < points.size(); ++i) {
      const auto [cx, cy] = cell_of(points[i]);
      buckets_[static_cast<std::size_t>(cy) * nx_ + cx].push_back(i);
    }
  }

  // The `k` nearest points to `query` (excluding itself) within `radius`,
  // ordered by (distance, id).
  std::vector<Candidate> nearest(std::uint32_t query, double radius, std::size_t k) const {
    const auto& q = points_[query];
    const auto [qx, qy] = cell_of(q);
    const double r2 = radius * radius;
    std::vector<Candidate> best;
    const int max_ring = std::max(nx_, ny_);
    for (int ring = 0; ring <= max_ring; ++ring) {
      for (int cy = std::max(0, qy - ring); cy <= std::min(ny_ - 1, qy + ring); ++cy) {
        const bool edge_row = cy == qy - ring || cy == qy + ring;
        for (int cx = qx - ring; cx <= qx + ring; cx += (edge_row || ring == 0) ? 1 : 2 * ring) {
          if (cx < 0 || cx >= nx_) continue;
          for (std::uint32_t j : buckets_[static_cast<std::size_t>(cy) * nx_ + cx]) {
            if (j == query) continue;
            const double dx = points_[j].first - q.first;
            const double dy = points_[j].second - q.second;
            const double d2 = dx * dx + dy * dy;
            if (d2 > r2) continue;
            const Candidate cand{d2, j};
            if (best.size() == k && !(cand < best.back())) continue;
            best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
            if (best.size() > k) best.pop_back();
          }
        }
      }
      // Anything outside rings 0..ring is at least ring * cell away.
      const double reach = ring * cell_;
      if (reach > radius) break;
      if (best.size() == k && best.back().first < reach * reach) break;
    }
    return best;
  }

 private:
  std::pair<int, int> cell_of(const std::pair<double, double>& p) const {
    const int cx = std::min(nx_ - 1, static_cast<int>((p.first - min_x_) / cell_));
    const int cy = std::min(ny_ - 1, static_cast<int>((p.second - min_y_) / cell_));
    return {cx, cy};
  }

  std::span<const std::pair<double, double>> points_;
  double cell_;
  double min_x_, max_x_, min_y_, max_y_;
  int nx_ = 1, ny_ = 1;
  std::vector<std::vector<std::uint32_t>> buckets_;
};

[[noreturn]] void rethrow_with_context(std::exception_ptr error, const std::string& context) {
  try {
    std::rethrow_exception(error);
  } catch (const ConfigError& e) {
    throw ConfigError(context + e.what());
  } catch (const ConsistencyError& e) {
    throw ConsistencyError(context + e.what());
  } catch (const EmptyGraphError& e) {
    throw EmptyGraphError(context + e.what());
  } catch (const Error& e) {
    throw Error(context + e.what());
  }
}

}  // namespace

void GraphConfig::validate() const {
  if (radius && !(*radius > 0.0)) throw ConfigError("graph radius must be positive");
  if (max_neighbors < 1) throw ConfigError("max_neighbors must be at least 1");
}

void SuperpixelGraph::validate() const {
  if (node_features.size() != static_cast<std::size_t>(num_nodes) * feature_dim) {
    throw ConsistencyError("graph feature matrix size does not match num_nodes x feature_dim");
  }
  for (const auto& [i, j] : edges) {
    if (i >= num_nodes || j >= num_nodes) throw IndexError("graph edge references a missing node");
    if (i == j) throw ConsistencyError("graph contains a self-edge");
  }
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> radius_neighbor_edges(
    std::span<const std::pair<double, double>> points, double radius, int max_neighbors) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  if (points.size() < 2) return edges;

  // Cells sized for about one point each, never finer than needed for the radius.
  // The extent floor keeps collinear or coincident points from collapsing the cell.
  double min_x = points.front().first, max_x = min_x;
  double min_y = points.front().second, max_y = min_y;
  for (const auto& [x, y] : points) {
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  const double area = std::max(max_x - min_x, 1e-9) * std::max(max_y - min_y, 1e-9);
  const double extent = std::max(max_x - min_x, max_y - min_y);
  const double cell = std::max({std::sqrt(area / static_cast<double>(points.size())),
                                extent / static_cast<double>(points.size()), 1e-6});
  const PointGrid grid(points, std::min(cell, std::max(radius, 1e-6)));

  for (std::uint32_t i = 0; i < points.size(); ++i) {
    for (const auto& [d2, j] : grid.nearest(i, radius, static_cast<std::size_t>(max_neighbors))) {
      edges.emplace_back(std::min(i, j), std::max(i, j));
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

SuperpixelGraph build_radius_graph(std::span<const SegmentStats> stats, int height, int width,
                                   const GraphConfig& cfg, std::int32_t label) {
  cfg.validate();
  if (stats.empty()) throw EmptyGraphError("cannot build a graph from zero segments");
  const std::size_t channels = stats.front().mean_color.size();
  const FeatureMode mode =
      cfg.feature_mode.value_or(channels == 3 ? FeatureMode::rgb : FeatureMode::grayscale);
  if ((mode == FeatureMode::rgb) != (channels == 3)) {
    throw ConfigError("feature mode does not match the image channel count " + std::to_string(channels));
  }

  SuperpixelGraph g;
  g.num_nodes = static_cast<std::uint32_t>(stats.size());
  g.feature_dim = mode == FeatureMode::rgb ? 5 : 3;
  g.label = label;
  g.node_features.reserve(static_cast<std::size_t>(g.num_nodes) * g.feature_dim);

  std::vector<std::pair<double, double>> centroids;
  centroids.reserve(stats.size());
  for (const auto& s : stats) {
    if (mode == FeatureMode::rgb) {
      const Lab lab = srgb_to_lab(s.mean_color[0], s.mean_color[1], s.mean_color[2]);
      g.node_features.push_back(static_cast<float>(std::clamp(lab.l / 100.0, 0.0, 1.0)));
      g.node_features.push_back(static_cast<float>(std::clamp((lab.a + 128.0) / 255.0, 0.0, 1.0)));
      g.node_features.push_back(static_cast<float>(std::clamp((lab.b + 128.0) / 255.0, 0.0, 1.0)));
    } else {
      g.node_features.push_back(static_cast<float>(s.mean_color[0]));
    }
    g.node_features.push_back(static_cast<float>(s.centroid_row / height));
    g.node_features.push_back(static_cast<float>(s.centroid_col / width));
    centroids.emplace_back(s.centroid_row, s.centroid_col);
  }

  const double radius = cfg.radius.value_or(std::hypot(static_cast<double>(height), width));
  g.edges = radius_neighbor_edges(centroids, radius, cfg.max_neighbors);
  return g;
}

std::vector<SuperpixelGraph> radius_graph_dataset(const LabeledDataset& ds,
                                                  const SlicConfig& slic_cfg,
                                                  const GraphConfig& graph_cfg, int threads) {
  graph_cfg.validate();
  std::vector<SuperpixelGraph> graphs(ds.size());
  std::vector<std::exception_ptr> errors(ds.size());

  auto convert = [&](std::size_t k) {
    try {
      const Image& img = ds.images[k];
      const Segmentation seg = slic_segment(img, slic_cfg);
      const auto stats = segment_stats(seg, img);
      graphs[k] = build_radius_graph(stats, img.height, img.width, graph_cfg, ds.labels[k]);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };

  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || ds.size() < 2) {
    for (std::size_t k = 0; k < ds.size(); ++k) convert(k);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t k = t; k < ds.size(); k += workers) convert(k);
      });
    }
  }

  for (std::size_t k = 0; k < errors.size(); ++k) {
    if (errors[k]) rethrow_with_context(errors[k], "image " + std::to_string(k) + ": ");
  }
  return graphs;
}

void save_graphs(std::span<const SuperpixelGraph> graphs, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kGraphMagic, 4);
  detail::write_le(out, kGraphFileVersion);
  detail::write_le(out, static_cast<std::uint32_t>(graphs.size()));
  for (const auto& g : graphs) {
    g.validate();
    detail::write_le(out, g.num_nodes);
    detail::write_le(out, g.feature_dim);
    for (float f : g.node_features) detail::write_le(out, f);
    detail::write_le(out, static_cast<std::uint32_t>(g.edges.size()));
    for (const auto& [i, j] : g.edges) {
      detail::write_le(out, i);
      detail::write_le(out, j);
    }
    detail::write_le(out, g.label);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<SuperpixelGraph> load_graphs(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[4] = {};
  std::uint32_t version = 0, count = 0;
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kGraphMagic)) {
    throw FormatError("bad graph-file magic in " + path.string());
  }
  if (!detail::read_le(in, version) || version != kGraphFileVersion) {
    throw FormatError("unsupported graph-file version in " + path.string());
  }
  if (!detail::read_le(in, count)) throw CorruptFileError("truncated graph-file header in " + path.string());

  std::vector<SuperpixelGraph> graphs;
  graphs.reserve(count);
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    auto corrupt = [&] {
      return CorruptFileError("graph file " + path.string() + " is truncated in record " +
                              std::to_string(rec));
    };
    SuperpixelGraph g;
    if (!detail::read_le(in, g.num_nodes) || !detail::read_le(in, g.feature_dim)) throw corrupt();
    g.node_features.resize(static_cast<std::size_t>(g.num_nodes) * g.feature_dim);
    for (float& f : g.node_features) {
      if (!detail::read_le(in, f)) throw corrupt();
    }
    std::uint32_t num_edges = 0;
    if (!detail::read_le(in, num_edges)) throw corrupt();
    g.edges.resize(num_edges);
    for (auto& [i, j] : g.edges) {
      if (!detail::read_le(in, i) || !detail::read_le(in, j)) throw corrupt();
    }
    if (!detail::read_le(in, g.label)) throw corrupt();
    try {
      g.validate();
    } catch (const Error& e) {
      throw CorruptFileError("graph file " + path.string() + " record " + std::to_string(rec) +
                             ": " + e.what());
    }
    graphs.push_back(std::move(g));
  }
  return graphs;
}

}  // namespace spx
