#include "spx/slic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "spx/error.hpp"

namespace spx {

namespace {

// Per-pixel clustering features on a 0..100 color scale.
struct ColorPlane {
  int height = 0;
  int width = 0;
  int dims = 1;
  std::vector<double> values;  // interleaved: pixel-major, dims per pixel

  const double* at(int r, int c) const {
    return &values[(static_cast<std::size_t>(r) * width + c) * dims];
  }
};

ColorPlane clustering_colors(const Image& img) {
  ColorPlane plane{img.height, img.width, img.channels == 3 ? 3 : 1, {}};
  plane.values.resize(img.plane_size() * plane.dims);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      double* dst = &plane.values[(static_cast<std::size_t>(r) * img.width + c) * plane.dims];
      if (img.channels == 3) {
        const Lab lab = srgb_to_lab(img.at(0, r, c), img.at(1, r, c), img.at(2, r, c));
        dst[0] = lab.l;
        dst[1] = lab.a;
        dst[2] = lab.b;
      } else {
        dst[0] = img.at(0, r, c) * 100.0;
      }
    }
  }
  return plane;
}

double color_dist2(const double* a, const double* b, int dims) {
  double s = 0.0;
  for (int d = 0; d < dims; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
  return s;
}

double gradient_at(const ColorPlane& plane, int r, int c) {
  const int up = std::max(r - 1, 0), down = std::min(r + 1, plane.height - 1);
  const int left = std::max(c - 1, 0), right = std::min(c + 1, plane.width - 1);
  return color_dist2(plane.at(r, right), plane.at(r, left), plane.dims) +
         color_dist2(plane.at(down, c), plane.at(up, c), plane.dims);
}

struct Center {
  double row = 0.0;
  double col = 0.0;
  double color[3] = {0.0, 0.0, 0.0};
};

std::vector<Center> seed_centers(const ColorPlane& plane, double step) {
  const int ny = std::clamp(static_cast<int>(std::lround(plane.height / step)), 1, plane.height);
  const int nx = std::clamp(static_cast<int>(std::lround(plane.width / step)), 1, plane.width);
  std::vector<Center> centers;
  centers.reserve(static_cast<std::size_t>(ny) * nx);
  for (int i = 0; i < ny; ++i) {
    for (int j = 0; j < nx; ++j) {
      Center ctr;
      ctr.row = (i + 0.5) * plane.height / ny - 0.5;
      ctr.col = (j + 0.5) * plane.width / nx - 0.5;
      int pr = std::clamp(static_cast<int>(std::lround(ctr.row)), 0, plane.height - 1);
      int pc = std::clamp(static_cast<int>(std::lround(ctr.col)), 0, plane.width - 1);
      // Move to the lowest-gradient pixel of the 3x3 neighborhood, but only
      // when it is strictly better than the seed's own pixel.
      double best = gradient_at(plane, pr, pc);
      int br = -1, bc = -1;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int r = pr + dr, c = pc + dc;
          if (r < 0 || c < 0 || r >= plane.height || c >= plane.width) continue;
          const double g = gradient_at(plane, r, c);
          if (g < best) {
            best = g;
            br = r;
            bc = c;
          }
        }
      }
      if (br >= 0) {
        ctr.row = br;
        ctr.col = bc;
        pr = br;
        pc = bc;
      }
      std::copy_n(plane.at(pr, pc), plane.dims, ctr.color);
      centers.push_back(ctr);
    }
  }
  return centers;
}

// Relabels 4-connected components, merging fragments below `min_size` into
// the adjacent component with the closest mean color (ties: longer shared
// boundary, then lower id). Labels are compacted in scan order.
int enforce_connectivity(std::vector<std::int32_t>& labels, const ColorPlane& plane, double min_size) {
  const int h = plane.height, w = plane.width;
  const std::size_t n = labels.size();
  std::vector<int> comp(n, -1);
  std::vector<std::int64_t> size;
  std::vector<std::array<double, 3>> color_sum;
  std::vector<int> queue;
  queue.reserve(n);

  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] >= 0) continue;
    const int id = static_cast<int>(size.size());
    size.push_back(0);
    color_sum.push_back({0.0, 0.0, 0.0});
    queue.clear();
    queue.push_back(static_cast<int>(start));
    comp[start] = id;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const int p = queue[q];
      const int r = p / w, c = p % w;
      ++size[id];
      for (int d = 0; d < plane.dims; ++d) color_sum[id][d] += plane.at(r, c)[d];
      const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[1] < 0 || nb[0] >= h || nb[1] >= w) continue;
        const int np = nb[0] * w + nb[1];
        if (comp[np] < 0 && labels[np] == labels[p]) {
          comp[np] = id;
          queue.push_back(np);
        }
      }
    }
  }

  const int num_comps = static_cast<int>(size.size());
  std::vector<std::map<int, std::int64_t>> adjacency(num_comps);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int a = comp[static_cast<std::size_t>(r) * w + c];
      if (c + 1 < w) {
        const int b = comp[static_cast<std::size_t>(r) * w + c + 1];
        if (a != b) ++adjacency[a][b], ++adjacency[b][a];
      }
      if (r + 1 < h) {
        const int b = comp[static_cast<std::size_t>(r + 1) * w + c];
        if (a != b) ++adjacency[a][b], ++adjacency[b][a];
      }
    }
  }

  std::vector<int> parent(num_comps);
  for (int i = 0; i < num_comps; ++i) parent[i] = i;
  std::set<std::pair<std::int64_t, int>> small;
  for (int i = 0; i < num_comps; ++i) {
    if (size[i] < min_size) small.insert({size[i], i});
  }
  auto mean_color = [&](int i, int d) { return color_sum[i][d] / static_cast<double>(size[i]); };

  while (!small.empty()) {
    const int a = small.begin()->second;
    small.erase(small.begin());
    if (adjacency[a].empty()) continue;  // sole component
    int target = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    std::int64_t best_border = -1;
    for (const auto& [b, border] : adjacency[a]) {
      double dist = 0.0;
      for (int d = 0; d < plane.dims; ++d) {
        const double diff = mean_color(a, d) - mean_color(b, d);
        dist += diff * diff;
      }
      if (dist < best_dist || (dist == best_dist && border > best_border)) {
        best_dist = dist;
        best_border = border;
        target = b;
      }
    }

    if (size[target] < min_size) small.erase({size[target], target});
    size[target] += size[a];
    for (int d = 0; d < 3; ++d) color_sum[target][d] += color_sum[a][d];
    parent[a] = target;
    for (const auto& [nb, border] : adjacency[a]) {
      adjacency[nb].erase(a);
      if (nb == target) continue;
      adjacency[target][nb] += border;
      adjacency[nb][target] += border;
    }
    adjacency[a].clear();
    if (size[target] < min_size) small.insert({size[target], target});
  }

  auto root = [&](int i) {
    while (parent[i] != i) i = parent[i];
    return i;
  };
  std::vector<int> remap(num_comps, -1);
  int next = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const int r = root(comp[p]);
    if (remap[r] < 0) remap[r] = next++;
    labels[p] = remap[r];
  }
  return next;
}

int compact_labels(std::vector<std::int32_t>& labels, std::size_t num_clusters) {
  std::vector<int> remap(num_clusters, -1);
  for (auto l : labels) remap[l] = 0;
  int next = 0;
  for (auto& r : remap) {
    if (r == 0) r = next++;
  }
  for (auto& l : labels) l = remap[l];
  return next;
}

}  // namespace

void SlicConfig::validate(std::int64_t pixel_count) const {
  if (n_superpixels < 1) throw ConfigError("n_superpixels must be at least 1");
  if (n_superpixels > pixel_count) {
    throw ConfigError("n_superpixels " + std::to_string(n_superpixels) + " exceeds pixel count " +
                      std::to_string(pixel_count));
  }
  if (!(compactness > 0.0)) throw ConfigError("compactness must be positive");
  if (max_iters < 1) throw ConfigError("max_iters must be at least 1");
  if (!(convergence_tol >= 0.0)) throw ConfigError("convergence_tol must be non-negative");
  if (!(min_fragment_fraction >= 0.0)) throw ConfigError("min_fragment_fraction must be non-negative");
}

double slic_grid_step(int height, int width, int n_superpixels) {
  return std::sqrt(static_cast<double>(height) * width / n_superpixels);
}

Lab srgb_to_lab(double r, double g, double b) {
  auto linear = [](double v) {
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
  };
  const double rl = linear(r), gl = linear(g), bl = linear(b);
  // D65 reference white.
  const double x = (0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl) / 0.95047;
  const double y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
  const double z = (0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl) / 1.08883;
  auto f = [](double t) {
    constexpr double delta = 6.0 / 29.0;
    return t > delta * delta * delta ? std::cbrt(t) : t / (3 * delta * delta) + 4.0 / 29.0;
  };
  const double fx = f(x), fy = f(y), fz = f(z);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

Segmentation slic_segment(const Image& img, const SlicConfig& cfg) {
  img.validate();
  cfg.validate(static_cast<std::int64_t>(img.plane_size()));

  const ColorPlane plane = clustering_colors(img);
  const int h = img.height, w = img.width;
  const double step = slic_grid_step(h, w, cfg.n_superpixels);
  const double spatial_weight = (cfg.compactness / step) * (cfg.compactness / step);
  std::vector<Center> centers = seed_centers(plane, step);
  const std::size_t k = centers.size();

  auto distance2 = [&](const Center& ctr, int r, int c) {
    const double dr = r - ctr.row, dc = c - ctr.col;
    return color_dist2(plane.at(r, c), ctr.color, plane.dims) + (dr * dr + dc * dc) * spatial_weight;
  };

  std::vector<std::int32_t> labels(img.plane_size(), -1);
  std::vector<double> best(img.plane_size());
  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    for (std::size_t ci = 0; ci < k; ++ci) {
      const Center& ctr = centers[ci];
      const int r0 = std::max(0, static_cast<int>(std::ceil(ctr.row - step)));
      const int r1 = std::min(h - 1, static_cast<int>(std::floor(ctr.row + step)));
      const int c0 = std::max(0, static_cast<int>(std::ceil(ctr.col - step)));
      const int c1 = std::min(w - 1, static_cast<int>(std::floor(ctr.col + step)));
      for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
          const std::size_t p = static_cast<std::size_t>(r) * w + c;
          const double d = distance2(ctr, r, c);
          // Strict comparison: the lower cluster id keeps ties.
          if (d < best[p]) {
            best[p] = d;
            labels[p] = static_cast<std::int32_t>(ci);
          }
        }
      }
    }
    // Pixels outside every window fall back to a global nearest-center search.
    for (std::size_t p = 0; p < labels.size(); ++p) {
      if (std::isfinite(best[p])) continue;
      const int r = static_cast<int>(p) / w, c = static_cast<int>(p) % w;
      for (std::size_t ci = 0; ci < k; ++ci) {
        const double d = distance2(centers[ci], r, c);
        if (d < best[p]) {
          best[p] = d;
          labels[p] = static_cast<std::int32_t>(ci);
        }
      }
    }

    std::vector<Center> sums(k);
    std::vector<std::int64_t> counts(k, 0);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const auto l = labels[static_cast<std::size_t>(r) * w + c];
        Center& s = sums[l];
        s.row += r;
        s.col += c;
        for (int d = 0; d < plane.dims; ++d) s.color[d] += plane.at(r, c)[d];
        ++counts[l];
      }
    }
    double max_move = 0.0;
    for (std::size_t ci = 0; ci < k; ++ci) {
      if (counts[ci] == 0) continue;
      Center updated;
      const double inv = 1.0 / static_cast<double>(counts[ci]);
      updated.row = sums[ci].row * inv;
      updated.col = sums[ci].col * inv;
      for (int d = 0; d < plane.dims; ++d) updated.color[d] = sums[ci].color[d] * inv;
      const double dr = updated.row - centers[ci].row, dc = updated.col - centers[ci].col;
      const double move = std::sqrt(color_dist2(updated.color, centers[ci].color, plane.dims) +
                                    (dr * dr + dc * dc) * spatial_weight);
      max_move = std::max(max_move, move);
      centers[ci] = updated;
    }
    if (max_move < cfg.convergence_tol) break;
  }

  Segmentation seg;
  seg.height = h;
  seg.width = w;
  seg.num_segments = cfg.enforce_connectivity
                         ? enforce_connectivity(labels, plane, cfg.min_fragment_fraction * step * step)
                         : compact_labels(labels, k);
  seg.labels = std::move(labels);
  return seg;
}

std::vector<SegmentStats> segment_stats(const Segmentation& seg, const Image& img) {
  if (seg.height != img.height || seg.width != img.width ||
      seg.labels.size() != img.plane_size()) {
    throw ConsistencyError("segmentation shape " + std::to_string(seg.height) + "x" +
                           std::to_string(seg.width) + " does not match image " +
                           std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  std::vector<SegmentStats> stats(seg.num_segments);
  for (auto& s : stats) s.mean_color.assign(img.channels, 0.0);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      const auto l = seg.at(r, c);
      if (l < 0 || l >= seg.num_segments) throw IndexError("segment label out of range");
      SegmentStats& s = stats[l];
      s.centroid_row += r;
      s.centroid_col += c;
      for (int ch = 0; ch < img.channels; ++ch) s.mean_color[ch] += img.at(ch, r, c);
      ++s.pixel_count;
    }
  }
  for (auto& s : stats) {
    if (s.pixel_count == 0) continue;
    const double inv = 1.0 / static_cast<double>(s.pixel_count);
    s.centroid_row *= inv;
    s.centroid_col *= inv;
    for (double& v : s.mean_color) v *= inv;
  }
  return stats;
}

bool is_four_connected(const Segmentation& seg) {
  const int h = seg.height, w = seg.width;
  std::vector<char> seen(seg.labels.size(), 0);
  std::vector<char> label_seen(seg.num_segments, 0);
  std::vector<int> queue;
  for (std::size_t start = 0; start < seg.labels.size(); ++start) {
    if (seen[start]) continue;
    const auto label = seg.labels[start];
    if (label_seen[label]) return false;  // second component of this label
    label_seen[label] = 1;
    queue.assign(1, static_cast<int>(start));
    seen[start] = 1;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const int r = queue[q] / w, c = queue[q] % w;
      const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[1] < 0 || nb[0] >= h || nb[1] >= w) continue;
        const int np = nb[0] * w + nb[1];
        if (!seen[np] && seg.labels[np] == label) {
          seen[np] = 1;
          queue.push_back(np);
        }
      }
    }
  }
  return true;
}

}  // namespace spx
