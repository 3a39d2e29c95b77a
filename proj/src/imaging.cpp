#include "spx/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "spx/error.hpp"
#include "spx/rng.hpp"

namespace spx {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::ifstream open_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

// Next whitespace-separated header token of a PNM file, skipping comments.
std::string pnm_token(std::istream& in, const fs::path& path) {
  std::string token;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  if (token.empty()) throw FormatError("truncated PNM header in " + path.string());
  return token;
}

int parse_positive(const std::string& token, const fs::path& path) {
  try {
    std::size_t used = 0;
    const int value = std::stoi(token, &used);
    if (used == token.size() && value > 0) return value;
  } catch (const std::exception&) {
  }
  throw FormatError("bad PNM header field '" + token + "' in " + path.string());
}

}  // namespace

Image::Image(int h, int w, int c)
    : height(h), width(w), channels(c),
      pixels(static_cast<std::size_t>(h) * w * c, 0.0) {}

void Image::validate() const {
  if (height <= 0 || width <= 0 || (channels != 1 && channels != 3)) {
    throw ConsistencyError("image shape " + std::to_string(height) + "x" + std::to_string(width) +
                           "x" + std::to_string(channels) + " is invalid");
  }
  if (pixels.size() != plane_size() * channels) {
    throw ConsistencyError("image pixel buffer has " + std::to_string(pixels.size()) +
                           " entries, expected " + std::to_string(plane_size() * channels));
  }
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConsistencyError("image intensity outside [0,1]");
  }
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

void LabeledDataset::validate() const {
  if (images.size() != labels.size()) {
    throw ConsistencyError(std::to_string(images.size()) + " images but " +
                           std::to_string(labels.size()) + " labels");
  }
  for (int label : labels) {
    if (label < 0 || label >= num_classes) {
      throw ConsistencyError("label " + std::to_string(label) + " outside [0, " +
                             std::to_string(num_classes) + ")");
    }
  }
  for (const auto& img : images) {
    if (img.height != images.front().height || img.width != images.front().width ||
        img.channels != images.front().channels) {
      throw ConsistencyError("dataset images do not share one shape");
    }
  }
}

LabeledDataset load_idx(const fs::path& images_path, const fs::path& labels_path) {
  auto img_in = open_binary(images_path);
  auto lbl_in = open_binary(labels_path);

  std::uint32_t magic = 0;
  if (!detail::read_be32(img_in, magic) || magic != kIdxImageMagic) {
    throw FormatError("bad IDX image magic in " + images_path.string());
  }
  std::uint32_t count = 0, rows = 0, cols = 0;
  if (!detail::read_be32(img_in, count) || !detail::read_be32(img_in, rows) ||
      !detail::read_be32(img_in, cols)) {
    throw FormatError("truncated IDX header in " + images_path.string());
  }
  if (!detail::read_be32(lbl_in, magic) || magic != kIdxLabelMagic) {
    throw FormatError("bad IDX label magic in " + labels_path.string());
  }
  std::uint32_t label_count = 0;
  if (!detail::read_be32(lbl_in, label_count)) {
    throw FormatError("truncated IDX header in " + labels_path.string());
  }
  if (label_count != count) {
    throw ConsistencyError(images_path.string() + " holds " + std::to_string(count) +
                           " images but " + labels_path.string() + " holds " +
                           std::to_string(label_count) + " labels");
  }

  LabeledDataset ds;
  ds.images.reserve(count);
  ds.labels.reserve(count);
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> buffer(plane);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (!img_in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(plane))) {
      throw FormatError("truncated pixel data in " + images_path.string());
    }
    Image img(static_cast<int>(rows), static_cast<int>(cols), 1);
    std::transform(buffer.begin(), buffer.end(), img.pixels.begin(),
                   [](unsigned char b) { return b / 255.0; });
    ds.images.push_back(std::move(img));
  }
  std::vector<unsigned char> labels(count);
  if (!lbl_in.read(reinterpret_cast<char*>(labels.data()), count)) {
    throw FormatError("truncated label data in " + labels_path.string());
  }
  int max_label = -1;
  for (unsigned char l : labels) {
    ds.labels.push_back(l);
    max_label = std::max(max_label, static_cast<int>(l));
  }
  ds.num_classes = max_label + 1;
  return ds;
}

void save_idx(const LabeledDataset& ds, const fs::path& images_path, const fs::path& labels_path) {
  ds.validate();
  if (!ds.images.empty() && ds.images.front().channels != 1) {
    throw ConsistencyError("IDX export supports grayscale images only");
  }
  std::ofstream img_out(images_path, std::ios::binary);
  std::ofstream lbl_out(labels_path, std::ios::binary);
  if (!img_out) throw IoError("cannot write " + images_path.string());
  if (!lbl_out) throw IoError("cannot write " + labels_path.string());

  const auto count = static_cast<std::uint32_t>(ds.size());
  const std::uint32_t rows = ds.images.empty() ? 0 : ds.images.front().height;
  const std::uint32_t cols = ds.images.empty() ? 0 : ds.images.front().width;
  detail::write_be32(img_out, kIdxImageMagic);
  detail::write_be32(img_out, count);
  detail::write_be32(img_out, rows);
  detail::write_be32(img_out, cols);
  for (const auto& img : ds.images) {
    for (double v : img.pixels) {
      img_out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  }
  detail::write_be32(lbl_out, kIdxLabelMagic);
  detail::write_be32(lbl_out, count);
  for (int l : ds.labels) lbl_out.put(static_cast<char>(l));
  if (!img_out || !lbl_out) throw IoError("write failed for " + images_path.string());
}

Image read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read image " + path.string());
  const std::string magic = pnm_token(in, path);
  if (magic != "P5" && magic != "P6") {
    throw FormatError("unsupported pixmap type '" + magic + "' in " + path.string());
  }
  const int width = parse_positive(pnm_token(in, path), path);
  const int height = parse_positive(pnm_token(in, path), path);
  const int maxval = parse_positive(pnm_token(in, path), path);
  if (maxval > 65535) throw FormatError("PNM maxval too large in " + path.string());

  const int channels = magic == "P6" ? 3 : 1;
  const int bytes_per_sample = maxval > 255 ? 2 : 1;
  const std::size_t samples = static_cast<std::size_t>(width) * height * channels;
  std::vector<unsigned char> raw(samples * bytes_per_sample);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw IoError("truncated pixel data in " + path.string());
  }

  Image img(height, width, channels);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      for (int ch = 0; ch < channels; ++ch) {
        const std::size_t idx = (static_cast<std::size_t>(r) * width + c) * channels + ch;
        const unsigned value = bytes_per_sample == 1
                                   ? raw[idx]
                                   : (unsigned{raw[2 * idx]} << 8) | raw[2 * idx + 1];
        img.at(ch, r, c) = std::min(1.0, static_cast<double>(value) / maxval);
      }
    }
  }
  return img;
}

void write_pnm(const Image& img, const fs::path& path) {
  img.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      for (int ch = 0; ch < img.channels; ++ch) {
        out.put(static_cast<char>(std::lround(img.at(ch, r, c) * 255.0)));
      }
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Image center_crop_resize(const Image& img, int height, int width) {
  if (height <= 0 || width <= 0) throw ConfigError("resize target must be positive");
  // Largest centered window with the target aspect ratio.
  int crop_h = img.height;
  int crop_w = img.width;
  if (static_cast<long long>(img.width) * height > static_cast<long long>(img.height) * width) {
    crop_w = std::max(1, static_cast<int>(std::lround(static_cast<double>(img.height) * width / height)));
  } else {
    crop_h = std::max(1, static_cast<int>(std::lround(static_cast<double>(img.width) * height / width)));
  }
  const int top = (img.height - crop_h) / 2;
  const int left = (img.width - crop_w) / 2;
  const double sy = static_cast<double>(crop_h) / height;
  const double sx = static_cast<double>(crop_w) / width;

  Image out(height, width, img.channels);
  for (int r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, crop_h - 1.0);
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, crop_h - 1);
    const double fy = y - y0;
    for (int c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, crop_w - 1.0);
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, crop_w - 1);
      const double fx = x - x0;
      for (int ch = 0; ch < img.channels; ++ch) {
        const double top_v = (1 - fx) * img.at(ch, top + y0, left + x0) + fx * img.at(ch, top + y0, left + x1);
        const double bot_v = (1 - fx) * img.at(ch, top + y1, left + x0) + fx * img.at(ch, top + y1, left + x1);
        out.at(ch, r, c) = std::clamp((1 - fy) * top_v + fy * bot_v, 0.0, 1.0);
      }
    }
  }
  return out;
}

LabeledDataset load_image_dir(const fs::path& root, const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read manifest " + manifest.string());

  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty manifest " + manifest.string());
  int resize_h = 0, resize_w = 0;
  {
    const auto colon = line.find(':');
    if (colon == std::string::npos || line.substr(0, colon) != "resize") {
      throw FormatError("manifest header must be 'resize: HxW | none' in " + manifest.string());
    }
    std::string value = line.substr(colon + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    value.erase(value.find_last_not_of(" \t\r") + 1);
    if (value != "none") {
      char x = 0;
      std::istringstream ss(value);
      if (!(ss >> resize_h >> x >> resize_w) || x != 'x' || resize_h <= 0 || resize_w <= 0) {
        throw FormatError("bad resize declaration '" + value + "' in " + manifest.string());
      }
    }
  }

  LabeledDataset ds;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError("manifest line " + std::to_string(line_no) + " lacks a tab separator");
    }
    int label = -1;
    try {
      label = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
    }
    if (label < 0) throw FormatError("bad class index on manifest line " + std::to_string(line_no));

    Image img = read_pnm(root / line.substr(0, tab));
    if (resize_h > 0) img = center_crop_resize(img, resize_h, resize_w);
    if (!ds.images.empty()) {
      const Image& first = ds.images.front();
      if (img.height != first.height || img.width != first.width || img.channels != first.channels) {
        throw ConsistencyError("image " + line.substr(0, tab) + " has shape " +
                               std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                               std::to_string(img.channels) + " but the dataset is " +
                               std::to_string(first.height) + "x" + std::to_string(first.width) +
                               "x" + std::to_string(first.channels) + " and no resize is declared");
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
    ds.num_classes = std::max(ds.num_classes, label + 1);
  }
  if (ds.images.empty()) throw ConsistencyError("manifest " + manifest.string() + " lists no images");
  return ds;
}

std::vector<std::vector<std::size_t>> stratified_indices(std::span<const int> labels,
                                                         std::span<const double> fractions,
                                                         std::uint64_t seed) {
  if (fractions.empty()) throw ConfigError("at least one split fraction is required");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  int num_classes = 0;
  for (int l : labels) {
    if (l < 0) throw ConsistencyError("negative label in stratified split");
    num_classes = std::max(num_classes, l + 1);
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  const std::size_t parts = fractions.size();
  std::vector<std::vector<std::size_t>> out(parts);
  Rng rng(seed);
  for (int c = 0; c < num_classes; ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < parts) {
      throw StratificationError("class " + std::to_string(c) + " has " +
                                std::to_string(members.size()) + " samples, fewer than " +
                                std::to_string(parts) + " split parts");
    }
    rng.shuffle(std::span<std::size_t>(members));

    // Largest-remainder apportionment; remainder ties go to the earlier part.
    const double n = static_cast<double>(members.size());
    std::vector<std::size_t> counts(parts);
    std::vector<double> remainders(parts);
    std::size_t assigned = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      const double exact = fractions[p] * n;
      counts[p] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      remainders[p] = exact - static_cast<double>(counts[p]);
      assigned += counts[p];
    }
    std::vector<std::size_t> order(parts);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
    for (std::size_t k = 0; assigned < members.size(); ++k, ++assigned) ++counts[order[k % parts]];

    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      out[p].insert(out[p].end(), members.begin() + offset, members.begin() + offset + counts[p]);
      offset += counts[p];
    }
  }
  for (auto& part : out) std::sort(part.begin(), part.end());
  return out;
}

LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  LabeledDataset out;
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.images.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw IndexError("subset index " + std::to_string(i) + " out of range");
    out.images.push_back(ds.images[i]);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

std::vector<LabeledDataset> stratified_split(const LabeledDataset& ds,
                                             std::span<const double> fractions,
                                             std::uint64_t seed) {
  ds.validate();
  const auto parts = stratified_indices(ds.labels, fractions, seed);
  std::vector<LabeledDataset> out;
  out.reserve(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto part = subset(ds, parts[p]);
    part.split = p == 0 ? Split::train : (p == 1 ? Split::val : Split::test);
    out.push_back(std::move(part));
  }
  return out;
}

}  // namespace spx
