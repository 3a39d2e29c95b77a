#include "spx/pipeline.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "spx/error.hpp"
#include "spx/rng.hpp"

namespace spx {

namespace {

using nlohmann::ordered_json;

template <typename Writer>
void write_atomic(const fs::path& path, Writer&& writer) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  fs::path tmp = path;
  tmp += ".partial";
  try {
    writer(tmp);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

// Tags library errors escaping `f` with the pipeline stage they came from.
template <typename F>
auto in_module(const char* module, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (Error& e) {
    if (e.module().empty()) e.set_module(module);
    throw;
  }
}

void require_file(const fs::path& path, const std::string& what) {
  if (!path.empty() && !fs::exists(path)) throw IoError(what + " " + path.string() + " does not exist");
}

LabeledDataset stratified_take(const LabeledDataset& ds, std::size_t count, std::uint64_t seed) {
  if (count == 0 || count >= ds.size()) return ds;
  const double frac = static_cast<double>(count) / static_cast<double>(ds.size());
  const double fractions[] = {frac, 1.0 - frac};
  auto parts = stratified_indices(ds.labels, fractions, seed);
  return subset(ds, parts[0]);
}

ordered_json graph_fingerprint(const RunSpec& spec) {
  ordered_json j;
  j["format"] = spec.data.format;
  j["train_images"] = spec.data.train_images.string();
  j["train_labels"] = spec.data.train_labels.string();
  j["test_images"] = spec.data.test_images.string();
  j["test_labels"] = spec.data.test_labels.string();
  j["train_manifest"] = spec.data.train_manifest.string();
  j["test_manifest"] = spec.data.test_manifest.string();
  j["test_fraction"] = spec.data.test_fraction;
  j["train_subset"] = spec.data.train_subset;
  j["test_subset"] = spec.data.test_subset;
  j["seed"] = spec.seed;
  j["n_superpixels"] = spec.slic.n_superpixels;
  j["compactness"] = spec.slic.compactness;
  j["max_iters"] = spec.slic.max_iters;
  j["enforce_connectivity"] = spec.slic.enforce_connectivity;
  j["radius"] = spec.graph.radius ? ordered_json(*spec.graph.radius) : ordered_json(nullptr);
  j["max_neighbors"] = spec.graph.max_neighbors;
  return j;
}

ordered_json summary_json(const GraphSummary& s) {
  return ordered_json{{"graphs", s.count}, {"mean_nodes", s.mean_nodes}, {"mean_edges", s.mean_edges}};
}

// Reads the config and summary records of a report.jsonl.
std::pair<ordered_json, ordered_json> read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read report " + path.string());
  ordered_json config, summary;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded()) throw FormatError("malformed report line in " + path.string());
    if (j.value("type", "") == "config") config = j;
    if (j.value("type", "") == "summary") summary = j;
  }
  if (config.is_null() || summary.is_null()) throw FormatError("report " + path.string() + " lacks config or summary");
  return {config, summary};
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& contents) {
  write_atomic(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << contents;
    if (!out) throw IoError("write failed for " + tmp.string());
  });
}

void RunSpec::validate() const {
  if (data.format == "idx") {
    if (data.train_images.empty() || data.train_labels.empty()) {
      throw ConfigError("idx data needs train_images and train_labels");
    }
    require_file(data.train_images, "train images");
    require_file(data.train_labels, "train labels");
    require_file(data.test_images, "test images");
    require_file(data.test_labels, "test labels");
    if (data.test_images.empty() != data.test_labels.empty()) {
      throw ConfigError("test_images and test_labels must be given together");
    }
  } else if (data.format == "manifest") {
    if (data.train_manifest.empty()) throw ConfigError("manifest data needs train_manifest");
    require_file(data.train_manifest, "train manifest");
    require_file(data.test_manifest, "test manifest");
  } else {
    throw ConfigError("unknown data format '" + data.format + "' (expected idx or manifest)");
  }
  if (!(data.test_fraction >= 0.0 && data.test_fraction < 1.0)) throw ConfigError("test_fraction must lie in [0, 1)");
  if (slic.n_superpixels < 1) throw ConfigError("n_superpixels must be at least 1");
  graph.validate();
  train.validate();
  if (threads < 1) throw ConfigError("threads must be at least 1");
}

fs::path RunSpec::run_dir() const {
  fs::path base = output_dir;
  if (const char* root = std::getenv("SPX_OUTPUT_ROOT"); root != nullptr && *root != '\0' && base.is_relative()) {
    base = fs::path(root) / base;
  }
  return base / name;
}

LoadedData load_datasets(const RunSpec& spec) {
  in_module("cli", [&] { spec.validate(); });
  return in_module("imaging", [&] {
  LoadedData out;
  auto load_manifest = [&](const fs::path& manifest) {
    const fs::path root = spec.data.root.empty() ? manifest.parent_path() : spec.data.root;
    return load_image_dir(root, manifest);
  };
  if (spec.data.format == "idx") {
    out.train = load_idx(spec.data.train_images, spec.data.train_labels);
    if (!spec.data.test_images.empty()) {
      out.test = load_idx(spec.data.test_images, spec.data.test_labels);
      out.has_test = true;
    }
  } else {
    out.train = load_manifest(spec.data.train_manifest);
    if (!spec.data.test_manifest.empty()) {
      out.test = load_manifest(spec.data.test_manifest);
      out.has_test = true;
    }
  }
  if (!out.has_test && spec.data.test_fraction > 0.0) {
    const double fractions[] = {1.0 - spec.data.test_fraction, spec.data.test_fraction};
    auto parts = stratified_split(out.train, fractions, derive_seed(spec.seed, 10));
    out.train = std::move(parts[0]);
    out.test = std::move(parts[1]);
    out.has_test = true;
  }
  if (out.has_test) {
    const int classes = std::max(out.train.num_classes, out.test.num_classes);
    out.train.num_classes = out.test.num_classes = classes;
  }
  out.train = stratified_take(out.train, spec.data.train_subset, derive_seed(spec.seed, 11));
  out.train.split = Split::train;
  if (out.has_test) {
    out.test = stratified_take(out.test, spec.data.test_subset, derive_seed(spec.seed, 12));
    out.test.split = Split::test;
  }
  if (out.train.size() == 0) throw ConsistencyError("training set is empty");
  return out;
  });
}

GraphSummary summarize_graphs(std::span<const SuperpixelGraph> graphs) {
  GraphSummary s;
  s.count = graphs.size();
  for (const auto& g : graphs) {
    s.mean_nodes += g.num_nodes;
    s.mean_edges += static_cast<double>(g.edges.size());
  }
  if (s.count) {
    s.mean_nodes /= static_cast<double>(s.count);
    s.mean_edges /= static_cast<double>(s.count);
  }
  return s;
}

namespace {

BuiltGraphs build_graphs(const RunSpec& spec, const LoadedData& data) {
  const fs::path dir = spec.run_dir() / "graphs";
  BuiltGraphs built;
  built.train_path = dir / "train.spxg";
  built.test_path = dir / "test.spxg";
  in_module("graphgen", [&] {
    built.train = radius_graph_dataset(data.train, spec.slic, spec.graph, spec.threads);
    if (data.has_test) built.test = radius_graph_dataset(data.test, spec.slic, spec.graph, spec.threads);
    write_atomic(built.train_path, [&](const fs::path& tmp) { save_graphs(built.train, tmp); });
    if (data.has_test) write_atomic(built.test_path, [&](const fs::path& tmp) { save_graphs(built.test, tmp); });
  });

  ordered_json summary;
  summary["fingerprint"] = graph_fingerprint(spec);
  summary["train"] = summary_json(summarize_graphs(built.train));
  if (data.has_test) summary["test"] = summary_json(summarize_graphs(built.test));
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
  return built;
}

// Reuses graph files from an earlier build-graphs run with the same inputs.
BuiltGraphs graphs_for(const RunSpec& spec, const LoadedData& data) {
  const fs::path dir = spec.run_dir() / "graphs";
  std::ifstream in(dir / "summary.json");
  if (in) {
    auto summary = ordered_json::parse(in, nullptr, false);
    if (!summary.is_discarded() && summary.contains("fingerprint") && summary["fingerprint"] == graph_fingerprint(spec) &&
        fs::exists(dir / "train.spxg") && (!data.has_test || fs::exists(dir / "test.spxg"))) {
      BuiltGraphs built;
      built.train_path = dir / "train.spxg";
      built.test_path = dir / "test.spxg";
      in_module("graphgen", [&] {
        built.train = load_graphs(built.train_path);
        if (data.has_test) built.test = load_graphs(built.test_path);
      });
      if (built.train.size() == data.train.size() && (!data.has_test || built.test.size() == data.test.size())) {
        return built;
      }
    }
  }
  return build_graphs(spec, data);
}

}  // namespace

BuiltGraphs cmd_build_graphs(const RunSpec& spec) {
  const LoadedData data = load_datasets(spec);
  return build_graphs(spec, data);
}

TrainResult cmd_train(const RunSpec& spec) {
  const LoadedData data = load_datasets(spec);
  TrainConfig cfg = spec.train;
  cfg.seed = spec.seed;
  if (cfg.dataset_name.empty()) cfg.dataset_name = spec.name;

  BuiltGraphs graphs;
  if (cfg.kind != ModelKind::cnn) graphs = graphs_for(spec, data);

  TrainData train, test;
  if (cfg.kind != ModelKind::gnn) {
    train.images = &data.train;
    test.images = &data.test;
  }
  if (cfg.kind != ModelKind::cnn) {
    train.graphs = &graphs.train;
    test.graphs = &graphs.test;
  }
  TrainResult result = in_module("train", [&] { return train_model(train, cfg, data.has_test ? &test : nullptr); });

  const fs::path dir = spec.run_dir() / to_string(cfg.kind);
  in_module("models", [&] {
    write_atomic(dir / "checkpoint.spxc", [&](const fs::path& tmp) { save_checkpoint(result.checkpoint, tmp); });
  });
  write_file_atomic(dir / "report.jsonl", report_to_jsonl(result.report));
  ordered_json timing{{"wall_clock_seconds", result.report.wall_clock_seconds}};
  write_file_atomic(dir / "timing.json", timing.dump() + "\n");
  return result;
}

EvalResult cmd_evaluate(const fs::path& checkpoint, const fs::path& data, const fs::path& labels,
                        const fs::path& graphs) {
  const Checkpoint ckpt = in_module("models", [&] { return load_checkpoint(checkpoint); });
  in_module("cli", [&] { require_file(data, "data file"); });

  char magic[4] = {};
  {
    std::ifstream in(data, std::ios::binary);
    in.read(magic, 4);
  }
  LabeledDataset images;
  std::vector<SuperpixelGraph> graph_set;
  TrainData td;
  if (std::string(magic, 4) == "SPXG") {
    graph_set = load_graphs(data);
    td.graphs = &graph_set;
  } else {
    const bool idx = magic[0] == 0 && magic[1] == 0 && magic[2] == 8 && magic[3] == 3;
    if (idx) {
      if (labels.empty()) throw ConfigError("IDX image data needs --labels");
      images = load_idx(data, labels);
    } else {
      images = load_image_dir(data.parent_path(), data);
    }
    images.num_classes = std::max(images.num_classes, ckpt.arch.cnn.num_classes);
    td.images = &images;
    if (!graphs.empty()) {
      graph_set = load_graphs(graphs);
      td.graphs = &graph_set;
    }
  }
  if (ckpt.arch.kind != ModelKind::gnn && td.images == nullptr) {
    throw CheckpointError("checkpoint holds a " + to_string(ckpt.arch.kind) + " model, which needs image data");
  }
  if (ckpt.arch.kind != ModelKind::cnn && td.graphs == nullptr) {
    throw CheckpointError("checkpoint holds a " + to_string(ckpt.arch.kind) + " model, which needs graph data");
  }
  if (ckpt.arch.kind == ModelKind::cnn) td.graphs = nullptr;
  if (ckpt.arch.kind == ModelKind::gnn) td.images = nullptr;
  return in_module("train", [&] { return evaluate(ckpt, td); });
}

SweepResult cmd_sweep(const RunSpec& spec, const SweepGrid& grid) {
  const LoadedData data = load_datasets(spec);
  TrainConfig base = spec.train;
  base.seed = spec.seed;
  if (base.dataset_name.empty()) base.dataset_name = spec.name;
  BuiltGraphs graphs;
  if (base.kind != ModelKind::cnn) graphs = graphs_for(spec, data);

  TrainData train, test;
  if (base.kind != ModelKind::gnn) {
    train.images = &data.train;
    test.images = &data.test;
  }
  if (base.kind != ModelKind::cnn) {
    train.graphs = &graphs.train;
    test.graphs = &graphs.test;
  }
  SweepResult result = in_module("train", [&] { return sweep(train, base, grid, data.has_test ? &test : nullptr); });

  std::string out;
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    ordered_json marker{{"type", "run"}, {"index", i}, {"selected", i == result.best_index}};
    out += marker.dump() + "\n" + report_to_jsonl(result.runs[i]);
  }
  ordered_json best{{"type", "best"},
                    {"index", result.best_index},
                    {"batch_size", result.best_config.batch_size},
                    {"learning_rate", result.best_config.optimizer.learning_rate},
                    {"weight_decay", result.best_config.optimizer.weight_decay}};
  out += best.dump() + "\n";
  write_file_atomic(spec.run_dir() / "sweep" / "sweep.jsonl", out);
  return result;
}

std::vector<ReportRow> collect_report(std::span<const fs::path> run_dirs) {
  std::vector<fs::path> reports;
  for (const auto& dir : run_dirs) {
    if (!fs::exists(dir)) throw IoError("run directory " + dir.string() + " does not exist");
    if (fs::exists(dir / "report.jsonl")) {
      reports.push_back(dir / "report.jsonl");
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (entry.path().filename() == "report.jsonl") found.push_back(entry.path());
    }
    if (found.empty()) throw IoError("no report.jsonl under " + dir.string());
    std::sort(found.begin(), found.end());
    reports.insert(reports.end(), found.begin(), found.end());
  }

  std::vector<ReportRow> rows;
  auto row_for = [&](const std::string& dataset) -> ReportRow& {
    for (auto& r : rows) {
      if (r.dataset == dataset) return r;
    }
    rows.push_back({dataset, std::nullopt, std::nullopt});
    return rows.back();
  };
  for (const auto& path : reports) {
    const auto [config, summary] = read_report(path);
    if (!summary.contains("test")) continue;
    const std::string model = config.value("model", "");
    ReportRow& row = row_for(config.value("dataset", "unnamed"));
    if (model == "cnn") row.cnn = summary["test"].value("accuracy", 0.0);
    if (model == "coupled") row.coupled = summary["test"].value("hybrid_accuracy", 0.0);
  }
  return rows;
}

std::string format_report_table(std::span<const ReportRow> rows) {
  std::ostringstream out;
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(2) << *v;
    } else {
      s << "-";
    }
    return s.str();
  };
  std::size_t width = 7;
  for (const auto& r : rows) width = std::max(width, r.dataset.size());
  out << std::left << std::setw(static_cast<int>(width)) << "Dataset" << " | " << std::setw(8) << "CNN"
      << " | CNN+GNN\n";
  out << std::string(width, '-') << "-+-" << std::string(8, '-') << "-+-" << std::string(8, '-') << "\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.dataset << " | " << std::setw(8) << cell(r.cnn)
        << " | " << cell(r.coupled) << "\n";
  }
  return out.str();
}

std::string format_report_json(std::span<const ReportRow> rows) {
  ordered_json out = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json j;
    j["dataset"] = r.dataset;
    j["cnn"] = r.cnn ? ordered_json(*r.cnn) : ordered_json(nullptr);
    j["cnn_gnn"] = r.coupled ? ordered_json(*r.coupled) : ordered_json(nullptr);
    out.push_back(j);
  }
  return out.dump(2) + "\n";
}

Segmentation cmd_segment(const fs::path& image, const SlicConfig& cfg, const fs::path& out) {
  const Image img = in_module("imaging", [&] { return read_pnm(image); });
  const Segmentation seg = in_module("slic", [&] { return slic_segment(img, cfg); });
  const auto stats = segment_stats(seg, img);
  Image vis(img.height, img.width, img.channels);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      const auto label = seg.at(r, c);
      const bool boundary = (c + 1 < img.width && seg.at(r, c + 1) != label) ||
                            (r + 1 < img.height && seg.at(r + 1, c) != label);
      for (int ch = 0; ch < img.channels; ++ch) vis.at(ch, r, c) = boundary ? 0.0 : stats[label].mean_color[ch];
    }
  }
  write_atomic(out, [&](const fs::path& tmp) { write_pnm(vis, tmp); });
  return seg;
}

}  // namespace spx
