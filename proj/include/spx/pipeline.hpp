#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spx/graphgen.hpp"
#include "spx/imaging.hpp"
#include "spx/slic.hpp"
#include "spx/train.hpp"

// End-to-end commands behind the `spx` tool: ingestion, segmentation,
// graph building, training, evaluation and reporting.
namespace spx {

namespace fs = std::filesystem;

struct DataSpec {
  std::string format = "idx";  // idx | manifest
  fs::path train_images;
  fs::path train_labels;
  fs::path test_images;
  fs::path test_labels;
  fs::path root;  // manifest image root; defaults to the manifest's directory
  fs::path train_manifest;
  fs::path test_manifest;
  // Without a test set, carve one out of the training pool (stratified).
  double test_fraction = 0.0;
  // Stratified subsample sizes; 0 keeps everything.
  std::size_t train_subset = 0;
  std::size_t test_subset = 0;
};

struct RunSpec {
  std::string name = "run";
  DataSpec data;
  SlicConfig slic;
  GraphConfig graph;
  TrainConfig train;
  fs::path output_dir = "runs";
  std::uint64_t seed = 0;
  int threads = 1;

  // Checks numeric ranges and that referenced input files exist.
  void validate() const;
  // output_dir / name, placed under $SPX_OUTPUT_ROOT when that is set and
  // output_dir is relative.
  fs::path run_dir() const;
};

struct LoadedData {
  LabeledDataset train;
  LabeledDataset test;
  bool has_test = false;
};

LoadedData load_datasets(const RunSpec& spec);

struct GraphSummary {
  std::size_t count = 0;
  double mean_nodes = 0.0;
  double mean_edges = 0.0;
};

GraphSummary summarize_graphs(std::span<const SuperpixelGraph> graphs);

struct BuiltGraphs {
  std::vector<SuperpixelGraph> train;
  std::vector<SuperpixelGraph> test;
  fs::path train_path;
  fs::path test_path;
};

// Writes <run_dir>/graphs/{train,test}.spxg plus summary.json.
BuiltGraphs cmd_build_graphs(const RunSpec& spec);

// Writes <run_dir>/<model>/{checkpoint.spxc, report.jsonl, timing.json}.
TrainResult cmd_train(const RunSpec& spec);

// `data` is an SPXG graph file, an IDX image file (with `labels`), or a
// manifest. Coupled checkpoints need both images and `graphs`.
EvalResult cmd_evaluate(const fs::path& checkpoint, const fs::path& data, const fs::path& labels = {},
                        const fs::path& graphs = {});

// Writes <run_dir>/sweep/sweep.jsonl.
SweepResult cmd_sweep(const RunSpec& spec, const SweepGrid& grid = {});

struct ReportRow {
  std::string dataset;
  std::optional<double> cnn;
  std::optional<double> coupled;
};

// Collects test accuracies from run directories (or their children) into
// one row per dataset: CNN vs CNN+GNN (hybrid prediction).
std::vector<ReportRow> collect_report(std::span<const fs::path> run_dirs);
std::string format_report_table(std::span<const ReportRow> rows);
std::string format_report_json(std::span<const ReportRow> rows);

// Segments one pixmap and writes the segmentation as an image where each
// superpixel is painted with its mean color and boundaries are black.
Segmentation cmd_segment(const fs::path& image, const SlicConfig& cfg, const fs::path& out);

// Writes through a temporary sibling file renamed into place on success.
void write_file_atomic(const fs::path& path, const std::string& contents);

}  // namespace spx
