#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "spx/error.hpp"
#include "spx/pipeline.hpp"
#include "spx/rng.hpp"
#include "test_util.hpp"

using namespace spx;
using spx::testing::read_bytes;
using spx::testing::TempDir;

namespace {

// Three classes, each a bright band at a different height.
LabeledDataset banded(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  LabeledDataset ds;
  ds.num_classes = 3;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % 3);
    Image img(12, 12, 1);
    for (int r = 0; r < 12; ++r) {
      for (int c = 0; c < 12; ++c) {
        const bool lit = r / 4 == label;
        img.at(0, r, c) = std::min(1.0, (lit ? 0.8 : 0.1) + rng.uniform(0.0, 0.15));
      }
    }
    ds.images.push_back(img);
    ds.labels.push_back(label);
  }
  return ds;
}

RunSpec make_spec(const TempDir& dir) {
  save_idx(banded(90, 1), dir / "train-images", dir / "train-labels");
  save_idx(banded(30, 2), dir / "test-images", dir / "test-labels");
  RunSpec spec;
  spec.name = "tiny";
  spec.data.train_images = dir / "train-images";
  spec.data.train_labels = dir / "train-labels";
  spec.data.test_images = dir / "test-images";
  spec.data.test_labels = dir / "test-labels";
  spec.slic.n_superpixels = 9;
  spec.graph.max_neighbors = 3;
  spec.train.epochs = 2;
  spec.train.batch_size = 16;
  spec.train.patience = 0;
  spec.train.optimizer.learning_rate = 1e-2;
  spec.output_dir = dir / "runs";
  spec.seed = 5;
  return spec;
}

std::string slurp(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return {bytes.begin(), bytes.end()};
}

}  // namespace

TEST_CASE("graph building is idempotent and byte-identical") {
  TempDir dir("pipe_graphs");
  const RunSpec spec = make_spec(dir);
  const auto built = cmd_build_graphs(spec);
  CHECK(built.train.size() == 90);
  CHECK(built.test.size() == 30);
  const auto first = read_bytes(built.train_path);
  const auto summary = slurp(spec.run_dir() / "graphs" / "summary.json");
  CHECK(summary.find("\"mean_nodes\"") != std::string::npos);

  fs::remove(built.train_path);
  cmd_build_graphs(spec);
  CHECK(read_bytes(built.train_path) == first);
  CHECK(slurp(spec.run_dir() / "graphs" / "summary.json") == summary);
  CHECK_FALSE(fs::exists(fs::path(built.train_path.string() + ".partial")));
}

TEST_CASE("seeded training reruns produce identical artifacts") {
  TempDir dir("pipe_train");
  RunSpec spec = make_spec(dir);
  spec.train.kind = ModelKind::coupled;
  cmd_train(spec);
  const fs::path run = spec.run_dir() / "coupled";
  const auto ckpt = read_bytes(run / "checkpoint.spxc");
  const auto report = read_bytes(run / "report.jsonl");
  const auto graphs = read_bytes(spec.run_dir() / "graphs" / "train.spxg");
  CHECK(fs::exists(run / "timing.json"));

  fs::remove_all(spec.run_dir());
  cmd_train(spec);
  CHECK(read_bytes(run / "checkpoint.spxc") == ckpt);
  CHECK(read_bytes(run / "report.jsonl") == report);
  CHECK(read_bytes(spec.run_dir() / "graphs" / "train.spxg") == graphs);

  SUBCASE("default alpha is recorded") { CHECK(slurp(run / "report.jsonl").find("\"alpha\":0.75") != std::string::npos); }
  SUBCASE("evaluate from files") {
    const auto eval = cmd_evaluate(run / "checkpoint.spxc", dir / "test-images", dir / "test-labels",
                                   spec.run_dir() / "graphs" / "test.spxg");
    CHECK(eval.count == 30);
    REQUIRE(eval.hybrid_accuracy);
    CHECK(eval.accuracy == *eval.hybrid_accuracy);
    CHECK_THROWS_AS(cmd_evaluate(run / "checkpoint.spxc", dir / "test-images", dir / "test-labels"), Error);
  }
  SUBCASE("mismatched data shape is a checkpoint error") {
    save_idx(banded(4, 3), dir / "odd-images", dir / "odd-labels");
    LabeledDataset wide;
    wide.num_classes = 3;
    wide.images.assign(4, Image(16, 16, 1));
    wide.labels = {0, 1, 2, 0};
    save_idx(wide, dir / "wide-images", dir / "wide-labels");
    RunSpec cnn = spec;
    cnn.train.kind = ModelKind::cnn;
    cmd_train(cnn);
    CHECK_THROWS_AS(cmd_evaluate(spec.run_dir() / "cnn" / "checkpoint.spxc", dir / "wide-images", dir / "wide-labels"),
                    CheckpointError);
  }
  SUBCASE("missing checkpoint") {
    CHECK_THROWS_AS(cmd_evaluate(dir / "nope.spxc", dir / "test-images", dir / "test-labels"), IoError);
  }
}

TEST_CASE("report pairs CNN and CNN+GNN accuracies per dataset") {
  TempDir dir("pipe_report");
  RunSpec spec = make_spec(dir);
  spec.train.kind = ModelKind::cnn;
  const auto cnn = cmd_train(spec);
  spec.train.kind = ModelKind::coupled;
  const auto coupled = cmd_train(spec);

  const std::vector<fs::path> runs = {spec.run_dir()};
  const auto rows = collect_report(runs);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].dataset == "tiny");
  REQUIRE(rows[0].cnn);
  REQUIRE(rows[0].coupled);
  CHECK(*rows[0].cnn == cnn.report.test->accuracy);
  CHECK(*rows[0].coupled == *coupled.report.test->hybrid_accuracy);

  const std::string table = format_report_table(rows);
  CHECK(table.find("CNN+GNN") != std::string::npos);
  CHECK(table.find("tiny") != std::string::npos);
  const std::string json = format_report_json(rows);
  CHECK(json.find("\"cnn_gnn\"") != std::string::npos);
  CHECK(format_report_json(collect_report(runs)) == json);
}

TEST_CASE("sweep writes one record per grid point") {
  TempDir dir("pipe_sweep");
  RunSpec spec = make_spec(dir);
  spec.train.kind = ModelKind::gnn;
  spec.train.epochs = 1;
  const SweepGrid grid{{16, 32}, {1e-3}, {0.0}};
  const auto result = cmd_sweep(spec, grid);
  CHECK(result.runs.size() == 2);
  const std::string log = slurp(spec.run_dir() / "sweep" / "sweep.jsonl");
  CHECK(log.find("\"best\"") != std::string::npos);
}

TEST_CASE("spec validation") {
  TempDir dir("pipe_validate");
  RunSpec spec = make_spec(dir);
  CHECK_NOTHROW(spec.validate());
  SUBCASE("missing input file") {
    spec.data.train_labels = dir / "missing";
    CHECK_THROWS_AS(spec.validate(), Error);
  }
  SUBCASE("empty manifest") {
    std::ofstream(dir / "empty.txt") << "resize: none\n";
    spec.data = DataSpec{};
    spec.data.format = "manifest";
    spec.data.train_manifest = dir / "empty.txt";
    spec.data.test_fraction = 0.2;
    CHECK_THROWS_AS(load_datasets(spec), Error);
  }
  SUBCASE("unknown format") {
    spec.data.format = "png";
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }
}

TEST_CASE("test carve-out and subsets are stratified and disjoint in size") {
  TempDir dir("pipe_carve");
  RunSpec spec = make_spec(dir);
  spec.data.test_images.clear();
  spec.data.test_labels.clear();
  spec.data.test_fraction = 0.5;
  spec.data.train_subset = 30;
  const auto data = load_datasets(spec);
  REQUIRE(data.has_test);
  CHECK(data.train.size() == 30);
  CHECK(data.test.size() == 45);
  for (int c = 0; c < 3; ++c) CHECK(std::count(data.train.labels.begin(), data.train.labels.end(), c) == 10);
}

TEST_CASE("output root") {
  TempDir dir("pipe_root");
  RunSpec spec;
  spec.name = "x";
  spec.output_dir = "runs";
  ::setenv("SPX_OUTPUT_ROOT", dir.path().c_str(), 1);
  CHECK(spec.run_dir() == dir / "runs" / "x");
  ::unsetenv("SPX_OUTPUT_ROOT");
  CHECK(spec.run_dir() == fs::path("runs") / "x");
  spec.output_dir = dir / "abs";
  ::setenv("SPX_OUTPUT_ROOT", "/elsewhere", 1);
  CHECK(spec.run_dir() == dir / "abs" / "x");
  ::unsetenv("SPX_OUTPUT_ROOT");
}

TEST_CASE("atomic writes leave nothing behind on failure") {
  TempDir dir("pipe_atomic");
  write_file_atomic(dir / "ok.txt", "hello");
  CHECK(slurp(dir / "ok.txt") == "hello");
  fs::create_directories(dir / "occupied");
  fs::create_directories(dir / "occupied" / "child");
  CHECK_THROWS(write_file_atomic(dir / "occupied", "data"));
  CHECK_FALSE(fs::exists(dir / "occupied.partial"));
}

TEST_CASE("segment writes a painted pixmap") {
  TempDir dir("pipe_segment");
  Image img(10, 10, 3);
  for (int r = 0; r < 10; ++r) {
    for (int c = 0; c < 10; ++c) img.at(0, r, c) = c < 5 ? 1.0 : 0.0;
  }
  write_pnm(img, dir / "in.ppm");
  SlicConfig cfg;
  cfg.n_superpixels = 4;
  const auto seg = cmd_segment(dir / "in.ppm", cfg, dir / "out.ppm");
  const auto out = read_pnm(dir / "out.ppm");
  CHECK(out.height == 10);
  CHECK(out.width == 10);
  CHECK(seg.num_segments >= 2);
}
