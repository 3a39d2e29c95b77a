// spx: superpixel graph building and coupled CNN+GNN training from the
// command line. Experiments are described by an INI file whose sections
// mirror the library configs ([data], [slic], [graph], [train], [sweep],
// [output]); command-line flags override file values.

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spx/error.hpp"
#include "spx/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigValues {
  std::map<std::string, std::vector<std::string>> entries;
  fs::path base_dir;
};

ConfigValues read_config(const fs::path& path) {
  if (!fs::exists(path)) throw spx::IoError("config file " + path.string() + " does not exist");
  ConfigValues cfg;
  cfg.base_dir = path.parent_path();
  CLI::ConfigINI ini;
  for (const auto& item : ini.from_file(path.string())) {
    if (item.name == "++" || item.name == "--") continue;
    cfg.entries[item.fullname()] = item.inputs;
  }
  return cfg;
}

class SpecBuilder {
 public:
  SpecBuilder(const ConfigValues& cfg, spx::RunSpec& spec) : cfg_(cfg), spec_(spec) {}

  void apply() {
    auto& d = spec_.data;
    str("data.format", d.format);
    path("data.train_images", d.train_images);
    path("data.train_labels", d.train_labels);
    path("data.test_images", d.test_images);
    path("data.test_labels", d.test_labels);
    path("data.root", d.root);
    path("data.train_manifest", d.train_manifest);
    path("data.test_manifest", d.test_manifest);
    num("data.test_fraction", d.test_fraction);
    num("data.train_subset", d.train_subset);
    num("data.test_subset", d.test_subset);

    auto& s = spec_.slic;
    num("slic.n_superpixels", s.n_superpixels);
    num("slic.compactness", s.compactness);
    num("slic.max_iters", s.max_iters);
    flag("slic.enforce_connectivity", s.enforce_connectivity);
    num("slic.convergence_tol", s.convergence_tol);

    auto& g = spec_.graph;
    if (auto v = take("graph.radius")) {
      if (*v != "diagonal") g.radius = parse_num<double>("graph.radius", *v);
    }
    num("graph.max_neighbors", g.max_neighbors);
    if (auto v = take("graph.features")) {
      if (*v == "grayscale") {
        g.feature_mode = spx::FeatureMode::grayscale;
      } else if (*v == "rgb") {
        g.feature_mode = spx::FeatureMode::rgb;
      } else if (*v != "auto") {
        throw spx::ConfigError("graph.features must be grayscale, rgb or auto");
      }
    }

    auto& t = spec_.train;
    if (auto v = take("train.model")) t.kind = spx::parse_model_kind(*v);
    num("train.batch_size", t.batch_size);
    num("train.epochs", t.epochs);
    num("train.patience", t.patience);
    num("train.alpha", t.alpha);
    num("train.learning_rate", t.optimizer.learning_rate);
    num("train.weight_decay", t.optimizer.weight_decay);
    num("train.beta1", t.optimizer.beta1);
    num("train.beta2", t.optimizer.beta2);
    num("train.epsilon", t.optimizer.epsilon);
    num("train.val_fraction", t.val_fraction);
    flag("train.hidden_head", t.hidden_head);
    str("train.dataset", t.dataset_name);

    list("sweep.batch_sizes", grid.batch_sizes);
    list("sweep.learning_rates", grid.learning_rates);
    list("sweep.weight_decays", grid.weight_decays);

    path("output.dir", spec_.output_dir);
    str("output.name", spec_.name);
    str("name", spec_.name);
    num("seed", spec_.seed);
    num("threads", spec_.threads);

    for (const auto& [key, value] : cfg_.entries) {
      if (!used_.count(key)) throw spx::ConfigError("unknown config key '" + key + "'");
    }
  }

  spx::SweepGrid grid;

 private:
  std::optional<std::string> take(const std::string& key) {
    used_[key] = true;
    auto it = cfg_.entries.find(key);
    if (it == cfg_.entries.end()) return std::nullopt;
    if (it->second.size() != 1) throw spx::ConfigError("config key '" + key + "' expects a single value");
    return it->second.front();
  }

  template <typename T>
  static T parse_num(const std::string& key, const std::string& text) {
    T value{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) throw spx::ConfigError("config key '" + key + "' has bad value '" + text + "'");
    return value;
  }

  template <typename T>
  void num(const std::string& key, T& out) {
    if (auto v = take(key)) out = parse_num<T>(key, *v);
  }

  void str(const std::string& key, std::string& out) {
    if (auto v = take(key)) out = *v;
  }

  void path(const std::string& key, fs::path& out) {
    if (auto v = take(key)) {
      fs::path p = *v;
      out = p.is_relative() && !p.empty() ? cfg_.base_dir / p : p;
    }
  }

  void flag(const std::string& key, bool& out) {
    if (auto v = take(key)) {
      if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") {
        out = true;
      } else if (*v == "false" || *v == "0" || *v == "no" || *v == "off") {
        out = false;
      } else {
        throw spx::ConfigError("config key '" + key + "' expects true or false");
      }
    }
  }

  template <typename T>
  void list(const std::string& key, std::vector<T>& out) {
    used_[key] = true;
    auto it = cfg_.entries.find(key);
    if (it == cfg_.entries.end()) return;
    out.clear();
    for (const auto& v : it->second) out.push_back(parse_num<T>(key, v));
  }

  const ConfigValues& cfg_;
  spx::RunSpec& spec_;
  std::map<std::string, bool> used_;
};

// Options shared by the commands that take a run description.
struct SpecOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> output;
  std::optional<std::string> name;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config,-c", config, "experiment INI file")->required();
    cmd->add_option("--seed", seed, "seed for every stochastic choice");
    cmd->add_option("--threads", threads, "worker threads for segmentation");
    cmd->add_option("--output", output, "output directory (overrides [output] dir)");
    cmd->add_option("--name", name, "run name (overrides [output] name)");
  }

  spx::RunSpec build(spx::SweepGrid* grid = nullptr) const {
    spx::RunSpec spec;
    const ConfigValues values = read_config(config);
    SpecBuilder builder(values, spec);
    builder.apply();
    if (grid) *grid = builder.grid;
    if (seed) spec.seed = *seed;
    if (threads) spec.threads = *threads;
    if (output) spec.output_dir = *output;
    if (name) spec.name = *name;
    return spec;
  }
};

void print_eval(const spx::EvalResult& r) {
  std::printf("examples: %zu\nloss: %.6f\naccuracy: %.2f\n", r.count, r.loss, r.accuracy);
  if (r.cnn_accuracy) std::printf("cnn_accuracy: %.2f\n", *r.cnn_accuracy);
  if (r.gnn_accuracy) std::printf("gnn_accuracy: %.2f\n", *r.gnn_accuracy);
  if (r.hybrid_accuracy) std::printf("hybrid_accuracy: %.2f\n", *r.hybrid_accuracy);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Superpixel graphs and coupled CNN+GNN image classification"};
  app.require_subcommand(1);

  SpecOptions build_opts;
  auto* build = app.add_subcommand("build-graphs", "segment a dataset and write its superpixel graphs");
  build_opts.attach(build);

  SpecOptions train_opts;
  std::optional<std::string> model;
  std::optional<double> alpha;
  std::optional<int> epochs;
  auto* train = app.add_subcommand("train", "train a cnn, gnn or coupled model");
  train_opts.attach(train);
  train->add_option("--model,-m", model, "cnn | gnn | coupled")->check(CLI::IsMember({"cnn", "gnn", "coupled"}));
  train->add_option("--alpha", alpha, "hybrid loss weight of the CNN branch");
  train->add_option("--epochs", epochs, "maximum epochs");

  std::string checkpoint, data, labels, graphs;
  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data, "SPXG graph file, IDX image file or manifest")->required();
  eval->add_option("--labels", labels, "IDX label file for IDX image data");
  eval->add_option("--graphs", graphs, "SPXG file matching the images (coupled checkpoints)");

  SpecOptions sweep_opts;
  std::optional<std::string> sweep_model;
  auto* sweep = app.add_subcommand("sweep", "grid search over batch size, learning rate and weight decay");
  sweep_opts.attach(sweep);
  sweep->add_option("--model,-m", sweep_model, "cnn | gnn | coupled")->check(CLI::IsMember({"cnn", "gnn", "coupled"}));

  std::vector<std::string> run_dirs;
  bool report_json = false;
  std::string report_out;
  auto* report = app.add_subcommand("report", "tabulate CNN vs CNN+GNN test accuracy per dataset");
  report->add_option("runs", run_dirs, "run directories")->required();
  report->add_flag("--json", report_json, "print the machine-readable table instead");
  report->add_option("--out", report_out, "also write the JSON table to this file");

  std::string seg_image, seg_out;
  spx::SlicConfig seg_cfg;
  auto* segment = app.add_subcommand("segment", "write a superpixel visualization of one pixmap");
  segment->add_option("--image", seg_image, "input PGM/PPM")->required();
  segment->add_option("--out", seg_out, "output PGM/PPM")->required();
  segment->add_option("--n", seg_cfg.n_superpixels, "target superpixel count");
  segment->add_option("--compactness", seg_cfg.compactness, "color/space trade-off m");

  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*build) {
      const auto built = spx::cmd_build_graphs(build_opts.build());
      const auto s = spx::summarize_graphs(built.train);
      std::printf("train graphs: %zu (mean nodes %.2f, mean edges %.2f) -> %s\n", s.count, s.mean_nodes, s.mean_edges,
                  built.train_path.string().c_str());
      if (!built.test.empty()) {
        const auto t = spx::summarize_graphs(built.test);
        std::printf("test graphs: %zu (mean nodes %.2f, mean edges %.2f) -> %s\n", t.count, t.mean_nodes,
                    t.mean_edges, built.test_path.string().c_str());
      }
    } else if (*train) {
      auto spec = train_opts.build();
      if (model) spec.train.kind = spx::parse_model_kind(*model);
      if (alpha) spec.train.alpha = *alpha;
      if (epochs) spec.train.epochs = *epochs;
      const auto result = spx::cmd_train(spec);
      const auto& r = result.report;
      std::printf("model: %s\nepochs run: %zu\nbest epoch: %d\nbest val accuracy: %.2f\n",
                  spx::to_string(spec.train.kind).c_str(), r.epochs.size(), r.best_epoch, r.best_val_accuracy);
      if (r.test) {
        std::printf("test ");
        print_eval(*r.test);
      }
      std::printf("outputs: %s\n", (spec.run_dir() / spx::to_string(spec.train.kind)).string().c_str());
    } else if (*eval) {
      print_eval(spx::cmd_evaluate(checkpoint, data, labels, graphs));
    } else if (*sweep) {
      spx::SweepGrid grid;
      auto spec = sweep_opts.build(&grid);
      if (sweep_model) spec.train.kind = spx::parse_model_kind(*sweep_model);
      const auto result = spx::cmd_sweep(spec, grid);
      const auto& best = result.best_config;
      std::printf("best: batch %d, lr %g, weight decay %g (val accuracy %.2f)\n", best.batch_size,
                  best.optimizer.learning_rate, best.optimizer.weight_decay,
                  result.runs[result.best_index].best_val_accuracy);
    } else if (*report) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto rows = spx::collect_report(dirs);
      const std::string json = spx::format_report_json(rows);
      std::cout << (report_json ? json : spx::format_report_table(rows));
      if (!report_out.empty()) spx::write_file_atomic(report_out, json);
    } else if (*segment) {
      const auto seg = spx::cmd_segment(seg_image, seg_cfg, seg_out);
      std::printf("segments: %d -> %s\n", seg.num_segments, seg_out.c_str());
    }
  } catch (const spx::Error& e) {
    const std::string module = e.module().empty() ? "cli" : e.module();
    std::fprintf(stderr, "spx %s: [%s] %s\n", command.c_str(), module.c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "spx %s: %s\n", command.c_str(), e.what());
    return 1;
  }
  return 0;
}
