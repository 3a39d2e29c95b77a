// Acceptance suite: one PASS/FAIL line per criterion. Criterion 5 trains
// on MNIST and takes several minutes; the others finish in seconds.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string_view>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"
#include "spx/error.hpp"
#include "spx/pipeline.hpp"

using namespace spx;
using spx::testing::gradcheck;
using spx::testing::param_gradcheck;
using spx::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "failed: " << what << "; ";
    }
  }
};

fs::path g_mnist_dir;
fs::path g_work_dir;

std::vector<std::int32_t> random_ids(Rng& rng, std::size_t n, std::size_t range) {
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(range));
  return ids;
}

std::string digest(const fs::path& path) {
  const auto bytes = spx::testing::read_bytes(path);
  const std::string_view view(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016zx", std::hash<std::string_view>{}(view));
  return buf;
}

LabeledDataset mnist_sample(std::size_t count, std::uint64_t seed) {
  const auto pool = load_idx(g_mnist_dir / "images-idx3-ubyte", g_mnist_dir / "labels-idx1-ubyte");
  const double fractions[] = {static_cast<double>(count) / pool.size(), 1.0 - static_cast<double>(count) / pool.size()};
  return stratified_split(pool, fractions, seed).front();
}

// ---------------------------------------------------------------------------
// 1. Gradients against central finite differences.

Outcome gradient_correctness() {
  Outcome out;
  double worst = 0.0;
  int checks = 0;
  auto check = [&](const std::string& what, double err) {
    ++checks;
    worst = std::max(worst, err);
    out.require(err < kGradTol, what + " rel err " + std::to_string(err));
  };
  auto prim = [&](const std::string& what, const spx::testing::GradFn& fn, const std::vector<Tensor>& inputs) {
    check(what, gradcheck(fn, inputs).worst_rel_error);
  };
  Rng rng(101);

  const Shape elementwise[] = {{3}, {2, 5}, {2, 3, 4}};
  for (const auto& s : elementwise) {
    const Tensor a = random_tensor(s, rng), b = random_tensor(s, rng);
    prim("add", [](Tape&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); }, {a, b});
    prim("sub", [](Tape&, const std::vector<Var>& v) { return ops::sub(v[0], v[1]); }, {a, b});
    prim("mul", [](Tape&, const std::vector<Var>& v) { return ops::mul(v[0], v[1]); }, {a, b});
    prim("scale", [](Tape&, const std::vector<Var>& v) { return ops::scale(v[0], 1.7); }, {a});
    prim("sum", [](Tape&, const std::vector<Var>& v) { return ops::sum(ops::mul(v[0], v[0])); }, {a});
    prim("mean", [](Tape&, const std::vector<Var>& v) { return ops::mean(ops::mul(v[0], v[1])); }, {a, b});
    prim("reshape", [n = a.numel()](Tape&, const std::vector<Var>& v) { return ops::reshape(v[0], {n}); }, {a});
    prim("relu", [](Tape&, const std::vector<Var>& v) { return ops::relu(v[0]); }, {a});
    prim("elu", [](Tape&, const std::vector<Var>& v) { return ops::elu(v[0]); }, {a});
    prim("leaky_relu", [](Tape&, const std::vector<Var>& v) { return ops::leaky_relu(v[0], 0.2); }, {a});
  }

  const std::size_t mats[][3] = {{1, 1, 1}, {3, 4, 2}, {5, 2, 6}};
  for (auto [m, k, n] : mats) {
    prim("matmul", [](Tape&, const std::vector<Var>& v) { return ops::matmul(v[0], v[1]); },
         {random_tensor({m, k}, rng), random_tensor({k, n}, rng)});
    prim("linear", [](Tape&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); },
         {random_tensor({m, k}, rng), random_tensor({n, k}, rng), random_tensor({n}, rng)});
    prim("add_bias", [](Tape&, const std::vector<Var>& v) { return ops::add_bias(v[0], v[1]); },
         {random_tensor({m, k}, rng), random_tensor({k}, rng)});
  }

  struct ConvCase {
    Shape x, w;
    int stride, padding;
  };
  const ConvCase convs[] = {{{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1}, {{1, 2, 5, 7}, {3, 2, 3, 3}, 2, 0},
                            {{3, 1, 4, 4}, {2, 1, 1, 1}, 1, 0}};
  for (const auto& c : convs) {
    prim("conv2d", [c](Tape&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], c.stride, c.padding); },
         {random_tensor(c.x, rng), random_tensor(c.w, rng), random_tensor({c.w[0]}, rng)});
  }

  const Shape bn_shapes[] = {{4, 3, 2, 2}, {5, 2}, {2, 4, 3, 1}};
  for (const auto& s : bn_shapes) {
    const std::size_t c = s[1];
    for (auto mode : {ops::Mode::train, ops::Mode::eval}) {
      prim(mode == ops::Mode::train ? "batchnorm(train)" : "batchnorm(eval)",
           [c, mode](Tape&, const std::vector<Var>& v) {
             ops::BatchNormState state(c);
             state.running_mean.fill(0.3);
             state.running_var.fill(1.7);
             return ops::batchnorm(v[0], v[1], v[2], state, mode);
           },
           {random_tensor(s, rng), random_tensor({c}, rng, 0.5, 2.0), random_tensor({c}, rng)});
    }
  }

  const Shape pools[] = {{1, 1, 4, 4}, {2, 3, 6, 4}, {1, 2, 5, 5}};
  for (const auto& s : pools) {
    prim("maxpool2d", [](Tape&, const std::vector<Var>& v) { return ops::maxpool2d(v[0], 2); }, {random_tensor(s, rng)});
  }

  const std::size_t ce[][2] = {{1, 2}, {4, 10}, {7, 3}};
  for (auto [n, k] : ce) {
    std::vector<int> targets(n);
    for (auto& t : targets) t = static_cast<int>(rng.below(k));
    prim("softmax_cross_entropy",
         [targets](Tape&, const std::vector<Var>& v) { return ops::softmax_cross_entropy(v[0], targets); },
         {random_tensor({n, k}, rng, -3.0, 3.0)});
  }

  const std::size_t graphs[][3] = {{3, 5, 2}, {6, 20, 4}, {1, 4, 3}};  // nodes, edges, features
  for (auto [v, e, f] : graphs) {
    const auto src = random_ids(rng, e, v), dst = random_ids(rng, e, v);
    prim("gather_rows", [src](Tape&, const std::vector<Var>& x) { return ops::gather_rows(x[0], src); },
         {random_tensor({v, f}, rng)});
    prim("row_scale", [](Tape&, const std::vector<Var>& x) { return ops::row_scale(x[0], x[1]); },
         {random_tensor({e, f}, rng), random_tensor({e, 1}, rng)});
    prim("edge_aggregate",
         [src, dst, v](Tape&, const std::vector<Var>& x) { return ops::edge_aggregate(x[0], x[1], src, dst, v); },
         {random_tensor({v, f}, rng), random_tensor({e, 1}, rng)});
    for (auto op : {ops::Reduce::sum, ops::Reduce::mean, ops::Reduce::max, ops::Reduce::softmax}) {
      prim("scatter_segment",
           [dst, v, op](Tape&, const std::vector<Var>& x) { return ops::scatter_segment(op, x[0], dst, v); },
           {random_tensor({e, f}, rng)});
    }
  }

  // Whole CNN: eval-mode batch norm so conv biases have a real gradient.
  struct CnnCase {
    std::size_t n;
    CnnOptions opts;
  };
  const CnnCase cnns[] = {{2, {1, 8, 8, 4, false}}, {3, {3, 8, 12, 4, false}}, {2, {1, 16, 8, 4, true}}};
  for (const auto& c : cnns) {
    CnnModel cnn(c.opts, 5);
    const Tensor x = random_tensor({c.n, static_cast<std::size_t>(c.opts.in_channels),
                                    static_cast<std::size_t>(c.opts.height), static_cast<std::size_t>(c.opts.width)},
                                   rng);
    std::vector<int> targets(c.n);
    for (auto& t : targets) t = static_cast<int>(rng.below(4));
    check("cnn", param_gradcheck(cnn.parameters(), [&](Tape& tape) {
            return ops::softmax_cross_entropy(cnn.forward(tape, x, Mode::eval, true), targets);
          }, 24).worst_rel_error);
  }

  const std::size_t gats[][3] = {{4, 3, 5}, {6, 2, 3}, {3, 5, 4}};  // nodes, in, out
  for (auto [v, fin, fout] : gats) {
    const auto g = spx::testing::random_graph(rng, static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(fin), 0.5);
    const auto batch = make_graph_batch(std::span(&g, 1));
    prim("gat_layer",
         [&batch](Tape&, const std::vector<Var>& x) {
           return gat_layer(x[0], batch.src, batch.dst, x[1], x[2], x[3]).features;
         },
         {random_tensor({v, fin}, rng), random_tensor({fin, fout}, rng), random_tensor({fout, 1}, rng),
          random_tensor({fout, 1}, rng)});
  }

  for (int trial = 0; trial < 3; ++trial) {
    Architecture arch;
    arch.cnn = CnnOptions{1, 8, 8, 3, trial == 2};
    arch.gnn = GnnOptions{3, 3};
    arch.hybrid.alpha = 0.25 + 0.25 * trial;
    Classifier model(arch, 40 + trial);
    const std::size_t n = 2 + trial;
    const Tensor images = random_tensor({n, 1, 8, 8}, rng, 0, 1);
    std::vector<SuperpixelGraph> gs;
    std::vector<int> targets;
    for (std::size_t i = 0; i < n; ++i) {
      gs.push_back(spx::testing::random_graph(rng, 3 + static_cast<std::uint32_t>(rng.below(5))));
      targets.push_back(static_cast<int>(rng.below(3)));
    }
    const auto batch = make_graph_batch(gs);
    check("coupled", param_gradcheck(model.parameters(), [&](Tape& tape) {
            Var hc = model.cnn().forward(tape, images, Mode::eval, true);
            Var hg = model.gnn().forward(tape, batch, Mode::train, true);
            return hybrid_loss(hc, hg, targets, arch.hybrid).total;
          }, 24).worst_rel_error);
  }

  out.detail << checks << " checks, worst relative error " << worst;
  return out;
}

// ---------------------------------------------------------------------------
// 2. Radius graph against the all-pairs rule.

Outcome radius_graph_oracle() {
  Outcome out;
  Rng rng(202);
  int mismatches = 0;
  std::size_t edges = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(50);
    const bool ties = trial % 2 == 0;
    std::vector<SegmentStats> stats(n);
    std::vector<std::pair<double, double>> pts(n);
    for (std::size_t i = 0; i < n; ++i) {
      pts[i] = ties ? std::pair{0.5 * static_cast<double>(rng.below(56)), 0.5 * static_cast<double>(rng.below(56))}
                    : std::pair{rng.uniform(0, 28), rng.uniform(0, 28)};
      stats[i].centroid_row = pts[i].first;
      stats[i].centroid_col = pts[i].second;
      stats[i].mean_color = {rng.uniform()};
      stats[i].pixel_count = 1;
    }
    GraphConfig cfg;
    cfg.radius = ties ? 0.5 * static_cast<double>(1 + rng.below(24)) : rng.uniform(0.5, 20);
    cfg.max_neighbors = 1 + static_cast<int>(rng.below(8));
    const auto g = build_radius_graph(stats, 28, 28, cfg, 0);
    const auto want = spx::testing::brute_force_edges(pts, *cfg.radius, cfg.max_neighbors);
    edges += want.size();
    if (g.edges != want) ++mismatches;
  }
  out.require(mismatches == 0, std::to_string(mismatches) + " of 500 configurations differ");
  out.detail << "500 configurations, " << edges << " oracle edges, " << mismatches << " mismatches";
  return out;
}

// ---------------------------------------------------------------------------
// 3. SLIC partition, connectivity, determinism and hard edges.

Outcome slic_properties() {
  Outcome out;
  Rng rng(303);
  int images = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const int h = 12 + static_cast<int>(rng.below(30)), w = 12 + static_cast<int>(rng.below(30));
    const auto img = spx::testing::blob_image(rng, h, w, trial % 3 == 0 ? 3 : 1);
    SlicConfig cfg;
    cfg.n_superpixels = 2 + static_cast<int>(rng.below(std::min(100, h * w / 4)));
    cfg.compactness = rng.uniform(1.0, 40.0);
    const auto seg = slic_segment(img, cfg);
    std::vector<char> used(seg.num_segments, 0);
    bool in_range = seg.labels.size() == static_cast<std::size_t>(h) * w;
    for (auto l : seg.labels) {
      in_range = in_range && l >= 0 && l < seg.num_segments;
      if (in_range) used[l] = 1;
    }
    out.require(in_range && std::count(used.begin(), used.end(), 1) == seg.num_segments,
                "partition, image " + std::to_string(trial));
    out.require(spx::testing::flood_connected(seg), "connectivity, image " + std::to_string(trial));
    out.require(slic_segment(img, cfg).labels == seg.labels, "determinism, image " + std::to_string(trial));
    ++images;
  }

  int boundary_cases = 0;
  for (int split = 5; split < 23; split += 3) {
    for (int n : {4, 8, 16, 32}) {
      Image img(28, 28, 1);
      for (int r = 0; r < 28; ++r) {
        for (int c = 0; c < 28; ++c) img.at(0, r, c) = c < split ? 0.0 : 1.0;
      }
      SlicConfig cfg;
      cfg.n_superpixels = n;
      const auto seg = slic_segment(img, cfg);
      std::vector<int> side(seg.num_segments, -1);
      bool clean = true;
      for (int r = 0; r < 28; ++r) {
        for (int c = 0; c < 28; ++c) {
          const int s = c < split ? 0 : 1;
          int& seen = side[seg.at(r, c)];
          if (seen == -1) seen = s;
          clean = clean && seen == s;
        }
      }
      out.require(clean, "segment straddles the edge at column " + std::to_string(split) + ", n=" + std::to_string(n));
      ++boundary_cases;
    }
  }
  out.detail << images << " fuzzed images, " << boundary_cases << " black/white edge cases";
  return out;
}

// ---------------------------------------------------------------------------
// 4. Hybrid-loss algebra.

Outcome hybrid_algebra() {
  Outcome out;
  Rng rng(404);
  double affine_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(16), k = 2 + rng.below(9);
    const Tensor hc = random_tensor({n, k}, rng, -4, 4), hg = random_tensor({n, k}, rng, -4, 4);
    std::vector<int> t(n);
    for (auto& v : t) v = static_cast<int>(rng.below(k));
    auto loss = [&](double a) {
      Tape tape;
      return hybrid_loss(tape.constant(hc), tape.constant(hg), t, HybridConfig{a}).total.value().item();
    };
    const double l0 = loss(0.0), l1 = loss(1.0);
    for (double a : {0.25, 0.5, 0.75}) affine_err = std::max(affine_err, std::abs(loss(a) - ((1 - a) * l0 + a * l1)));

    Logits logits{hc, hg};
    out.require(hybrid_predict(logits, HybridConfig{1.0}) == argmax_rows(hc), "alpha=1 prediction");
    out.require(hybrid_predict(logits, HybridConfig{0.0}) == argmax_rows(hg), "alpha=0 prediction");
  }
  out.require(affine_err < 1e-12, "affine in alpha");

  const auto images = mnist_sample(256, 7);
  SlicConfig slic;
  slic.n_superpixels = 75;
  GraphConfig graph;
  graph.max_neighbors = 5;
  const auto graphs = radius_graph_dataset(images, slic, graph);
  std::vector<std::vector<Tensor>> cnn_steps, coupled_steps;
  bool gnn_grads_zero = true;
  auto record = [](std::vector<std::vector<Tensor>>& into) {
    return [&into](Classifier& model, std::int64_t) {
      std::vector<Tensor> values;
      for (auto* p : model.cnn().parameters()) values.push_back(p->value);
      into.push_back(std::move(values));
    };
  };
  TrainConfig cfg;
  cfg.kind = ModelKind::cnn;
  cfg.batch_size = 32;
  cfg.epochs = 2;
  cfg.patience = 0;
  cfg.seed = 11;
  train_model(TrainData{&images, nullptr}, cfg, nullptr, record(cnn_steps));
  cfg.kind = ModelKind::coupled;
  cfg.alpha = 1.0;
  train_model(TrainData{&images, &graphs}, cfg, nullptr, [&](Classifier& model, std::int64_t step) {
    record(coupled_steps)(model, step);
    for (auto* p : model.gnn().parameters()) {
      for (double g : p->grad.data()) gnn_grads_zero = gnn_grads_zero && g == 0.0;
    }
  });
  out.require(!cnn_steps.empty() && cnn_steps == coupled_steps, "bit-identical CNN trajectories");
  out.require(gnn_grads_zero, "GNN gradients vanish at alpha=1");
  out.detail << "max affine deviation " << affine_err << ", " << cnn_steps.size()
             << " optimizer steps compared bit-for-bit";
  return out;
}

// ---------------------------------------------------------------------------
// 5. Desk-scale MNIST.

Outcome desk_scale_mnist() {
  Outcome out;
  RunSpec spec;
  spec.name = "mnist_desk";
  spec.data.train_images = g_mnist_dir / "images-idx3-ubyte";
  spec.data.train_labels = g_mnist_dir / "labels-idx1-ubyte";
  spec.data.test_fraction = 0.5;  // 10000-digit pool split in half per class
  spec.slic.n_superpixels = 75;
  spec.graph.max_neighbors = 5;
  spec.train.alpha = 0.75;
  spec.train.optimizer.learning_rate = 1e-3;
  spec.train.batch_size = 128;
  spec.train.epochs = 15;
  spec.output_dir = g_work_dir;
  spec.seed = 2024;

  std::map<ModelKind, EvalResult> test;
  for (auto kind : {ModelKind::cnn, ModelKind::gnn, ModelKind::coupled}) {
    spec.train.kind = kind;
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = cmd_train(spec);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    test[kind] = *result.report.test;
    std::printf("  %-7s epochs %zu, best epoch %d, test accuracy %.2f (%.0f s)\n", to_string(kind).c_str(),
                result.report.epochs.size(), result.report.best_epoch, result.report.test->accuracy, secs);
    std::fflush(stdout);
  }
  const double cnn = test[ModelKind::cnn].accuracy;
  const double gnn = test[ModelKind::gnn].accuracy;
  const double hybrid = *test[ModelKind::coupled].hybrid_accuracy;
  out.require(cnn >= 95.0, "CNN accuracy >= 95");
  out.require(std::abs(hybrid - cnn) <= 3.0, "hybrid within 3 points of CNN");
  out.require(gnn >= 60.0, "GNN-only accuracy >= 60");
  const auto train_size = load_graphs(spec.run_dir() / "graphs" / "train.spxg").size();
  out.detail << "train " << train_size << "/test " << test[ModelKind::cnn].count << " images; CNN "
             << cnn << ", CNN+GNN hybrid " << hybrid << " (branch: CNN " << *test[ModelKind::coupled].cnn_accuracy
             << ", GNN " << *test[ModelKind::coupled].gnn_accuracy << "), GNN-only " << gnn;
  return out;
}

// ---------------------------------------------------------------------------
// 6. GNN invariances and attention normalization.

Outcome gnn_invariance() {
  Outcome out;
  Rng rng(606);
  GnnModel gnn(GnnOptions{}, 3);
  auto logits = [&](std::span<const SuperpixelGraph> gs) {
    Tape tape;
    return gnn.forward(tape, make_graph_batch(gs), Mode::eval, false).value();
  };
  double perm_err = 0.0, batch_err = 0.0, attn_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto g = spx::testing::random_graph(rng, 1 + static_cast<std::uint32_t>(rng.below(80)), 3, rng.uniform(0.02, 0.5));
    std::vector<std::uint32_t> perm(g.num_nodes);
    std::iota(perm.begin(), perm.end(), 0u);
    rng.shuffle(std::span<std::uint32_t>(perm));
    const auto p = spx::testing::permute_graph(g, perm);
    const Tensor a = logits(std::span(&g, 1)), b = logits(std::span(&p, 1));
    for (std::size_t i = 0; i < a.numel(); ++i) perm_err = std::max(perm_err, std::abs(a[i] - b[i]));

    const auto batch = make_graph_batch(std::span(&g, 1));
    Tape tape;
    auto layer = gat_layer(tape.constant(batch.features), batch.src, batch.dst,
                           tape.constant(random_tensor({3, 16}, rng, -3, 3)),
                           tape.constant(random_tensor({16, 1}, rng, -3, 3)),
                           tape.constant(random_tensor({16, 1}, rng, -3, 3)));
    std::vector<double> sums(g.num_nodes, 0.0);
    for (std::size_t e = 0; e < batch.dst.size(); ++e) sums[batch.dst[e]] += layer.attention.value()[e];
    for (double s : sums) attn_err = std::max(attn_err, std::abs(s - 1.0));
  }
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<SuperpixelGraph> gs;
    for (int i = 0; i < 16; ++i) gs.push_back(spx::testing::random_graph(rng, 1 + static_cast<std::uint32_t>(rng.below(60))));
    const Tensor together = logits(gs);
    const std::size_t k = together.dim(1);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      const Tensor alone = logits(std::span(&gs[i], 1));
      for (std::size_t j = 0; j < k; ++j) batch_err = std::max(batch_err, std::abs(together[i * k + j] - alone[j]));
    }
  }
  out.require(perm_err <= 1e-9, "permutation invariance");
  out.require(batch_err <= 1e-9, "batching invariance");
  out.require(attn_err <= 1e-9, "attention sums to 1");
  out.detail << "max deviation: permutation " << perm_err << ", batching " << batch_err << ", attention sum " << attn_err;
  return out;
}

// ---------------------------------------------------------------------------
// 7. Determinism and persistence.

Outcome determinism_and_persistence() {
  Outcome out;
  RunSpec spec;
  spec.data.train_images = g_mnist_dir / "images-idx3-ubyte";
  spec.data.train_labels = g_mnist_dir / "labels-idx1-ubyte";
  spec.data.test_fraction = 0.5;
  spec.data.train_subset = 300;
  spec.data.test_subset = 100;
  spec.slic.n_superpixels = 75;
  spec.graph.max_neighbors = 5;
  spec.train.epochs = 2;
  spec.train.batch_size = 64;
  spec.train.kind = ModelKind::coupled;
  spec.seed = 77;

  spec.name = "repeat";
  const char* artifacts[] = {"graphs/train.spxg", "graphs/test.spxg", "graphs/summary.json", "coupled/checkpoint.spxc",
                             "coupled/report.jsonl", "table.json"};
  std::vector<std::string> first;
  for (const char* dir : {"repeat_a", "repeat_b"}) {
    spec.output_dir = g_work_dir / dir;
    fs::remove_all(spec.run_dir());
    cmd_train(spec);
    const std::vector<fs::path> runs = {spec.run_dir()};
    write_file_atomic(spec.run_dir() / "table.json", format_report_json(collect_report(runs)));
    std::vector<std::string> hashes;
    for (const char* a : artifacts) hashes.push_back(digest(spec.run_dir() / a));
    if (first.empty()) {
      first = hashes;
    } else {
      for (std::size_t i = 0; i < hashes.size(); ++i) out.require(hashes[i] == first[i], std::string(artifacts[i]) + " differs");
    }
  }

  const fs::path run = g_work_dir / "repeat_a" / "repeat";
  const auto ckpt = load_checkpoint(run / "coupled" / "checkpoint.spxc");
  save_checkpoint(ckpt, run / "resaved.spxc");
  out.require(load_checkpoint(run / "resaved.spxc") == ckpt, "checkpoint round-trip");
  out.require(digest(run / "resaved.spxc") == first[3], "checkpoint re-save bytes");
  const auto graphs = load_graphs(run / "graphs" / "train.spxg");
  save_graphs(graphs, run / "resaved.spxg");
  out.require(load_graphs(run / "resaved.spxg") == graphs, "SPXG round-trip");
  out.require(digest(run / "resaved.spxg") == first[0], "SPXG re-save bytes");

  out.detail << "artifacts";
  for (std::size_t i = 0; i < first.size(); ++i) out.detail << " " << artifacts[i] << "=" << first[i];
  return out;
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string mnist = SPX_MNIST_DIR;
  std::string work = (fs::temp_directory_path() / "spx_acceptance").string();
  app.add_option("--only", only, "criterion numbers to run (default: all)");
  app.add_option("--mnist", mnist, "directory with MNIST IDX files");
  app.add_option("--work", work, "scratch directory for pipeline runs");
  CLI11_PARSE(app, argc, argv);
  g_mnist_dir = mnist;
  g_work_dir = work;
  fs::create_directories(g_work_dir);

  const Criterion criteria[] = {
      {1, "gradient correctness", gradient_correctness},
      {2, "radius-graph oracle", radius_graph_oracle},
      {3, "SLIC properties", slic_properties},
      {4, "hybrid-loss algebra", hybrid_algebra},
      {5, "desk-scale MNIST", desk_scale_mnist},
      {6, "GNN invariance and attention normalization", gnn_invariance},
      {7, "determinism and persistence", determinism_and_persistence},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome result;
    try {
      result = c.run();
    } catch (const std::exception& e) {
      result.pass = false;
      result.detail << "error: " << e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", result.pass ? "PASS" : "FAIL", c.id, c.title,
                result.detail.str().c_str(), secs);
    std::fflush(stdout);
    failed += result.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
