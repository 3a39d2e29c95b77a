#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spx/graphgen.hpp"
#include "spx/imaging.hpp"
#include "spx/ops.hpp"
#include "spx/tensor.hpp"

namespace spx {

using ops::Mode;

struct HybridConfig {
  double alpha = 0.75;
  void validate() const;
};

// Named views of everything a model persists: parameters plus buffers such
// as batch-norm running statistics.
using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

struct CnnOptions {
  int in_channels = 1;
  int height = 28;
  int width = 28;
  int num_classes = 10;
  // Adds a 128-unit ReLU layer before the classifier.
  bool hidden_head = false;

  friend bool operator==(const CnnOptions&, const CnnOptions&) = default;
};

// Three {conv3x3, batchnorm, relu, maxpool2} blocks with 32/64/64 channels,
// then flatten and a linear classifier.
class CnnModel {
 public:
  static constexpr std::array<int, 3> kChannels = {32, 64, 64};

  CnnModel(const CnnOptions& options, std::uint64_t seed);

  // batch: N x C x H x W. `trainable` binds parameters as gradient leaves.
  Var forward(Tape& tape, const Tensor& batch, Mode mode, bool trainable = true);

  std::vector<Parameter*> parameters();
  NamedTensors state();
  const CnnOptions& options() const { return options_; }

 private:
  CnnOptions options_;
  std::vector<Parameter> params_;
  std::array<ops::BatchNormState, 3> bn_;
};

// Graphs flattened into one disjoint union: nodes concatenated, edges made
// directed in both directions plus one self-loop per node.
struct GraphBatch {
  Tensor features;  // V x F
  std::vector<std::int32_t> src;
  std::vector<std::int32_t> dst;
  std::vector<std::int32_t> node_graph;
  std::size_t num_graphs = 0;
  std::vector<int> labels;
};

GraphBatch make_graph_batch(std::span<const SuperpixelGraph> graphs, std::span<const std::size_t> indices);
GraphBatch make_graph_batch(std::span<const SuperpixelGraph> graphs);

struct GatOutput {
  Var features;   // V x F_out
  Var attention;  // E x 1, normalized over each destination's in-edges
};

// Single-head graph attention: e_ij = LeakyReLU(a_dst . Wh_i + a_src . Wh_j)
// over edges j -> i, softmax over i's in-neighbors, h'_i = sum_j alpha_ij Wh_j.
// weight: F_in x F_out, att_src / att_dst: F_out x 1.
GatOutput gat_layer(Var node_feats, std::span<const std::int32_t> src, std::span<const std::int32_t> dst,
                    Var weight, Var att_src, Var att_dst, double negative_slope = 0.2);

struct GnnOptions {
  int in_features = 3;
  int num_classes = 10;

  friend bool operator==(const GnnOptions&, const GnnOptions&) = default;
};

// Three GAT layers (32/64/64, one head), each with a bias and ELU, then a
// mean-pool readout and a linear classifier.
class GnnModel {
 public:
  static constexpr std::array<int, 3> kChannels = {32, 64, 64};

  GnnModel(const GnnOptions& options, std::uint64_t seed);

  Var forward(Tape& tape, const GraphBatch& batch, Mode mode, bool trainable = true);

  std::vector<Parameter*> parameters();
  NamedTensors state();
  const GnnOptions& options() const { return options_; }

 private:
  GnnOptions options_;
  std::vector<Parameter> params_;
};

struct HybridLoss {
  Var total;  // alpha * cnn + (1 - alpha) * gnn
  Var cnn;
  Var gnn;
};

HybridLoss hybrid_loss(Var h_cnn, Var h_gnn, std::span<const int> targets, const HybridConfig& cfg);

struct Logits {
  Tensor h_cnn;  // N x K
  Tensor h_gnn;  // N x K
};

// Row-wise argmax; ties go to the lower class index.
std::vector<int> argmax_rows(const Tensor& logits);

// argmax_j(alpha * h_cnn + (1 - alpha) * h_gnn) per row.
std::vector<int> hybrid_predict(const Logits& logits, const HybridConfig& cfg);

enum class ModelKind { cnn, gnn, coupled };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct Architecture {
  ModelKind kind = ModelKind::coupled;
  CnnOptions cnn;
  GnnOptions gnn;
  HybridConfig hybrid;
};

struct Checkpoint {
  Architecture arch;
  std::vector<std::pair<std::string, Tensor>> tensors;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.arch.kind == b.arch.kind && a.arch.cnn == b.arch.cnn && a.arch.gnn == b.arch.gnn &&
           a.arch.hybrid.alpha == b.arch.hybrid.alpha && a.tensors == b.tensors;
  }
};

// Versioned little-endian binary: "SPXC", u32 version, architecture
// descriptor, then (name, shape, f64 data) records.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// The CNN, GNN or coupled classifier selected by an Architecture. Branches
// are seeded from independent streams, so a CNN branch initializes
// identically whether or not a GNN branch is present.
class Classifier {
 public:
  Classifier(const Architecture& arch, std::uint64_t seed);
  explicit Classifier(const Checkpoint& ckpt);

  const Architecture& arch() const { return arch_; }
  bool has_cnn() const { return cnn_.has_value(); }
  bool has_gnn() const { return gnn_.has_value(); }
  CnnModel& cnn() { return *cnn_; }
  GnnModel& gnn() { return *gnn_; }

  std::vector<Parameter*> parameters();
  Checkpoint snapshot();
  void restore(const Checkpoint& ckpt);

 private:
  NamedTensors state();

  Architecture arch_;
  std::optional<CnnModel> cnn_;
  std::optional<GnnModel> gnn_;
};

// Stacks dataset images (planar storage) into an N x C x H x W batch.
Tensor image_batch(const LabeledDataset& ds, std::span<const std::size_t> indices);

}  // namespace spx
