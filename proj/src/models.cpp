#include "spx/models.hpp"

#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "spx/error.hpp"
#include "spx/rng.hpp"

namespace spx {

namespace fs = std::filesystem;

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'P', 'X', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

// Kaiming-uniform weight (ReLU gain) plus fan-in scaled bias.
std::pair<Parameter, Parameter> kaiming_layer(const std::string& name, Shape weight_shape, std::size_t fan_in,
                                              Rng& rng) {
  const std::size_t out = weight_shape.front();
  Parameter w(name + ".weight", uniform_tensor(std::move(weight_shape), std::sqrt(6.0 / fan_in), rng));
  Parameter b(name + ".bias", uniform_tensor({out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng));
  return {std::move(w), std::move(b)};
}

Var bind(Tape& tape, Parameter& p, bool trainable) {
  return trainable ? tape.parameter(p) : tape.constant(p.value);
}

}  // namespace

void HybridConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
}

// ---------------------------------------------------------------------------
// CNN

CnnModel::CnnModel(const CnnOptions& options, std::uint64_t seed) : options_(options) {
  if (options.height < 8 || options.width < 8) {
    throw ShapeError("CNN input must be at least 8x8 for three 2x pools, got " + std::to_string(options.height) +
                     "x" + std::to_string(options.width));
  }
  if (options.in_channels < 1 || options.num_classes < 1) throw ConfigError("CNN needs channels and classes");
  Rng rng(seed);
  int in = options.in_channels;
  for (int b = 0; b < 3; ++b) {
    const auto out = static_cast<std::size_t>(kChannels[b]);
    const std::string prefix = "cnn.block" + std::to_string(b + 1);
    auto [w, bias] = kaiming_layer(prefix + ".conv", {out, static_cast<std::size_t>(in), 3, 3},
                                   static_cast<std::size_t>(in) * 9, rng);
    params_.push_back(std::move(w));
    params_.push_back(std::move(bias));
    params_.emplace_back(prefix + ".bn.weight", Tensor({out}, 1.0));
    params_.emplace_back(prefix + ".bn.bias", Tensor({out}, 0.0));
    bn_[b] = ops::BatchNormState(out);
    in = kChannels[b];
  }
  const std::size_t flat = static_cast<std::size_t>(kChannels[2]) * (options.height / 8) * (options.width / 8);
  std::size_t head_in = flat;
  if (options.hidden_head) {
    auto [w, bias] = kaiming_layer("cnn.hidden", {128, flat}, flat, rng);
    params_.push_back(std::move(w));
    params_.push_back(std::move(bias));
    head_in = 128;
  }
  auto [w, bias] = kaiming_layer("cnn.fc", {static_cast<std::size_t>(options.num_classes), head_in}, head_in, rng);
  params_.push_back(std::move(w));
  params_.push_back(std::move(bias));
}

Var CnnModel::forward(Tape& tape, const Tensor& batch, Mode mode, bool trainable) {
  if (batch.ndim() != 4 || batch.dim(1) != static_cast<std::size_t>(options_.in_channels) ||
      batch.dim(2) != static_cast<std::size_t>(options_.height) ||
      batch.dim(3) != static_cast<std::size_t>(options_.width)) {
    throw ShapeError("CNN expects N x " + std::to_string(options_.in_channels) + " x " +
                     std::to_string(options_.height) + " x " + std::to_string(options_.width) + ", got " +
                     shape_str(batch.shape()));
  }
  Var h = tape.constant(batch);
  for (int b = 0; b < 3; ++b) {
    Var w = bind(tape, params_[4 * b], trainable);
    Var bias = bind(tape, params_[4 * b + 1], trainable);
    Var gamma = bind(tape, params_[4 * b + 2], trainable);
    Var beta = bind(tape, params_[4 * b + 3], trainable);
    h = ops::conv2d(h, w, bias, 1, 1);
    h = ops::batchnorm(h, gamma, beta, bn_[b], mode);
    h = ops::relu(h);
    h = ops::maxpool2d(h, 2);
  }
  const std::size_t n = batch.dim(0);
  h = ops::reshape(h, {n, h.value().numel() / n});
  std::size_t next = 12;
  if (options_.hidden_head) {
    h = ops::relu(ops::linear(h, bind(tape, params_[next], trainable), bind(tape, params_[next + 1], trainable)));
    next += 2;
  }
  return ops::linear(h, bind(tape, params_[next], trainable), bind(tape, params_[next + 1], trainable));
}

std::vector<Parameter*> CnnModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

NamedTensors CnnModel::state() {
  NamedTensors out;
  for (auto& p : params_) out.emplace_back(p.name, &p.value);
  for (int b = 0; b < 3; ++b) {
    const std::string prefix = "cnn.block" + std::to_string(b + 1) + ".bn.";
    out.emplace_back(prefix + "running_mean", &bn_[b].running_mean);
    out.emplace_back(prefix + "running_var", &bn_[b].running_var);
  }
  return out;
}

Tensor image_batch(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  if (ds.images.empty()) throw ShapeError("image batch from an empty dataset");
  const Image& first = ds.images.front();
  const std::size_t per = first.pixels.size();
  Tensor out({indices.size(), static_cast<std::size_t>(first.channels), static_cast<std::size_t>(first.height),
              static_cast<std::size_t>(first.width)});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Image& img = ds.images.at(indices[i]);
    if (img.pixels.size() != per) throw ShapeError("dataset images differ in shape");
    std::copy(img.pixels.begin(), img.pixels.end(), out.ptr() + i * per);
  }
  return out;
}

// ---------------------------------------------------------------------------
// GNN

GraphBatch make_graph_batch(std::span<const SuperpixelGraph> graphs, std::span<const std::size_t> indices) {
  GraphBatch batch;
  batch.num_graphs = indices.size();
  if (indices.empty()) throw EmptyGraphError("graph batch with no graphs");
  const std::size_t dim = graphs[indices.front()].feature_dim;
  std::size_t total_nodes = 0;
  for (std::size_t gi : indices) {
    const auto& g = graphs[gi];
    if (g.num_nodes == 0) throw EmptyGraphError("graph " + std::to_string(gi) + " has no nodes");
    if (g.feature_dim != dim) throw ShapeError("graphs in a batch differ in feature dimension");
    total_nodes += g.num_nodes;
  }
  batch.features = Tensor({total_nodes, dim});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& g = graphs[indices[k]];
    for (std::size_t i = 0; i < g.node_features.size(); ++i) {
      batch.features[offset * dim + i] = static_cast<double>(g.node_features[i]);
    }
    const auto base = static_cast<std::int32_t>(offset);
    for (std::uint32_t v = 0; v < g.num_nodes; ++v) {
      batch.src.push_back(base + static_cast<std::int32_t>(v));
      batch.dst.push_back(base + static_cast<std::int32_t>(v));
      batch.node_graph.push_back(static_cast<std::int32_t>(k));
    }
    for (const auto& [i, j] : g.edges) {
      batch.src.push_back(base + static_cast<std::int32_t>(i));
      batch.dst.push_back(base + static_cast<std::int32_t>(j));
      batch.src.push_back(base + static_cast<std::int32_t>(j));
      batch.dst.push_back(base + static_cast<std::int32_t>(i));
    }
    batch.labels.push_back(g.label);
    offset += g.num_nodes;
  }
  return batch;
}

GraphBatch make_graph_batch(std::span<const SuperpixelGraph> graphs) {
  std::vector<std::size_t> all(graphs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_graph_batch(graphs, all);
}

GatOutput gat_layer(Var node_feats, std::span<const std::int32_t> src, std::span<const std::int32_t> dst,
                    Var weight, Var att_src, Var att_dst, double negative_slope) {
  if (src.size() != dst.size()) throw ShapeError("gat_layer: src and dst edge lists differ in length");
  const std::size_t num_nodes = node_feats.value().dim(0);
  for (std::size_t e = 0; e < src.size(); ++e) {
    if (src[e] < 0 || dst[e] < 0 || static_cast<std::size_t>(src[e]) >= num_nodes ||
        static_cast<std::size_t>(dst[e]) >= num_nodes) {
      throw IndexError("gat_layer: edge " + std::to_string(e) + " references a node outside [0, " +
                       std::to_string(num_nodes) + ")");
    }
  }
  Var wh = ops::matmul(node_feats, weight);
  Var score_dst = ops::matmul(wh, att_dst);
  Var score_src = ops::matmul(wh, att_src);
  Var logits = ops::leaky_relu(ops::add(ops::gather_rows(score_dst, dst), ops::gather_rows(score_src, src)),
                               negative_slope);
  Var attention = ops::scatter_segment(ops::Reduce::softmax, logits, dst, num_nodes);
  return {ops::edge_aggregate(wh, attention, src, dst, num_nodes), attention};
}

GnnModel::GnnModel(const GnnOptions& options, std::uint64_t seed) : options_(options) {
  if (options.in_features < 1 || options.num_classes < 1) throw ConfigError("GNN needs features and classes");
  Rng rng(seed);
  std::size_t in = static_cast<std::size_t>(options.in_features);
  for (int l = 0; l < 3; ++l) {
    const auto out = static_cast<std::size_t>(kChannels[l]);
    const std::string prefix = "gnn.gat" + std::to_string(l + 1);
    params_.emplace_back(prefix + ".weight", uniform_tensor({in, out}, std::sqrt(6.0 / in), rng));
    params_.emplace_back(prefix + ".att_src", uniform_tensor({out, 1}, std::sqrt(6.0 / (out + 1)), rng));
    params_.emplace_back(prefix + ".att_dst", uniform_tensor({out, 1}, std::sqrt(6.0 / (out + 1)), rng));
    params_.emplace_back(prefix + ".bias", Tensor({out}));
    in = out;
  }
  auto [w, bias] = kaiming_layer("gnn.fc", {static_cast<std::size_t>(options.num_classes), in}, in, rng);
  params_.push_back(std::move(w));
  params_.push_back(std::move(bias));
}

Var GnnModel::forward(Tape& tape, const GraphBatch& batch, Mode /*mode*/, bool trainable) {
  if (batch.features.ndim() != 2 || batch.features.dim(1) != static_cast<std::size_t>(options_.in_features)) {
    throw ShapeError("GNN expects node features of width " + std::to_string(options_.in_features) + ", got " +
                     shape_str(batch.features.shape()));
  }
  Var h = tape.constant(batch.features);
  for (int l = 0; l < 3; ++l) {
    GatOutput gat = gat_layer(h, batch.src, batch.dst, bind(tape, params_[4 * l], trainable),
                              bind(tape, params_[4 * l + 1], trainable), bind(tape, params_[4 * l + 2], trainable));
    h = ops::elu(ops::add_bias(gat.features, bind(tape, params_[4 * l + 3], trainable)));
  }
  Var pooled = ops::scatter_segment(ops::Reduce::mean, h, batch.node_graph, batch.num_graphs);
  return ops::linear(pooled, bind(tape, params_[12], trainable), bind(tape, params_[13], trainable));
}

std::vector<Parameter*> GnnModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

NamedTensors GnnModel::state() {
  NamedTensors out;
  for (auto& p : params_) out.emplace_back(p.name, &p.value);
  return out;
}

// ---------------------------------------------------------------------------
// Hybrid loss and prediction

HybridLoss hybrid_loss(Var h_cnn, Var h_gnn, std::span<const int> targets, const HybridConfig& cfg) {
  cfg.validate();
  if (h_cnn.shape() != h_gnn.shape()) {
    throw ShapeError("hybrid_loss: CNN logits " + shape_str(h_cnn.shape()) + " and GNN logits " +
                     shape_str(h_gnn.shape()) + " differ");
  }
  Var lc = ops::softmax_cross_entropy(h_cnn, targets);
  Var lg = ops::softmax_cross_entropy(h_gnn, targets);
  Var total = ops::add(ops::scale(lc, cfg.alpha), ops::scale(lg, 1.0 - cfg.alpha));
  return {total, lc, lg};
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw ShapeError("argmax_rows expects N x K, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> hybrid_predict(const Logits& logits, const HybridConfig& cfg) {
  cfg.validate();
  if (logits.h_cnn.shape() != logits.h_gnn.shape()) {
    throw ShapeError("hybrid_predict: CNN logits " + shape_str(logits.h_cnn.shape()) + " and GNN logits " +
                     shape_str(logits.h_gnn.shape()) + " differ");
  }
  Tensor blended(logits.h_cnn.shape());
  for (std::size_t i = 0; i < blended.numel(); ++i) {
    blended[i] = cfg.alpha * logits.h_cnn[i] + (1.0 - cfg.alpha) * logits.h_gnn[i];
  }
  return argmax_rows(blended);
}

// ---------------------------------------------------------------------------
// Classifier and checkpoints

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::cnn: return "cnn";
    case ModelKind::gnn: return "gnn";
    case ModelKind::coupled: return "coupled";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "cnn") return ModelKind::cnn;
  if (name == "gnn") return ModelKind::gnn;
  if (name == "coupled") return ModelKind::coupled;
  throw ConfigError("unknown model kind '" + name + "' (expected cnn, gnn or coupled)");
}

Classifier::Classifier(const Architecture& arch, std::uint64_t seed) : arch_(arch) {
  arch_.hybrid.validate();
  if (arch.kind != ModelKind::gnn) cnn_.emplace(arch.cnn, derive_seed(seed, 1));
  if (arch.kind != ModelKind::cnn) gnn_.emplace(arch.gnn, derive_seed(seed, 2));
}

Classifier::Classifier(const Checkpoint& ckpt) : Classifier(ckpt.arch, 0) { restore(ckpt); }

std::vector<Parameter*> Classifier::parameters() {
  std::vector<Parameter*> out;
  if (cnn_) {
    auto p = cnn_->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  if (gnn_) {
    auto p = gnn_->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

NamedTensors Classifier::state() {
  NamedTensors out;
  if (cnn_) {
    auto s = cnn_->state();
    out.insert(out.end(), s.begin(), s.end());
  }
  if (gnn_) {
    auto s = gnn_->state();
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

Checkpoint Classifier::snapshot() {
  Checkpoint ckpt{arch_, {}};
  for (const auto& [name, tensor] : state()) ckpt.tensors.emplace_back(name, *tensor);
  return ckpt;
}

void Classifier::restore(const Checkpoint& ckpt) {
  auto named = state();
  if (ckpt.tensors.size() != named.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, tensor] = ckpt.tensors[i];
    if (name != named[i].first || tensor.shape() != named[i].second->shape()) {
      throw CheckpointError("checkpoint tensor " + name + " " + shape_str(tensor.shape()) + " does not match " +
                            named[i].first + " " + shape_str(named[i].second->shape()));
    }
  }
  for (std::size_t i = 0; i < named.size(); ++i) *named[i].second = ckpt.tensors[i].second;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCheckpointMagic, 4);
  detail::write_le(out, kCheckpointVersion);
  const auto& a = ckpt.arch;
  detail::write_le(out, static_cast<std::uint32_t>(a.kind));
  for (int v : {a.cnn.in_channels, a.cnn.height, a.cnn.width, a.cnn.num_classes, a.cnn.hidden_head ? 1 : 0,
                a.gnn.in_features, a.gnn.num_classes}) {
    detail::write_le(out, static_cast<std::int32_t>(v));
  }
  detail::write_le(out, a.hybrid.alpha);
  detail::write_le(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    detail::write_le(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le(out, static_cast<std::uint32_t>(tensor.ndim()));
    for (std::size_t d : tensor.shape()) detail::write_le(out, static_cast<std::uint64_t>(d));
    for (double v : tensor.data()) detail::write_le(out, v);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  auto corrupt = [&] { return CheckpointError("checkpoint " + path.string() + " is truncated or corrupt"); };
  char magic[4] = {};
  std::uint32_t version = 0;
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw FormatError("bad checkpoint magic in " + path.string());
  }
  if (!detail::read_le(in, version) || version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version in " + path.string());
  }
  Checkpoint ckpt;
  std::uint32_t kind = 0;
  if (!detail::read_le(in, kind) || kind > 2) throw corrupt();
  ckpt.arch.kind = static_cast<ModelKind>(kind);
  std::int32_t fields[7];
  for (auto& f : fields) {
    if (!detail::read_le(in, f)) throw corrupt();
  }
  ckpt.arch.cnn = {fields[0], fields[1], fields[2], fields[3], fields[4] != 0};
  ckpt.arch.gnn = {fields[5], fields[6]};
  if (!detail::read_le(in, ckpt.arch.hybrid.alpha)) throw corrupt();
  std::uint32_t count = 0;
  if (!detail::read_le(in, count)) throw corrupt();
  for (std::uint32_t t = 0; t < count; ++t) {
    std::uint32_t name_len = 0, ndim = 0;
    if (!detail::read_le(in, name_len) || name_len > 4096) throw corrupt();
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw corrupt();
    if (!detail::read_le(in, ndim) || ndim > 8) throw corrupt();
    Shape shape(ndim);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!detail::read_le(in, v)) throw corrupt();
      d = static_cast<std::size_t>(v);
    }
    Tensor tensor(shape);
    for (double& v : tensor.data()) {
      if (!detail::read_le(in, v)) throw corrupt();
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(tensor));
  }
  return ckpt;
}

}  // namespace spx
