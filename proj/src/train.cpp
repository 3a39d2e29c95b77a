#include "spx/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "spx/error.hpp"
#include "spx/rng.hpp"

namespace spx {

namespace {

double percent(std::size_t correct, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

std::size_t count_correct(std::span<const int> predicted, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == labels[i];
  return correct;
}

// Minibatches over `order`; a trailing batch of one sample is folded into the
// previous batch because batch norm cannot train on it.
std::vector<std::span<const std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t batch_size) {
  std::vector<std::span<const std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    batches.push_back(order.subspan(start, std::min(batch_size, order.size() - start)));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    const auto& prev = batches[batches.size() - 2];
    batches[batches.size() - 2] = order.subspan(prev.data() - order.data(), prev.size() + 1);
    batches.pop_back();
  }
  return batches;
}

void check_data(const TrainData& data, ModelKind kind) {
  const bool need_images = kind != ModelKind::gnn;
  const bool need_graphs = kind != ModelKind::cnn;
  if (need_images && data.images == nullptr) throw ConsistencyError(to_string(kind) + " run needs an image dataset");
  if (need_graphs && data.graphs == nullptr) throw ConsistencyError(to_string(kind) + " run needs a graph dataset");
  if (data.images) data.images->validate();
  if (data.images && data.graphs) {
    if (data.images->size() != data.graphs->size()) {
      throw ConsistencyError("image dataset has " + std::to_string(data.images->size()) + " samples but graph dataset has " +
                             std::to_string(data.graphs->size()));
    }
    for (std::size_t i = 0; i < data.images->size(); ++i) {
      if (data.images->labels[i] != (*data.graphs)[i].label) {
        throw ConsistencyError("image and graph datasets disagree on the label of sample " + std::to_string(i));
      }
    }
  }
}

Architecture architecture_for(const TrainData& data, const TrainConfig& cfg) {
  Architecture arch;
  arch.kind = cfg.kind;
  arch.hybrid.alpha = cfg.alpha;
  const auto labels = data.labels();
  int num_classes = labels.empty() ? 1 : *std::max_element(labels.begin(), labels.end()) + 1;
  if (data.images) num_classes = std::max(num_classes, data.images->num_classes);
  if (data.images && !data.images->images.empty()) {
    const Image& img = data.images->images.front();
    arch.cnn = {img.channels, img.height, img.width, num_classes, cfg.hidden_head};
  }
  arch.cnn.num_classes = num_classes;
  if (data.graphs && !data.graphs->empty()) {
    arch.gnn.in_features = static_cast<int>(data.graphs->front().feature_dim);
  }
  arch.gnn.num_classes = num_classes;
  return arch;
}

struct BatchOutput {
  Var loss;
  Logits logits;
};

BatchOutput run_batch(Tape& tape, Classifier& model, const TrainData& data, std::span<const std::size_t> idx,
                      std::span<const int> targets, Mode mode, bool trainable) {
  Var hc, hg;
  if (model.has_cnn()) hc = model.cnn().forward(tape, image_batch(*data.images, idx), mode, trainable);
  if (model.has_gnn()) hg = model.gnn().forward(tape, make_graph_batch(*data.graphs, idx), mode, trainable);
  BatchOutput out;
  switch (model.arch().kind) {
    case ModelKind::cnn: out.loss = ops::softmax_cross_entropy(hc, targets); break;
    case ModelKind::gnn: out.loss = ops::softmax_cross_entropy(hg, targets); break;
    case ModelKind::coupled: out.loss = hybrid_loss(hc, hg, targets, model.arch().hybrid).total; break;
  }
  if (hc.valid()) out.logits.h_cnn = hc.value();
  if (hg.valid()) out.logits.h_gnn = hg.value();
  return out;
}

std::vector<int> predictions(const Classifier& model, const Logits& logits) {
  switch (model.arch().kind) {
    case ModelKind::cnn: return argmax_rows(logits.h_cnn);
    case ModelKind::gnn: return argmax_rows(logits.h_gnn);
    case ModelKind::coupled: return hybrid_predict(logits, model.arch().hybrid);
  }
  return {};
}

}  // namespace

void AdamWConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
}

void adamw_step(std::span<Parameter* const> params, AdamWState& state, const AdamWConfig& cfg) {
  cfg.validate();
  if (state.m.empty()) {
    for (const Parameter* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    if (state.m[i].shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw ShapeError("optimizer state or gradient shape mismatch for " + p.name);
    }
    for (double g : p.grad.data()) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter " + p.name);
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.value.numel(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      const double theta = p.value[j];
      p.value[j] = theta - cfg.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg.epsilon)) -
                   cfg.learning_rate * cfg.weight_decay * theta;
    }
  }
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
  HybridConfig{alpha}.validate();
  optimizer.validate();
}

std::size_t TrainData::size() const {
  if (images) return images->size();
  if (graphs) return graphs->size();
  return 0;
}

std::vector<int> TrainData::labels() const {
  if (images) return images->labels;
  std::vector<int> out;
  if (graphs) {
    for (const auto& g : *graphs) out.push_back(g.label);
  }
  return out;
}

Logits predict_logits(Classifier& model, const TrainData& data, std::span<const std::size_t> indices) {
  Tape tape;
  Logits out;
  if (model.has_cnn()) out.h_cnn = model.cnn().forward(tape, image_batch(*data.images, indices), Mode::eval, false).value();
  if (model.has_gnn()) {
    out.h_gnn = model.gnn().forward(tape, make_graph_batch(*data.graphs, indices), Mode::eval, false).value();
  }
  return out;
}

EvalResult evaluate(Classifier& model, const TrainData& data, int batch_size) {
  check_data(data, model.arch().kind);
  const auto labels = data.labels();
  const auto& arch = model.arch();
  if (data.images && model.has_cnn() && !data.images->images.empty()) {
    const Image& img = data.images->images.front();
    if (img.channels != arch.cnn.in_channels || img.height != arch.cnn.height || img.width != arch.cnn.width) {
      throw CheckpointError("model expects " + std::to_string(arch.cnn.in_channels) + "x" +
                            std::to_string(arch.cnn.height) + "x" + std::to_string(arch.cnn.width) +
                            " images, data has " + std::to_string(img.channels) + "x" + std::to_string(img.height) +
                            "x" + std::to_string(img.width));
    }
  }
  if (data.graphs && model.has_gnn() && !data.graphs->empty() &&
      static_cast<int>(data.graphs->front().feature_dim) != arch.gnn.in_features) {
    throw CheckpointError("model expects node features of width " + std::to_string(arch.gnn.in_features) +
                          ", data has " + std::to_string(data.graphs->front().feature_dim));
  }
  const int num_classes = model.has_cnn() ? arch.cnn.num_classes : arch.gnn.num_classes;
  for (int l : labels) {
    if (l >= num_classes) throw CheckpointError("data label " + std::to_string(l) + " exceeds the model's classes");
  }

  EvalResult result;
  result.count = labels.size();
  std::size_t correct = 0, cnn_correct = 0, gnn_correct = 0, hybrid_correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> all(labels.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto step = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t start = 0; start < all.size(); start += step) {
    const auto idx = std::span<const std::size_t>(all).subspan(start, std::min(step, all.size() - start));
    const auto targets = std::span<const int>(labels).subspan(start, idx.size());
    Tape tape;
    const BatchOutput out = run_batch(tape, model, data, idx, targets, Mode::eval, false);
    loss_sum += out.loss.value().item() * static_cast<double>(idx.size());
    correct += count_correct(predictions(model, out.logits), targets);
    if (model.has_cnn()) cnn_correct += count_correct(argmax_rows(out.logits.h_cnn), targets);
    if (model.has_gnn()) gnn_correct += count_correct(argmax_rows(out.logits.h_gnn), targets);
    if (model.has_cnn() && model.has_gnn()) {
      hybrid_correct += count_correct(hybrid_predict(out.logits, arch.hybrid), targets);
    }
  }
  result.loss = result.count ? loss_sum / static_cast<double>(result.count) : 0.0;
  result.accuracy = percent(correct, result.count);
  if (model.has_cnn()) result.cnn_accuracy = percent(cnn_correct, result.count);
  if (model.has_gnn()) result.gnn_accuracy = percent(gnn_correct, result.count);
  if (model.has_cnn() && model.has_gnn()) result.hybrid_accuracy = percent(hybrid_correct, result.count);
  return result;
}

EvalResult evaluate(const Checkpoint& ckpt, const TrainData& data, int batch_size) {
  Classifier model(ckpt);
  return evaluate(model, data, batch_size);
}

TrainResult train_model(const TrainData& train, const TrainConfig& cfg, const TrainData* test,
                        const StepObserver& observer) {
  const auto started = std::chrono::steady_clock::now();
  cfg.validate();
  check_data(train, cfg.kind);
  if (test) check_data(*test, cfg.kind);

  const auto labels = train.labels();
  const double fractions[] = {1.0 - cfg.val_fraction, cfg.val_fraction};
  const auto parts = stratified_indices(labels, fractions, derive_seed(cfg.seed, 3));
  const auto& train_idx = parts[0];
  const auto& val_idx = parts[1];

  // Validation view: subsets aligned across images and graphs.
  LabeledDataset val_images;
  std::vector<SuperpixelGraph> val_graphs;
  TrainData val;
  if (train.images) {
    val_images = subset(*train.images, val_idx);
    val.images = &val_images;
  }
  if (train.graphs) {
    for (std::size_t i : val_idx) val_graphs.push_back((*train.graphs)[i]);
    val.graphs = &val_graphs;
  }
  if (cfg.kind == ModelKind::cnn) val.graphs = nullptr;
  if (cfg.kind == ModelKind::gnn) val.images = nullptr;

  Classifier model(architecture_for(train, cfg), cfg.seed);
  auto params = model.parameters();
  AdamWState opt_state;

  TrainResult result;
  result.report.config = cfg;
  result.checkpoint = model.snapshot();
  Rng shuffler(derive_seed(cfg.seed, 4));
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  std::int64_t global_step = 0;
  int stale_epochs = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffler.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (const auto& batch : make_batches(order, static_cast<std::size_t>(cfg.batch_size))) {
      std::vector<int> targets;
      targets.reserve(batch.size());
      for (std::size_t i : batch) targets.push_back(labels[i]);

      for (Parameter* p : params) p->zero_grad();
      Tape tape;
      const BatchOutput out = run_batch(tape, model, train, batch, targets, Mode::train, true);
      const double loss = out.loss.value().item();
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(global_step + 1));
      }
      tape.backward(out.loss);
      adamw_step(params, opt_state, cfg.optimizer);
      ++global_step;
      if (observer) observer(model, global_step);

      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
      correct += count_correct(predictions(model, out.logits), targets);
    }

    const EvalResult val_result = evaluate(model, val);
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(seen);
    record.train_accuracy = percent(correct, seen);
    record.val_loss = val_result.loss;
    record.val_accuracy = val_result.accuracy;
    result.report.epochs.push_back(record);

    if (val_result.accuracy > result.report.best_val_accuracy) {
      result.report.best_val_accuracy = val_result.accuracy;
      result.report.best_epoch = epoch;
      result.checkpoint = model.snapshot();
      stale_epochs = 0;
    } else if (cfg.patience > 0 && ++stale_epochs >= cfg.patience) {
      break;
    }
  }

  model.restore(result.checkpoint);
  if (test) result.report.test = evaluate(model, *test);
  result.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

SweepResult sweep(const TrainData& train, const TrainConfig& base, const SweepGrid& grid, const TrainData* test) {
  if (grid.size() == 0) throw ConfigError("sweep grid is empty");
  SweepResult result;
  std::optional<std::size_t> best;
  for (int batch_size : grid.batch_sizes) {
    for (double lr : grid.learning_rates) {
      for (double wd : grid.weight_decays) {
        TrainConfig cfg = base;
        cfg.batch_size = batch_size;
        cfg.optimizer.learning_rate = lr;
        cfg.optimizer.weight_decay = wd;
        RunReport report;
        try {
          report = train_model(train, cfg, test).report;
        } catch (const DivergenceError& e) {
          report.config = cfg;
          report.status = "diverged";
          report.error = e.what();
        }
        result.runs.push_back(report);
        if (report.status != "ok") continue;
        const std::size_t k = result.runs.size() - 1;
        if (!best) {
          best = k;
          continue;
        }
        const RunReport& cur = result.runs[*best];
        const auto key = [](const RunReport& r) {
          return std::make_tuple(-r.best_val_accuracy, r.config.optimizer.learning_rate, r.config.batch_size);
        };
        if (key(report) < key(cur)) best = k;
      }
    }
  }
  if (!best) throw DivergenceError("every sweep run diverged");
  result.best_index = *best;
  result.best_config = result.runs[*best].config;
  return result;
}

namespace {

nlohmann::ordered_json eval_json(const EvalResult& e) {
  nlohmann::ordered_json j;
  j["count"] = e.count;
  j["loss"] = e.loss;
  j["accuracy"] = e.accuracy;
  if (e.cnn_accuracy) j["cnn_accuracy"] = *e.cnn_accuracy;
  if (e.gnn_accuracy) j["gnn_accuracy"] = *e.gnn_accuracy;
  if (e.hybrid_accuracy) j["hybrid_accuracy"] = *e.hybrid_accuracy;
  return j;
}

}  // namespace

std::string report_to_jsonl(const RunReport& report, bool include_timing) {
  const TrainConfig& c = report.config;
  nlohmann::ordered_json config;
  config["type"] = "config";
  config["dataset"] = c.dataset_name;
  config["model"] = to_string(c.kind);
  config["batch_size"] = c.batch_size;
  config["epochs"] = c.epochs;
  config["patience"] = c.patience;
  config["seed"] = c.seed;
  config["alpha"] = c.alpha;
  config["learning_rate"] = c.optimizer.learning_rate;
  config["weight_decay"] = c.optimizer.weight_decay;
  config["beta1"] = c.optimizer.beta1;
  config["beta2"] = c.optimizer.beta2;
  config["epsilon"] = c.optimizer.epsilon;
  config["val_fraction"] = c.val_fraction;
  config["hidden_head"] = c.hidden_head;

  std::string out = config.dump() + "\n";
  for (const auto& e : report.epochs) {
    nlohmann::ordered_json j;
    j["type"] = "epoch";
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["train_accuracy"] = e.train_accuracy;
    j["val_loss"] = e.val_loss;
    j["val_accuracy"] = e.val_accuracy;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json summary;
  summary["type"] = "summary";
  summary["status"] = report.status;
  if (!report.error.empty()) summary["error"] = report.error;
  summary["best_epoch"] = report.best_epoch;
  summary["best_val_accuracy"] = report.best_val_accuracy;
  if (report.test) summary["test"] = eval_json(*report.test);
  if (include_timing) summary["wall_clock_seconds"] = report.wall_clock_seconds;
  out += summary.dump() + "\n";
  return out;
}

}  // namespace spx
