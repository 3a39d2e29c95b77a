#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spx/graphgen.hpp"
#include "spx/imaging.hpp"
#include "spx/models.hpp"
#include "spx/tensor.hpp"

namespace spx {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

// One decoupled-weight-decay Adam update from each parameter's `grad`:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * lambda * theta
// Throws DivergenceError naming the first parameter with a non-finite
// gradient, before anything is modified.
void adamw_step(std::span<Parameter* const> params, AdamWState& state, const AdamWConfig& cfg);

struct TrainConfig {
  ModelKind kind = ModelKind::coupled;
  int batch_size = 128;
  int epochs = 30;
  // Stop after this many epochs without a validation improvement; 0 disables.
  int patience = 5;
  std::uint64_t seed = 0;
  double alpha = 0.75;
  AdamWConfig optimizer;
  double val_fraction = 0.1;
  bool hidden_head = false;
  std::string dataset_name;

  void validate() const;
};

// Images and/or graphs; for coupled runs graph k must come from image k.
struct TrainData {
  const LabeledDataset* images = nullptr;
  const std::vector<SuperpixelGraph>* graphs = nullptr;

  std::size_t size() const;
  std::vector<int> labels() const;
};

struct EvalResult {
  std::size_t count = 0;
  double loss = 0.0;
  // Percent correct for the run's own prediction rule (hybrid for coupled).
  double accuracy = 0.0;
  std::optional<double> cnn_accuracy;
  std::optional<double> gnn_accuracy;
  std::optional<double> hybrid_accuracy;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct RunReport {
  TrainConfig config;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_accuracy = -1.0;
  std::optional<EvalResult> test;
  std::string status = "ok";
  std::string error;
  double wall_clock_seconds = 0.0;
};

struct TrainResult {
  RunReport report;
  Checkpoint checkpoint;  // best validation epoch
};

// Called after every optimizer step with the model (gradients of that step
// still attached) and the global step count.
using StepObserver = std::function<void(Classifier& model, std::int64_t step)>;

TrainResult train_model(const TrainData& train, const TrainConfig& cfg, const TrainData* test = nullptr,
                        const StepObserver& observer = {});

EvalResult evaluate(Classifier& model, const TrainData& data, int batch_size = 256);
EvalResult evaluate(const Checkpoint& ckpt, const TrainData& data, int batch_size = 256);

// Eval-mode logits of both branches (a missing branch yields an empty tensor).
Logits predict_logits(Classifier& model, const TrainData& data, std::span<const std::size_t> indices);

struct SweepGrid {
  std::vector<int> batch_sizes = {128, 256};
  std::vector<double> learning_rates = {1e-3, 1e-4, 1e-5};
  std::vector<double> weight_decays = {0.0, 0.001};

  std::size_t size() const { return batch_sizes.size() * learning_rates.size() * weight_decays.size(); }
};

struct SweepResult {
  std::vector<RunReport> runs;
  std::size_t best_index = 0;
  TrainConfig best_config;
};

// Trains every grid point and picks the best validation accuracy; ties go
// to the lower learning rate, then the smaller batch. Diverged runs are
// recorded and never selected.
SweepResult sweep(const TrainData& train, const TrainConfig& base, const SweepGrid& grid,
                  const TrainData* test = nullptr);

// Line-delimited JSON: a config record, one record per epoch, then a
// summary. Timing is left out unless requested so seeded reruns produce
// identical bytes.
std::string report_to_jsonl(const RunReport& report, bool include_timing = false);

}  // namespace spx
