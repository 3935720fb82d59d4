#pragma once

#include "nextlocmoe/model.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nextlocmoe {

struct TrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  /// Weight of the routing-entropy term.
  double lambda = 300.0;
  int batch_size = 16;
  int plateau_patience = 5;
  double plateau_factor = 0.5;
  double min_lr = 1e-6;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  /// Stop after this many epochs without validation improvement; 0 disables.
  int early_stop_patience = 0;
  /// Window stride when slicing training trajectories into samples.
  int train_stride = 1;

  static TrainConfig desk();
  static TrainConfig paper();
  static TrainConfig for_profile(const std::string& name);

  void apply(const KeyValueConfig& kv);
  static std::vector<std::string> config_keys();
  void validate() const;
  nlohmann::json to_json() const;
};

/// (1/B) sum_i ||pred_i - target_i||_2.
double distance_loss(const Matrix& preds, const Matrix& targets);

/// Mean routing entropy over samples (outer) and MoE layers (inner).
double mean_entropy(const std::vector<std::vector<double>>& entropies);

/// l_dist + lambda * mean_entropy(entropies).
double total_loss(double l_dist, const std::vector<std::vector<double>>& entropies, double lambda);

struct SampleLoss {
  ad::Var dist;
  ad::Var entropy;  // mean over MoE layers; zero when there are none
  ad::Var total;
};

SampleLoss sample_loss(ad::Graph& g, const ForwardResult& fwd, const Location& target, double lambda);

struct EpochLog {
  int epoch = 0;
  double train_dist = 0.0;
  double train_entropy = 0.0;
  double train_total = 0.0;
  double val_dist = 0.0;
  double lr = 0.0;
  double mean_active_experts = 0.0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<EpochLog> epochs;

  /// One JSON object per line.
  std::string to_jsonl() const;
  void write_jsonl(const std::filesystem::path& path) const;
  static TrainLog read_jsonl(const std::filesystem::path& path);
};

class Adam {
 public:
  Adam(const ParameterStore& store, double beta1, double beta2, double eps);

  /// Updates trainable parameters only; frozen entries are never touched.
  void step(ParameterStore& store, const GradientBuffer& grads, double lr);
  long long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Multiplies the learning rate by `factor` after `patience` epochs without improvement.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, double min_lr);

  /// Feeds one epoch's validation metric (lower is better); returns the lr for the next epoch.
  double step(double metric);
  double lr() const { return lr_; }

 private:
  double lr_, factor_, min_lr_;
  int patience_;
  double best_;
  int bad_epochs_ = 0;
};

/// Thrown when a batch produces a non-finite loss or gradient.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, std::string dump) : std::runtime_error(what), dump_(std::move(dump)) {}
  /// JSON description of the offending batch.
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

struct StepStats {
  double dist = 0.0;
  double entropy = 0.0;
  double total = 0.0;
  double active_experts = 0.0;  // mean |E| over samples and MoE layers
  double grad_norm = 0.0;       // before clipping
};

/// One optimizer at a time over a model (single writer).
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg);

  StepStats step(std::span<const Sample> batch);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  const Adam& optimizer() const { return adam_; }

 private:
  Model& model_;
  TrainConfig cfg_;
  Adam adam_;
  Rng dropout_rng_;
  double lr_;
};

/// Mean distance between predictions and targets in evaluation mode.
double evaluate_distance(const Model& model, std::span<const Sample> samples, const ForwardOptions& opts = {});

struct TrainResult {
  TrainLog log;
  double best_val = 0.0;
  int best_epoch = -1;
};

/// Epoch loop: deterministic shuffles, plateau scheduling on validation distance,
/// best-validation checkpoint at `checkpoint` (skipped when empty).
/// On return the model holds the final-epoch weights.
TrainResult train(Model& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const std::filesystem::path& checkpoint = {},
                  std::ostream* progress = nullptr);

struct GradientCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double loss = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences against the analytic gradient of `loss` for every
/// trainable entry in `store`. Relative error is |a - n| / max(|a|, |n|, 1e-6 * max(1, |L|)).
GradientCheckReport gradient_check(ParameterStore& store, const std::function<ad::Var(ad::Graph&)>& loss, double eps);

/// Model form: total loss of one sample with routing selections held at the
/// sets chosen by the unperturbed forward pass.
GradientCheckReport gradient_check(Model& model, const Sample& sample, double eps, double lambda);

}  // namespace nextlocmoe
