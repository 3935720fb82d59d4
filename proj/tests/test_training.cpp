#include "nextlocmoe/synthetic_city.hpp"
#include "nextlocmoe/training.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

namespace nextlocmoe {
namespace {

using testing::random_sample;
using testing::scratch_dir;

std::vector<Sample> samples_for(const ModelConfig& cfg, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(random_sample(rng, cfg.history_len, cfg.current_len));
  return out;
}

TEST(Losses, DistanceExamples) {
  EXPECT_EQ(distance_loss(Matrix{{0.0, 0.0}}, Matrix{{3.0, 4.0}}), 5.0);
  EXPECT_EQ(distance_loss(Matrix{{0.0, 0.0}, {1.0, 1.0}}, Matrix{{3.0, 4.0}, {1.0, 1.0}}), 2.5);
  EXPECT_EQ(distance_loss(Matrix{{0.2, 0.7}}, Matrix{{0.2, 0.7}}), 0.0);
  EXPECT_THROW(distance_loss(Matrix::Zero(2, 2), Matrix::Zero(1, 2)), std::invalid_argument);
}

TEST(Losses, TotalLossIdentities) {
  const double ln11 = std::log(11.0);
  const std::vector<std::vector<double>> uniform{{ln11, ln11}, {ln11, ln11}};
  const std::vector<std::vector<double>> one_hot{{0.0, 0.0}, {0.0, 0.0}};
  EXPECT_EQ(total_loss(0.7, uniform, 0.0), 0.7);
  EXPECT_EQ(total_loss(0.7, one_hot, 300.0), 0.7);
  EXPECT_NEAR(total_loss(0.7, uniform, 300.0), 0.7 + 300.0 * ln11, 1e-9);
  // Averaged over layers within a sample, then over samples.
  EXPECT_NEAR(mean_entropy({{1.0, 3.0}, {2.0, 2.0}}), 2.0, 1e-15);
  EXPECT_NEAR(mean_entropy({{1.0, 3.0, 5.0}, {0.0}}), 1.5, 1e-15);
  double prev = total_loss(0.3, {{0.5}}, 0.0);
  for (double lambda : {0.1, 1.0, 10.0, 300.0}) {
    const double t = total_loss(0.3, {{0.5}}, lambda);
    EXPECT_GE(t, prev);
    prev = t;
  }
}

TEST(PlateauScheduler, ReducesAfterPatienceBadEpochs) {
  PlateauScheduler s(1.0, 0.5, 2, 0.2);
  EXPECT_EQ(s.step(1.0), 1.0);
  EXPECT_EQ(s.step(1.0), 1.0);
  EXPECT_EQ(s.step(1.5), 0.5);
  EXPECT_EQ(s.step(0.9), 0.5);
  EXPECT_EQ(s.step(0.95), 0.5);
  EXPECT_EQ(s.step(0.95), 0.25);
  EXPECT_EQ(s.step(0.95), 0.25);
  EXPECT_EQ(s.step(0.95), 0.2);
}

TEST(Adam, FirstStepMovesByLearningRateAndSkipsFrozen) {
  ParameterStore store;
  store.add("w", ParamGroup::lora, Matrix{{1.0, -2.0}});
  store.add("f", ParamGroup::attention, Matrix{{5.0}}).trainable = false;
  GradientBuffer grads(store);
  grads[0] = Matrix{{0.3, -4.0}};
  grads[1] = Matrix{{1.0}};
  Adam adam(store, 0.9, 0.999, 1e-8);
  adam.step(store, grads, 0.1);
  // Bias-corrected first step: m/sqrt(v) = sign(g).
  EXPECT_NEAR(store.get("w").value(0, 0), 0.9, 1e-7);
  EXPECT_NEAR(store.get("w").value(0, 1), -1.9, 1e-7);
  EXPECT_EQ(store.get("f").value(0, 0), 5.0);
  EXPECT_EQ(adam.steps(), 1);
}

TEST(GradientCheck, ConstantLossHasZeroError) {
  ParameterStore store;
  store.add("p", ParamGroup::lora, Matrix::Zero(2, 2));
  const auto report = gradient_check(store, [](ad::Graph& g) { return g.constant(Matrix{{3.0}}); }, 1e-5);
  EXPECT_EQ(report.max_rel_error, 0.0);
  EXPECT_EQ(report.checked, 4u);
}

TEST(GradientCheck, TinyModelMatchesFiniteDifferences) {
  Model model(ModelConfig::tiny(), 5);
  // Move LoRA B sides away from zero so adapter gradients are exercised.
  Rng rng(1);
  for (std::size_t i = 0; i < model.store().size(); ++i) {
    auto& p = model.store().mutable_at(i);
    if (p.group == ParamGroup::lora) p.value = testing::random_matrix(p.value.rows(), p.value.cols(), rng, 0.3);
  }
  const Sample s = samples_for(model.config(), 1, 3).front();
  for (double lambda : {0.0, 300.0}) {
    const auto report = gradient_check(model, s, 1e-5, lambda);
    EXPECT_LT(report.max_rel_error, 1e-4) << "lambda " << lambda << " worst " << report.worst_param << " analytic "
                                          << report.worst_analytic << " numeric " << report.worst_numeric;
    std::size_t trainable = 0;
    for (const auto& p : model.store()) trainable += p.trainable ? static_cast<std::size_t>(p.value.size()) : 0;
    EXPECT_EQ(report.checked, trainable);
  }
}

TEST(Trainer, FrozenTensorsUnchangedAndEveryTrainableGroupMoves) {
  Model model(ModelConfig::tiny(), 7);
  const ParameterStore before = model.store();
  TrainConfig cfg;
  cfg.batch_size = 4;
  Trainer trainer(model, cfg);
  const auto data = samples_for(model.config(), 40, 8);
  for (int step = 0; step < 10; ++step) trainer.step(std::span<const Sample>(data).subspan(4 * step, 4));
  std::set<ParamGroup> moved;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& a = before.at(i);
    const auto& b = model.store().at(i);
    if (!a.trainable) {
      EXPECT_EQ(a.value, b.value) << a.name;
    } else if (a.value != b.value) {
      moved.insert(a.group);
    }
  }
  for (const auto& p : before) {
    if (p.trainable) EXPECT_TRUE(moved.count(p.group)) << to_string(p.group);
  }
}

TEST(Trainer, OneStepChangesAdaptersButNotExpertBase) {
  Model model(ModelConfig::tiny(), 9);
  const ParameterStore before = model.store();
  Trainer trainer(model, TrainConfig{});
  const auto data = samples_for(model.config(), 4, 10);
  const StepStats stats = trainer.step(data);
  EXPECT_TRUE(std::isfinite(stats.total));
  EXPECT_GE(stats.active_experts, 1.0);
  bool lora_changed = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& a = before.at(i);
    if (a.group == ParamGroup::expert_base) EXPECT_EQ(a.value, model.store().at(i).value) << a.name;
    if (a.group == ParamGroup::lora && a.value != model.store().at(i).value) lora_changed = true;
  }
  EXPECT_TRUE(lora_changed);
}

TEST(Train, OneEpochLogAndCheckpointRoundTrip) {
  const ModelConfig mcfg = ModelConfig::desk();
  Model model(mcfg, 12);
  const auto train_set = samples_for(mcfg, 32, 13);
  const auto val_set = samples_for(mcfg, 8, 14);
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 1;
  const auto dir = scratch_dir("train_one_epoch");
  const TrainResult result = train(model, train_set, val_set, cfg, dir / "best.ckpt");
  ASSERT_EQ(result.log.epochs.size(), 1u);
  EXPECT_EQ(result.best_epoch, 0);
  const auto loaded = Model::load(dir / "best.ckpt");
  EXPECT_NEAR(evaluate_distance(*loaded, val_set), result.log.epochs[0].val_dist, 1e-6);
  EXPECT_NEAR(result.best_val, result.log.epochs[0].val_dist, 1e-12);

  result.log.write_jsonl(dir / "trainlog.jsonl");
  const TrainLog back = TrainLog::read_jsonl(dir / "trainlog.jsonl");
  ASSERT_EQ(back.epochs.size(), 1u);
  EXPECT_EQ(back.epochs[0].to_json(), result.log.epochs[0].to_json());
}

TEST(Train, SameSeedSameLog) {
  const ModelConfig mcfg = ModelConfig::tiny();
  const auto train_set = samples_for(mcfg, 24, 15);
  const auto val_set = samples_for(mcfg, 6, 16);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 5;
  auto run = [&]() {
    Model model(mcfg, 17);
    return train(model, train_set, val_set, cfg).log;
  };
  const TrainLog a = run(), b = run();
  ASSERT_EQ(a.epochs.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.epochs[e].train_total, b.epochs[e].train_total);
    EXPECT_EQ(a.epochs[e].val_dist, b.epochs[e].val_dist);
    EXPECT_EQ(a.epochs[e].lr, b.epochs[e].lr);
    EXPECT_EQ(a.epochs[e].mean_active_experts, b.epochs[e].mean_active_experts);
  }
}

TEST(Train, RejectsInvalidConfig) {
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.lambda = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Train, OverfitsSixteenSyntheticSamples) {
  const ModelConfig mcfg = ModelConfig::desk();
  Model model(mcfg, 21);
  const Dataset city = normalize_coordinates(generate_synthetic_city(SyntheticCityConfig{}).dataset);
  const auto all = make_samples(city, mcfg.history_len, mcfg.current_len, 4);
  ASSERT_GE(all.size(), 16u);
  std::vector<Sample> data;
  for (std::size_t i = 0; i < 16; ++i) data.push_back(all[i * all.size() / 16]);
  const double initial = evaluate_distance(model, data);
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 300;
  const TrainResult result = train(model, data, data, cfg);
  const double final_dist = evaluate_distance(model, data);
  EXPECT_LE(final_dist, 0.2 * initial) << "initial " << initial << " final " << final_dist;
  EXPECT_EQ(result.log.epochs.size(), 300u);
}

}  // namespace
}  // namespace nextlocmoe
