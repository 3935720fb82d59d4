#pragma once

#include "nextlocmoe/data_model.hpp"
#include "nextlocmoe/history_encoder.hpp"
#include "nextlocmoe/location_moe.hpp"
#include "nextlocmoe/model_config.hpp"
#include "nextlocmoe/personalized_moe.hpp"
#include "nextlocmoe/st_embedding.hpp"
#include "nextlocmoe/taxonomy.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

namespace nextlocmoe {

/// Routing decisions of one forward pass.
struct RoutingTrace {
  /// One entry per current-trajectory record (empty when the location MoE is ablated).
  std::vector<FunctionRouting> function;
  /// One entry per MoE layer (per layer and token in per-token mode; empty when ablated).
  std::vector<UserRouting> user;
  /// Experts actually evaluated across all MoE layers.
  std::size_t expert_calls = 0;
};

/// Selected index sets, in trace order. Used to hold routing fixed.
struct RoutingSelections {
  std::vector<std::vector<int>> function;
  std::vector<std::vector<int>> user;
};

RoutingSelections selections_of(const RoutingTrace& trace);

struct ForwardOptions {
  bool ablate_location_moe = false;
  bool ablate_persona_moe = false;
  /// When set, reuse these selections instead of recomputing top-k / threshold sets.
  const RoutingSelections* frozen_selections = nullptr;
  /// When non-empty, replaces the user-router probabilities of MoE layer l with entry l.
  std::vector<RowVector> forced_user_probs;
  /// Dropout source; null means evaluation mode.
  Rng* dropout_rng = nullptr;
};

struct ForwardResult {
  ad::Var prediction;  // 1 x 2, normalized coordinates
  /// Routing entropy per MoE layer (1 x 1 each).
  std::vector<ad::Var> entropies;
  RoutingTrace trace;
};

struct Prediction {
  double x = 0.0;
  double y = 0.0;
  RoutingTrace trace;
};

/// Sinusoidal positional encodings, rows = positions.
Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index width);

/// [prefix | proj(history) | proj(current)] + positional encodings.
ad::Var assemble_input(ad::Graph& g, ad::Var hist_rows, ad::Var cur_rows, ad::Var prefix, const LinearLayer& in_proj,
                       const Matrix& positions);

/// Groups frozen by the freeze policy.
bool is_frozen_group(ParamGroup group);

/// Sets every parameter's trainable flag from its group and returns the manifest.
std::vector<ManifestEntry> apply_freeze_policy(ParameterStore& store);

struct AttentionLayer {
  LinearLayer q, k, v, o;
  int heads = 1;

  ad::Var operator()(ad::Graph& g, ad::Var x) const;
};

struct BackboneLayer {
  LayerNormLayer ln1;
  AttentionLayer attn;
  LayerNormLayer ln2;
  /// Standard layers use `ffn`; MoE layers use `ffn` as the frozen expert base.
  FfnLayer ffn;
  bool moe = false;
  UserRouter router;
  std::vector<UserGroupExpert> experts;
};

class Model {
 public:
  /// Builds and initializes every parameter deterministically from `seed`, then
  /// applies the freeze policy. Descriptions and the prompt are read from `asset_dir`.
  Model(const ModelConfig& cfg, std::uint64_t seed, const std::filesystem::path& asset_dir = default_asset_dir());

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }

  const std::optional<NormStats>& norm_stats() const { return norm_stats_; }
  void set_norm_stats(const NormStats& s) { norm_stats_ = s; }

  const StEmbedding& embedding() const { return embedding_; }
  const HistoryEncoder& history_encoder() const { return history_; }
  const LocationSemanticsMoe& location_moe() const { return location_moe_; }
  const LinearLayer& input_projection() const { return input_proj_; }
  const LinearLayer& group_prior_projection() const { return prior_proj_; }
  const std::vector<BackboneLayer>& layers() const { return layers_; }
  const Parameter* prompt_prefix() const { return prompt_; }

  /// Mean-pooled description encodings (K_p x d_text); stored in checkpoints.
  const Matrix& pooled_group_descriptions() const { return pooled_groups_; }
  /// Group priors (K_p x d_prior) under the current projection.
  Matrix group_priors() const;

  ForwardResult forward(ad::Graph& g, const Sample& sample, const ForwardOptions& opts = {}) const;
  Prediction predict(const Sample& sample, const ForwardOptions& opts = {}) const;

  /// Copies values from `weights` for every name present in both (shapes must
  /// match). Returns the number of tensors loaded.
  std::size_t load_weights(const ParameterStore& weights);

  void save(const std::filesystem::path& path) const;
  /// Accepts either the exact path or the path with ".ckpt" appended.
  static std::unique_ptr<Model> load(const std::filesystem::path& path,
                                     const std::filesystem::path& asset_dir = default_asset_dir());

 private:
  ad::Var user_moe_layer(ad::Graph& g, const BackboneLayer& layer, std::size_t moe_index, ad::Var u, ad::Var h_hist,
                         ad::Var priors, const ForwardOptions& opts, ForwardResult& out) const;

  ModelConfig cfg_;
  std::uint64_t seed_;
  ParameterStore store_;
  std::optional<NormStats> norm_stats_;

  StEmbedding embedding_;
  HistoryEncoder history_;
  LocationSemanticsMoe location_moe_;
  LinearLayer input_proj_;
  const Parameter* prompt_ = nullptr;
  Matrix pooled_groups_;
  LinearLayer prior_proj_;
  std::vector<BackboneLayer> layers_;
  LayerNormLayer final_ln_;
  LinearLayer head_hidden_;
  LinearLayer head_out_;
  Matrix positions_;
};

inline constexpr const char* kCheckpointMagic = "nextlocmoe-checkpoint";
inline constexpr int kCheckpointVersion = 1;

}  // namespace nextlocmoe
