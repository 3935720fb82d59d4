#pragma once

#include "nextlocmoe/autodiff.hpp"
#include "nextlocmoe/nn.hpp"
#include "nextlocmoe/text_encoder.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace nextlocmoe {

struct UserRouting {
  RowVector scores;
  RowVector probs;
  /// Descending probability, lower index first on ties.
  std::vector<int> selected;
  double cumulative = 0.0;
  double entropy = 0.0;
};

/// Minimal prefix of the probability-sorted experts whose cumulative mass is >= tau.
/// Always returns at least one index. Throws on tau outside (0, 1].
std::vector<int> select_experts_by_threshold(const RowVector& probs, double tau);

/// -sum p ln p with 0 ln 0 = 0.
double routing_entropy(const RowVector& probs);

/// Fills probs/selected/cumulative/entropy from scores.
UserRouting make_user_routing(const RowVector& scores, double tau);

/// Row i = mean over tokens of encoder.encode_tokens(descriptions[i]).
Matrix pool_descriptions(const std::vector<std::string>& descriptions, const TextEncoder& encoder);

/// Row i = proj(pool(descriptions[i])). Throws unless there is one description per group.
Matrix compute_group_priors(const std::vector<std::string>& descriptions, const TextEncoder& encoder,
                            const LinearLayer& proj, std::size_t expected_groups);

struct FfnLayer {
  LinearLayer up;    // d_model -> d_ffn
  LinearLayer down;  // d_ffn -> d_model

  ad::Var operator()(ad::Graph& g, ad::Var x) const { return down(g, ad::gelu(up(g, x))); }
};

struct LoraAdapter {
  const Parameter* a = nullptr;  // r x in
  const Parameter* b = nullptr;  // out x r
  double scaling = 0.0;

  /// s * x A^T B^T
  ad::Var delta(ad::Graph& g, ad::Var x) const;
};

struct UserGroupExpert {
  int index = 0;
  std::string group;
  const FfnLayer* base = nullptr;
  LoraAdapter up;
  LoraAdapter down;

  ad::Var operator()(ad::Graph& g, ad::Var x) const;
};

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  double scaling() const { return alpha / static_cast<double>(rank); }
};

struct UserRouterConfig {
  Eigen::Index d_model = 128;
  Eigen::Index d_hist = 64;
  Eigen::Index d_prior = 32;
  Eigen::Index d_fuse = 64;
  double tau = 0.8;
};

class UserRouter {
 public:
  UserRouter() = default;
  UserRouter(ParameterStore& store, const std::string& prefix, const UserRouterConfig& cfg, Rng& rng);

  const UserRouterConfig& config() const { return cfg_; }
  const LinearLayer& fusion() const { return fusion_; }
  const LinearLayer& gate() const { return gate_; }

  /// x (1 x d_model), h_hist (1 x d_hist), priors (K_p x d_prior) -> scores (1 x K_p).
  ad::Var scores(ad::Graph& g, ad::Var x, ad::Var h_hist, ad::Var priors) const;

  UserRouting score_user_experts(const RowVector& x, const RowVector& h_hist, const Matrix& priors) const;

 private:
  UserRouterConfig cfg_;
  LinearLayer fusion_;
  LinearLayer gate_;
};

/// K_p experts sharing one frozen base FFN, each with its own LoRA adapters
/// on both FFN matrices (B side zero so the initial delta is exactly zero).
std::vector<UserGroupExpert> init_personalized_experts_from_ffn(ParameterStore& store, const std::string& prefix,
                                                                const FfnLayer& base,
                                                                const std::vector<std::string>& groups,
                                                                const LoraConfig& lora, Rng& rng);

/// sum_{i in selected} probs(0, i) * expert_i(x), evaluating only selected experts.
/// Shares the frozen base up-projection across experts and pushes the weighted
/// hidden sum through the base down-projection once; the result is exact.
/// `expert_calls`, when given, is incremented once per evaluated expert.
ad::Var moe_ffn_forward(ad::Graph& g, ad::Var x, ad::Var probs, const std::vector<int>& selected,
                        const std::vector<UserGroupExpert>& experts, std::size_t* expert_calls = nullptr);

/// Value-level wrapper.
Matrix moe_ffn_forward(const Matrix& x, const UserRouting& routing, const std::vector<UserGroupExpert>& experts,
                       std::size_t* expert_calls = nullptr);

}  // namespace nextlocmoe
