#pragma once

#include "nextlocmoe/autodiff.hpp"
#include "nextlocmoe/nn.hpp"
#include "nextlocmoe/text_encoder.hpp"

#include <string>
#include <vector>

namespace nextlocmoe {

/// Routing decision for one current-trajectory record.
struct FunctionRouting {
  RowVector logits;
  RowVector probs;
  /// Top-k indices, descending probability, lower index first on ties.
  std::vector<int> selected;
};

/// Indices of the k largest entries, descending, ties broken by lower index.
std::vector<int> select_top_k(const RowVector& probs, int k);

struct FunctionExpertWeights {
  std::string category;
  Matrix weight;  // d_xy x 2
  RowVector bias;  // 1 x d_xy
};

/// Semantic initialization: bias_i = P * encode(description_i), with P a fixed
/// seeded projection (d_xy x d_text) and the pooled encoding scaled to unit
/// norm. Weights get the usual small uniform draw.
std::vector<FunctionExpertWeights> init_function_experts(const std::vector<std::string>& descriptions,
                                                         const std::vector<std::string>& categories,
                                                         const TextEncoder& encoder, Eigen::Index d_xy,
                                                         std::uint64_t seed);

struct LocationMoeConfig {
  Eigen::Index record_dim = 176;
  Eigen::Index d_xy = 128;
  Eigen::Index d_hist = 64;
  int num_experts = 5;
  int top_k = 2;
  Eigen::Index router_hidden = 80;
};

/// Function-aware spatial embedding for current-trajectory records:
///   r = MLP([e_c0; h_hist]),  p = softmax(r),
///   e_func = sum_{i in topk(p)} p_i f_i(x, y),  enhanced = e_xy + e_func.
/// Probabilities are not renormalized over the selected set.
class LocationSemanticsMoe {
 public:
  LocationSemanticsMoe() = default;
  LocationSemanticsMoe(ParameterStore& store, const LocationMoeConfig& cfg,
                       const std::vector<FunctionExpertWeights>& experts, Rng& rng);

  const LocationMoeConfig& config() const { return cfg_; }
  const LinearLayer& expert(int i) const;

  /// e_c0 (N x D), h_hist (1 x d_hist) -> router logits (N x K_f).
  ad::Var route_logits(ad::Graph& g, ad::Var e_c0, ad::Var h_hist) const;

  /// f_i(xy) for xy (1 x 2).
  ad::Var apply_expert(ad::Graph& g, int i, ad::Var xy) const;

  /// shared + sum over `selected` of probs(0, i) * f_i(xy). probs is 1 x K_f.
  ad::Var enhance(ad::Graph& g, ad::Var xy, ad::Var probs, const std::vector<int>& selected, ad::Var shared) const;

  FunctionRouting route_functions(const RowVector& e_c0, const RowVector& h_hist) const;
  RowVector apply_function_expert(int i, double x, double y) const;
  RowVector enhance_spatial_embedding(double x, double y, const FunctionRouting& routing,
                                      const RowVector& shared_spatial) const;

 private:
  LocationMoeConfig cfg_;
  LinearLayer hidden_;
  LinearLayer out_;
  std::vector<LinearLayer> experts_;
};

}  // namespace nextlocmoe
