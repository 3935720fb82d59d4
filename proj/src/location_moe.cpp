#include "nextlocmoe/location_moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nextlocmoe {

std::vector<int> select_top_k(const RowVector& probs, int k) {
  const int n = static_cast<int>(probs.size());
  if (k < 1) throw std::invalid_argument("top-k needs k >= 1");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs(a) > probs(b); });
  order.resize(static_cast<std::size_t>(std::min(k, n)));
  return order;
}

std::vector<FunctionExpertWeights> init_function_experts(const std::vector<std::string>& descriptions,
                                                         const std::vector<std::string>& categories,
                                                         const TextEncoder& encoder, Eigen::Index d_xy,
                                                         std::uint64_t seed) {
  if (descriptions.size() != categories.size()) {
    throw std::invalid_argument("expected one description per function category (" +
                                std::to_string(categories.size()) + "), got " + std::to_string(descriptions.size()));
  }
  Rng proj_rng(derive_seed(seed, 0xf00d));
  const Eigen::Index d_text = encoder.dim();
  Matrix projection = init_matrix(d_xy, d_text, Init::normal, d_text, proj_rng,
                                  1.0 / std::sqrt(static_cast<double>(d_text)));
  std::vector<FunctionExpertWeights> out;
  for (std::size_t i = 0; i < descriptions.size(); ++i) {
    RowVector pooled = encoder.encode_pooled(descriptions[i]);
    const double nrm = pooled.norm();
    if (nrm > 0.0) pooled /= nrm;
    Rng w_rng(derive_seed(seed, 0xe000 + i));
    FunctionExpertWeights e;
    e.category = categories[i];
    e.weight = init_matrix(d_xy, 2, Init::uniform_fan_in, 2, w_rng);
    e.bias = (projection * pooled.transpose()).transpose();
    out.push_back(std::move(e));
  }
  return out;
}

LocationSemanticsMoe::LocationSemanticsMoe(ParameterStore& store, const LocationMoeConfig& cfg,
                                           const std::vector<FunctionExpertWeights>& experts, Rng& rng)
    : cfg_(cfg) {
  if (cfg.top_k < 1 || cfg.top_k > cfg.num_experts) throw std::invalid_argument("top_k must be in [1, K_f]");
  if (static_cast<int>(experts.size()) != cfg.num_experts) {
    throw std::invalid_argument("expected " + std::to_string(cfg.num_experts) + " function experts");
  }
  hidden_ = LinearLayer::create(store, "location_moe.router.hidden", ParamGroup::function_router,
                                cfg.record_dim + cfg.d_hist, cfg.router_hidden, rng);
  out_ = LinearLayer::create(store, "location_moe.router.out", ParamGroup::function_router, cfg.router_hidden,
                             cfg.num_experts, rng);
  for (int i = 0; i < cfg.num_experts; ++i) {
    const auto& e = experts[static_cast<std::size_t>(i)];
    if (e.weight.rows() != cfg.d_xy || e.weight.cols() != 2 || e.bias.size() != cfg.d_xy) {
      throw std::invalid_argument("function expert shape mismatch");
    }
    const std::string name = "location_moe.expert" + std::to_string(i);
    LinearLayer layer;
    layer.weight = &store.add(name + ".weight", ParamGroup::function_expert, e.weight);
    layer.bias = &store.add(name + ".bias", ParamGroup::function_expert, Matrix(e.bias));
    experts_.push_back(layer);
  }
}

const LinearLayer& LocationSemanticsMoe::expert(int i) const {
  if (i < 0 || i >= cfg_.num_experts) throw std::out_of_range("function expert index out of range");
  return experts_[static_cast<std::size_t>(i)];
}

ad::Var LocationSemanticsMoe::route_logits(ad::Graph& g, ad::Var e_c0, ad::Var h_hist) const {
  if (e_c0.cols() != cfg_.record_dim || h_hist.cols() != cfg_.d_hist || h_hist.rows() != 1) {
    throw std::invalid_argument("function router input dimension mismatch");
  }
  ad::Var z = ad::concat_cols({e_c0, ad::repeat_rows(h_hist, e_c0.rows())});
  return out_(g, ad::gelu(hidden_(g, z)));
}

ad::Var LocationSemanticsMoe::apply_expert(ad::Graph& g, int i, ad::Var xy) const { return expert(i)(g, xy); }

ad::Var LocationSemanticsMoe::enhance(ad::Graph& g, ad::Var xy, ad::Var probs, const std::vector<int>& selected,
                                      ad::Var shared) const {
  ad::Var acc = shared;
  for (int i : selected) {
    acc = ad::add(acc, ad::scale_by(apply_expert(g, i, xy), ad::element(probs, 0, i)));
  }
  return acc;
}

FunctionRouting LocationSemanticsMoe::route_functions(const RowVector& e_c0, const RowVector& h_hist) const {
  ad::Graph g(false);
  ad::Var logits = route_logits(g, g.constant(e_c0), g.constant(h_hist));
  FunctionRouting r;
  r.logits = logits.value();
  r.probs = ad::softmax_rows(logits).value();
  r.selected = select_top_k(r.probs, cfg_.top_k);
  return r;
}

RowVector LocationSemanticsMoe::apply_function_expert(int i, double x, double y) const {
  ad::Graph g(false);
  return apply_expert(g, i, g.constant(Matrix{{x, y}})).value();
}

RowVector LocationSemanticsMoe::enhance_spatial_embedding(double x, double y, const FunctionRouting& routing,
                                                          const RowVector& shared_spatial) const {
  ad::Graph g(false);
  return enhance(g, g.constant(Matrix{{x, y}}), g.constant(routing.probs), routing.selected,
                 g.constant(shared_spatial))
      .value();
}

}  // namespace nextlocmoe
