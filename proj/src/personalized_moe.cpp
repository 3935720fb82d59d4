#include "nextlocmoe/personalized_moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nextlocmoe {

std::vector<int> select_experts_by_threshold(const RowVector& probs, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("threshold tau must be in (0, 1]");
  if (probs.size() == 0) throw std::invalid_argument("empty probability vector");
  std::vector<int> order(static_cast<std::size_t>(probs.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs(a) > probs(b); });
  double cum = 0.0;
  std::size_t n = 0;
  while (n < order.size()) {
    cum += probs(order[n]);
    ++n;
    if (cum >= tau) break;
  }
  order.resize(n);
  return order;
}

double routing_entropy(const RowVector& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs(i);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

UserRouting make_user_routing(const RowVector& scores, double tau) {
  UserRouting r;
  r.scores = scores;
  const double mx = scores.maxCoeff();
  RowVector e = (scores.array() - mx).exp().matrix();
  r.probs = e / e.sum();
  r.selected = select_experts_by_threshold(r.probs, tau);
  for (int i : r.selected) r.cumulative += r.probs(i);
  r.entropy = routing_entropy(r.probs);
  return r;
}

Matrix pool_descriptions(const std::vector<std::string>& descriptions, const TextEncoder& encoder) {
  Matrix pooled(static_cast<Eigen::Index>(descriptions.size()), encoder.dim());
  for (std::size_t i = 0; i < descriptions.size(); ++i) {
    pooled.row(static_cast<Eigen::Index>(i)) = encoder.encode_pooled(descriptions[i]);
  }
  return pooled;
}

Matrix compute_group_priors(const std::vector<std::string>& descriptions, const TextEncoder& encoder,
                            const LinearLayer& proj, std::size_t expected_groups) {
  if (descriptions.size() != expected_groups) {
    throw std::invalid_argument("expected " + std::to_string(expected_groups) + " group descriptions, got " +
                                std::to_string(descriptions.size()));
  }
  Matrix pooled = pool_descriptions(descriptions, encoder);
  return evaluate_value([&](ad::Graph& g) { return proj(g, g.constant(pooled)); });
}

ad::Var LoraAdapter::delta(ad::Graph& g, ad::Var x) const {
  return ad::scale(ad::matmul_nt(ad::matmul_nt(x, g.param(*a)), g.param(*b)), scaling);
}

ad::Var UserGroupExpert::operator()(ad::Graph& g, ad::Var x) const {
  ad::Var h = ad::gelu(ad::add(base->up(g, x), up.delta(g, x)));
  return ad::add(base->down(g, h), down.delta(g, h));
}

UserRouter::UserRouter(ParameterStore& store, const std::string& prefix, const UserRouterConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  if (!(cfg.tau > 0.0 && cfg.tau <= 1.0)) throw std::invalid_argument("threshold tau must be in (0, 1]");
  fusion_ = LinearLayer::create(store, prefix + ".fusion", ParamGroup::user_router,
                                cfg.d_model + cfg.d_hist + cfg.d_prior, cfg.d_fuse, rng);
  gate_ = LinearLayer::create(store, prefix + ".gate", ParamGroup::user_router, cfg.d_fuse, 1, rng);
}

ad::Var UserRouter::scores(ad::Graph& g, ad::Var x, ad::Var h_hist, ad::Var priors) const {
  if (x.rows() != 1 || x.cols() != cfg_.d_model || h_hist.rows() != 1 || h_hist.cols() != cfg_.d_hist ||
      priors.cols() != cfg_.d_prior) {
    throw std::invalid_argument("user router input dimension mismatch");
  }
  const Eigen::Index k = priors.rows();
  ad::Var z = ad::concat_cols({ad::repeat_rows(x, k), ad::repeat_rows(h_hist, k), priors});
  return ad::transpose(gate_(g, ad::gelu(fusion_(g, z))));
}

UserRouting UserRouter::score_user_experts(const RowVector& x, const RowVector& h_hist, const Matrix& priors) const {
  ad::Graph g(false);
  RowVector s = scores(g, g.constant(x), g.constant(h_hist), g.constant(priors)).value();
  return make_user_routing(s, cfg_.tau);
}

std::vector<UserGroupExpert> init_personalized_experts_from_ffn(ParameterStore& store, const std::string& prefix,
                                                                const FfnLayer& base,
                                                                const std::vector<std::string>& groups,
                                                                const LoraConfig& lora, Rng& rng) {
  if (lora.rank < 1) throw std::invalid_argument("LoRA rank must be >= 1");
  const Eigen::Index d_model = base.up.in_features();
  const Eigen::Index d_ffn = base.up.out_features();
  std::vector<UserGroupExpert> experts;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const std::string name = prefix + ".expert" + std::to_string(i);
    UserGroupExpert e;
    e.index = static_cast<int>(i);
    e.group = groups[i];
    e.base = &base;
    e.up.scaling = lora.scaling();
    e.up.a = &store.add(name + ".lora_up.a", ParamGroup::lora,
                        init_matrix(lora.rank, d_model, Init::uniform_fan_in, d_model, rng));
    e.up.b = &store.add(name + ".lora_up.b", ParamGroup::lora, Matrix::Zero(d_ffn, lora.rank));
    e.down.scaling = lora.scaling();
    e.down.a = &store.add(name + ".lora_down.a", ParamGroup::lora,
                          init_matrix(lora.rank, d_ffn, Init::uniform_fan_in, d_ffn, rng));
    e.down.b = &store.add(name + ".lora_down.b", ParamGroup::lora, Matrix::Zero(d_model, lora.rank));
    experts.push_back(e);
  }
  return experts;
}

ad::Var moe_ffn_forward(ad::Graph& g, ad::Var x, ad::Var probs, const std::vector<int>& selected,
                        const std::vector<UserGroupExpert>& experts, std::size_t* expert_calls) {
  if (selected.empty()) throw std::invalid_argument("no experts selected");
  if (probs.rows() != 1 || probs.cols() != static_cast<Eigen::Index>(experts.size())) {
    throw std::invalid_argument("routing probabilities do not match expert count");
  }
  const FfnLayer* base = experts[static_cast<std::size_t>(selected.front())].base;
  ad::Var pre = base->up(g, x);
  ad::Var hidden_sum;
  ad::Var lora_sum;
  ad::Var mass;
  for (int i : selected) {
    const auto& e = experts.at(static_cast<std::size_t>(i));
    if (e.base != base) throw std::invalid_argument("experts of one layer must share the base FFN");
    ad::Var p = ad::element(probs, 0, i);
    ad::Var h = ad::gelu(ad::add(pre, e.up.delta(g, x)));
    ad::Var wh = ad::scale_by(h, p);
    ad::Var wl = ad::scale_by(e.down.delta(g, h), p);
    hidden_sum = hidden_sum.valid() ? ad::add(hidden_sum, wh) : wh;
    lora_sum = lora_sum.valid() ? ad::add(lora_sum, wl) : wl;
    mass = mass.valid() ? ad::add(mass, p) : p;
    if (expert_calls != nullptr) ++*expert_calls;
  }
  ad::Var out = ad::linear(hidden_sum, g.param(*base->down.weight));
  if (base->down.bias != nullptr) out = ad::add_row(out, ad::scale_by(g.param(*base->down.bias), mass));
  return ad::add(out, lora_sum);
}

Matrix moe_ffn_forward(const Matrix& x, const UserRouting& routing, const std::vector<UserGroupExpert>& experts,
                       std::size_t* expert_calls) {
  ad::Graph g(false);
  return moe_ffn_forward(g, g.constant(x), g.constant(routing.probs), routing.selected, experts, expert_calls)
      .value();
}

}  // namespace nextlocmoe
