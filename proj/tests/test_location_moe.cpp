#include "nextlocmoe/location_moe.hpp"
#include "nextlocmoe/taxonomy.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nextlocmoe {
namespace {

using testing::random_matrix;

std::vector<std::string> category_names() {
  std::vector<std::string> out;
  for (auto n : location_function_names()) out.emplace_back(n);
  return out;
}

std::vector<FunctionExpertWeights> bundled_experts(Eigen::Index d_xy, std::uint64_t seed = 1) {
  const HashedBagOfWordsEncoder enc(64, 2024);
  return init_function_experts(load_function_descriptions(default_asset_dir()), category_names(), enc, d_xy, seed);
}

struct Fixture {
  ParameterStore store;
  LocationSemanticsMoe moe;
  explicit Fixture(LocationMoeConfig cfg = {}, std::uint64_t seed = 3) {
    Rng rng(seed);
    moe = LocationSemanticsMoe(store, cfg, bundled_experts(cfg.d_xy, seed), rng);
  }
  void zero_router() {
    for (const char* n : {"location_moe.router.out.weight", "location_moe.router.out.bias"})
      store.mutable_get(n).value.setZero();
  }
};

TEST(SelectTopK, OrdersByProbabilityWithIndexTieBreak) {
  EXPECT_EQ(select_top_k(RowVector::Constant(5, 0.2), 2), (std::vector<int>{0, 1}));
  RowVector p(5);
  p << 0.1, 0.3, 0.1, 0.3, 0.2;
  EXPECT_EQ(select_top_k(p, 3), (std::vector<int>{1, 3, 4}));
  EXPECT_EQ(select_top_k(p, 9).size(), 5u);
  EXPECT_THROW(select_top_k(p, 0), std::invalid_argument);
}

TEST(SelectTopK, SelectedDominateUnselected) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const RowVector p = testing::random_probs(rng, 5);
    const int k = 1 + static_cast<int>(rng.index(5));
    const auto sel = select_top_k(p, k);
    ASSERT_EQ(sel.size(), static_cast<std::size_t>(k));
    double min_sel = 1.0;
    for (int i : sel) min_sel = std::min(min_sel, p(i));
    for (int i = 0; i < 5; ++i) {
      if (std::find(sel.begin(), sel.end(), i) == sel.end()) EXPECT_GE(min_sel, p(i));
    }
  }
}

TEST(RouteFunctions, ZeroOutputLayerGivesUniformRouting) {
  Fixture f;
  f.zero_router();
  Rng rng(2);
  const auto r = f.moe.route_functions(random_matrix(1, 176, rng), random_matrix(1, 64, rng));
  EXPECT_LT((r.probs - RowVector::Constant(5, 0.2)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(r.selected, (std::vector<int>{0, 1}));
}

TEST(RouteFunctions, AnalyticSoftmax) {
  Fixture f;
  f.zero_router();
  f.store.mutable_get("location_moe.router.out.bias").value(0, 0) = std::log(2.0);
  Rng rng(2);
  const auto r = f.moe.route_functions(random_matrix(1, 176, rng), random_matrix(1, 64, rng));
  RowVector expected(5);
  expected << 2.0 / 6, 1.0 / 6, 1.0 / 6, 1.0 / 6, 1.0 / 6;
  EXPECT_LT((r.probs - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(r.selected, (std::vector<int>{0, 1}));
}

TEST(RouteFunctions, MatchesExtendedPrecisionOracle) {
  // Oracle recomputes the router MLP and softmax in long double.
  Fixture f;
  Rng rng(4);
  const Matrix& w1 = f.store.get("location_moe.router.hidden.weight").value;
  const Matrix& b1 = f.store.get("location_moe.router.hidden.bias").value;
  const Matrix& w2 = f.store.get("location_moe.router.out.weight").value;
  const Matrix& b2 = f.store.get("location_moe.router.out.bias").value;
  const long double c = std::sqrt(2.0L / 3.14159265358979323846264338327950288L);
  for (int t = 0; t < 50; ++t) {
    const RowVector e = random_matrix(1, 176, rng), h = random_matrix(1, 64, rng);
    RowVector z(240);
    z << e, h;
    std::vector<long double> hidden(80);
    for (int j = 0; j < 80; ++j) {
      long double a = b1(0, j);
      for (int i = 0; i < 240; ++i) a += static_cast<long double>(w1(j, i)) * z(i);
      hidden[static_cast<std::size_t>(j)] = 0.5L * a * (1.0L + std::tanh(c * (a + 0.044715L * a * a * a)));
    }
    std::vector<long double> logit(5);
    for (int k = 0; k < 5; ++k) {
      long double a = b2(0, k);
      for (int j = 0; j < 80; ++j) a += static_cast<long double>(w2(k, j)) * hidden[static_cast<std::size_t>(j)];
      logit[static_cast<std::size_t>(k)] = a;
    }
    const long double mx = *std::max_element(logit.begin(), logit.end());
    long double total = 0;
    for (auto& l : logit) total += std::exp(l - mx);
    const auto r = f.moe.route_functions(e, h);
    EXPECT_NEAR(r.probs.sum(), 1.0, 1e-12);
    for (int k = 0; k < 5; ++k) {
      EXPECT_GT(r.probs(k), 0.0);
      EXPECT_NEAR(r.probs(k), static_cast<double>(std::exp(logit[static_cast<std::size_t>(k)] - mx) / total), 1e-9);
    }
  }
}

TEST(RouteFunctions, ShiftInvariance) {
  Fixture f;
  Rng rng(5);
  const RowVector e = random_matrix(1, 176, rng), h = random_matrix(1, 64, rng);
  const auto a = f.moe.route_functions(e, h);
  f.store.mutable_get("location_moe.router.out.bias").value.array() += 3.7;
  const auto b = f.moe.route_functions(e, h);
  EXPECT_LT((a.probs - b.probs).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(a.selected, b.selected);
}

TEST(RouteFunctions, RejectsDimensionMismatch) {
  Fixture f;
  EXPECT_THROW(f.moe.route_functions(RowVector::Zero(175), RowVector::Zero(64)), std::invalid_argument);
  EXPECT_THROW(f.moe.route_functions(RowVector::Zero(176), RowVector::Zero(63)), std::invalid_argument);
}

TEST(FunctionExpert, MatchesHandMatmul) {
  Fixture f;
  Rng rng(6);
  for (int i = 0; i < 5; ++i) {
    const Matrix& w = f.store.get("location_moe.expert" + std::to_string(i) + ".weight").value;
    const Matrix& b = f.store.get("location_moe.expert" + std::to_string(i) + ".bias").value;
    const double x = rng.uniform(-1, 1), y = rng.uniform(-1, 1);
    RowVector expected(128);
    for (int r = 0; r < 128; ++r) expected(r) = w(r, 0) * x + w(r, 1) * y + b(0, r);
    EXPECT_LT((f.moe.apply_function_expert(i, x, y) - expected).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(f.moe.apply_function_expert(i, 0.0, 0.0), RowVector(b));
  }
  EXPECT_THROW(f.moe.apply_function_expert(5, 0, 0), std::out_of_range);
}

TEST(Enhance, MatchesBruteForceOracle) {
  Fixture f;
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const RowVector e = random_matrix(1, 176, rng), h = random_matrix(1, 64, rng);
    const double x = rng.uniform(-1, 1), y = rng.uniform(-1, 1);
    const RowVector shared = random_matrix(1, 128, rng);
    const auto r = f.moe.route_functions(e, h);
    std::vector<int> order{0, 1, 2, 3, 4};
    std::sort(order.begin(), order.end(), [&](int a, int b) { return r.probs(a) > r.probs(b) || (r.probs(a) == r.probs(b) && a < b); });
    RowVector expected = shared;
    for (int j = 0; j < 2; ++j) {
      const int i = order[static_cast<std::size_t>(j)];
      const Matrix& w = f.store.get("location_moe.expert" + std::to_string(i) + ".weight").value;
      const Matrix& b = f.store.get("location_moe.expert" + std::to_string(i) + ".bias").value;
      for (int c = 0; c < 128; ++c) expected(c) += r.probs(i) * (w(c, 0) * x + w(c, 1) * y + b(0, c));
    }
    EXPECT_LT((f.moe.enhance_spatial_embedding(x, y, r, shared) - expected).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Enhance, ZeroExpertsAreNeutral) {
  Fixture f;
  for (int i = 0; i < 5; ++i) {
    f.store.mutable_get("location_moe.expert" + std::to_string(i) + ".weight").value.setZero();
    f.store.mutable_get("location_moe.expert" + std::to_string(i) + ".bias").value.setZero();
  }
  Rng rng(8);
  const RowVector shared = random_matrix(1, 128, rng);
  const auto r = f.moe.route_functions(random_matrix(1, 176, rng), random_matrix(1, 64, rng));
  EXPECT_EQ(f.moe.enhance_spatial_embedding(0.3, 0.4, r, shared), shared);
}

TEST(Enhance, AllExpertsUniformIsTheMean) {
  LocationMoeConfig cfg;
  cfg.top_k = 5;
  Fixture f(cfg);
  FunctionRouting r;
  r.probs = RowVector::Constant(5, 0.2);
  r.selected = {0, 1, 2, 3, 4};
  const RowVector shared = RowVector::Zero(128);
  RowVector mean = RowVector::Zero(128);
  for (int i = 0; i < 5; ++i) mean += f.moe.apply_function_expert(i, 0.5, -0.2) / 5.0;
  EXPECT_LT((f.moe.enhance_spatial_embedding(0.5, -0.2, r, shared) - mean).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(InitFunctionExperts, BiasIsProjectedUnitEncoding) {
  const HashedBagOfWordsEncoder enc(64, 2024);
  const auto descs = load_function_descriptions(default_asset_dir());
  const auto experts = init_function_experts(descs, category_names(), enc, 128, 5);
  Rng proj_rng(derive_seed(5, 0xf00d));
  const Matrix p = init_matrix(128, 64, Init::normal, 64, proj_rng, 1.0 / 8.0);
  for (std::size_t i = 0; i < 5; ++i) {
    const RowVector pooled = enc.encode_pooled(descs[i]).normalized();
    EXPECT_LT((experts[i].bias - (p * pooled.transpose()).transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(experts[i].category, std::string(location_function_names()[i]));
  }
}

TEST(InitFunctionExperts, DeterministicAndDistinct) {
  const auto a = bundled_experts(128, 9), b = bundled_experts(128, 9);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a[i].weight, b[i].weight);
    EXPECT_EQ(a[i].bias, b[i].bias);
  }
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = i + 1; j < 5; ++j) {
      const double cos = a[i].bias.dot(a[j].bias) / (a[i].bias.norm() * a[j].bias.norm());
      EXPECT_LT(cos, 0.99) << i << "," << j;
    }
  }
  const HashedBagOfWordsEncoder enc(64, 2024);
  const auto same = init_function_experts({"same text", "same text"}, {"a", "b"}, enc, 16, 1);
  EXPECT_EQ(same[0].bias, same[1].bias);
  EXPECT_THROW(init_function_experts({"one"}, {"a", "b"}, enc, 16, 1), std::invalid_argument);
}

TEST(LocationSemanticsMoe, RejectsBadConfig) {
  ParameterStore store;
  Rng rng(1);
  LocationMoeConfig cfg;
  cfg.top_k = 6;
  EXPECT_THROW(LocationSemanticsMoe(store, cfg, bundled_experts(128), rng), std::invalid_argument);
  cfg = {};
  auto experts = bundled_experts(128);
  experts.pop_back();
  EXPECT_THROW(LocationSemanticsMoe(store, cfg, experts, rng), std::invalid_argument);
}

}  // namespace
}  // namespace nextlocmoe
