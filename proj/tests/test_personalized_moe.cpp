#include "nextlocmoe/personalized_moe.hpp"
#include "nextlocmoe/taxonomy.hpp"

#include "oracles.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace nextlocmoe {
namespace {

using testing::random_matrix;
using testing::random_probs;

TEST(Threshold, AnalyticCases) {
  RowVector p(3);
  p << 0.6, 0.3, 0.1;
  EXPECT_EQ(select_experts_by_threshold(p, 0.8), (std::vector<int>{0, 1}));
  RowVector one_hot = RowVector::Zero(11);
  one_hot(4) = 1.0;
  for (double tau : {0.1, 0.8, 1.0}) EXPECT_EQ(select_experts_by_threshold(one_hot, tau), std::vector<int>{4});
  const auto uniform = select_experts_by_threshold(RowVector::Constant(11, 1.0 / 11), 0.8);
  EXPECT_EQ(uniform, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8}));
}

TEST(Threshold, RejectsInvalidTau) {
  const RowVector p = RowVector::Constant(2, 0.5);
  EXPECT_THROW(select_experts_by_threshold(p, 0.0), std::invalid_argument);
  EXPECT_THROW(select_experts_by_threshold(p, 1.01), std::invalid_argument);
  EXPECT_THROW(select_experts_by_threshold(p, std::nan("")), std::invalid_argument);
  EXPECT_THROW(select_experts_by_threshold(RowVector(0), 0.5), std::invalid_argument);
}

TEST(Threshold, MatchesExhaustiveOracleAndIsMinimal) {
  Rng rng(17);
  for (int t = 0; t < 10000; ++t) {
    const RowVector p = random_probs(rng, 11);
    const double tau = t % 2 == 0 ? 0.8 : rng.uniform(0.01, 1.0);
    const auto sel = select_experts_by_threshold(p, tau);
    ASSERT_EQ(sel, oracles::threshold_selection(p, tau)) << "trial " << t;
    ASSERT_GE(sel.size(), 1u);
    double without_last = 0.0;
    for (std::size_t i = 0; i + 1 < sel.size(); ++i) without_last += p(sel[i]);
    ASSERT_LT(without_last, tau);
  }
}

TEST(Entropy, KnownValuesAndBounds) {
  RowVector one_hot = RowVector::Zero(11);
  one_hot(2) = 1.0;
  EXPECT_EQ(routing_entropy(one_hot), 0.0);
  EXPECT_NEAR(routing_entropy(RowVector::Constant(11, 1.0 / 11)), std::log(11.0), 1e-12);
  RowVector half = RowVector::Zero(11);
  half(0) = half(1) = 0.5;
  EXPECT_NEAR(routing_entropy(half), std::log(2.0), 1e-12);
  Rng rng(3);
  for (int t = 0; t < 1000; ++t) {
    const double h = routing_entropy(random_probs(rng, 11));
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(11.0) + 1e-12);
  }
}

TEST(MakeUserRouting, FillsAllFields) {
  RowVector s(3);
  s << std::log(6.0), std::log(3.0), std::log(1.0);
  const auto r = make_user_routing(s, 0.8);
  EXPECT_NEAR(r.probs(0), 0.6, 1e-12);
  EXPECT_EQ(r.selected, (std::vector<int>{0, 1}));
  EXPECT_NEAR(r.cumulative, 0.9, 1e-12);
  EXPECT_NEAR(r.entropy, -(0.6 * std::log(0.6) + 0.3 * std::log(0.3) + 0.1 * std::log(0.1)), 1e-12);
}

struct RouterFixture {
  ParameterStore store;
  UserRouter router;
  UserRouterConfig cfg;
  RouterFixture() {
    Rng rng(21);
    router = UserRouter(store, "router", cfg, rng);
  }
};

TEST(UserRouter, MatchesCompositionOracle) {
  RouterFixture f;
  Rng rng(22);
  const Matrix& wf = f.store.get("router.fusion.weight").value;
  const Matrix& bf = f.store.get("router.fusion.bias").value;
  const Matrix& wg = f.store.get("router.gate.weight").value;
  const Matrix& bg = f.store.get("router.gate.bias").value;
  for (int t = 0; t < 20; ++t) {
    const RowVector x = random_matrix(1, 128, rng), h = random_matrix(1, 64, rng);
    const Matrix priors = random_matrix(11, 32, rng);
    const auto r = f.router.score_user_experts(x, h, priors);
    for (int i = 0; i < 11; ++i) {
      std::vector<double> z;
      for (int c = 0; c < 128; ++c) z.push_back(x(c));
      for (int c = 0; c < 64; ++c) z.push_back(h(c));
      for (int c = 0; c < 32; ++c) z.push_back(priors(i, c));
      double score = bg(0, 0);
      for (int j = 0; j < 64; ++j) {
        double a = bf(0, j);
        for (std::size_t c = 0; c < z.size(); ++c) a += wf(j, static_cast<Eigen::Index>(c)) * z[c];
        score += wg(0, j) * oracles::gelu(a);
      }
      EXPECT_NEAR(r.scores(i), score, 1e-9);
    }
    EXPECT_NEAR(r.probs.sum(), 1.0, 1e-12);
  }
}

TEST(UserRouter, IdenticalPriorsOrZeroGateGiveUniform) {
  RouterFixture f;
  Rng rng(23);
  const RowVector x = random_matrix(1, 128, rng), h = random_matrix(1, 64, rng);
  const Matrix same = random_matrix(1, 32, rng).replicate(11, 1);
  auto r = f.router.score_user_experts(x, h, same);
  EXPECT_LT((r.probs - RowVector::Constant(11, 1.0 / 11)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(r.selected.size(), 9u);
  f.store.mutable_get("router.gate.weight").value.setZero();
  r = f.router.score_user_experts(x, h, random_matrix(11, 32, rng));
  EXPECT_LT((r.probs - RowVector::Constant(11, 1.0 / 11)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(f.router.score_user_experts(x, h, Matrix::Zero(11, 31)), std::invalid_argument);
  EXPECT_THROW(f.router.score_user_experts(RowVector::Zero(127), h, same), std::invalid_argument);
}

struct MoeFixture {
  ParameterStore store;
  FfnLayer base;
  std::vector<UserGroupExpert> experts;
  MoeFixture(Eigen::Index d = 6, Eigen::Index d_ffn = 10, int k = 11, std::uint64_t seed = 31) {
    Rng rng(seed);
    base.up = LinearLayer::create(store, "ffn.up", ParamGroup::backbone_ffn, d, d_ffn, rng);
    base.down = LinearLayer::create(store, "ffn.down", ParamGroup::backbone_ffn, d_ffn, d, rng);
    std::vector<std::string> groups;
    for (int i = 0; i < k; ++i) groups.push_back("g" + std::to_string(i));
    experts = init_personalized_experts_from_ffn(store, "moe", base, groups, LoraConfig{2, 4.0}, rng);
  }
  void randomize_adapters(Rng& rng) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store.mutable_at(i);
      if (p.group == ParamGroup::lora) p.value = random_matrix(p.value.rows(), p.value.cols(), rng, 0.3);
    }
  }
  Matrix ffn(const Matrix& x) const {
    return evaluate_value([&](ad::Graph& g) { return base(g, g.constant(x)); });
  }
  Matrix expert(int i, const Matrix& x) const {
    return evaluate_value([&](ad::Graph& g) { return experts[static_cast<std::size_t>(i)](g, g.constant(x)); });
  }
};

TEST(PersonalizedExperts, StartAsTheBaseFfn) {
  MoeFixture f;
  Rng rng(1);
  const Matrix x = random_matrix(4, 6, rng);
  for (int i = 0; i < 11; ++i) EXPECT_EQ(f.expert(i, x), f.ffn(x));
  for (const auto& e : f.experts) {
    EXPECT_EQ(e.up.b->value, Matrix::Zero(10, 2));
    EXPECT_EQ(e.down.b->value, Matrix::Zero(6, 2));
    EXPECT_DOUBLE_EQ(e.up.scaling, 2.0);
  }
}

TEST(MoeForward, OneHotRoutingEqualsFfn) {
  MoeFixture f;
  Rng rng(2);
  const Matrix x = random_matrix(5, 6, rng);
  for (int i = 0; i < 11; ++i) {
    UserRouting r;
    r.probs = RowVector::Zero(11);
    r.probs(i) = 1.0;
    r.selected = {i};
    EXPECT_LT((moe_ffn_forward(x, r, f.experts) - f.ffn(x)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(MoeForward, IdenticalExpertsScaleByMass) {
  MoeFixture f;
  Rng rng(3);
  const Matrix x = random_matrix(3, 6, rng);
  UserRouting r;
  r.probs = RowVector::Zero(11);
  r.probs(0) = 0.5;
  r.probs(1) = 0.4;
  r.probs(2) = 0.1;
  r.selected = {0, 1};
  EXPECT_LT((moe_ffn_forward(x, r, f.experts) - 0.9 * f.ffn(x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MoeForward, MatchesDenseOracleAndCountsCalls) {
  MoeFixture f;
  Rng rng(4);
  f.randomize_adapters(rng);
  for (int t = 0; t < 200; ++t) {
    const Matrix x = random_matrix(1 + static_cast<Eigen::Index>(rng.index(4)), 6, rng);
    const UserRouting r = make_user_routing(random_matrix(1, 11, rng, 2.0), rng.uniform(0.05, 1.0));
    Matrix dense = Matrix::Zero(x.rows(), 6);
    double max_norm = 0.0;
    std::vector<Matrix> outs;
    for (int i = 0; i < 11; ++i) {
      const bool chosen = std::find(r.selected.begin(), r.selected.end(), i) != r.selected.end();
      const Matrix h = f.expert(i, x);
      dense += (chosen ? r.probs(i) : 0.0) * h;
      if (chosen) outs.push_back(h);
    }
    std::size_t calls = 0;
    const Matrix out = moe_ffn_forward(x, r, f.experts, &calls);
    EXPECT_LT((out - dense).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(calls, r.selected.size());
    for (Eigen::Index row = 0; row < x.rows(); ++row) {
      max_norm = 0.0;
      for (const auto& h : outs) max_norm = std::max(max_norm, h.row(row).norm());
      EXPECT_LE(out.row(row).norm(), r.cumulative * max_norm + 1e-9);
    }
  }
}

TEST(MoeForward, RejectsMismatchedRouting) {
  MoeFixture f;
  UserRouting r;
  r.probs = RowVector::Constant(10, 0.1);
  r.selected = {0};
  EXPECT_THROW(moe_ffn_forward(Matrix::Zero(1, 6), r, f.experts), std::invalid_argument);
  r.probs = RowVector::Constant(11, 1.0 / 11);
  r.selected = {};
  EXPECT_THROW(moe_ffn_forward(Matrix::Zero(1, 6), r, f.experts), std::invalid_argument);
}

/// Toy encoder with fixed token vectors, for hand-checked pooling.
class ToyEncoder final : public TextEncoder {
 public:
  Matrix encode_tokens(std::string_view text) const override {
    const auto tokens = tokenize(text);
    Matrix out(static_cast<Eigen::Index>(tokens.size()), 2);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (tokens[i] == "a") out.row(r) << 1.0, 2.0;
      if (tokens[i] == "b") out.row(r) << 3.0, -1.0;
      if (tokens[i] == "c") out.row(r) << 0.5, 0.5;
    }
    return out;
  }
  Eigen::Index dim() const override { return 2; }
  std::string name() const override { return "toy"; }
};

TEST(GroupPriors, HandCheckedThreeTokenPooling) {
  // mean(a, b, c) = (1.5, 0.5); W = [[1, 0], [2, 1]], b = (0.1, -0.2) -> (1.6, 3.3).
  ParameterStore store;
  LinearLayer proj;
  proj.weight = &store.add("p.weight", ParamGroup::group_prior, Matrix{{1.0, 0.0}, {2.0, 1.0}});
  proj.bias = &store.add("p.bias", ParamGroup::group_prior, Matrix{{0.1, -0.2}});
  const Matrix priors = compute_group_priors({"a b c", "c"}, ToyEncoder{}, proj, 2);
  EXPECT_NEAR(priors(0, 0), 1.6, 1e-15);
  EXPECT_NEAR(priors(0, 1), 3.3, 1e-15);
  EXPECT_NEAR(priors(1, 0), 0.6, 1e-15);
  EXPECT_NEAR(priors(1, 1), 1.3, 1e-15);
  EXPECT_THROW(compute_group_priors({"a"}, ToyEncoder{}, proj, 2), std::invalid_argument);
}

TEST(GroupPriors, IdenticalTextsGiveIdenticalPriors) {
  ParameterStore store;
  Rng rng(5);
  const auto proj = LinearLayer::create(store, "p", ParamGroup::group_prior, 16, 4, rng);
  const Matrix priors = compute_group_priors({"gym runner", "gym runner", "office"},
                                             HashedBagOfWordsEncoder(16, 1), proj, 3);
  EXPECT_EQ(RowVector(priors.row(0)), RowVector(priors.row(1)));
  EXPECT_NE(RowVector(priors.row(0)), RowVector(priors.row(2)));
}

std::string format_hex(const Matrix& m) {
  std::ostringstream out;
  char buf[64];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%a", m(r, c));
      out << (c ? " " : "") << buf;
    }
    out << '\n';
  }
  return out.str();
}

TEST(GroupPriors, BundledTextsMatchGoldenFile) {
  // Regenerate with NEXTLOCMOE_REGENERATE_GOLDEN=1 after an intended change.
  ParameterStore store;
  Rng rng(2024);
  const auto proj = LinearLayer::create(store, "p", ParamGroup::group_prior, 64, 32, rng);
  const Matrix priors = compute_group_priors(load_group_descriptions(default_asset_dir()),
                                             HashedBagOfWordsEncoder(64, 2024), proj, kNumUserGroups);
  const std::filesystem::path golden = std::filesystem::path(NEXTLOCMOE_TEST_DATA_DIR) / "group_priors.golden";
  if (std::getenv("NEXTLOCMOE_REGENERATE_GOLDEN") != nullptr) std::ofstream(golden) << format_hex(priors);
  ASSERT_TRUE(std::filesystem::exists(golden));
  EXPECT_EQ(format_hex(priors), testing::read_file(golden));
}

}  // namespace
}  // namespace nextlocmoe
