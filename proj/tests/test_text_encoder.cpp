#include "nextlocmoe/taxonomy.hpp"
#include "nextlocmoe/text_encoder.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

namespace nextlocmoe {
namespace {

TEST(Tokenize, LowercasesAndSplitsOnNonAlphanumerics) {
  EXPECT_EQ(tokenize("Hello, World!  night-shift 24h"),
            (std::vector<std::string>{"hello", "world", "night", "shift", "24h"}));
  EXPECT_TRUE(tokenize(" ,.; ").empty());
}

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
}

TEST(HashedEncoder, DeterministicAndSeedDependent) {
  const HashedBagOfWordsEncoder a(16, 3), b(16, 3), c(16, 4);
  EXPECT_EQ(a.encode_tokens("school campus"), b.encode_tokens("school campus"));
  EXPECT_NE(a.encode_tokens("school campus"), c.encode_tokens("school campus"));
  EXPECT_EQ(a.encode_tokens("School, campus").rows(), 2);
  // Same token, same vector regardless of position or case.
  const Matrix m = a.encode_tokens("park PARK");
  EXPECT_EQ(RowVector(m.row(0)), RowVector(m.row(1)));
}

TEST(HashedEncoder, SingleTokenPoolsToItsOwnVector) {
  const HashedBagOfWordsEncoder enc(8, 11);
  EXPECT_EQ(enc.encode_pooled("library"), enc.token_vector("library"));
}

TEST(HashedEncoder, PoolingIsTheTokenMean) {
  const HashedBagOfWordsEncoder enc(5, 1);
  const RowVector expected =
      (enc.token_vector("quiet") + enc.token_vector("reading") + enc.token_vector("room")) / 3.0;
  EXPECT_LT((enc.encode_pooled("Quiet reading room.") - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(enc.encode_pooled("!!!"), RowVector::Zero(5));
}

TEST(PrecomputedEncoder, RoundTripsThroughFile) {
  Rng rng(5);
  const Matrix table = testing::random_matrix(3, 4, rng);
  const auto dir = testing::scratch_dir("precomputed");
  write_precomputed_encodings(dir / "enc.txt", "some-model", table);
  const PrecomputedTextEncoder enc(dir / "enc.txt", {"a", "b", "c"});
  EXPECT_EQ(enc.name(), "some-model");
  EXPECT_EQ(enc.table(), table);
  EXPECT_EQ(enc.encode_pooled("b"), RowVector(table.row(1)));
  EXPECT_THROW(enc.encode_tokens("missing"), std::invalid_argument);
  EXPECT_THROW(PrecomputedTextEncoder(dir / "enc.txt", {"a", "b"}), std::runtime_error);
  EXPECT_THROW(PrecomputedTextEncoder(dir / "absent.txt", {"a"}), std::runtime_error);
}

TEST(PrecomputedEncoder, RejectsMalformedHeader) {
  const auto dir = testing::scratch_dir("precomputed_bad");
  std::ofstream(dir / "bad.txt") << "encoder without hash\n1 2\n";
  EXPECT_THROW(PrecomputedTextEncoder(dir / "bad.txt", {"x"}), std::runtime_error);
}

TEST(Assets, DescriptionsExistForEveryCategory) {
  const auto functions = load_function_descriptions(default_asset_dir());
  const auto groups = load_group_descriptions(default_asset_dir());
  ASSERT_EQ(functions.size(), kNumLocationFunctions);
  ASSERT_EQ(groups.size(), kNumUserGroups);
  for (const auto& d : functions) EXPECT_GE(tokenize(d).size(), 5u);
  for (const auto& d : groups) EXPECT_GE(tokenize(d).size(), 5u);
  EXPECT_FALSE(load_prompt_prefix(default_asset_dir()).empty());
  EXPECT_EQ(user_group_from_string("night_shift_worker"), UserGroup::night_shift_worker);
  EXPECT_THROW(user_group_from_string("astronaut"), std::invalid_argument);
}

}  // namespace
}  // namespace nextlocmoe
