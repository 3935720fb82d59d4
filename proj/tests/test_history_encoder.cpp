#include "nextlocmoe/history_encoder.hpp"

#include "oracles.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace nextlocmoe {
namespace {

using testing::random_matrix;

struct Fixture {
  ParameterStore store;
  HistoryEncoder enc;
  Fixture(Eigen::Index in, const TcnConfig& cfg, std::uint64_t seed = 1) {
    Rng rng(seed);
    enc = HistoryEncoder(store, in, cfg, rng);
  }
};

TEST(TcnConfig, ReceptiveFieldAndValidation) {
  EXPECT_EQ(TcnConfig{}.receptive_field(), 7);
  TcnConfig c;
  c.dilations = {1, 2, 4};
  c.channels = {8, 8, 8};
  EXPECT_EQ(c.receptive_field(), 15);
  c.channels = {8};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.dilations = {1, 0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.kernel = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(HistoryEncoder, MatchesLoopConvolutionOracle) {
  // Oracle: explicit loops over time, taps and channels with zero left padding.
  TcnConfig cfg;
  cfg.kernel = 2;
  cfg.dilations = {1, 3};
  cfg.channels = {3, 3};
  cfg.d_hist = 2;
  Fixture f(4, cfg, 6);
  Rng rng(2);
  const Matrix z = random_matrix(9, 4, rng);

  Matrix x = z;
  for (int l = 0; l < 2; ++l) {
    const Matrix& w = f.store.get("history.conv" + std::to_string(l) + ".weight").value;
    const Matrix& b = f.store.get("history.conv" + std::to_string(l) + ".bias").value;
    const int dil = cfg.dilations[static_cast<std::size_t>(l)];
    const Eigen::Index in = x.cols();
    Matrix y(x.rows(), w.rows());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      for (Eigen::Index o = 0; o < w.rows(); ++o) {
        double acc = b(0, o);
        for (int tap = 0; tap < cfg.kernel; ++tap) {
          const Eigen::Index src = t - tap * dil;
          if (src < 0) continue;
          for (Eigen::Index c = 0; c < in; ++c) acc += w(o, tap * in + c) * x(src, c);
        }
        y(t, o) = oracles::gelu(acc);
      }
    }
    if (y.cols() == x.cols()) y += x;
    x = y;
  }
  const Matrix& wo = f.store.get("history.output.weight").value;
  const RowVector expected = x.row(x.rows() - 1) * wo.transpose() + f.store.get("history.output.bias").value;
  EXPECT_LT((f.enc.encode_history(z) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(HistoryEncoder, ZeroInputWithZeroBiasesGivesZero) {
  Fixture f(6, TcnConfig{3, {1, 2}, {5, 5}, 4});
  for (const char* name : {"history.conv0.bias", "history.conv1.bias", "history.output.bias"})
    f.store.mutable_get(name).value.setZero();
  EXPECT_EQ(f.enc.encode_history(Matrix::Zero(10, 6)), RowVector::Zero(4));
}

TEST(HistoryEncoder, RowsOlderThanReceptiveFieldAreIgnored) {
  Fixture f(176, TcnConfig{});
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix z = random_matrix(40, 176, rng);
    const RowVector base = f.enc.encode_history(z);
    // Last row is M-1; the receptive field covers rows M-7 .. M-1.
    for (Eigen::Index r = 0; r <= 40 - 8; ++r) z.row(r) = random_matrix(1, 176, rng);
    EXPECT_EQ(f.enc.encode_history(z), base);
    z.row(40 - 7) = random_matrix(1, 176, rng);
    EXPECT_GT((f.enc.encode_history(z) - base).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(HistoryEncoder, SingleRowDependsOnlyOnThatRow) {
  Fixture f(6, TcnConfig{3, {1, 2}, {6, 6}, 3});
  Rng rng(8);
  const Matrix z = random_matrix(5, 6, rng);
  EXPECT_EQ(f.enc.encode_history(z.bottomRows(1)), f.enc.encode_history(z.bottomRows(1)));
  Matrix padded = Matrix::Zero(1, 6);
  padded.row(0) = z.row(4);
  EXPECT_EQ(f.enc.encode_history(padded), f.enc.encode_history(z.bottomRows(1)));
}

TEST(HistoryEncoder, AppendingARowChangesTheOutput) {
  Fixture f(176, TcnConfig{});
  Rng rng(9);
  int changed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix z = random_matrix(40, 176, rng);
    Matrix longer(41, 176);
    longer << z, random_matrix(1, 176, rng);
    changed += (f.enc.encode_history(longer) - f.enc.encode_history(z)).cwiseAbs().maxCoeff() > 1e-6;
  }
  EXPECT_GT(changed, 95);
}

TEST(HistoryEncoder, RejectsBadShapes) {
  Fixture f(6, TcnConfig{3, {1, 2}, {5, 5}, 4});
  EXPECT_THROW(f.enc.encode_history(Matrix(0, 6)), std::invalid_argument);
  EXPECT_THROW(f.enc.encode_history(Matrix::Zero(3, 5)), std::invalid_argument);
}

}  // namespace
}  // namespace nextlocmoe
