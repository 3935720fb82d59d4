#include "nextlocmoe/st_embedding.hpp"

#include <cmath>
#include <stdexcept>

namespace nextlocmoe {

namespace {
constexpr double kNormalizedBound = 1.5;
}

StEmbedding::StEmbedding(ParameterStore& store, const EmbeddingDims& dims, Rng& rng) : dims_(dims) {
  if (dims.d_xy <= 0 || dims.d_w <= 0 || dims.d_d <= 0 || dims.d_dur <= 0) {
    throw std::invalid_argument("embedding dimensions must be positive");
  }
  spatial_ = LinearLayer::create(store, "embedding.spatial", ParamGroup::embedding, 2, dims.d_xy, rng);
  duration_ = LinearLayer::create(store, "embedding.duration", ParamGroup::embedding, 1, dims.d_dur, rng);
  // Lookup tables: fan-in of a one-hot row is 1, so draw from U(-1, 1).
  day_table_ = &store.add("embedding.day_table", ParamGroup::embedding,
                          init_matrix(7, dims.d_w, Init::uniform_fan_in, 1, rng));
  hour_table_ = &store.add("embedding.hour_table", ParamGroup::embedding,
                           init_matrix(24, dims.d_d, Init::uniform_fan_in, 1, rng));
}

Matrix StEmbedding::coordinates(std::span<const Record> records) {
  Matrix xy(static_cast<Eigen::Index>(records.size()), 2);
  for (std::size_t i = 0; i < records.size(); ++i) {
    xy(static_cast<Eigen::Index>(i), 0) = records[i].location.x;
    xy(static_cast<Eigen::Index>(i), 1) = records[i].location.y;
  }
  return xy;
}

ad::Var StEmbedding::embed(ad::Graph& g, std::span<const Record> records) const {
  if (records.empty()) throw std::invalid_argument("cannot embed an empty trajectory");
  const auto n = static_cast<Eigen::Index>(records.size());
  Matrix xy(n, 2);
  Matrix dur(n, 1);
  Matrix day_onehot = Matrix::Zero(n, 7);
  Matrix hour_onehot = Matrix::Zero(n, 24);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Record& r = records[static_cast<std::size_t>(i)];
    if (std::abs(r.location.x) > kNormalizedBound || std::abs(r.location.y) > kNormalizedBound) {
      throw std::invalid_argument("record coordinates look unnormalized (|x| or |y| > 1.5)");
    }
    if (r.w < 0 || r.w > 6 || r.d < 0 || r.d > 23) throw std::invalid_argument("record time fields out of range");
    xy(i, 0) = r.location.x;
    xy(i, 1) = r.location.y;
    dur(i, 0) = r.dur;
    day_onehot(i, r.w) = 1.0;
    hour_onehot(i, r.d) = 1.0;
  }
  ad::Var spatial = spatial_(g, g.constant(std::move(xy)));
  ad::Var day = ad::matmul(g.constant(std::move(day_onehot)), g.param(*day_table_));
  ad::Var hour = ad::matmul(g.constant(std::move(hour_onehot)), g.param(*hour_table_));
  ad::Var duration = duration_(g, g.constant(std::move(dur)));
  return ad::concat_cols({spatial, day, hour, duration});
}

RowVector StEmbedding::embed_record(const Record& r) const {
  return evaluate_value([&](ad::Graph& g) { return embed(g, std::span<const Record>(&r, 1)); });
}

Matrix StEmbedding::embed_trajectory(std::span<const Record> records) const {
  return evaluate_value([&](ad::Graph& g) { return embed(g, records); });
}

}  // namespace nextlocmoe
