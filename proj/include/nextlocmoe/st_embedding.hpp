#pragma once

#include "nextlocmoe/autodiff.hpp"
#include "nextlocmoe/data_model.hpp"
#include "nextlocmoe/nn.hpp"

#include <span>

namespace nextlocmoe {

struct EmbeddingDims {
  Eigen::Index d_xy = 128;
  Eigen::Index d_w = 16;
  Eigen::Index d_d = 16;
  Eigen::Index d_dur = 16;

  Eigen::Index total() const { return d_xy + d_w + d_d + d_dur; }
};

/// Record embedding laid out as [spatial | day | hour | duration].
///
/// The spatial projection is also the shared expert of the location-semantics
/// MoE; there is exactly one instance of it.
class StEmbedding {
 public:
  StEmbedding() = default;
  StEmbedding(ParameterStore& store, const EmbeddingDims& dims, Rng& rng);

  const EmbeddingDims& dims() const { return dims_; }
  Eigen::Index dim() const { return dims_.total(); }

  const LinearLayer& spatial_projection() const { return spatial_; }

  /// Spatial slice only: xy (n x 2) -> n x d_xy.
  ad::Var spatial(ad::Graph& g, ad::Var xy) const { return spatial_(g, xy); }

  /// Rows are embed_record of each record. Throws on an empty sequence or on
  /// coordinates that look unnormalized (|x| or |y| > 1.5).
  ad::Var embed(ad::Graph& g, std::span<const Record> records) const;

  /// Coordinates of the records as an n x 2 constant.
  static Matrix coordinates(std::span<const Record> records);

  RowVector embed_record(const Record& r) const;
  Matrix embed_trajectory(std::span<const Record> records) const;

 private:
  EmbeddingDims dims_;
  LinearLayer spatial_;
  LinearLayer duration_;
  const Parameter* day_table_ = nullptr;
  const Parameter* hour_table_ = nullptr;
};

}  // namespace nextlocmoe
