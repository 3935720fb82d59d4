#pragma once

#include "nextlocmoe/autodiff.hpp"
#include "nextlocmoe/nn.hpp"

#include <vector>

namespace nextlocmoe {

struct TcnConfig {
  int kernel = 3;
  std::vector<int> dilations{1, 2};
  /// Output channels of each layer; one entry per dilation.
  std::vector<int> channels{64, 64};
  int d_hist = 64;

  int layers() const { return static_cast<int>(dilations.size()); }
  /// 1 + sum over layers of dilation * (kernel - 1).
  int receptive_field() const;
  void validate() const;
};

/// Causal dilated 1-D convolutions over the time axis of the historical
/// embedding matrix. Each layer is GELU(conv(x)) plus x when widths match; the
/// final time step is projected to d_hist.
class HistoryEncoder {
 public:
  HistoryEncoder() = default;
  HistoryEncoder(ParameterStore& store, Eigen::Index input_dim, const TcnConfig& cfg, Rng& rng);

  const TcnConfig& config() const { return cfg_; }
  Eigen::Index output_dim() const { return cfg_.d_hist; }

  /// z_h (M x D) -> 1 x d_hist.
  ad::Var encode(ad::Graph& g, ad::Var z_h) const;

  RowVector encode_history(const Matrix& z_h) const;

 private:
  struct ConvLayer {
    LinearLayer conv;  // (out x kernel*in): tap t reads the input lagged by t*dilation
    int dilation;
  };

  TcnConfig cfg_;
  Eigen::Index input_dim_ = 0;
  std::vector<ConvLayer> layers_;
  LinearLayer output_;
};

}  // namespace nextlocmoe
