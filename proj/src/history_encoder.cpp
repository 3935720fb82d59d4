#include "nextlocmoe/history_encoder.hpp"

#include <stdexcept>

namespace nextlocmoe {

int TcnConfig::receptive_field() const {
  int r = 1;
  for (int d : dilations) r += d * (kernel - 1);
  return r;
}

void TcnConfig::validate() const {
  if (dilations.empty()) throw std::invalid_argument("TCN needs at least one layer");
  if (kernel < 1) throw std::invalid_argument("TCN kernel must be >= 1");
  if (channels.size() != dilations.size()) throw std::invalid_argument("TCN needs one channel width per layer");
  for (int d : dilations) {
    if (d < 1) throw std::invalid_argument("TCN dilations must be positive");
  }
  for (int c : channels) {
    if (c < 1) throw std::invalid_argument("TCN channel widths must be positive");
  }
  if (d_hist < 1) throw std::invalid_argument("d_hist must be positive");
}

HistoryEncoder::HistoryEncoder(ParameterStore& store, Eigen::Index input_dim, const TcnConfig& cfg, Rng& rng)
    : cfg_(cfg), input_dim_(input_dim) {
  cfg_.validate();
  Eigen::Index in = input_dim;
  for (int l = 0; l < cfg_.layers(); ++l) {
    const Eigen::Index out = cfg_.channels[static_cast<std::size_t>(l)];
    auto conv = LinearLayer::create(store, "history.conv" + std::to_string(l), ParamGroup::history_encoder,
                                    in * cfg_.kernel, out, rng);
    layers_.push_back({conv, cfg_.dilations[static_cast<std::size_t>(l)]});
    in = out;
  }
  output_ = LinearLayer::create(store, "history.output", ParamGroup::history_encoder, in, cfg_.d_hist, rng);
}

ad::Var HistoryEncoder::encode(ad::Graph& g, ad::Var z_h) const {
  if (z_h.rows() < 1) throw std::invalid_argument("history must contain at least one record");
  if (z_h.cols() != input_dim_) throw std::invalid_argument("history embedding width mismatch");
  ad::Var x = z_h;
  for (const auto& layer : layers_) {
    std::vector<ad::Var> taps;
    taps.reserve(static_cast<std::size_t>(cfg_.kernel));
    for (int t = 0; t < cfg_.kernel; ++t) taps.push_back(ad::shift_down(x, static_cast<Eigen::Index>(t) * layer.dilation));
    ad::Var y = ad::gelu(layer.conv(g, ad::concat_cols(taps)));
    if (y.cols() == x.cols()) y = ad::add(y, x);
    x = y;
  }
  return output_(g, ad::slice_rows(x, x.rows() - 1, 1));
}

RowVector HistoryEncoder::encode_history(const Matrix& z_h) const {
  return evaluate_value([&](ad::Graph& g) { return encode(g, g.constant(z_h)); });
}

}  // namespace nextlocmoe
