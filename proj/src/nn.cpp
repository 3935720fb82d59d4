#include "nextlocmoe/nn.hpp"

#include <cmath>

namespace nextlocmoe {

Matrix init_matrix(Eigen::Index rows, Eigen::Index cols, Init init, Eigen::Index fan_in, Rng& rng, double stddev) {
  Matrix m(rows, cols);
  switch (init) {
    case Init::zeros:
      m.setZero();
      break;
    case Init::ones:
      m.setOnes();
      break;
    case Init::normal:
      for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.normal(0.0, stddev);
      }
      break;
    case Init::uniform_fan_in: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(fan_in, 1)));
      for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(-bound, bound);
      }
      break;
    }
  }
  return m;
}

LinearLayer LinearLayer::create(ParameterStore& store, const std::string& name, ParamGroup group, Eigen::Index in,
                                Eigen::Index out, Rng& rng, bool with_bias, Init weight_init, Init bias_init,
                                double stddev) {
  LinearLayer layer;
  layer.weight = &store.add(name + ".weight", group, init_matrix(out, in, weight_init, in, rng, stddev));
  if (with_bias) layer.bias = &store.add(name + ".bias", group, init_matrix(1, out, bias_init, in, rng, stddev));
  return layer;
}

LinearLayer LinearLayer::bind(const ParameterStore& store, const std::string& name, bool with_bias) {
  LinearLayer layer;
  layer.weight = &store.get(name + ".weight");
  if (with_bias) layer.bias = &store.get(name + ".bias");
  return layer;
}

LayerNormLayer LayerNormLayer::create(ParameterStore& store, const std::string& name, Eigen::Index width) {
  LayerNormLayer ln;
  ln.gamma = &store.add(name + ".gamma", ParamGroup::layer_norm, Matrix::Ones(1, width));
  ln.beta = &store.add(name + ".beta", ParamGroup::layer_norm, Matrix::Zero(1, width));
  return ln;
}

LayerNormLayer LayerNormLayer::bind(const ParameterStore& store, const std::string& name) {
  return {&store.get(name + ".gamma"), &store.get(name + ".beta")};
}

}  // namespace nextlocmoe
