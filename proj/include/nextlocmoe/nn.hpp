#pragma once

#include "nextlocmoe/autodiff.hpp"
#include "nextlocmoe/parameters.hpp"
#include "nextlocmoe/rng.hpp"

#include <string>

namespace nextlocmoe {

enum class Init { uniform_fan_in, normal, zeros, ones };

/// rows x cols matrix drawn per `init`. uniform_fan_in draws from
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); normal uses `stddev`.
Matrix init_matrix(Eigen::Index rows, Eigen::Index cols, Init init, Eigen::Index fan_in, Rng& rng,
                   double stddev = 0.02);

/// y = x W^T + b with W stored (out x in).
struct LinearLayer {
  const Parameter* weight = nullptr;
  const Parameter* bias = nullptr;

  static LinearLayer create(ParameterStore& store, const std::string& name, ParamGroup group, Eigen::Index in,
                            Eigen::Index out, Rng& rng, bool with_bias = true, Init weight_init = Init::uniform_fan_in,
                            Init bias_init = Init::uniform_fan_in, double stddev = 0.02);
  static LinearLayer bind(const ParameterStore& store, const std::string& name, bool with_bias = true);

  Eigen::Index in_features() const { return weight->value.cols(); }
  Eigen::Index out_features() const { return weight->value.rows(); }

  ad::Var operator()(ad::Graph& g, ad::Var x) const {
    return ad::linear(x, g.param(*weight), bias != nullptr ? g.param(*bias) : ad::Var{});
  }
};

struct LayerNormLayer {
  const Parameter* gamma = nullptr;
  const Parameter* beta = nullptr;

  static LayerNormLayer create(ParameterStore& store, const std::string& name, Eigen::Index width);
  static LayerNormLayer bind(const ParameterStore& store, const std::string& name);

  ad::Var operator()(ad::Graph& g, ad::Var x) const {
    return ad::layer_norm_rows(x, g.param(*gamma), g.param(*beta));
  }
};

/// Evaluates `fn(graph)` in a graph that records no gradients and returns the
/// resulting value. Used by the value-level APIs.
template <typename Fn>
Matrix evaluate_value(Fn&& fn) {
  ad::Graph g(false);
  return fn(g).value();
}

}  // namespace nextlocmoe
