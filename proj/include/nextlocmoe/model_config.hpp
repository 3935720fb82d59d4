#pragma once

#include "nextlocmoe/config_file.hpp"
#include "nextlocmoe/history_encoder.hpp"
#include "nextlocmoe/personalized_moe.hpp"
#include "nextlocmoe/st_embedding.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace nextlocmoe {

struct ModelConfig {
  std::string profile = "desk";

  EmbeddingDims embedding;
  TcnConfig tcn;

  Eigen::Index d_model = 128;
  int heads = 4;
  Eigen::Index d_ffn = 256;
  int l1 = 2;
  int l2 = 2;

  int num_functions = 5;
  int top_k = 2;
  Eigen::Index function_router_hidden = 80;

  int num_groups = 11;
  double tau = 0.8;
  Eigen::Index d_text = 64;
  Eigen::Index d_prior = 32;
  Eigen::Index d_fuse = 64;
  LoraConfig lora;
  /// Route once per sequence (mean-pooled hidden state) or once per token.
  bool per_token_routing = false;

  int prompt_length = 8;
  bool prompt_from_text = true;
  Eigen::Index head_hidden = 64;
  double dropout = 0.0;

  /// Historical (M) and current (N) window lengths.
  int history_len = 40;
  int current_len = 5;

  /// Seed of the hashed bag-of-words fallback encoder.
  std::uint64_t text_seed = 2024;
  /// Optional precomputed encodings (one row per description); empty = fallback encoder.
  std::string function_encodings;
  std::string group_encodings;

  Eigen::Index record_dim() const { return embedding.total(); }
  int layers() const { return l1 + l2; }
  int sequence_length() const { return prompt_length + history_len + current_len; }

  static ModelConfig desk();
  static ModelConfig paper();
  /// Minimal widths for finite-difference checks.
  static ModelConfig tiny();
  /// "desk", "paper" or "tiny".
  static ModelConfig for_profile(const std::string& name);

  /// Overrides from flat keys (see config_keys()).
  void apply(const KeyValueConfig& kv);
  static std::vector<std::string> config_keys();

  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

}  // namespace nextlocmoe
