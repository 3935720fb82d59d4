#include "nextlocmoe/model_config.hpp"

#include <stdexcept>

namespace nextlocmoe {

namespace {

std::vector<int> to_int_vector(const std::vector<long long>& v) { return {v.begin(), v.end()}; }

std::vector<long long> to_ll_vector(const std::vector<int>& v) { return {v.begin(), v.end()}; }

}  // namespace

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.profile = "paper";
  c.d_model = 256;
  c.heads = 8;
  c.d_ffn = 512;
  c.l1 = 8;
  c.l2 = 4;
  c.tcn.channels = {128, 128};
  c.tcn.d_hist = 128;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.profile = "tiny";
  c.embedding = {6, 3, 3, 3};
  c.tcn.dilations = {1, 2};
  c.tcn.channels = {5, 5};
  c.tcn.d_hist = 4;
  c.d_model = 8;
  c.heads = 2;
  c.d_ffn = 12;
  c.l1 = 1;
  c.l2 = 1;
  c.function_router_hidden = 6;
  c.d_text = 6;
  c.d_prior = 4;
  c.d_fuse = 5;
  c.lora = {2, 4.0};
  c.prompt_length = 2;
  c.head_hidden = 6;
  c.history_len = 4;
  c.current_len = 2;
  return c;
}

ModelConfig ModelConfig::for_profile(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  if (name == "tiny") return tiny();
  throw std::invalid_argument("unknown profile '" + name + "' (expected desk or paper)");
}

std::vector<std::string> ModelConfig::config_keys() {
  return {"d_xy",         "d_w",         "d_d",          "d_dur",          "tcn_kernel",    "tcn_dilations",
          "tcn_channels", "d_hist",      "d_model",      "heads",          "d_ffn",         "l1",
          "l2",           "k_f",         "top_k",        "function_router_hidden",          "k_p",
          "tau",          "d_text",      "d_prior",      "d_fuse",         "lora_rank",     "lora_alpha",
          "per_token_routing",           "prompt_length", "prompt_from_text",              "head_hidden",
          "dropout",      "history_len", "current_len",  "text_seed",      "function_encodings",
          "group_encodings"};
}

void ModelConfig::apply(const KeyValueConfig& kv) {
  embedding.d_xy = kv.get_int("d_xy", embedding.d_xy);
  embedding.d_w = kv.get_int("d_w", embedding.d_w);
  embedding.d_d = kv.get_int("d_d", embedding.d_d);
  embedding.d_dur = kv.get_int("d_dur", embedding.d_dur);
  tcn.kernel = static_cast<int>(kv.get_int("tcn_kernel", tcn.kernel));
  tcn.dilations = to_int_vector(kv.get_ints("tcn_dilations", to_ll_vector(tcn.dilations)));
  tcn.channels = to_int_vector(kv.get_ints("tcn_channels", to_ll_vector(tcn.channels)));
  tcn.d_hist = static_cast<int>(kv.get_int("d_hist", tcn.d_hist));
  d_model = kv.get_int("d_model", d_model);
  heads = static_cast<int>(kv.get_int("heads", heads));
  d_ffn = kv.get_int("d_ffn", d_ffn);
  l1 = static_cast<int>(kv.get_int("l1", l1));
  l2 = static_cast<int>(kv.get_int("l2", l2));
  num_functions = static_cast<int>(kv.get_int("k_f", num_functions));
  top_k = static_cast<int>(kv.get_int("top_k", top_k));
  function_router_hidden = kv.get_int("function_router_hidden", function_router_hidden);
  num_groups = static_cast<int>(kv.get_int("k_p", num_groups));
  tau = kv.get_double("tau", tau);
  d_text = kv.get_int("d_text", d_text);
  d_prior = kv.get_int("d_prior", d_prior);
  d_fuse = kv.get_int("d_fuse", d_fuse);
  lora.rank = static_cast<int>(kv.get_int("lora_rank", lora.rank));
  lora.alpha = kv.get_double("lora_alpha", lora.alpha);
  per_token_routing = kv.get_bool("per_token_routing", per_token_routing);
  prompt_length = static_cast<int>(kv.get_int("prompt_length", prompt_length));
  prompt_from_text = kv.get_bool("prompt_from_text", prompt_from_text);
  head_hidden = kv.get_int("head_hidden", head_hidden);
  dropout = kv.get_double("dropout", dropout);
  history_len = static_cast<int>(kv.get_int("history_len", history_len));
  current_len = static_cast<int>(kv.get_int("current_len", current_len));
  text_seed = static_cast<std::uint64_t>(kv.get_int("text_seed", static_cast<long long>(text_seed)));
  function_encodings = kv.get_string("function_encodings", function_encodings);
  group_encodings = kv.get_string("group_encodings", group_encodings);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  tcn.validate();
  if (embedding.d_xy < 1 || embedding.d_w < 1 || embedding.d_d < 1 || embedding.d_dur < 1) {
    fail("embedding widths must be >= 1");
  }
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be a positive multiple of heads");
  if (d_ffn < 1) fail("d_ffn must be >= 1");
  if (l1 < 0) fail("l1 must be >= 0");
  if (l2 < 1) fail("l2 must be >= 1");
  if (num_functions < 1) fail("k_f must be >= 1");
  if (top_k < 1 || top_k > num_functions) fail("top_k must be in [1, k_f]");
  if (num_groups < 1) fail("k_p must be >= 1");
  if (!(tau > 0.0 && tau <= 1.0)) fail("tau must be in (0, 1]");
  if (lora.rank < 1) fail("lora_rank must be >= 1");
  if (prompt_length < 0) fail("prompt_length must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (history_len < 1 || current_len < 1) fail("history_len and current_len must be >= 1");
  if (d_text < 1 || d_prior < 1 || d_fuse < 1 || head_hidden < 1 || function_router_hidden < 1) {
    fail("hidden widths must be >= 1");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"profile", profile},
          {"d_xy", embedding.d_xy},
          {"d_w", embedding.d_w},
          {"d_d", embedding.d_d},
          {"d_dur", embedding.d_dur},
          {"tcn_kernel", tcn.kernel},
          {"tcn_dilations", tcn.dilations},
          {"tcn_channels", tcn.channels},
          {"d_hist", tcn.d_hist},
          {"d_model", d_model},
          {"heads", heads},
          {"d_ffn", d_ffn},
          {"l1", l1},
          {"l2", l2},
          {"k_f", num_functions},
          {"top_k", top_k},
          {"function_router_hidden", function_router_hidden},
          {"k_p", num_groups},
          {"tau", tau},
          {"d_text", d_text},
          {"d_prior", d_prior},
          {"d_fuse", d_fuse},
          {"lora_rank", lora.rank},
          {"lora_alpha", lora.alpha},
          {"per_token_routing", per_token_routing},
          {"prompt_length", prompt_length},
          {"prompt_from_text", prompt_from_text},
          {"head_hidden", head_hidden},
          {"dropout", dropout},
          {"history_len", history_len},
          {"current_len", current_len},
          {"text_seed", text_seed},
          {"function_encodings", function_encodings},
          {"group_encodings", group_encodings}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.profile = j.at("profile").get<std::string>();
  c.embedding.d_xy = j.at("d_xy").get<Eigen::Index>();
  c.embedding.d_w = j.at("d_w").get<Eigen::Index>();
  c.embedding.d_d = j.at("d_d").get<Eigen::Index>();
  c.embedding.d_dur = j.at("d_dur").get<Eigen::Index>();
  c.tcn.kernel = j.at("tcn_kernel").get<int>();
  c.tcn.dilations = j.at("tcn_dilations").get<std::vector<int>>();
  c.tcn.channels = j.at("tcn_channels").get<std::vector<int>>();
  c.tcn.d_hist = j.at("d_hist").get<int>();
  c.d_model = j.at("d_model").get<Eigen::Index>();
  c.heads = j.at("heads").get<int>();
  c.d_ffn = j.at("d_ffn").get<Eigen::Index>();
  c.l1 = j.at("l1").get<int>();
  c.l2 = j.at("l2").get<int>();
  c.num_functions = j.at("k_f").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.function_router_hidden = j.at("function_router_hidden").get<Eigen::Index>();
  c.num_groups = j.at("k_p").get<int>();
  c.tau = j.at("tau").get<double>();
  c.d_text = j.at("d_text").get<Eigen::Index>();
  c.d_prior = j.at("d_prior").get<Eigen::Index>();
  c.d_fuse = j.at("d_fuse").get<Eigen::Index>();
  c.lora.rank = j.at("lora_rank").get<int>();
  c.lora.alpha = j.at("lora_alpha").get<double>();
  c.per_token_routing = j.at("per_token_routing").get<bool>();
  c.prompt_length = j.at("prompt_length").get<int>();
  c.prompt_from_text = j.at("prompt_from_text").get<bool>();
  c.head_hidden = j.at("head_hidden").get<Eigen::Index>();
  c.dropout = j.at("dropout").get<double>();
  c.history_len = j.at("history_len").get<int>();
  c.current_len = j.at("current_len").get<int>();
  c.text_seed = j.at("text_seed").get<std::uint64_t>();
  c.function_encodings = j.at("function_encodings").get<std::string>();
  c.group_encodings = j.at("group_encodings").get<std::string>();
  return c;
}

}  // namespace nextlocmoe
