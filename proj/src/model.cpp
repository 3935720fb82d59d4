#include "nextlocmoe/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nextlocmoe {

namespace {

enum Stream : std::uint64_t {
  kEmbeddingStream = 1,
  kHistoryStream,
  kFunctionExpertStream,
  kFunctionRouterStream,
  kInputProjStream,
  kPromptStream,
  kPromptProjectionStream,
  kPriorStream,
  kHeadStream,
  kLayerStreamBase = 100,
};

std::unique_ptr<TextEncoder> make_encoder(const std::string& precomputed, const std::vector<std::string>& texts,
                                          Eigen::Index d_text, std::uint64_t seed) {
  std::unique_ptr<TextEncoder> enc;
  if (precomputed.empty()) {
    enc = std::make_unique<HashedBagOfWordsEncoder>(d_text, seed);
  } else {
    enc = std::make_unique<PrecomputedTextEncoder>(precomputed, texts);
  }
  if (enc->dim() != d_text) {
    throw std::invalid_argument("text encoder '" + enc->name() + "' has width " + std::to_string(enc->dim()) +
                                ", config expects d_text=" + std::to_string(d_text));
  }
  return enc;
}

Matrix backbone_init(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  return init_matrix(rows, cols, Init::normal, cols, rng, 1.0 / std::sqrt(static_cast<double>(cols)));
}

LinearLayer backbone_linear(ParameterStore& store, const std::string& name, ParamGroup group, Eigen::Index in,
                            Eigen::Index out, Rng& rng, bool with_bias) {
  LinearLayer l;
  l.weight = &store.add(name + ".weight", group, backbone_init(out, in, rng));
  if (with_bias) l.bias = &store.add(name + ".bias", group, Matrix::Zero(1, out));
  return l;
}

/// Prefix rows from the prompt text: tokens are split into P contiguous chunks,
/// each chunk is mean-pooled, scaled to unit norm and mapped by a fixed projection.
Matrix prompt_rows_from_text(const TextEncoder& enc, const std::string& text, int prompt_length, Eigen::Index d_model,
                             Rng& rng) {
  Matrix tokens = enc.encode_tokens(text);
  Matrix projection = init_matrix(d_model, enc.dim(), Init::normal, enc.dim(), rng,
                                  1.0 / std::sqrt(static_cast<double>(enc.dim())));
  Matrix out(prompt_length, d_model);
  const Eigen::Index t = tokens.rows();
  for (int p = 0; p < prompt_length; ++p) {
    RowVector pooled = RowVector::Zero(enc.dim());
    if (t > 0) {
      const Eigen::Index lo = p * t / prompt_length;
      const Eigen::Index hi = std::max(lo + 1, (p + 1) * t / prompt_length);
      for (Eigen::Index r = lo; r < hi; ++r) pooled += tokens.row(r % t);
      const double n = pooled.norm();
      if (n > 0.0) pooled /= n;
    }
    out.row(p) = (projection * pooled.transpose()).transpose();
  }
  return out;
}

}  // namespace

RoutingSelections selections_of(const RoutingTrace& trace) {
  RoutingSelections s;
  for (const auto& f : trace.function) s.function.push_back(f.selected);
  for (const auto& u : trace.user) s.user.push_back(u.selected);
  return s;
}

Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index width) {
  Matrix pe(length, width);
  for (Eigen::Index pos = 0; pos < length; ++pos) {
    for (Eigen::Index i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * freq;
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

ad::Var assemble_input(ad::Graph& g, ad::Var hist_rows, ad::Var cur_rows, ad::Var prefix, const LinearLayer& in_proj,
                       const Matrix& positions) {
  if (hist_rows.cols() != in_proj.in_features() || cur_rows.cols() != in_proj.in_features()) {
    throw std::invalid_argument("record embedding width does not match the input projection");
  }
  ad::Var records = in_proj(g, ad::concat_rows({hist_rows, cur_rows}));
  ad::Var tokens = records;
  if (prefix.valid() && prefix.rows() > 0) {
    if (prefix.cols() != records.cols()) throw std::invalid_argument("prompt prefix width mismatch");
    tokens = ad::concat_rows({prefix, records});
  }
  if (positions.rows() < tokens.rows() || positions.cols() != tokens.cols()) {
    throw std::invalid_argument("positional table too small for the assembled sequence");
  }
  return ad::add(tokens, g.constant(positions.topRows(tokens.rows())));
}

bool is_frozen_group(ParamGroup group) {
  return group == ParamGroup::attention || group == ParamGroup::backbone_ffn || group == ParamGroup::expert_base;
}

std::vector<ManifestEntry> apply_freeze_policy(ParameterStore& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store.mutable_at(i);
    p.trainable = !is_frozen_group(p.group);
  }
  return store.manifest();
}

ad::Var AttentionLayer::operator()(ad::Graph& g, ad::Var x) const {
  ad::Var qv = q(g, x);
  ad::Var kv = k(g, x);
  ad::Var vv = v(g, x);
  const Eigen::Index dh = qv.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = ad::slice_cols(qv, h * dh, dh);
    ad::Var kh = ad::slice_cols(kv, h * dh, dh);
    ad::Var vh = ad::slice_cols(vv, h * dh, dh);
    ad::Var a = ad::causal_softmax_rows(ad::scale(ad::matmul_nt(qh, kh), scale));
    outs.push_back(ad::matmul(a, vh));
  }
  return o(g, ad::concat_cols(outs));
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed, const std::filesystem::path& asset_dir)
    : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  if (cfg_.num_functions != static_cast<int>(kNumLocationFunctions)) {
    throw std::invalid_argument("k_f must equal the number of location-function descriptions (" +
                                std::to_string(kNumLocationFunctions) + ")");
  }
  if (cfg_.num_groups != static_cast<int>(kNumUserGroups)) {
    throw std::invalid_argument("k_p must equal the number of user-group descriptions (" +
                                std::to_string(kNumUserGroups) + ")");
  }

  Rng emb_rng(derive_seed(seed, kEmbeddingStream));
  embedding_ = StEmbedding(store_, cfg_.embedding, emb_rng);

  Rng hist_rng(derive_seed(seed, kHistoryStream));
  history_ = HistoryEncoder(store_, cfg_.record_dim(), cfg_.tcn, hist_rng);

  const auto function_texts = load_function_descriptions(asset_dir);
  std::vector<std::string> categories;
  for (auto n : location_function_names()) categories.emplace_back(n);
  auto function_encoder = make_encoder(cfg_.function_encodings, function_texts, cfg_.d_text, cfg_.text_seed);
  auto function_experts = init_function_experts(function_texts, categories, *function_encoder, cfg_.embedding.d_xy,
                                                derive_seed(seed, kFunctionExpertStream));
  LocationMoeConfig lcfg;
  lcfg.record_dim = cfg_.record_dim();
  lcfg.d_xy = cfg_.embedding.d_xy;
  lcfg.d_hist = cfg_.tcn.d_hist;
  lcfg.num_experts = cfg_.num_functions;
  lcfg.top_k = cfg_.top_k;
  lcfg.router_hidden = cfg_.function_router_hidden;
  Rng router_rng(derive_seed(seed, kFunctionRouterStream));
  location_moe_ = LocationSemanticsMoe(store_, lcfg, function_experts, router_rng);

  Rng proj_rng(derive_seed(seed, kInputProjStream));
  input_proj_ = LinearLayer::create(store_, "input_projection", ParamGroup::input_projection, cfg_.record_dim(),
                                    cfg_.d_model, proj_rng);

  if (cfg_.prompt_length > 0) {
    Matrix init;
    if (cfg_.prompt_from_text) {
      HashedBagOfWordsEncoder prompt_encoder(cfg_.d_text, cfg_.text_seed);
      Rng rng(derive_seed(seed, kPromptProjectionStream));
      init = prompt_rows_from_text(prompt_encoder, load_prompt_prefix(asset_dir), cfg_.prompt_length, cfg_.d_model,
                                   rng);
    } else {
      Rng rng(derive_seed(seed, kPromptStream));
      init = init_matrix(cfg_.prompt_length, cfg_.d_model, Init::normal, cfg_.d_model, rng);
    }
    prompt_ = &store_.add("prompt_prefix", ParamGroup::prompt_prefix, std::move(init));
  }

  const auto group_texts = load_group_descriptions(asset_dir);
  std::vector<std::string> group_names;
  for (auto n : user_group_names()) group_names.emplace_back(n);
  auto group_encoder = make_encoder(cfg_.group_encodings, group_texts, cfg_.d_text, cfg_.text_seed);
  pooled_groups_ = pool_descriptions(group_texts, *group_encoder);
  Rng prior_rng(derive_seed(seed, kPriorStream));
  prior_proj_ = LinearLayer::create(store_, "group_prior", ParamGroup::group_prior, cfg_.d_text, cfg_.d_prior,
                                    prior_rng);

  UserRouterConfig ucfg;
  ucfg.d_model = cfg_.d_model;
  ucfg.d_hist = cfg_.tcn.d_hist;
  ucfg.d_prior = cfg_.d_prior;
  ucfg.d_fuse = cfg_.d_fuse;
  ucfg.tau = cfg_.tau;
  layers_.reserve(static_cast<std::size_t>(cfg_.layers()));
  for (int l = 0; l < cfg_.layers(); ++l) {
    Rng rng(derive_seed(seed, kLayerStreamBase + static_cast<std::uint64_t>(l)));
    const std::string p = "layer" + std::to_string(l);
    BackboneLayer layer;
    layer.moe = l >= cfg_.l1;
    layer.ln1 = LayerNormLayer::create(store_, p + ".ln1", cfg_.d_model);
    layer.attn.heads = cfg_.heads;
    layer.attn.q = backbone_linear(store_, p + ".attn.q", ParamGroup::attention, cfg_.d_model, cfg_.d_model, rng, false);
    layer.attn.k = backbone_linear(store_, p + ".attn.k", ParamGroup::attention, cfg_.d_model, cfg_.d_model, rng, false);
    layer.attn.v = backbone_linear(store_, p + ".attn.v", ParamGroup::attention, cfg_.d_model, cfg_.d_model, rng, false);
    layer.attn.o = backbone_linear(store_, p + ".attn.o", ParamGroup::attention, cfg_.d_model, cfg_.d_model, rng, false);
    layer.ln2 = LayerNormLayer::create(store_, p + ".ln2", cfg_.d_model);
    const ParamGroup ffn_group = layer.moe ? ParamGroup::expert_base : ParamGroup::backbone_ffn;
    layer.ffn.up = backbone_linear(store_, p + ".ffn.up", ffn_group, cfg_.d_model, cfg_.d_ffn, rng, true);
    layer.ffn.down = backbone_linear(store_, p + ".ffn.down", ffn_group, cfg_.d_ffn, cfg_.d_model, rng, true);
    layers_.push_back(std::move(layer));
  }
  // Experts point at their layer's FFN, so wire them once layers_ is stable.
  for (int l = cfg_.l1; l < cfg_.layers(); ++l) {
    Rng rng(derive_seed(seed, kLayerStreamBase + 1000 + static_cast<std::uint64_t>(l)));
    const std::string p = "layer" + std::to_string(l);
    BackboneLayer& layer = layers_[static_cast<std::size_t>(l)];
    layer.router = UserRouter(store_, p + ".user_router", ucfg, rng);
    layer.experts = init_personalized_experts_from_ffn(store_, p + ".moe", layer.ffn, group_names, cfg_.lora, rng);
  }

  final_ln_ = LayerNormLayer::create(store_, "final_ln", cfg_.d_model);
  Rng head_rng(derive_seed(seed, kHeadStream));
  head_hidden_ = LinearLayer::create(store_, "head.hidden", ParamGroup::output_head, cfg_.d_model, cfg_.head_hidden,
                                     head_rng);
  head_out_ = LinearLayer::create(store_, "head.out", ParamGroup::output_head, cfg_.head_hidden, 2, head_rng);
  // Start predictions near the middle of the normalized city.
  store_.mutable_get("head.out.bias").value.setConstant(0.5);

  positions_ = sinusoidal_positions(cfg_.sequence_length(), cfg_.d_model);
  apply_freeze_policy(store_);
}

Matrix Model::group_priors() const {
  return evaluate_value([&](ad::Graph& g) { return prior_proj_(g, g.constant(pooled_groups_)); });
}

ad::Var Model::user_moe_layer(ad::Graph& g, const BackboneLayer& layer, std::size_t moe_index, ad::Var u,
                              ad::Var h_hist, ad::Var priors, const ForwardOptions& opts, ForwardResult& out) const {
  auto route = [&](ad::Var x, std::size_t trace_index) {
    ad::Var scores = layer.router.scores(g, x, h_hist, priors);
    ad::Var probs;
    if (!opts.forced_user_probs.empty()) {
      if (opts.forced_user_probs.size() != static_cast<std::size_t>(cfg_.l2)) {
        throw std::invalid_argument("forced user probabilities need one entry per MoE layer");
      }
      probs = g.constant(opts.forced_user_probs[moe_index]);
    } else {
      probs = ad::softmax_rows(scores);
    }
    UserRouting r;
    r.scores = scores.value();
    r.probs = probs.value();
    if (opts.frozen_selections != nullptr) {
      r.selected = opts.frozen_selections->user.at(trace_index);
    } else {
      r.selected = select_experts_by_threshold(r.probs, cfg_.tau);
    }
    for (int i : r.selected) r.cumulative += r.probs(i);
    r.entropy = routing_entropy(r.probs);
    return std::pair{probs, r};
  };

  if (!cfg_.per_token_routing) {
    auto [probs, r] = route(ad::mean_rows(u), out.trace.user.size());
    out.entropies.push_back(ad::entropy_rows(probs));
    ad::Var y = moe_ffn_forward(g, u, probs, r.selected, layer.experts, &out.trace.expert_calls);
    out.trace.user.push_back(std::move(r));
    return y;
  }
  std::vector<ad::Var> rows;
  std::vector<ad::Var> ents;
  for (Eigen::Index t = 0; t < u.rows(); ++t) {
    ad::Var ut = ad::slice_rows(u, t, 1);
    auto [probs, r] = route(ut, out.trace.user.size());
    ents.push_back(ad::entropy_rows(probs));
    rows.push_back(moe_ffn_forward(g, ut, probs, r.selected, layer.experts, &out.trace.expert_calls));
    out.trace.user.push_back(std::move(r));
  }
  out.entropies.push_back(ad::mean(ad::concat_rows(ents)));
  return ad::concat_rows(rows);
}

ForwardResult Model::forward(ad::Graph& g, const Sample& sample, const ForwardOptions& opts) const {
  if (static_cast<int>(sample.historical.size()) != cfg_.history_len ||
      static_cast<int>(sample.current.size()) != cfg_.current_len) {
    throw std::invalid_argument("sample windows (M=" + std::to_string(sample.historical.size()) +
                                ", N=" + std::to_string(sample.current.size()) + ") do not match config (M=" +
                                std::to_string(cfg_.history_len) + ", N=" + std::to_string(cfg_.current_len) + ")");
  }
  ForwardResult out;
  const Eigen::Index d_xy = cfg_.embedding.d_xy;
  const Eigen::Index d_rest = cfg_.record_dim() - d_xy;

  ad::Var z_h = embedding_.embed(g, sample.historical);
  ad::Var h_hist = history_.encode(g, z_h);
  ad::Var e_c0 = embedding_.embed(g, sample.current);

  ad::Var e_c = e_c0;
  if (!opts.ablate_location_moe) {
    ad::Var logits = location_moe_.route_logits(g, e_c0, h_hist);
    ad::Var probs = ad::softmax_rows(logits);
    const Matrix coords = StEmbedding::coordinates(sample.current);
    std::vector<ad::Var> rows;
    for (Eigen::Index r = 0; r < e_c0.rows(); ++r) {
      FunctionRouting fr;
      fr.logits = logits.value().row(r);
      fr.probs = probs.value().row(r);
      fr.selected = opts.frozen_selections != nullptr
                        ? opts.frozen_selections->function.at(static_cast<std::size_t>(r))
                        : select_top_k(fr.probs, cfg_.top_k);
      ad::Var row0 = ad::slice_rows(e_c0, r, 1);
      ad::Var enhanced = location_moe_.enhance(g, g.constant(coords.row(r)), ad::slice_rows(probs, r, 1), fr.selected,
                                               ad::slice_cols(row0, 0, d_xy));
      rows.push_back(ad::concat_cols({enhanced, ad::slice_cols(row0, d_xy, d_rest)}));
      out.trace.function.push_back(std::move(fr));
    }
    e_c = ad::concat_rows(rows);
  }

  ad::Var prefix = prompt_ != nullptr ? g.param(*prompt_) : ad::Var{};
  ad::Var x = assemble_input(g, z_h, e_c, prefix, input_proj_, positions_);

  ad::Var priors;
  if (!opts.ablate_persona_moe) priors = prior_proj_(g, g.constant(pooled_groups_));

  auto maybe_dropout = [&](ad::Var v) {
    if (opts.dropout_rng == nullptr || cfg_.dropout <= 0.0) return v;
    return ad::dropout(v, cfg_.dropout, *opts.dropout_rng);
  };

  std::size_t moe_index = 0;
  for (const auto& layer : layers_) {
    x = ad::add(x, maybe_dropout(layer.attn(g, layer.ln1(g, x))));
    ad::Var u = layer.ln2(g, x);
    ad::Var f;
    if (layer.moe && !opts.ablate_persona_moe) {
      f = user_moe_layer(g, layer, moe_index, u, h_hist, priors, opts, out);
    } else {
      f = layer.ffn(g, u);
    }
    if (layer.moe) ++moe_index;
    x = ad::add(x, maybe_dropout(f));
  }

  ad::Var last = final_ln_(g, ad::slice_rows(x, x.rows() - 1, 1));
  out.prediction = head_out_(g, ad::gelu(head_hidden_(g, last)));
  return out;
}

Prediction Model::predict(const Sample& sample, const ForwardOptions& opts) const {
  ad::Graph g(false);
  ForwardResult r = forward(g, sample, opts);
  return {r.prediction.value()(0, 0), r.prediction.value()(0, 1), std::move(r.trace)};
}

std::size_t Model::load_weights(const ParameterStore& weights) {
  std::size_t n = 0;
  for (const auto& w : weights) {
    if (!store_.contains(w.name)) continue;
    Parameter& p = store_.mutable_get(w.name);
    if (p.value.rows() != w.value.rows() || p.value.cols() != w.value.cols()) {
      throw std::invalid_argument("weight '" + w.name + "' has shape " + std::to_string(w.value.rows()) + "x" +
                                  std::to_string(w.value.cols()) + ", expected " + std::to_string(p.value.rows()) +
                                  "x" + std::to_string(p.value.cols()));
    }
    p.value = w.value;
    ++n;
  }
  return n;
}

void Model::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["config"] = cfg_.to_json();
  header["seed"] = seed_;
  if (norm_stats_) {
    header["norm_stats"] = {{"x_min", norm_stats_->x_min}, {"x_max", norm_stats_->x_max},
                            {"y_min", norm_stats_->y_min}, {"y_max", norm_stats_->y_max},
                            {"dur_cap", norm_stats_->dur_cap}};
  } else {
    header["norm_stats"] = nullptr;
  }
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : store_.manifest()) {
    params.push_back({{"name", e.name}, {"group", std::string(to_string(e.group))}, {"trainable", e.trainable},
                      {"rows", e.rows}, {"cols", e.cols}});
  }
  header["params"] = params;
  header["buffers"] = {{{"name", "pooled_group_descriptions"},
                        {"rows", pooled_groups_.rows()},
                        {"cols", pooled_groups_.cols()}}};

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out << kCheckpointMagic << '\n' << "version " << kCheckpointVersion << '\n' << header.dump() << '\n';
    auto write_matrix = [&](const Matrix& m) {
      // Column-major raw doubles, host byte order (little-endian on all supported targets).
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    };
    for (const auto& p : store_) write_matrix(p.value);
    write_matrix(pooled_groups_);
    if (!out) throw std::runtime_error("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& path, const std::filesystem::path& asset_dir) {
  std::filesystem::path file = path;
  if (!std::filesystem::exists(file)) {
    std::filesystem::path alt(path.string() + ".ckpt");
    if (!std::filesystem::exists(alt)) throw std::runtime_error("checkpoint not found: " + path.string());
    file = alt;
  }
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + file.string());
  std::string magic, version_line, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw std::runtime_error(file.string() + " is not a checkpoint (bad magic)");
  std::getline(in, version_line);
  int version = -1;
  if (std::sscanf(version_line.c_str(), "version %d", &version) != 1) {
    throw std::runtime_error("malformed checkpoint version line: " + version_line);
  }
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " (reader supports " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  std::getline(in, header_line);
  const auto header = nlohmann::json::parse(header_line);
  const ModelConfig cfg = ModelConfig::from_json(header.at("config"));
  auto model = std::make_unique<Model>(cfg, header.at("seed").get<std::uint64_t>(), asset_dir);

  const auto& params = header.at("params");
  if (params.size() != model->store_.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(params.size()) + " tensors, model has " +
                             std::to_string(model->store_.size()));
  }
  auto read_matrix = [&](Matrix& m) {
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint truncated: " + file.string());
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = model->store_.mutable_at(i);
    const auto& e = params[i];
    if (e.at("name").get<std::string>() != p.name || e.at("rows").get<Eigen::Index>() != p.value.rows() ||
        e.at("cols").get<Eigen::Index>() != p.value.cols()) {
      throw std::runtime_error("checkpoint tensor " + std::to_string(i) + " (" + e.at("name").get<std::string>() +
                               ") does not match model tensor " + p.name);
    }
    read_matrix(p.value);
  }
  const auto& buf = header.at("buffers").at(0);
  model->pooled_groups_.resize(buf.at("rows").get<Eigen::Index>(), buf.at("cols").get<Eigen::Index>());
  read_matrix(model->pooled_groups_);
  if (!header.at("norm_stats").is_null()) {
    const auto& n = header.at("norm_stats");
    model->norm_stats_ = NormStats{n.at("x_min").get<double>(), n.at("x_max").get<double>(),
                                   n.at("y_min").get<double>(), n.at("y_max").get<double>(),
                                   n.at("dur_cap").get<double>()};
  }
  return model;
}

}  // namespace nextlocmoe
