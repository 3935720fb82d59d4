#include "nextlocmoe/cli.hpp"

#include "nextlocmoe/retrieval.hpp"
#include "nextlocmoe/synthetic_city.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>

extern char** environ;

namespace nextlocmoe {

namespace {

constexpr const char* kEnvPrefix = "NEXTLOCMOE_";

/// Failure with a category for the error line and an exit code.
struct CliError : std::runtime_error {
  CliError(std::string category, const std::string& msg, int code)
      : std::runtime_error(msg), category(std::move(category)), code(code) {}
  std::string category;
  int code;
};

[[noreturn]] void input_error(const std::string& msg) { throw CliError("input", msg, 3); }

void write_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const std::filesystem::path& dir) const {
    nlohmann::json j{{"command", command},
                     {"argv", argv},
                     {"config", config},
                     {"inputs", inputs},
                     {"outputs", outputs},
                     {"seed", seed},
                     {"code_version", kVersion},
                     {"wall_seconds",
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
    write_atomic(dir / "manifest.json", j.dump(2) + "\n");
  }
};

Dataset load_city(const std::string& dir) {
  if (dir.empty()) throw CliError("usage", "--data is required", 2);
  if (!std::filesystem::is_directory(dir)) input_error("data directory not found: " + dir);
  Dataset ds = load_dataset_dir(dir);
  if (ds.norm_stats) return ds;
  return normalize_coordinates(ds);
}

std::unique_ptr<Model> load_checkpoint(const std::string& path) {
  if (path.empty()) throw CliError("usage", "--ckpt is required", 2);
  if (!std::filesystem::exists(path) && !std::filesystem::exists(path + ".ckpt")) {
    input_error("checkpoint not found: " + path);
  }
  return Model::load(path);
}

ForwardOptions ablation_options(const std::vector<std::string>& ablate) {
  ForwardOptions o;
  for (const auto& a : ablate) {
    if (a == "loc-moe") {
      o.ablate_location_moe = true;
    } else if (a == "persona-moe") {
      o.ablate_persona_moe = true;
    } else {
      throw CliError("usage", "unknown ablation '" + a + "' (expected loc-moe or persona-moe)", 2);
    }
  }
  return o;
}

Dataset split_of(const Dataset& ds, const std::string& split, const SplitRatios& ratios, std::uint64_t seed) {
  if (split == "all") return ds;
  UserPartition p = partition_users(ds, ratios, seed);
  if (split == "train") return p.train;
  if (split == "val") return p.val;
  if (split == "test") return p.test;
  throw CliError("usage", "unknown split '" + split + "' (expected train, val, test or all)", 2);
}

KeyValueConfig flag_overrides(const std::vector<std::string>& sets) {
  KeyValueConfig kv;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw CliError("usage", "--set expects key=value, got '" + s + "'", 2);
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

}  // namespace

std::vector<std::string> RunSettings::known_keys() {
  auto keys = ModelConfig::config_keys();
  for (const auto& k : TrainConfig::config_keys()) keys.push_back(k);
  for (const char* k : {"split_train", "split_val", "split_test", "eval_stride", "seed"}) keys.emplace_back(k);
  return keys;
}

RunSettings RunSettings::resolve(const std::string& profile, const KeyValueConfig* file,
                                 const std::map<std::string, std::string>& env, const KeyValueConfig& flags) {
  RunSettings s;
  s.profile = profile;
  s.model = ModelConfig::for_profile(profile);
  s.train = TrainConfig::for_profile(profile);
  const auto known = known_keys();

  KeyValueConfig env_kv;
  for (const auto& [name, value] : env) {
    if (name.rfind(kEnvPrefix, 0) != 0) continue;
    std::string key = name.substr(std::string(kEnvPrefix).size());
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (std::find(known.begin(), known.end(), key) != known.end()) env_kv.set(key, value);
  }

  auto apply = [&](const KeyValueConfig& kv) {
    kv.require_known(known);
    s.model.apply(kv);
    s.train.apply(kv);
    s.split.train = static_cast<int>(kv.get_int("split_train", s.split.train));
    s.split.val = static_cast<int>(kv.get_int("split_val", s.split.val));
    s.split.test = static_cast<int>(kv.get_int("split_test", s.split.test));
    s.eval_stride = static_cast<int>(kv.get_int("eval_stride", s.eval_stride));
    s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(s.seed)));
  };
  if (file != nullptr) apply(*file);
  apply(env_kv);
  apply(flags);
  s.model.validate();
  s.train.validate();
  if (s.eval_stride < 1) throw std::invalid_argument("eval_stride must be >= 1");
  return s;
}

nlohmann::json RunSettings::to_json() const {
  return {{"profile", profile},
          {"seed", seed},
          {"model", model.to_json()},
          {"train", train.to_json()},
          {"split", {split.train, split.val, split.test}},
          {"eval_stride", eval_stride}};
}

std::map<std::string, std::string> nextlocmoe_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    std::string kv(*e);
    if (kv.rfind(kEnvPrefix, 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq != std::string::npos) env[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return env;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Next-location prediction with location-function and user-group experts", "nextlocmoe"};
  app.require_subcommand(1, 1);

  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string profile = "desk";
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> ablate;
  std::vector<std::string> sets;
  std::string data_dir, ckpt, split = "test", user;
  int window = -1;
  int epochs = -1;
  double lambda = -1.0;
  double tau = -1.0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { seed = v, seed_given = true; }, "Random seed");
    sub->add_option("--profile", profile, "Hyperparameter profile")->check(CLI::IsMember({"paper", "desk"}));
    sub->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--ablate", ablate, "Disable a module: loc-moe or persona-moe")
        ->check(CLI::IsMember({"loc-moe", "persona-moe"}));
    sub->add_option("--set", sets, "Override one config key (key=value)");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic city");
  add_common(gen);
  auto* trn = app.add_subcommand("train", "Train a model");
  add_common(trn);
  trn->add_option("--data", data_dir, "Dataset directory")->required();
  trn->add_option("--epochs", epochs, "Epochs (overrides config)");
  trn->add_option("--lambda", lambda, "Entropy weight (overrides config)");
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(evl);
  evl->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  evl->add_option("--data", data_dir, "Dataset directory")->required();
  evl->add_option("--split", split, "train, val, test or all");
  auto* prd = app.add_subcommand("predict", "Print the top-10 location ids for one sample");
  add_common(prd);
  prd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  prd->add_option("--data", data_dir, "Dataset directory")->required();
  prd->add_option("--user", user, "User id")->required();
  prd->add_option("--window", window, "Window index within the user's samples (default: last)");
  auto* xfr = app.add_subcommand("transfer-eval", "Evaluate a checkpoint on another city without updates");
  add_common(xfr);
  xfr->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  xfr->add_option("--data", data_dir, "Target city directory")->required();
  auto* rep = app.add_subcommand("report-routing", "Aggregate routing statistics");
  add_common(rep);
  rep->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  rep->add_option("--data", data_dir, "Dataset directory")->required();
  rep->add_option("--split", split, "train, val, test or all");
  rep->add_option("--tau", tau, "Recompute selections at this threshold");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << kErrorPrefix << ": usage: " << e.what() << "\n" << app.help();
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  Manifest manifest;
  manifest.command = command;
  manifest.argv = args;

  try {
    if (command == "gen-data") {
      if (out_dir.empty()) throw CliError("usage", "--out is required", 2);
      SyntheticCityConfig cc;
      if (!config_path.empty()) cc = SyntheticCityConfig::from_config(KeyValueConfig::load(config_path));
      if (seed_given) cc.seed = seed;
      cc.validate();
      const SyntheticCity city = generate_synthetic_city(cc);
      write_synthetic_city(city, cc, out_dir);
      manifest.seed = cc.seed;
      manifest.config = {{"name", cc.name}, {"grid_size", cc.grid_size}, {"n_locations", cc.n_locations},
                         {"users", cc.users}, {"days", cc.days}, {"seed", cc.seed}};
      manifest.outputs = {{"records", "records.csv"}, {"locations", "locations.csv"}, {"personas", "personas.csv"},
                          {"city_config", "city.cfg"}};
      manifest.write(out_dir);
      out << "wrote " << city.dataset.users.size() << " users, " << city.dataset.record_count() << " records, "
          << city.dataset.locations.size() << " locations to " << out_dir << "\n";
      return 0;
    }

    std::optional<KeyValueConfig> file;
    if (!config_path.empty()) file = KeyValueConfig::load(config_path);
    KeyValueConfig flags = flag_overrides(sets);
    if (seed_given) flags.set("seed", std::to_string(seed));
    if (epochs >= 0) flags.set("epochs", std::to_string(epochs));
    if (lambda >= 0.0) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", lambda);
      flags.set("lambda", buf);
    }
    const ForwardOptions opts = ablation_options(ablate);

    if (command == "train") {
      if (out_dir.empty()) throw CliError("usage", "--out is required", 2);
      const RunSettings s =
          RunSettings::resolve(profile, file ? &*file : nullptr, nextlocmoe_environment(), flags);
      if (!ablate.empty()) throw CliError("usage", "--ablate applies to evaluation commands", 2);
      const Dataset ds = load_city(data_dir);
      const UserPartition part = partition_users(ds, s.split, s.seed);
      const auto train_samples =
          make_samples(part.train, s.model.history_len, s.model.current_len, s.train.train_stride);
      const auto val_samples = make_samples(part.val, s.model.history_len, s.model.current_len, s.train.train_stride);
      if (train_samples.empty()) input_error("no training windows: users need at least M+N+1 records");
      TrainConfig tc = s.train;
      tc.seed = s.seed;
      Model model(s.model, s.seed);
      model.set_norm_stats(*ds.norm_stats);
      std::filesystem::create_directories(out_dir);
      const auto ckpt_path = std::filesystem::path(out_dir) / "best.ckpt";
      TrainResult result = train(model, train_samples, val_samples, tc, ckpt_path, &out);
      if (result.best_epoch < 0) model.save(ckpt_path);
      result.log.write_jsonl(std::filesystem::path(out_dir) / "trainlog.jsonl");
      manifest.seed = s.seed;
      manifest.config = s.to_json();
      manifest.inputs = {{"data", data_dir}, {"dataset_digest", dataset_digest(ds)}};
      manifest.outputs = {{"checkpoint", "best.ckpt"}, {"trainlog", "trainlog.jsonl"},
                          {"best_epoch", result.best_epoch}, {"best_val_dist", result.best_val},
                          {"train_samples", train_samples.size()}, {"val_samples", val_samples.size()}};
      manifest.write(out_dir);
      out << "best epoch " << result.best_epoch << ", validation distance " << result.best_val << "\n";
      return 0;
    }

    auto model = load_checkpoint(ckpt);
    const RunSettings s = RunSettings::resolve(model->config().profile == "paper" ? "paper" : "desk",
                                               file ? &*file : nullptr, nextlocmoe_environment(), flags);
    const std::uint64_t split_seed = seed_given ? seed : model->seed();
    const Dataset ds = load_city(data_dir);
    const int M = model->config().history_len;
    const int N = model->config().current_len;
    manifest.seed = split_seed;
    manifest.config = {{"model", model->config().to_json()}, {"split", split}, {"ablate", ablate}};
    manifest.inputs = {{"checkpoint", ckpt}, {"data", data_dir}, {"dataset_digest", dataset_digest(ds)}};

    if (command == "eval" || command == "transfer-eval") {
      Dataset eval_ds = command == "eval" ? split_of(ds, split, s.split, split_seed) : ds;
      const auto samples = make_samples(eval_ds, M, N, s.eval_stride);
      if (samples.empty()) input_error("no evaluation windows: users need at least M+N+1 records");
      EvalResult r;
      if (command == "eval") {
        r = evaluate(*model, samples, LocationIndex::build(ds.locations), opts);
      } else {
        r = zero_shot_transfer(*model, ds, samples, opts);
      }
      const std::string cfg_digest = json_digest(model->config().to_json());
      nlohmann::json report = make_report(cfg_digest, dataset_digest(eval_ds), r.metrics, r.activation);
      report["command"] = command;
      report["ablate"] = ablate;
      std::vector<std::pair<std::string, Metrics>> rows{{"model", r.metrics}};
      if (command == "eval") {
        const Dataset train_ds = split_of(ds, "train", s.split, split_seed);
        const Metrics base = most_frequent_baseline(train_ds, samples);
        report["baseline_most_frequent"] = base.to_json();
        rows.emplace_back("most-frequent", base);
      } else {
        report["uniform_random_hit@10"] = uniform_random_hit10(ds.locations.size());
      }
      out << format_metrics_table(rows);
      if (!out_dir.empty()) {
        write_atomic(std::filesystem::path(out_dir) / "report.json", report.dump(2) + "\n");
        manifest.outputs = {{"report", "report.json"}};
        manifest.write(out_dir);
      }
      return 0;
    }

    if (command == "predict") {
      auto it = ds.users.find(user);
      if (it == ds.users.end()) input_error("unknown user '" + user + "'");
      const auto samples = window_trajectories(user, it->second, M, N, 1);
      if (samples.empty()) input_error("user '" + user + "' has fewer than M+N+1 records");
      const std::size_t idx = window < 0 ? samples.size() - 1 : static_cast<std::size_t>(window);
      if (idx >= samples.size()) input_error("window " + std::to_string(window) + " out of range");
      const Prediction p = model->predict(samples[idx], opts);
      const auto ids = LocationIndex::build(ds.locations).nearest_ids(p.x, p.y, 10);
      nlohmann::json j{{"user", user}, {"window", idx}, {"x", p.x}, {"y", p.y}, {"top10", ids}};
      out << j.dump() << "\n";
      if (!out_dir.empty()) {
        write_atomic(std::filesystem::path(out_dir) / "prediction.json", j.dump(2) + "\n");
        manifest.outputs = {{"prediction", "prediction.json"}};
        manifest.write(out_dir);
      }
      return 0;
    }

    // report-routing
    const Dataset eval_ds = split_of(ds, split, s.split, split_seed);
    const auto samples = make_samples(eval_ds, M, N, s.eval_stride);
    if (samples.empty()) input_error("no evaluation windows: users need at least M+N+1 records");
    std::vector<RoutingTrace> traces;
    for (const auto& smp : samples) traces.push_back(model->predict(smp, opts).trace);
    const std::optional<double> t = tau > 0.0 ? std::optional<double>(tau) : std::nullopt;
    const ActivationStats stats = expert_activation_report(traces, t);
    nlohmann::json j = stats.to_json();
    j["tau"] = t ? *t : model->config().tau;
    j["samples"] = samples.size();
    out << j.dump(2) << "\n";
    if (!out_dir.empty()) {
      write_atomic(std::filesystem::path(out_dir) / "routing.json", j.dump(2) + "\n");
      manifest.outputs = {{"routing", "routing.json"}};
      manifest.write(out_dir);
    }
    return 0;
  } catch (const CliError& e) {
    err << kErrorPrefix << ": " << e.category << ": " << e.what() << "\n";
    if (e.code == 2) err << sub->help();
    return e.code;
  } catch (const NonFiniteLossError& e) {
    err << kErrorPrefix << ": nonfinite: " << e.what() << " " << e.dump() << "\n";
    return 1;
  } catch (const ParseError& e) {
    err << kErrorPrefix << ": input: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    err << kErrorPrefix << ": config: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << kErrorPrefix << ": runtime: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace nextlocmoe
