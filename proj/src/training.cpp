#include "nextlocmoe/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace nextlocmoe {

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.train_stride = 4;
  return c;
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.epochs = 100;
  c.lr = 1e-4;
  c.lambda = 300.0;
  return c;
}

TrainConfig TrainConfig::for_profile(const std::string& name) {
  if (name == "desk" || name == "tiny") return desk();
  if (name == "paper") return paper();
  throw std::invalid_argument("unknown profile '" + name + "' (expected desk or paper)");
}

std::vector<std::string> TrainConfig::config_keys() {
  return {"epochs",     "lr",        "lambda",   "batch_size", "plateau_patience",    "plateau_factor",
          "min_lr",     "clip_norm", "beta1",    "beta2",      "adam_eps",            "train_seed",
          "early_stop_patience",     "train_stride"};
}

void TrainConfig::apply(const KeyValueConfig& kv) {
  epochs = static_cast<int>(kv.get_int("epochs", epochs));
  lr = kv.get_double("lr", lr);
  lambda = kv.get_double("lambda", lambda);
  batch_size = static_cast<int>(kv.get_int("batch_size", batch_size));
  plateau_patience = static_cast<int>(kv.get_int("plateau_patience", plateau_patience));
  plateau_factor = kv.get_double("plateau_factor", plateau_factor);
  min_lr = kv.get_double("min_lr", min_lr);
  clip_norm = kv.get_double("clip_norm", clip_norm);
  beta1 = kv.get_double("beta1", beta1);
  beta2 = kv.get_double("beta2", beta2);
  adam_eps = kv.get_double("adam_eps", adam_eps);
  seed = static_cast<std::uint64_t>(kv.get_int("train_seed", static_cast<long long>(seed)));
  early_stop_patience = static_cast<int>(kv.get_int("early_stop_patience", early_stop_patience));
  train_stride = static_cast<int>(kv.get_int("train_stride", train_stride));
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(lambda >= 0.0)) fail("lambda must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (plateau_patience < 0) fail("plateau_patience must be >= 0");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must be in (0, 1)");
  if (min_lr < 0.0) fail("min_lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (early_stop_patience < 0) fail("early_stop_patience must be >= 0");
  if (train_stride < 1) fail("train_stride must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"lr", lr},
          {"lambda", lambda},
          {"batch_size", batch_size},
          {"plateau_patience", plateau_patience},
          {"plateau_factor", plateau_factor},
          {"min_lr", min_lr},
          {"clip_norm", clip_norm},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"train_seed", seed},
          {"early_stop_patience", early_stop_patience},
          {"train_stride", train_stride}};
}

double distance_loss(const Matrix& preds, const Matrix& targets) {
  if (preds.rows() != targets.rows() || preds.cols() != 2 || targets.cols() != 2) {
    throw std::invalid_argument("distance_loss expects two B x 2 matrices of equal shape");
  }
  if (preds.rows() == 0) throw std::invalid_argument("distance_loss on an empty batch");
  return (preds - targets).rowwise().norm().mean();
}

double mean_entropy(const std::vector<std::vector<double>>& entropies) {
  if (entropies.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& per_layer : entropies) {
    if (per_layer.empty()) continue;
    acc += std::accumulate(per_layer.begin(), per_layer.end(), 0.0) / static_cast<double>(per_layer.size());
  }
  return acc / static_cast<double>(entropies.size());
}

double total_loss(double l_dist, const std::vector<std::vector<double>>& entropies, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
  return l_dist + lambda * mean_entropy(entropies);
}

SampleLoss sample_loss(ad::Graph& g, const ForwardResult& fwd, const Location& target, double lambda) {
  SampleLoss s;
  s.dist = ad::row_norms(ad::sub(fwd.prediction, g.constant(Matrix{{target.x, target.y}})));
  if (fwd.entropies.empty()) {
    s.entropy = g.constant(Matrix::Zero(1, 1));
    s.total = s.dist;
  } else {
    s.entropy = ad::mean(ad::concat_rows(fwd.entropies));
    s.total = lambda == 0.0 ? s.dist : ad::add(s.dist, ad::scale(s.entropy, lambda));
  }
  return s;
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch},
          {"train_dist", train_dist},
          {"train_entropy", train_entropy},
          {"train_total", train_total},
          {"val_dist", val_dist},
          {"lr", lr},
          {"mean_active_experts", mean_active_experts},
          {"wall_seconds", wall_seconds}};
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) out += e.to_json().dump() + "\n";
  return out;
}

void TrainLog::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_jsonl();
}

TrainLog TrainLog::read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  TrainLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    EpochLog e;
    e.epoch = j.at("epoch").get<int>();
    e.train_dist = j.at("train_dist").get<double>();
    e.train_entropy = j.at("train_entropy").get<double>();
    e.train_total = j.at("train_total").get<double>();
    e.val_dist = j.at("val_dist").get<double>();
    e.lr = j.at("lr").get<double>();
    e.mean_active_experts = j.at("mean_active_experts").get<double>();
    e.wall_seconds = j.at("wall_seconds").get<double>();
    log.epochs.push_back(e);
  }
  return log;
}

Adam::Adam(const ParameterStore& store, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : store) {
    if (p.trainable) {
      m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    } else {
      m_.emplace_back();
      v_.emplace_back();
    }
  }
}

void Adam::step(ParameterStore& store, const GradientBuffer& grads, double lr) {
  if (grads.size() != store.size() || m_.size() != store.size()) {
    throw std::invalid_argument("optimizer state does not match the parameter store");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.at(i).trainable || grads[i].size() == 0) continue;
    const Matrix& g = grads[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    Parameter& p = store.mutable_at(i);
    p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, double min_lr)
    : lr_(lr), factor_(factor), min_lr_(min_lr), patience_(patience), best_(std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::step(double metric) {
  if (metric < best_) {
    best_ = metric;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ = std::max(min_lr_, lr_ * factor_);
    bad_epochs_ = 0;
  }
  return lr_;
}

namespace {

std::string batch_dump(std::span<const Sample> batch, std::size_t bad_index, double dist, double entropy) {
  nlohmann::json j;
  j["offending_sample"] = bad_index;
  j["dist"] = std::isfinite(dist) ? nlohmann::json(dist) : nlohmann::json(std::to_string(dist));
  j["entropy"] = std::isfinite(entropy) ? nlohmann::json(entropy) : nlohmann::json(std::to_string(entropy));
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : batch) {
    nlohmann::json cur = nlohmann::json::array();
    for (const auto& r : s.current) cur.push_back({r.location.x, r.location.y, r.w, r.d, r.dur});
    samples.push_back({{"user_id", s.user_id}, {"current", cur}, {"target", {s.target.x, s.target.y}}});
  }
  j["batch"] = samples;
  return j.dump();
}

}  // namespace

Trainer::Trainer(Model& model, const TrainConfig& cfg)
    : model_(model),
      cfg_(cfg),
      adam_(model.store(), cfg.beta1, cfg.beta2, cfg.adam_eps),
      dropout_rng_(derive_seed(cfg.seed, 0xd409)),
      lr_(cfg.lr) {
  cfg_.validate();
}

StepStats Trainer::step(std::span<const Sample> batch) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  GradientBuffer grads(model_.store());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  StepStats st;
  double experts = 0.0;
  std::size_t routings = 0;
  ForwardOptions opts;
  opts.dropout_rng = &dropout_rng_;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Graph g;
    ForwardResult fwd = model_.forward(g, batch[i], opts);
    SampleLoss loss = sample_loss(g, fwd, batch[i].target, cfg_.lambda);
    const double d = loss.dist.scalar();
    const double h = loss.entropy.scalar();
    if (!std::isfinite(loss.total.scalar())) {
      throw NonFiniteLossError("non-finite loss on sample " + std::to_string(i) + " of batch (user " +
                                   batch[i].user_id + ")",
                               batch_dump(batch, i, d, h));
    }
    g.backward(loss.total, inv_b);
    g.accumulate_into(grads);
    st.dist += d * inv_b;
    st.entropy += h * inv_b;
    st.total += loss.total.scalar() * inv_b;
    for (const auto& u : fwd.trace.user) experts += static_cast<double>(u.selected.size());
    routings += fwd.trace.user.size();
  }
  st.active_experts = routings > 0 ? experts / static_cast<double>(routings) : 0.0;
  st.grad_norm = grads.norm();
  if (!std::isfinite(st.grad_norm)) {
    throw NonFiniteLossError("non-finite gradient norm", batch_dump(batch, batch.size(), st.dist, st.entropy));
  }
  if (cfg_.clip_norm > 0.0 && st.grad_norm > cfg_.clip_norm) grads.scale(cfg_.clip_norm / st.grad_norm);
  adam_.step(model_.store(), grads, lr_);
  return st;
}

double evaluate_distance(const Model& model, std::span<const Sample> samples, const ForwardOptions& opts) {
  if (samples.empty()) throw std::invalid_argument("no samples to evaluate");
  double acc = 0.0;
  for (const auto& s : samples) {
    const Prediction p = model.predict(s, opts);
    acc += std::hypot(p.x - s.target.x, p.y - s.target.y);
  }
  return acc / static_cast<double>(samples.size());
}

TrainResult train(Model& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const std::filesystem::path& checkpoint, std::ostream* progress) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  Trainer trainer(model, cfg);
  PlateauScheduler sched(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
  Rng order_rng(derive_seed(cfg.seed, 0x0dde));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<Sample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);

    EpochLog log;
    log.epoch = epoch;
    log.lr = trainer.lr();
    double weight = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_set[order[i]]);
      const StepStats st = trainer.step(batch);
      const double w = static_cast<double>(batch.size());
      log.train_dist += st.dist * w;
      log.train_entropy += st.entropy * w;
      log.train_total += st.total * w;
      log.mean_active_experts += st.active_experts * w;
      weight += w;
    }
    log.train_dist /= weight;
    log.train_entropy /= weight;
    log.train_total /= weight;
    log.mean_active_experts /= weight;
    log.val_dist = val_set.empty() ? log.train_dist : evaluate_distance(model, val_set);
    trainer.set_lr(sched.step(log.val_dist));

    if (log.val_dist < result.best_val) {
      result.best_val = log.val_dist;
      result.best_epoch = epoch;
      since_best = 0;
      if (!checkpoint.empty()) model.save(checkpoint);
    } else {
      ++since_best;
    }
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(log);
    if (progress != nullptr) *progress << log.to_json().dump() << std::endl;
    if (cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience) break;
  }
  return result;
}

GradientCheckReport gradient_check(ParameterStore& store, const std::function<ad::Var(ad::Graph&)>& loss,
                                   double eps) {
  GradientBuffer analytic(store);
  double base = 0.0;
  {
    ad::Graph g;
    ad::Var l = loss(g);
    base = l.scalar();
    g.backward(l);
    g.accumulate_into(analytic);
  }
  // Central differences lose about |L| * 1e-16 / eps absolutely, so the floor
  // of the denominator grows with the loss magnitude.
  const double floor = 1e-6 * std::max(1.0, std::abs(base));
  auto eval = [&]() {
    ad::Graph g(false);
    return loss(g).scalar();
  };
  GradientCheckReport rep;
  rep.loss = base;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.at(i).trainable) continue;
    Parameter& p = store.mutable_at(i);
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double orig = p.value.data()[k];
      p.value.data()[k] = orig + eps;
      const double fp = eval();
      p.value.data()[k] = orig - eps;
      const double fm = eval();
      p.value.data()[k] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i].data()[k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
        rep.worst_param = p.name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return rep;
}

GradientCheckReport gradient_check(Model& model, const Sample& sample, double eps, double lambda) {
  const RoutingSelections frozen = selections_of(model.predict(sample).trace);
  ForwardOptions opts;
  opts.frozen_selections = &frozen;
  return gradient_check(
      model.store(),
      [&](ad::Graph& g) {
        ForwardResult fwd = model.forward(g, sample, opts);
        return sample_loss(g, fwd, sample.target, lambda).total;
      },
      eps);
}

}  // namespace nextlocmoe
