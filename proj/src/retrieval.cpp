#include "nextlocmoe/retrieval.hpp"

#include "nextlocmoe/text_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

namespace nextlocmoe {

namespace {

double coord(const Location& l, int axis) { return axis == 0 ? l.x : l.y; }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

LocationIndex LocationIndex::build(std::vector<Location> locations) {
  if (locations.empty()) throw std::invalid_argument("cannot index an empty location set");
  std::sort(locations.begin(), locations.end(), [](const Location& a, const Location& b) {
    return std::tie(a.x, a.y, a.id) < std::tie(b.x, b.y, b.id);
  });
  std::set<std::int64_t> ids;
  for (const auto& l : locations) {
    if (!ids.insert(l.id).second) throw std::invalid_argument("duplicate location id " + std::to_string(l.id));
  }
  LocationIndex idx;
  idx.points_.reserve(locations.size());
  idx.root_ = idx.build_range(locations, 0, locations.size(), 0);
  return idx;
}

int LocationIndex::build_range(std::vector<Location>& pts, std::size_t lo, std::size_t hi, int depth) {
  if (lo >= hi) return -1;
  depth_ = std::max(depth_, depth + 1);
  const int axis = depth % 2;
  auto first = pts.begin() + static_cast<std::ptrdiff_t>(lo);
  auto last = pts.begin() + static_cast<std::ptrdiff_t>(hi);
  std::sort(first, last, [axis](const Location& a, const Location& b) {
    const double ca = coord(a, axis), cb = coord(b, axis);
    const double oa = coord(a, 1 - axis), ob = coord(b, 1 - axis);
    return std::tie(ca, oa, a.id) < std::tie(cb, ob, b.id);
  });
  const std::size_t mid = lo + (hi - lo) / 2;
  const int self = static_cast<int>(points_.size());
  points_.push_back({pts[mid], axis, -1, -1});
  const int left = build_range(pts, lo, mid, depth + 1);
  const int right = build_range(pts, mid + 1, hi, depth + 1);
  points_[static_cast<std::size_t>(self)].left = left;
  points_[static_cast<std::size_t>(self)].right = right;
  return self;
}

std::vector<std::int64_t> LocationIndex::nearest_ids(double x, double y, int k) const {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  using Entry = std::pair<double, std::int64_t>;  // (squared distance, id); max-heap keeps the worst on top
  std::priority_queue<Entry> heap;
  const std::size_t want = std::min(static_cast<std::size_t>(k), points_.size());

  auto visit = [&](auto&& self, int node) -> void {
    if (node < 0) return;
    const Node& n = points_[static_cast<std::size_t>(node)];
    const double dx = n.loc.x - x;
    const double dy = n.loc.y - y;
    const Entry e{dx * dx + dy * dy, n.loc.id};
    if (heap.size() < want) {
      heap.push(e);
    } else if (e < heap.top()) {
      heap.pop();
      heap.push(e);
    }
    const double diff = (n.axis == 0 ? x : y) - coord(n.loc, n.axis);
    const int near = diff < 0.0 ? n.left : n.right;
    const int far = diff < 0.0 ? n.right : n.left;
    self(self, near);
    // Equal distances may still hold a smaller id, so only prune on strict excess.
    if (heap.size() < want || diff * diff <= heap.top().first) self(self, far);
  };
  visit(visit, root_);

  std::vector<Entry> found;
  while (!heap.empty()) {
    found.push_back(heap.top());
    heap.pop();
  }
  std::reverse(found.begin(), found.end());
  std::vector<std::int64_t> ids;
  for (const auto& e : found) ids.push_back(e.second);
  return ids;
}

nlohmann::json Metrics::to_json() const {
  return {{"hit@1", hit1},         {"hit@5", hit5},           {"hit@10", hit10},
          {"samples", samples},    {"mean_error", mean_error}, {"median_error", median_error}};
}

Metrics hit_metrics(const std::vector<std::vector<std::int64_t>>& ranked, const std::vector<std::int64_t>& targets,
                    const std::vector<double>& errors) {
  if (ranked.size() != targets.size()) throw std::invalid_argument("ranked lists and targets differ in length");
  Metrics m;
  m.samples = targets.size();
  if (m.samples == 0) return m;
  std::size_t h1 = 0, h5 = 0, h10 = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& r = ranked[i];
    const auto it = std::find(r.begin(), r.end(), targets[i]);
    const auto pos = static_cast<std::size_t>(it - r.begin());
    if (it == r.end()) continue;
    h1 += pos < 1;
    h5 += pos < 5;
    h10 += pos < 10;
  }
  const double n = static_cast<double>(m.samples);
  m.hit1 = 100.0 * static_cast<double>(h1) / n;
  m.hit5 = 100.0 * static_cast<double>(h5) / n;
  m.hit10 = 100.0 * static_cast<double>(h10) / n;
  if (!errors.empty()) {
    std::vector<double> e = errors;
    double sum = 0.0;
    for (double v : e) sum += v;
    m.mean_error = sum / static_cast<double>(e.size());
    std::sort(e.begin(), e.end());
    const std::size_t mid = e.size() / 2;
    m.median_error = e.size() % 2 == 1 ? e[mid] : 0.5 * (e[mid - 1] + e[mid]);
  }
  return m;
}

nlohmann::json ActivationStats::to_json() const {
  return {{"routings", routings},
          {"mean_active_experts", mean_active_experts},
          {"expert_frequency", expert_frequency},
          {"mean_entropy", mean_entropy},
          {"function_expert_frequency", function_frequency},
          // Reference values from the original study's real-city runs; context only.
          {"reference_mean_active_experts", {{"shanghai", 1.37}, {"singapore", 1.78}, {"kumamoto", 1.64}}}};
}

ActivationStats expert_activation_report(const std::vector<RoutingTrace>& traces, std::optional<double> tau) {
  if (traces.empty()) throw std::invalid_argument("expert_activation_report needs at least one trace");
  ActivationStats s;
  double active = 0.0, entropy = 0.0;
  std::size_t records = 0;
  for (const auto& t : traces) {
    for (const auto& u : t.user) {
      const auto sel = tau ? select_experts_by_threshold(u.probs, *tau) : u.selected;
      if (s.expert_frequency.empty()) s.expert_frequency.assign(static_cast<std::size_t>(u.probs.size()), 0.0);
      for (int i : sel) s.expert_frequency.at(static_cast<std::size_t>(i)) += 1.0;
      active += static_cast<double>(sel.size());
      entropy += u.entropy;
      ++s.routings;
    }
    for (const auto& f : t.function) {
      if (s.function_frequency.empty()) s.function_frequency.assign(static_cast<std::size_t>(f.probs.size()), 0.0);
      for (int i : f.selected) s.function_frequency.at(static_cast<std::size_t>(i)) += 1.0;
      ++records;
    }
  }
  if (s.routings > 0) {
    const double n = static_cast<double>(s.routings);
    s.mean_active_experts = active / n;
    s.mean_entropy = entropy / n;
    for (auto& f : s.expert_frequency) f /= n;
  }
  if (records > 0) {
    for (auto& f : s.function_frequency) f /= static_cast<double>(records);
  }
  return s;
}

EvalResult evaluate(const Model& model, const std::vector<Sample>& samples, const LocationIndex& index,
                    const ForwardOptions& opts) {
  EvalResult r;
  std::vector<std::int64_t> targets;
  std::vector<double> errors;
  for (const auto& s : samples) {
    Prediction p = model.predict(s, opts);
    r.ranked.push_back(index.nearest_ids(p.x, p.y, 10));
    targets.push_back(s.target.id);
    errors.push_back(std::hypot(p.x - s.target.x, p.y - s.target.y));
    r.traces.push_back(std::move(p.trace));
  }
  r.metrics = hit_metrics(r.ranked, targets, errors);
  bool any_routing = false;
  for (const auto& t : r.traces) any_routing = any_routing || !t.user.empty() || !t.function.empty();
  if (any_routing) r.activation = expert_activation_report(r.traces);
  return r;
}

Metrics most_frequent_baseline(const Dataset& train, const std::vector<Sample>& samples) {
  std::map<std::int64_t, std::size_t> counts;
  for (const auto& [user, recs] : train.users) {
    for (const auto& rec : recs) ++counts[rec.location.id];
  }
  std::vector<std::pair<std::int64_t, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::int64_t> top;
  for (std::size_t i = 0; i < std::min<std::size_t>(10, ranked.size()); ++i) top.push_back(ranked[i].first);
  std::vector<std::vector<std::int64_t>> lists(samples.size(), top);
  std::vector<std::int64_t> targets;
  for (const auto& s : samples) targets.push_back(s.target.id);
  return hit_metrics(lists, targets, {});
}

double uniform_random_hit10(std::size_t num_locations) {
  if (num_locations == 0) throw std::invalid_argument("no locations");
  return std::min(100.0, 1000.0 / static_cast<double>(num_locations));
}

EvalResult zero_shot_transfer(Model& model, const Dataset& city, const std::vector<Sample>& samples,
                              const ForwardOptions& opts) {
  if (!city.norm_stats) throw std::invalid_argument("target city must be normalized with its own statistics");
  const LocationIndex index = LocationIndex::build(city.locations);
  const std::uint64_t before = model.store().checksum();
  EvalResult r;
  {
    WriteGuard guard(model.store());
    r = evaluate(model, samples, index, opts);
  }
  if (model.store().checksum() != before) throw std::logic_error("parameters changed during zero-shot evaluation");
  return r;
}

std::string dataset_digest(const Dataset& ds) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& l : ds.locations) os << l.id << ',' << l.x << ',' << l.y << ';';
  for (const auto& [user, recs] : ds.users) {
    os << user << ':';
    for (const auto& r : recs) {
      os << r.location.id << ',' << r.location.x << ',' << r.location.y << ',' << r.w << ',' << r.d << ',' << r.dur
         << ',' << r.timestamp << ';';
    }
  }
  return hex64(fnv1a(os.str()));
}

std::string json_digest(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

nlohmann::json make_report(const std::string& config_digest, const std::string& data_digest, const Metrics& metrics,
                           const ActivationStats& activation) {
  return {{"config_digest", config_digest},
          {"dataset_digest", data_digest},
          {"metrics", metrics.to_json()},
          {"activation", activation.to_json()}};
}

std::string format_metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows) {
  std::size_t w = 5;
  for (const auto& [name, m] : rows) w = std::max(w, name.size());
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s %8s %8s %8s %8s %10s\n", static_cast<int>(w), "model", "hit@1", "hit@5",
                "hit@10", "samples", "mean_err");
  os << buf;
  for (const auto& [name, m] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %8.2f %8.2f %8.2f %8zu %10.4f\n", static_cast<int>(w), name.c_str(), m.hit1,
                  m.hit5, m.hit10, m.samples, m.mean_error);
    os << buf;
  }
  return os.str();
}

}  // namespace nextlocmoe
