#pragma once

#include "nextlocmoe/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace nextlocmoe {

/// Immutable 2-d KD-tree over candidate locations, median split on alternating axes.
class LocationIndex {
 public:
  /// Throws on an empty set or duplicate ids. Construction sorts by (x, y, id)
  /// first, so the tree does not depend on input order.
  static LocationIndex build(std::vector<Location> locations);

  std::size_t size() const { return points_.size(); }
  int depth() const { return depth_; }

  /// Ids of the k nearest locations, ascending by distance, ties by smaller id.
  std::vector<std::int64_t> nearest_ids(double x, double y, int k) const;

 private:
  struct Node {
    Location loc;
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build_range(std::vector<Location>& pts, std::size_t lo, std::size_t hi, int depth);

  std::vector<Node> points_;
  int root_ = -1;
  int depth_ = 0;
};

inline std::vector<std::int64_t> nearest_ids(const LocationIndex& index, double x, double y, int k) {
  return index.nearest_ids(x, y, k);
}

struct Metrics {
  double hit1 = 0.0;
  double hit5 = 0.0;
  double hit10 = 0.0;
  std::size_t samples = 0;
  double mean_error = 0.0;
  double median_error = 0.0;

  nlohmann::json to_json() const;
};

/// Hit@{1,5,10} in percent from one ranked list of (at least) 10 ids per sample.
Metrics hit_metrics(const std::vector<std::vector<std::int64_t>>& ranked, const std::vector<std::int64_t>& targets,
                    const std::vector<double>& errors);

struct ActivationStats {
  std::size_t routings = 0;
  double mean_active_experts = 0.0;
  /// Fraction of routings that selected each user-group expert.
  std::vector<double> expert_frequency;
  double mean_entropy = 0.0;
  /// Fraction of current-trajectory records that selected each function expert.
  std::vector<double> function_frequency;

  nlohmann::json to_json() const;
};

/// Aggregates user routings (and function routings) of the traces. With
/// `tau`, selections are recomputed from the stored probabilities at that threshold.
ActivationStats expert_activation_report(const std::vector<RoutingTrace>& traces, std::optional<double> tau = {});

struct EvalResult {
  Metrics metrics;
  ActivationStats activation;
  std::vector<RoutingTrace> traces;
  std::vector<std::vector<std::int64_t>> ranked;
};

/// Forward, retrieve 10 ids from `index`, score against targets.
EvalResult evaluate(const Model& model, const std::vector<Sample>& samples, const LocationIndex& index,
                    const ForwardOptions& opts = {});

/// Ranks location ids by visit frequency over all records of `train` (ties by id)
/// and predicts that fixed top-10 list for every sample.
Metrics most_frequent_baseline(const Dataset& train, const std::vector<Sample>& samples);

/// 10 / |L| * 100: expected Hit@10 of uniform random retrieval.
double uniform_random_hit10(std::size_t num_locations);

/// Evaluates on another city without touching parameters: the store is
/// write-locked for the duration and its checksum verified afterwards.
/// `city` must be normalized with its own statistics; its full location set is the index.
EvalResult zero_shot_transfer(Model& model, const Dataset& city, const std::vector<Sample>& samples,
                              const ForwardOptions& opts = {});

/// FNV-1a digests used in reports.
std::string dataset_digest(const Dataset& ds);
std::string json_digest(const nlohmann::json& j);

/// Structured report: digests, metrics, activation statistics and extras.
nlohmann::json make_report(const std::string& config_digest, const std::string& data_digest, const Metrics& metrics,
                           const ActivationStats& activation);

/// Aligned plain-text table of a metrics object.
std::string format_metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows);

}  // namespace nextlocmoe
