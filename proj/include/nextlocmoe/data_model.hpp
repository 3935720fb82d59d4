#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace nextlocmoe {

struct Location {
  std::int64_t id = 0;
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Location&, const Location&) = default;
};

/// One visit: the user stayed at `location` for `dur` hours, arriving on
/// day-of-week `w` at hour `d`. `timestamp` orders records (hours since an
/// arbitrary epoch).
struct Record {
  Location location;
  int w = 0;
  int d = 0;
  double dur = 0.0;
  std::int64_t timestamp = 0;

  friend bool operator==(const Record&, const Record&) = default;
};

/// Historical window of M records, current window of N records, and the
/// location visited right after.
struct Sample {
  std::string user_id;
  std::vector<Record> historical;
  std::vector<Record> current;
  Location target;
};

/// Per-axis min/max used for min-max normalization, plus the duration cap.
struct NormStats {
  double x_min = 0.0;
  double x_max = 1.0;
  double y_min = 0.0;
  double y_max = 1.0;
  double dur_cap = 24.0;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

struct DatasetMeta {
  std::string name;
  int grid_size = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  /// Sorted by id.
  std::vector<Location> locations;
  /// Chronological records per user.
  std::map<std::string, std::vector<Record>> users;
  /// Present once coordinates have been normalized.
  std::optional<NormStats> norm_stats;
  DatasetMeta meta;

  std::size_t record_count() const;
};

enum class DataFormat { csv, jsonl };

DataFormat data_format_from_path(const std::filesystem::path& path);

/// Malformed input; `line` is 1-based (0 when not applicable).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line, std::string field)
      : std::runtime_error(what), line_(line), field_(std::move(field)) {}
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// Well-formed input that violates a domain invariant.
class ValidationError : public ParseError {
 public:
  using ParseError::ParseError;
};

/// Reads `user_id,loc_id,x,y,w,d,dur,timestamp` records (csv with header, or
/// jsonl objects with the same keys). Coordinates are left unnormalized.
Dataset load_dataset(const std::filesystem::path& path, DataFormat format);
void write_dataset(const Dataset& ds, const std::filesystem::path& path, DataFormat format);

/// `loc_id,x,y[,...]` with header; extra columns are ignored.
std::vector<Location> load_locations(const std::filesystem::path& path);
void write_locations(const std::vector<Location>& locations, const std::filesystem::path& path);

/// Loads `records.csv` (or `records.jsonl`) from a directory and merges in
/// `locations.csv` when present so unvisited candidates are retained.
Dataset load_dataset_dir(const std::filesystem::path& dir);

/// Min-max normalizes coordinates per axis into [0, 1] and divides durations
/// by `dur_cap`, clipping to [0, 1]. Throws on a degenerate axis.
Dataset normalize_coordinates(const Dataset& ds, double dur_cap = 24.0);
/// Inverse of normalize_coordinates (exact for durations not clipped).
Dataset denormalize_coordinates(const Dataset& ds);

struct UserPartition {
  Dataset train;
  Dataset val;
  Dataset test;
};

struct SplitRatios {
  int train = 7;
  int val = 1;
  int test = 2;
};

/// Disjoint split over user ids. Sizes are floor(train share), floor(val
/// share), remainder. Every split keeps the full location set.
UserPartition partition_users(const Dataset& ds, SplitRatios ratios, std::uint64_t seed);

/// Sliding windows: [i, i+M) historical, [i+M, i+M+N) current, record i+M+N
/// is the target. Users shorter than M+N+1 records yield nothing.
std::vector<Sample> window_trajectories(const std::string& user_id, const std::vector<Record>& records,
                                        int M, int N, int stride = 1);

/// Windows over every user in id order.
std::vector<Sample> make_samples(const Dataset& ds, int M, int N, int stride = 1);

}  // namespace nextlocmoe
