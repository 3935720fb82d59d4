#include "nextlocmoe/data_model.hpp"

#include "nextlocmoe/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string_view>
#include <unordered_map>

namespace nextlocmoe {

namespace {

using json = nlohmann::json;

constexpr std::string_view kRecordHeader = "user_id,loc_id,x,y,w,d,dur,timestamp";

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

std::string where(std::size_t line, std::string_view field) {
  return "line " + std::to_string(line) + ", field '" + std::string(field) + "'";
}

double parse_double(std::string_view s, std::size_t line, std::string_view field) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError("expected a finite number at " + where(line, field) + ", got '" + std::string(s) + "'", line,
                     std::string(field));
  }
  return v;
}

std::int64_t parse_int(std::string_view s, std::size_t line, std::string_view field) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError("expected an integer at " + where(line, field) + ", got '" + std::string(s) + "'", line,
                     std::string(field));
  }
  return v;
}

void validate_record(const Record& r, std::size_t line) {
  if (r.w < 0 || r.w > 6) {
    throw ValidationError("day-of-week w=" + std::to_string(r.w) + " outside [0,6] at " + where(line, "w"), line, "w");
  }
  if (r.d < 0 || r.d > 23) {
    throw ValidationError("hour d=" + std::to_string(r.d) + " outside [0,23] at " + where(line, "d"), line, "d");
  }
  if (!(r.dur >= 0.0)) {
    throw ValidationError("negative duration at " + where(line, "dur"), line, "dur");
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// Collects records, enforcing one coordinate pair per location id.
class DatasetBuilder {
 public:
  void add(const std::string& user, const Record& r, std::size_t line) {
    add_location(r.location, line);
    users_[user].push_back(r);
  }

  void add_location(const Location& loc, std::size_t line) {
    auto [it, inserted] = locations_.emplace(loc.id, loc);
    if (!inserted && (it->second.x != loc.x || it->second.y != loc.y)) {
      throw ValidationError("location " + std::to_string(loc.id) + " has conflicting coordinates at " +
                                where(line, "loc_id"),
                            line, "loc_id");
    }
  }

  Dataset finish() {
    Dataset ds;
    ds.locations.reserve(locations_.size());
    for (const auto& [id, loc] : locations_) ds.locations.push_back(loc);
    for (auto& [user, records] : users_) {
      std::stable_sort(records.begin(), records.end(),
                       [](const Record& a, const Record& b) { return a.timestamp < b.timestamp; });
    }
    ds.users = std::move(users_);
    return ds;
  }

 private:
  std::map<std::int64_t, Location> locations_;
  std::map<std::string, std::vector<Record>> users_;
};

Dataset load_csv(std::istream& in) {
  DatasetBuilder builder;
  std::string raw;
  std::size_t line = 0;
  bool header_seen = false;
  while (std::getline(in, raw)) {
    ++line;
    const std::string_view text = trim(raw);
    if (text.empty()) continue;
    if (!header_seen) {
      if (text != kRecordHeader) {
        throw ParseError("expected header '" + std::string(kRecordHeader) + "' at line " + std::to_string(line), line,
                         "header");
      }
      header_seen = true;
      continue;
    }
    const auto f = split_commas(text);
    if (f.size() != 8) {
      throw ParseError("expected 8 fields at line " + std::to_string(line) + ", got " + std::to_string(f.size()), line,
                       "record");
    }
    if (f[0].empty()) throw ParseError("empty user_id at " + where(line, "user_id"), line, "user_id");
    Record r;
    r.location.id = parse_int(f[1], line, "loc_id");
    r.location.x = parse_double(f[2], line, "x");
    r.location.y = parse_double(f[3], line, "y");
    r.w = static_cast<int>(parse_int(f[4], line, "w"));
    r.d = static_cast<int>(parse_int(f[5], line, "d"));
    r.dur = parse_double(f[6], line, "dur");
    r.timestamp = parse_int(f[7], line, "timestamp");
    validate_record(r, line);
    builder.add(std::string(f[0]), r, line);
  }
  if (!header_seen) throw ParseError("missing header", 1, "header");
  return builder.finish();
}

template <typename T>
T json_field(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing ") + where(line, key), line, key);
  try {
    return it->template get<T>();
  } catch (const json::exception&) {
    throw ParseError(std::string("wrong type at ") + where(line, key), line, key);
  }
}

Dataset load_jsonl(std::istream& in) {
  DatasetBuilder builder;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (trim(raw).empty()) continue;
    json obj;
    try {
      obj = json::parse(raw);
    } catch (const json::parse_error& e) {
      throw ParseError("invalid JSON at line " + std::to_string(line) + ": " + e.what(), line, "record");
    }
    if (!obj.is_object()) throw ParseError("expected an object at line " + std::to_string(line), line, "record");
    std::string user;
    const auto uid = obj.find("user_id");
    if (uid == obj.end()) throw ParseError("missing " + where(line, "user_id"), line, "user_id");
    if (uid->is_string()) {
      user = uid->get<std::string>();
    } else if (uid->is_number_integer()) {
      user = std::to_string(uid->get<std::int64_t>());
    } else {
      throw ParseError("wrong type at " + where(line, "user_id"), line, "user_id");
    }
    Record r;
    r.location.id = json_field<std::int64_t>(obj, "loc_id", line);
    r.location.x = json_field<double>(obj, "x", line);
    r.location.y = json_field<double>(obj, "y", line);
    r.w = json_field<int>(obj, "w", line);
    r.d = json_field<int>(obj, "d", line);
    r.dur = json_field<double>(obj, "dur", line);
    r.timestamp = json_field<std::int64_t>(obj, "timestamp", line);
    validate_record(r, line);
    builder.add(user, r, line);
  }
  return builder.finish();
}

void require_writable(const std::ofstream& out, const std::filesystem::path& path) {
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
}

Dataset with_users(const Dataset& ds, std::map<std::string, std::vector<Record>> users) {
  Dataset out;
  out.locations = ds.locations;
  out.users = std::move(users);
  out.norm_stats = ds.norm_stats;
  out.meta = ds.meta;
  return out;
}

}  // namespace

std::size_t Dataset::record_count() const {
  std::size_t n = 0;
  for (const auto& [user, records] : users) n += records.size();
  return n;
}

DataFormat data_format_from_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return DataFormat::csv;
  if (ext == ".jsonl") return DataFormat::jsonl;
  throw std::invalid_argument("unrecognized dataset extension '" + ext + "' (expected .csv or .jsonl)");
}

Dataset load_dataset(const std::filesystem::path& path, DataFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  return format == DataFormat::csv ? load_csv(in) : load_jsonl(in);
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path, DataFormat format) {
  std::ofstream out(path, std::ios::binary);
  require_writable(out, path);
  if (format == DataFormat::csv) {
    out << kRecordHeader << '\n';
    for (const auto& [user, records] : ds.users) {
      for (const auto& r : records) {
        out << user << ',' << r.location.id << ',' << format_double(r.location.x) << ','
            << format_double(r.location.y) << ',' << r.w << ',' << r.d << ',' << format_double(r.dur) << ','
            << r.timestamp << '\n';
      }
    }
  } else {
    for (const auto& [user, records] : ds.users) {
      for (const auto& r : records) {
        // Hand-assembled so doubles use the same shortest form as the csv writer.
        out << "{\"user_id\":" << json(user).dump() << ",\"loc_id\":" << r.location.id
            << ",\"x\":" << format_double(r.location.x) << ",\"y\":" << format_double(r.location.y)
            << ",\"w\":" << r.w << ",\"d\":" << r.d << ",\"dur\":" << format_double(r.dur)
            << ",\"timestamp\":" << r.timestamp << "}\n";
      }
    }
  }
}

std::vector<Location> load_locations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open locations file " + path.string());
  std::string raw;
  std::size_t line = 0;
  bool header_seen = false;
  DatasetBuilder builder;
  std::vector<Location> out;
  while (std::getline(in, raw)) {
    ++line;
    const std::string_view text = trim(raw);
    if (text.empty()) continue;
    const auto f = split_commas(text);
    if (!header_seen) {
      if (f.size() < 3 || f[0] != "loc_id" || f[1] != "x" || f[2] != "y") {
        throw ParseError("expected header starting 'loc_id,x,y' at line " + std::to_string(line), line, "header");
      }
      header_seen = true;
      continue;
    }
    if (f.size() < 3) throw ParseError("expected at least 3 fields at line " + std::to_string(line), line, "record");
    Location loc{parse_int(f[0], line, "loc_id"), parse_double(f[1], line, "x"), parse_double(f[2], line, "y")};
    builder.add_location(loc, line);
  }
  return builder.finish().locations;
}

void write_locations(const std::vector<Location>& locations, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require_writable(out, path);
  out << "loc_id,x,y\n";
  for (const auto& l : locations) out << l.id << ',' << format_double(l.x) << ',' << format_double(l.y) << '\n';
}

Dataset load_dataset_dir(const std::filesystem::path& dir) {
  Dataset ds;
  if (std::filesystem::exists(dir / "records.csv")) {
    ds = load_dataset(dir / "records.csv", DataFormat::csv);
  } else if (std::filesystem::exists(dir / "records.jsonl")) {
    ds = load_dataset(dir / "records.jsonl", DataFormat::jsonl);
  } else {
    throw std::runtime_error("no records.csv or records.jsonl in " + dir.string());
  }
  if (std::filesystem::exists(dir / "locations.csv")) {
    std::map<std::int64_t, Location> merged;
    for (const auto& l : ds.locations) merged.emplace(l.id, l);
    for (const auto& l : load_locations(dir / "locations.csv")) {
      auto [it, inserted] = merged.emplace(l.id, l);
      if (!inserted && (it->second.x != l.x || it->second.y != l.y)) {
        throw ValidationError("location " + std::to_string(l.id) + " disagrees between records and locations.csv",
                              0, "loc_id");
      }
    }
    ds.locations.clear();
    for (const auto& [id, l] : merged) ds.locations.push_back(l);
  }
  ds.meta.name = dir.filename().string();
  if (ds.meta.name.empty()) ds.meta.name = dir.parent_path().filename().string();
  return ds;
}

Dataset normalize_coordinates(const Dataset& ds, double dur_cap) {
  if (ds.norm_stats) throw std::logic_error("dataset is already normalized");
  if (!(dur_cap > 0.0)) throw std::invalid_argument("duration cap must be positive");
  if (ds.locations.empty()) throw std::invalid_argument("cannot normalize a dataset without locations");
  NormStats stats;
  stats.dur_cap = dur_cap;
  stats.x_min = stats.x_max = ds.locations.front().x;
  stats.y_min = stats.y_max = ds.locations.front().y;
  for (const auto& l : ds.locations) {
    stats.x_min = std::min(stats.x_min, l.x);
    stats.x_max = std::max(stats.x_max, l.x);
    stats.y_min = std::min(stats.y_min, l.y);
    stats.y_max = std::max(stats.y_max, l.y);
  }
  if (!(stats.x_max > stats.x_min) || !(stats.y_max > stats.y_min)) {
    throw std::invalid_argument("degenerate coordinate axis: normalization needs two distinct x and y values");
  }
  const double sx = stats.x_max - stats.x_min;
  const double sy = stats.y_max - stats.y_min;
  auto norm_loc = [&](Location l) {
    l.x = (l.x - stats.x_min) / sx;
    l.y = (l.y - stats.y_min) / sy;
    return l;
  };
  Dataset out;
  out.meta = ds.meta;
  out.norm_stats = stats;
  out.locations.reserve(ds.locations.size());
  for (const auto& l : ds.locations) out.locations.push_back(norm_loc(l));
  for (const auto& [user, records] : ds.users) {
    auto& dst = out.users[user];
    dst.reserve(records.size());
    for (Record r : records) {
      r.location = norm_loc(r.location);
      r.dur = std::clamp(r.dur / dur_cap, 0.0, 1.0);
      dst.push_back(r);
    }
  }
  return out;
}

Dataset denormalize_coordinates(const Dataset& ds) {
  if (!ds.norm_stats) throw std::logic_error("dataset is not normalized");
  const NormStats& s = *ds.norm_stats;
  auto denorm_loc = [&](Location l) {
    l.x = s.x_min + l.x * (s.x_max - s.x_min);
    l.y = s.y_min + l.y * (s.y_max - s.y_min);
    return l;
  };
  Dataset out;
  out.meta = ds.meta;
  for (const auto& l : ds.locations) out.locations.push_back(denorm_loc(l));
  for (const auto& [user, records] : ds.users) {
    auto& dst = out.users[user];
    for (Record r : records) {
      r.location = denorm_loc(r.location);
      r.dur *= s.dur_cap;
      dst.push_back(r);
    }
  }
  return out;
}

UserPartition partition_users(const Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
  const std::size_t n = ds.users.size();
  if (n < 10) throw std::invalid_argument("partition_users needs at least 10 users, got " + std::to_string(n));
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || ratios.train + ratios.val + ratios.test <= 0) {
    throw std::invalid_argument("split ratios must be nonnegative with a positive sum");
  }
  std::vector<std::string> ids;
  ids.reserve(n);
  for (const auto& [user, records] : ds.users) ids.push_back(user);
  Rng rng(derive_seed(seed, 0x5917));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(ids[i], ids[rng.index(i + 1)]);

  const auto total = static_cast<std::size_t>(ratios.train + ratios.val + ratios.test);
  const std::size_t n_train = n * static_cast<std::size_t>(ratios.train) / total;
  const std::size_t n_val = n * static_cast<std::size_t>(ratios.val) / total;

  std::map<std::string, std::vector<Record>> train, val, test;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? train : (i < n_train + n_val ? val : test);
    dst.emplace(ids[i], ds.users.at(ids[i]));
  }
  return {with_users(ds, std::move(train)), with_users(ds, std::move(val)), with_users(ds, std::move(test))};
}

std::vector<Sample> window_trajectories(const std::string& user_id, const std::vector<Record>& records, int M, int N,
                                        int stride) {
  if (M < 1 || N < 1 || stride < 1) throw std::invalid_argument("window sizes and stride must be >= 1");
  std::vector<Sample> out;
  const auto len = records.size();
  const auto span = static_cast<std::size_t>(M + N);
  for (std::size_t i = 0; i + span < len; i += static_cast<std::size_t>(stride)) {
    Sample s;
    s.user_id = user_id;
    s.historical.assign(records.begin() + static_cast<std::ptrdiff_t>(i),
                        records.begin() + static_cast<std::ptrdiff_t>(i + static_cast<std::size_t>(M)));
    s.current.assign(records.begin() + static_cast<std::ptrdiff_t>(i + static_cast<std::size_t>(M)),
                     records.begin() + static_cast<std::ptrdiff_t>(i + span));
    s.target = records[i + span].location;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> make_samples(const Dataset& ds, int M, int N, int stride) {
  std::vector<Sample> out;
  for (const auto& [user, records] : ds.users) {
    auto windows = window_trajectories(user, records, M, N, stride);
    out.insert(out.end(), std::make_move_iterator(windows.begin()), std::make_move_iterator(windows.end()));
  }
  return out;
}

}  // namespace nextlocmoe
