#include "nextlocmoe/synthetic_city.hpp"

#include "nextlocmoe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace nextlocmoe {

namespace {

using LF = LocationFunction;
using UG = UserGroup;

constexpr double kZoneFloor = 0.05;

std::size_t fidx(LF f) { return static_cast<std::size_t>(f); }

template <std::size_t K>
void check_mix(const std::array<double, K>& mix, const char* what) {
  double total = 0.0;
  for (double w : mix) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument(std::string(what) + " weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument(std::string(what) + " weights must sum to 1 (got " + std::to_string(total) + ")");
  }
}

template <std::size_t K>
std::array<double, K> to_array(const std::vector<double>& v, const char* key) {
  if (v.size() != K) {
    throw std::invalid_argument(std::string("config key '") + key + "' needs " + std::to_string(K) + " values");
  }
  std::array<double, K> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

/// Anchor function each persona's routine revolves around (none for undefined).
std::optional<LF> anchor_function(UG g) {
  switch (g) {
    case UG::student:
    case UG::teacher:
      return LF::education;
    case UG::office_worker:
    case UG::remote_worker:
    case UG::service_industry_worker:
    case UG::retail_employee:
      return LF::commercial;
    case UG::visitor:
    case UG::fitness_enthusiast:
      return LF::entertainment;
    case UG::night_shift_worker:
    case UG::public_service_official:
      return LF::public_service;
    case UG::undefined:
      return std::nullopt;
  }
  return std::nullopt;
}

enum class Role { home, anchor, favorite, explore };

struct Visit {
  int hour;  // relative to the start of the simulated day; may exceed 23
  Role role;
  LF fn = LF::residential;
};

struct Places {
  std::size_t home = 0;
  std::optional<std::size_t> anchor;
  std::array<std::vector<std::size_t>, kNumLocationFunctions> favorites;
};

class CityLayout {
 public:
  CityLayout(const SyntheticCityConfig& cfg, Rng& rng) : cfg_(cfg) {
    const int g = cfg.grid_size;
    std::vector<int> cells(static_cast<std::size_t>(g * g));
    std::iota(cells.begin(), cells.end(), 0);
    for (int i = 0; i < cfg.n_locations; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) + rng.index(cells.size() - static_cast<std::size_t>(i));
      std::swap(cells[static_cast<std::size_t>(i)], cells[j]);
    }
    cells.resize(static_cast<std::size_t>(cfg.n_locations));
    std::sort(cells.begin(), cells.end());

    // Zone centers in continuous cell coordinates.
    std::array<std::vector<std::pair<double, double>>, kNumLocationFunctions> zones;
    for (std::size_t f = 0; f < kNumLocationFunctions; ++f) {
      for (int z = 0; z < cfg.zones_per_function; ++z) {
        zones[f].emplace_back(rng.uniform(0.0, g), rng.uniform(0.0, g));
      }
    }
    const double two_r2 = 2.0 * cfg.zone_radius * cfg.zone_radius;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const double cx = cells[i] % g + 0.5;
      const double cy = cells[i] / g + 0.5;
      cell_xy_.emplace_back(cx, cy);
      locations_.push_back(
          Location{cfg.id_offset + static_cast<std::int64_t>(i + 1), cx * cfg.cell_size, cy * cfg.cell_size});
      FunctionMix mix{};
      double total = 0.0;
      for (std::size_t f = 0; f < kNumLocationFunctions; ++f) {
        double field = kZoneFloor;
        for (const auto& [zx, zy] : zones[f]) {
          field += std::exp(-((cx - zx) * (cx - zx) + (cy - zy) * (cy - zy)) / two_r2);
        }
        mix[f] = cfg.function_mix[f] * field;
        total += mix[f];
      }
      for (double& w : mix) w /= total;
      functions_.push_back(mix);
      const auto dom = static_cast<std::size_t>(std::max_element(mix.begin(), mix.end()) - mix.begin());
      dominant_[dom].push_back(i);
    }
  }

  const std::vector<Location>& locations() const { return locations_; }
  const std::vector<FunctionMix>& functions() const { return functions_; }
  const std::vector<std::size_t>& dominant(LF f) const { return dominant_[fidx(f)]; }

  double cell_distance(std::size_t a, std::size_t b) const {
    const double dx = cell_xy_[a].first - cell_xy_[b].first;
    const double dy = cell_xy_[a].second - cell_xy_[b].second;
    return std::sqrt(dx * dx + dy * dy);
  }

  /// Draws from `pool` with weight exp(-distance(origin)/scale), skipping `exclude`.
  std::optional<std::size_t> pick_near(const std::vector<std::size_t>& pool, std::size_t origin, double scale,
                                       const std::vector<std::size_t>& exclude, Rng& rng) const {
    std::vector<double> weights;
    weights.reserve(pool.size());
    bool any = false;
    for (std::size_t c : pool) {
      const bool skip = std::find(exclude.begin(), exclude.end(), c) != exclude.end();
      const double w = skip ? 0.0 : std::exp(-cell_distance(origin, c) / scale);
      any = any || w > 0.0;
      weights.push_back(w);
    }
    if (!any) return std::nullopt;
    return pool[rng.categorical(weights)];
  }

 private:
  const SyntheticCityConfig& cfg_;
  std::vector<Location> locations_;
  std::vector<FunctionMix> functions_;
  std::vector<std::pair<double, double>> cell_xy_;
  std::array<std::vector<std::size_t>, kNumLocationFunctions> dominant_;
};

int jitter(int hour, Rng& rng) {
  if (!rng.bernoulli(0.3)) return hour;
  return rng.bernoulli(0.5) ? hour + 1 : hour - 1;
}

/// One day's visits for a persona. Weekdays are w in [0, 4].
std::vector<Visit> plan_day(UG g, int day, int personal_offset, Rng& rng) {
  const bool weekday = day % 7 < 5;
  std::vector<Visit> v;
  auto home = [&](int h) { v.push_back({h, Role::home}); };
  auto anchor = [&](int h) { v.push_back({h, Role::anchor}); };
  auto fav = [&](int h, LF f) { v.push_back({h, Role::favorite, f}); };
  auto explore = [&](int h, LF f) { v.push_back({h, Role::explore, f}); };

  switch (g) {
    case UG::student:
      if (weekday) {
        anchor(8);
        if (rng.bernoulli(0.25)) {
          fav(12, LF::commercial);
          anchor(13);
        }
        if (rng.bernoulli(0.2)) fav(14, LF::education);
        if (rng.bernoulli(0.3)) {
          fav(17, LF::entertainment);
          home(19);
        } else {
          home(jitter(17, rng) + 1);
        }
      } else {
        bool out = false;
        if (rng.bernoulli(0.5)) fav(11, LF::entertainment), out = true;
        if (rng.bernoulli(0.4)) fav(15, LF::commercial), out = true;
        if (out) home(18);
      }
      break;
    case UG::teacher:
      if (weekday) {
        anchor(rng.bernoulli(0.5) ? 7 : 8);
        if (rng.bernoulli(0.3)) fav(16, LF::commercial);
        home(rng.bernoulli(0.5) ? 17 : 18);
      } else {
        if (rng.bernoulli(0.5)) fav(11, LF::commercial), home(13);
        if (rng.bernoulli(0.3)) fav(19, LF::entertainment), home(22);
      }
      break;
    case UG::office_worker:
      if (weekday) {
        anchor(rng.bernoulli(0.5) ? 8 : 9);
        if (rng.bernoulli(0.4)) fav(12, LF::commercial), anchor(13);
        home(jitter(18, rng) + 1);
        if (rng.bernoulli(0.2)) fav(21, LF::entertainment), home(23);
      } else if (rng.bernoulli(0.6)) {
        fav(14, LF::entertainment);
        home(17);
      }
      break;
    case UG::visitor:
      explore(jitter(9, rng) + 1, LF::entertainment);
      fav(12, LF::commercial);
      explore(jitter(15, rng), LF::entertainment);
      explore(18, LF::commercial);
      home(21);
      break;
    case UG::night_shift_worker:
      if (weekday || rng.bernoulli(0.3)) {
        anchor(rng.bernoulli(0.5) ? 21 : 22);
        if (rng.bernoulli(0.5)) {
          fav(24 + 6, LF::commercial);
          home(24 + 7);
        } else {
          home(24 + jitter(6, rng));
        }
      } else if (rng.bernoulli(0.5)) {
        fav(19, LF::entertainment);
        home(22);
      }
      break;
    case UG::remote_worker: {
      bool out = false;
      if (weekday) {
        if (rng.bernoulli(0.7)) anchor(9 + static_cast<int>(rng.index(3))), out = true;
        if (rng.bernoulli(0.5)) fav(14, LF::public_service), out = true;
        if (out) home(16 + static_cast<int>(rng.index(3)));
      } else if (rng.bernoulli(0.5)) {
        fav(15, LF::entertainment);
        home(18);
      }
      break;
    }
    case UG::service_industry_worker:
      if (rng.bernoulli(0.75)) {
        static constexpr int kStarts[3] = {7, 10, 14};
        const int s = kStarts[rng.index(3)];
        anchor(s);
        if (rng.bernoulli(0.4)) fav(s + 4, LF::commercial), anchor(s + 5);
        home(s + 8);
        if (rng.bernoulli(0.3)) fav(s + 9, LF::entertainment), home(s + 11);
      } else if (rng.bernoulli(0.5)) {
        fav(13, LF::entertainment);
        home(16);
      }
      break;
    case UG::public_service_official:
      if (weekday) {
        static constexpr int kShifts[3] = {6, 14, 22};
        const int s = kShifts[(day / 7 + personal_offset) % 3];
        anchor(s);
        if (rng.bernoulli(0.3)) fav(s + 4, LF::public_service), anchor(s + 5);
        home(s + 8);
      }
      break;
    case UG::fitness_enthusiast:
      if (weekday) {
        anchor(6);
        fav(rng.bernoulli(0.5) ? 8 : 9, LF::commercial);
        home(jitter(17, rng) + 1);
        if (rng.bernoulli(0.6)) anchor(19), home(21);
      } else {
        anchor(rng.bernoulli(0.5) ? 8 : 9);
        home(11);
        if (rng.bernoulli(0.5)) fav(16, LF::entertainment), home(18);
      }
      break;
    case UG::retail_employee: {
      const int dow = day % 7;
      const bool off = dow == personal_offset % 7 || dow == (personal_offset + 1) % 7;
      if (!off) {
        anchor(rng.bernoulli(0.5) ? 10 : 11);
        if (rng.bernoulli(0.3)) fav(15, LF::commercial), anchor(16);
        home(rng.bernoulli(0.5) ? 20 : 21);
      } else if (rng.bernoulli(0.5)) {
        fav(13, LF::commercial);
        home(16);
      }
      break;
    }
    case UG::undefined: {
      const int n = 2 + static_cast<int>(rng.index(3));
      std::vector<int> hours;
      while (static_cast<int>(hours.size()) < n) {
        const int h = 7 + static_cast<int>(rng.index(15));
        if (std::find(hours.begin(), hours.end(), h) == hours.end()) hours.push_back(h);
      }
      std::sort(hours.begin(), hours.end());
      for (int h : hours) {
        const auto f = static_cast<LF>(rng.index(kNumLocationFunctions));
        if (rng.bernoulli(0.5)) {
          fav(h, f);
        } else {
          explore(h, f);
        }
      }
      home(22);
      break;
    }
  }
  return v;
}

std::string user_id_for(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "u%05d", index);
  return buf;
}

}  // namespace

void SyntheticCityConfig::validate() const {
  if (grid_size < 2) throw std::invalid_argument("grid_size must be >= 2");
  if (n_locations < 2) throw std::invalid_argument("n_locations must be >= 2");
  if (n_locations > grid_size * grid_size) throw std::invalid_argument("n_locations exceeds grid capacity");
  if (zones_per_function < 1 || !(zone_radius > 0.0)) throw std::invalid_argument("zones must be positive");
  if (users < 0) throw std::invalid_argument("users must be >= 0");
  if (days < 1) throw std::invalid_argument("days must be >= 1");
  if (!(cell_size > 0.0)) throw std::invalid_argument("cell_size must be positive");
  if (id_offset < 0) throw std::invalid_argument("id_offset must be >= 0");
  check_mix(function_mix, "function_mix");
  check_mix(persona_mix, "persona_mix");
}

SyntheticCityConfig SyntheticCityConfig::from_config(const KeyValueConfig& kv) {
  return from_config(kv, SyntheticCityConfig{});
}

SyntheticCityConfig SyntheticCityConfig::from_config(const KeyValueConfig& kv, SyntheticCityConfig base) {
  kv.require_known({"name", "grid_size", "n_locations", "function_mix", "zones_per_function", "zone_radius", "users",
                    "persona_mix", "days", "seed", "cell_size", "id_offset"});
  SyntheticCityConfig c = std::move(base);
  c.name = kv.get_string("name", c.name);
  c.grid_size = static_cast<int>(kv.get_int("grid_size", c.grid_size));
  c.n_locations = static_cast<int>(kv.get_int("n_locations", c.n_locations));
  if (kv.contains("function_mix")) {
    c.function_mix = to_array<kNumLocationFunctions>(kv.get_doubles("function_mix", {}), "function_mix");
  }
  c.zones_per_function = static_cast<int>(kv.get_int("zones_per_function", c.zones_per_function));
  c.zone_radius = kv.get_double("zone_radius", c.zone_radius);
  c.users = static_cast<int>(kv.get_int("users", c.users));
  if (kv.contains("persona_mix")) {
    c.persona_mix = to_array<kNumUserGroups>(kv.get_doubles("persona_mix", {}), "persona_mix");
  }
  c.days = static_cast<int>(kv.get_int("days", c.days));
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.cell_size = kv.get_double("cell_size", c.cell_size);
  c.id_offset = kv.get_int("id_offset", c.id_offset);
  return c;
}

LocationFunction SyntheticCity::dominant_function(std::size_t location_index) const {
  const auto& mix = location_functions.at(location_index);
  return static_cast<LF>(std::max_element(mix.begin(), mix.end()) - mix.begin());
}

SyntheticCity generate_synthetic_city(const SyntheticCityConfig& cfg) {
  cfg.validate();
  Rng layout_rng(derive_seed(cfg.seed, 1));
  const CityLayout layout(cfg, layout_rng);

  if (layout.dominant(LF::residential).empty()) {
    throw std::invalid_argument("infeasible city: no residential locations for homes");
  }
  for (std::size_t g = 0; g < kNumUserGroups; ++g) {
    if (cfg.persona_mix[g] <= 0.0) continue;
    if (auto f = anchor_function(static_cast<UG>(g)); f && layout.dominant(*f).empty()) {
      throw std::invalid_argument("infeasible city: persona '" + std::string(to_string(static_cast<UG>(g))) +
                                  "' needs " + std::string(to_string(*f)) + " locations but the city has none");
    }
  }

  SyntheticCity city;
  city.dataset.locations = layout.locations();
  city.location_functions = layout.functions();
  city.dataset.meta = DatasetMeta{cfg.name, cfg.grid_size, cfg.seed};

  const double near_scale = 0.25 * cfg.grid_size;
  const double anchor_scale = 0.35 * cfg.grid_size;
  const double explore_scale = 0.5 * cfg.grid_size;

  // Homes are drawn among residential-dominant locations.
  const auto& residential = layout.dominant(LF::residential);

  for (int u = 0; u < cfg.users; ++u) {
    Rng rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(u)));
    const auto group = static_cast<UG>(rng.categorical(cfg.persona_mix));
    const int offset = static_cast<int>(rng.index(7));

    Places places;
    places.home = residential[rng.index(residential.size())];
    if (auto f = anchor_function(group)) {
      places.anchor = layout.pick_near(layout.dominant(*f), places.home, anchor_scale, {}, rng);
    }
    for (std::size_t f = 0; f < kNumLocationFunctions; ++f) {
      std::vector<std::size_t> chosen;
      for (int k = 0; k < 3; ++k) {
        auto pick = layout.pick_near(layout.dominant(static_cast<LF>(f)), places.home, near_scale, chosen, rng);
        if (!pick) break;
        chosen.push_back(*pick);
      }
      places.favorites[f] = std::move(chosen);
    }

    auto resolve = [&](const Visit& v) -> std::optional<std::size_t> {
      switch (v.role) {
        case Role::home:
          return places.home;
        case Role::anchor:
          return places.anchor;
        case Role::favorite: {
          const auto& favs = places.favorites[fidx(v.fn)];
          if (favs.empty()) return std::nullopt;
          static constexpr double kPrefs[3] = {0.6, 0.3, 0.1};
          std::vector<double> w(kPrefs, kPrefs + favs.size());
          return favs[rng.categorical(w)];
        }
        case Role::explore:
          return layout.pick_near(layout.dominant(v.fn), places.home, explore_scale, {}, rng);
      }
      return std::nullopt;
    };

    std::vector<std::pair<std::int64_t, std::size_t>> events;
    for (int day = 0; day < cfg.days; ++day) {
      for (const Visit& v : plan_day(group, day, offset, rng)) {
        if (auto loc = resolve(v)) events.emplace_back(static_cast<std::int64_t>(day) * 24 + v.hour, *loc);
      }
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::pair<std::int64_t, std::size_t>> timeline;
    for (const auto& e : events) {
      if (!timeline.empty() && (e.first <= timeline.back().first || e.second == timeline.back().second)) continue;
      timeline.push_back(e);
    }

    const std::string uid = user_id_for(u);
    city.user_persona.emplace(uid, group);
    auto& records = city.dataset.users[uid];
    for (std::size_t i = 0; i < timeline.size(); ++i) {
      const auto [t, loc] = timeline[i];
      Record r;
      r.location = layout.locations()[loc];
      r.timestamp = t;
      r.w = static_cast<int>((t / 24) % 7);
      r.d = static_cast<int>(t % 24);
      r.dur = i + 1 < timeline.size() ? static_cast<double>(timeline[i + 1].first - t) : 8.0;
      records.push_back(r);
    }
  }
  return city;
}

void write_synthetic_city(const SyntheticCity& city, const SyntheticCityConfig& cfg,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_dataset(city.dataset, dir / "records.csv", DataFormat::csv);

  std::ofstream loc(dir / "locations.csv", std::ios::binary);
  if (!loc) throw std::runtime_error("cannot write " + (dir / "locations.csv").string());
  loc << "loc_id,x,y";
  for (auto name : location_function_names()) loc << ',' << name;
  loc << '\n';
  char buf[64];
  for (std::size_t i = 0; i < city.dataset.locations.size(); ++i) {
    const auto& l = city.dataset.locations[i];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g", l.x, l.y);
    loc << l.id << ',' << buf;
    for (double w : city.location_functions[i]) {
      std::snprintf(buf, sizeof(buf), "%.6f", w);
      loc << ',' << buf;
    }
    loc << '\n';
  }

  std::ofstream personas(dir / "personas.csv", std::ios::binary);
  personas << "user_id,persona\n";
  for (const auto& [uid, group] : city.user_persona) personas << uid << ',' << to_string(group) << '\n';

  std::ofstream conf(dir / "city.cfg", std::ios::binary);
  auto join = [](const auto& arr) {
    std::ostringstream ss;
    for (std::size_t i = 0; i < arr.size(); ++i) ss << (i ? "," : "") << arr[i];
    return ss.str();
  };
  conf << "name = " << cfg.name << "\n"
       << "grid_size = " << cfg.grid_size << "\n"
       << "n_locations = " << cfg.n_locations << "\n"
       << "function_mix = " << join(cfg.function_mix) << "\n"
       << "zones_per_function = " << cfg.zones_per_function << "\n"
       << "zone_radius = " << cfg.zone_radius << "\n"
       << "users = " << cfg.users << "\n"
       << "persona_mix = " << join(cfg.persona_mix) << "\n"
       << "days = " << cfg.days << "\n"
       << "seed = " << cfg.seed << "\n"
       << "cell_size = " << cfg.cell_size << "\n"
       << "id_offset = " << cfg.id_offset << "\n";
}

}  // namespace nextlocmoe
