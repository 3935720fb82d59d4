#pragma once

#include "nextlocmoe/config_file.hpp"
#include "nextlocmoe/data_model.hpp"
#include "nextlocmoe/taxonomy.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace nextlocmoe {

using FunctionMix = std::array<double, kNumLocationFunctions>;
using PersonaMix = std::array<double, kNumUserGroups>;

struct SyntheticCityConfig {
  std::string name = "synthetic";
  /// Cells per axis; the city holds at most grid_size^2 locations.
  int grid_size = 20;
  int n_locations = 300;
  /// City-wide prevalence of each location function.
  FunctionMix function_mix{0.18, 0.27, 0.12, 0.13, 0.30};
  /// Gaussian zones per function and their radius in cells.
  int zones_per_function = 3;
  double zone_radius = 3.0;
  int users = 150;
  PersonaMix persona_mix{0.12, 0.06, 0.16, 0.05, 0.07, 0.08, 0.09, 0.07, 0.09, 0.09, 0.12};
  int days = 21;
  std::uint64_t seed = 7;
  /// Side of a grid cell in raw coordinate units (meters).
  double cell_size = 200.0;
  /// Location ids are id_offset + 1 .. id_offset + n_locations.
  std::int64_t id_offset = 0;

  /// Throws std::invalid_argument when an invariant does not hold.
  void validate() const;

  static SyntheticCityConfig from_config(const KeyValueConfig& kv);
  static SyntheticCityConfig from_config(const KeyValueConfig& kv, SyntheticCityConfig base);
};

struct SyntheticCity {
  Dataset dataset;
  /// Function mixture of each location, aligned with dataset.locations.
  std::vector<FunctionMix> location_functions;
  std::map<std::string, UserGroup> user_persona;

  /// Index of the largest function weight (lower index on ties).
  LocationFunction dominant_function(std::size_t location_index) const;
};

/// Places locations on a grid with smooth function zones and simulates each
/// user's days from a persona-specific schedule. Deterministic in cfg.seed;
/// throws if a persona in the mix needs a function the city lacks.
SyntheticCity generate_synthetic_city(const SyntheticCityConfig& cfg);

/// Writes records.csv, locations.csv (with function columns), personas.csv
/// and city.cfg into `dir`.
void write_synthetic_city(const SyntheticCity& city, const SyntheticCityConfig& cfg,
                          const std::filesystem::path& dir);

}  // namespace nextlocmoe
