#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace nextlocmoe {

/// Location-function categories, one per function expert.
enum class LocationFunction { entertainment, commercial, education, public_service, residential };
inline constexpr std::size_t kNumLocationFunctions = 5;

/// User groups, one per personalized expert.
enum class UserGroup {
  student,
  teacher,
  office_worker,
  visitor,
  night_shift_worker,
  remote_worker,
  service_industry_worker,
  public_service_official,
  fitness_enthusiast,
  retail_employee,
  undefined,
};
inline constexpr std::size_t kNumUserGroups = 11;

/// snake_case identifiers, also the asset file stems.
const std::array<std::string_view, kNumLocationFunctions>& location_function_names();
const std::array<std::string_view, kNumUserGroups>& user_group_names();

std::string_view to_string(LocationFunction f);
std::string_view to_string(UserGroup g);
UserGroup user_group_from_string(std::string_view name);

/// Directory holding `location_functions/*.txt`, `user_groups/*.txt` and
/// `prompt_prefix.txt`. NEXTLOCMOE_ASSETS overrides the built-in default.
std::filesystem::path default_asset_dir();

/// Descriptions in enum order, read from the asset directory.
std::vector<std::string> load_function_descriptions(const std::filesystem::path& asset_dir);
std::vector<std::string> load_group_descriptions(const std::filesystem::path& asset_dir);
std::string load_prompt_prefix(const std::filesystem::path& asset_dir);

}  // namespace nextlocmoe
