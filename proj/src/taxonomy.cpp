#include "nextlocmoe/taxonomy.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#ifndef NEXTLOCMOE_ASSET_DIR
#define NEXTLOCMOE_ASSET_DIR "assets"
#endif

namespace nextlocmoe {

namespace {

constexpr std::array<std::string_view, kNumLocationFunctions> kFunctionNames{
    "entertainment", "commercial", "education", "public_service", "residential"};

constexpr std::array<std::string_view, kNumUserGroups> kGroupNames{
    "student",         "teacher",       "office_worker",           "visitor",
    "night_shift_worker", "remote_worker", "service_industry_worker", "public_service_official",
    "fitness_enthusiast", "retail_employee", "undefined"};

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read asset " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' ')) text.pop_back();
  return text;
}

template <std::size_t K>
std::vector<std::string> read_all(const std::filesystem::path& dir, const std::array<std::string_view, K>& names) {
  std::vector<std::string> out;
  out.reserve(K);
  for (auto name : names) out.push_back(read_text(dir / (std::string(name) + ".txt")));
  return out;
}

}  // namespace

const std::array<std::string_view, kNumLocationFunctions>& location_function_names() { return kFunctionNames; }
const std::array<std::string_view, kNumUserGroups>& user_group_names() { return kGroupNames; }

std::string_view to_string(LocationFunction f) { return kFunctionNames[static_cast<std::size_t>(f)]; }
std::string_view to_string(UserGroup g) { return kGroupNames[static_cast<std::size_t>(g)]; }

UserGroup user_group_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kNumUserGroups; ++i) {
    if (kGroupNames[i] == name) return static_cast<UserGroup>(i);
  }
  throw std::invalid_argument("unknown user group: " + std::string(name));
}

std::filesystem::path default_asset_dir() {
  if (const char* env = std::getenv("NEXTLOCMOE_ASSETS"); env != nullptr && *env != '\0') return env;
  return NEXTLOCMOE_ASSET_DIR;
}

std::vector<std::string> load_function_descriptions(const std::filesystem::path& asset_dir) {
  return read_all(asset_dir / "location_functions", kFunctionNames);
}

std::vector<std::string> load_group_descriptions(const std::filesystem::path& asset_dir) {
  return read_all(asset_dir / "user_groups", kGroupNames);
}

std::string load_prompt_prefix(const std::filesystem::path& asset_dir) {
  return read_text(asset_dir / "prompt_prefix.txt");
}

}  // namespace nextlocmoe
