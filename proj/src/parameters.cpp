#include "nextlocmoe/parameters.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace nextlocmoe {

namespace {

constexpr std::array<std::pair<ParamGroup, std::string_view>, 14> kGroupNames{{
    {ParamGroup::attention, "attention"},
    {ParamGroup::backbone_ffn, "backbone_ffn"},
    {ParamGroup::expert_base, "expert_base"},
    {ParamGroup::layer_norm, "layer_norm"},
    {ParamGroup::lora, "lora"},
    {ParamGroup::embedding, "embedding"},
    {ParamGroup::history_encoder, "history_encoder"},
    {ParamGroup::function_router, "function_router"},
    {ParamGroup::function_expert, "function_expert"},
    {ParamGroup::user_router, "user_router"},
    {ParamGroup::group_prior, "group_prior"},
    {ParamGroup::input_projection, "input_projection"},
    {ParamGroup::prompt_prefix, "prompt_prefix"},
    {ParamGroup::output_head, "output_head"},
}};

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

std::string_view to_string(ParamGroup group) {
  for (const auto& [g, name] : kGroupNames) {
    if (g == group) return name;
  }
  return "unknown";
}

ParamGroup param_group_from_string(std::string_view name) {
  for (const auto& [g, n] : kGroupNames) {
    if (n == name) return g;
  }
  throw std::invalid_argument("unknown parameter group: " + std::string(name));
}

std::vector<ParamGroup> all_param_groups() {
  std::vector<ParamGroup> out;
  for (const auto& entry : kGroupNames) out.push_back(entry.first);
  return out;
}

ParameterStore::ParameterStore(const ParameterStore& other)
    : params_(other.params_), by_name_(other.by_name_), write_locks_(0) {}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this != &other) {
    check_writable();
    params_ = other.params_;
    by_name_ = other.by_name_;
  }
  return *this;
}

Parameter& ParameterStore::add(std::string name, ParamGroup group, Matrix init) {
  check_writable();
  if (by_name_.count(name) != 0) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  if (!init.allFinite()) {
    throw std::invalid_argument("non-finite initial value for " + name);
  }
  const std::size_t index = params_.size();
  by_name_.emplace(name, index);
  params_.push_back(Parameter{std::move(name), group, std::move(init), true, index});
  return params_.back();
}

const Parameter& ParameterStore::get(std::string_view name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) {
    throw std::out_of_range("no parameter named " + std::string(name));
  }
  return params_[it->second];
}

bool ParameterStore::contains(std::string_view name) const {
  return by_name_.find(name) != by_name_.end();
}

Parameter& ParameterStore::mutable_at(std::size_t i) {
  check_writable();
  return params_.at(i);
}

Parameter& ParameterStore::mutable_get(std::string_view name) {
  check_writable();
  return params_[get(name).index];
}

std::vector<ManifestEntry> ParameterStore::manifest() const {
  std::vector<ManifestEntry> out;
  out.reserve(params_.size());
  for (const auto& p : params_) {
    out.push_back({p.name, p.group, p.trainable, p.value.rows(), p.value.cols()});
  }
  return out;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

std::uint64_t ParameterStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    fnv_bytes(h, p.name.data(), p.name.size());
    const Eigen::Index dims[2] = {p.value.rows(), p.value.cols()};
    fnv_bytes(h, dims, sizeof(dims));
    fnv_bytes(h, p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()));
  }
  return h;
}

void ParameterStore::check_writable() const {
  if (write_locks_ > 0) {
    throw std::logic_error("parameter store is write-locked");
  }
}

GradientBuffer::GradientBuffer(const ParameterStore& store) {
  grads_.reserve(store.size());
  for (const auto& p : store) {
    if (p.trainable) {
      grads_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    } else {
      grads_.emplace_back();
    }
  }
}

void GradientBuffer::set_zero() {
  for (auto& g : grads_) g.setZero();
}

void GradientBuffer::scale(double factor) {
  for (auto& g : grads_) g *= factor;
}

void GradientBuffer::add(const GradientBuffer& other) {
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    if (grads_[i].size() != 0) grads_[i] += other.grads_[i];
  }
}

double GradientBuffer::norm() const {
  double sq = 0.0;
  for (const auto& g : grads_) sq += g.squaredNorm();
  return std::sqrt(sq);
}

}  // namespace nextlocmoe
