#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace nextlocmoe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Role of a parameter tensor. The freeze policy is a function of the group.
enum class ParamGroup {
  attention,
  backbone_ffn,
  expert_base,
  layer_norm,
  lora,
  embedding,
  history_encoder,
  function_router,
  function_expert,
  user_router,
  group_prior,
  input_projection,
  prompt_prefix,
  output_head,
};

std::string_view to_string(ParamGroup group);
ParamGroup param_group_from_string(std::string_view name);
std::vector<ParamGroup> all_param_groups();

struct Parameter {
  std::string name;
  ParamGroup group;
  Matrix value;
  bool trainable = true;
  std::size_t index = 0;
};

/// One entry of the frozen/trainable manifest.
struct ManifestEntry {
  std::string name;
  ParamGroup group;
  bool trainable;
  Eigen::Index rows;
  Eigen::Index cols;
};

/// Owns every parameter of a model. Addresses are stable for the store's
/// lifetime. While write-locked, mutable access throws.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(std::string name, ParamGroup group, Matrix init);

  std::size_t size() const { return params_.size(); }
  const Parameter& at(std::size_t i) const { return params_[i]; }
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  /// Mutable access for optimizers, loaders and tests.
  Parameter& mutable_at(std::size_t i);
  Parameter& mutable_get(std::string_view name);

  std::vector<ManifestEntry> manifest() const;
  std::size_t trainable_count() const;

  /// FNV-1a over names and raw value bytes.
  std::uint64_t checksum() const;

  void lock_writes() { ++write_locks_; }
  void unlock_writes() { --write_locks_; }
  bool write_locked() const { return write_locks_ > 0; }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  void check_writable() const;

  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
  int write_locks_ = 0;
};

/// RAII write lock. Any attempt to mutate the store while held throws.
class WriteGuard {
 public:
  explicit WriteGuard(ParameterStore& store) : store_(store) { store_.lock_writes(); }
  ~WriteGuard() { store_.unlock_writes(); }
  WriteGuard(const WriteGuard&) = delete;
  WriteGuard& operator=(const WriteGuard&) = delete;

 private:
  ParameterStore& store_;
};

/// Dense per-parameter gradient accumulator, indexed like the store.
class GradientBuffer {
 public:
  explicit GradientBuffer(const ParameterStore& store);

  Matrix& operator[](std::size_t i) { return grads_[i]; }
  const Matrix& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }

  void set_zero();
  void scale(double factor);
  void add(const GradientBuffer& other);
  /// Euclidean norm over all entries of trainable parameters.
  double norm() const;

 private:
  std::vector<Matrix> grads_;
};

}  // namespace nextlocmoe
