#pragma once

#include "nextlocmoe/parameters.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace nextlocmoe {

/// Produces token-level encodings (tokens x dim) for a piece of text.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Matrix encode_tokens(std::string_view text) const = 0;
  virtual Eigen::Index dim() const = 0;
  virtual std::string name() const = 0;

  /// Mean over token encodings.
  RowVector encode_pooled(std::string_view text) const;
};

/// Lowercased alphanumeric words.
std::vector<std::string> tokenize(std::string_view text);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view text);

/// Deterministic fallback: each token maps to a Gaussian vector seeded by its
/// hash, i.e. a seeded random projection of a hashed bag of words. Needs no
/// model files.
class HashedBagOfWordsEncoder final : public TextEncoder {
 public:
  HashedBagOfWordsEncoder(Eigen::Index dim, std::uint64_t seed);

  Matrix encode_tokens(std::string_view text) const override;
  Eigen::Index dim() const override { return dim_; }
  std::string name() const override;

  RowVector token_vector(std::string_view token) const;

 private:
  Eigen::Index dim_;
  std::uint64_t seed_;
};

/// Encodings computed offline by any language model. The file holds one row
/// per description; a text is looked up by its position in `texts`.
///
/// File format (UTF-8):
///   # encoder: <name> rows=<K> dim=<d>
///   <d whitespace-separated reals>   (K lines)
class PrecomputedTextEncoder final : public TextEncoder {
 public:
  PrecomputedTextEncoder(const std::filesystem::path& file, std::vector<std::string> texts);

  Matrix encode_tokens(std::string_view text) const override;
  Eigen::Index dim() const override { return table_.cols(); }
  std::string name() const override { return encoder_name_; }

  const Matrix& table() const { return table_; }

 private:
  std::string encoder_name_;
  Matrix table_;
  std::vector<std::string> texts_;
};

void write_precomputed_encodings(const std::filesystem::path& file, const std::string& encoder_name,
                                 const Matrix& table);

}  // namespace nextlocmoe
