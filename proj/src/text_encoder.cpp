#include "nextlocmoe/text_encoder.hpp"

#include "nextlocmoe/rng.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>
#include <stdexcept>

namespace nextlocmoe {

RowVector TextEncoder::encode_pooled(std::string_view text) const {
  const Matrix tokens = encode_tokens(text);
  if (tokens.rows() == 0) return RowVector::Zero(dim());
  return tokens.colwise().mean();
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) != 0) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

HashedBagOfWordsEncoder::HashedBagOfWordsEncoder(Eigen::Index dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw std::invalid_argument("encoder dimension must be positive");
}

std::string HashedBagOfWordsEncoder::name() const {
  return "hashed-bow-d" + std::to_string(dim_) + "-s" + std::to_string(seed_);
}

RowVector HashedBagOfWordsEncoder::token_vector(std::string_view token) const {
  Rng rng(derive_seed(seed_, fnv1a(token)));
  RowVector v(dim_);
  for (Eigen::Index i = 0; i < dim_; ++i) v(i) = rng.normal();
  return v;
}

Matrix HashedBagOfWordsEncoder::encode_tokens(std::string_view text) const {
  const auto tokens = tokenize(text);
  Matrix out(static_cast<Eigen::Index>(tokens.size()), dim_);
  for (std::size_t i = 0; i < tokens.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = token_vector(tokens[i]);
  return out;
}

PrecomputedTextEncoder::PrecomputedTextEncoder(const std::filesystem::path& file, std::vector<std::string> texts)
    : texts_(std::move(texts)) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open precomputed encodings " + file.string());
  std::string header;
  std::getline(in, header);
  static const std::regex kHeader(R"(^#\s*encoder:\s*(\S+)\s+rows=(\d+)\s+dim=(\d+)\s*$)");
  std::smatch m;
  if (!std::regex_match(header, m, kHeader)) {
    throw std::runtime_error("precomputed encodings " + file.string() + ": malformed header");
  }
  encoder_name_ = m[1].str();
  const auto rows = std::stol(m[2].str());
  const auto cols = std::stol(m[3].str());
  if (static_cast<std::size_t>(rows) != texts_.size()) {
    throw std::runtime_error("precomputed encodings hold " + std::to_string(rows) + " rows but " +
                             std::to_string(texts_.size()) + " descriptions were given");
  }
  table_.resize(rows, cols);
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      if (!(in >> table_(r, c))) throw std::runtime_error("precomputed encodings: truncated matrix");
    }
  }
}

Matrix PrecomputedTextEncoder::encode_tokens(std::string_view text) const {
  for (std::size_t i = 0; i < texts_.size(); ++i) {
    if (texts_[i] == text) return table_.row(static_cast<Eigen::Index>(i));
  }
  throw std::invalid_argument("text has no precomputed encoding");
}

void write_precomputed_encodings(const std::filesystem::path& file, const std::string& encoder_name,
                                 const Matrix& table) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "# encoder: " << encoder_name << " rows=" << table.rows() << " dim=" << table.cols() << '\n';
  char buf[40];
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", table(r, c));
      out << (c ? " " : "") << buf;
    }
    out << '\n';
  }
}

}  // namespace nextlocmoe
