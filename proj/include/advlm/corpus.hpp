// SPDX-License-Identifier: Apache-2.0
//
// Vocabulary construction, encoding, and contiguous truncated-BPTT batching.

#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "advlm/error.hpp"
#include "advlm/io.hpp"
#include "advlm/tensor.hpp"

namespace advlm {

inline constexpr TokenId kUnkId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "<eos>";

/// Whitespace tokenization with one `<eos>` appended per line.
inline std::vector<std::string> tokenize_lines(std::istream& in) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) out.push_back(tok);
    out.emplace_back(kEosToken);
  }
  return out;
}

inline std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open corpus file " + path.string());
  return tokenize_lines(in);
}

class Vocab {
 public:
  Vocab() : tokens_{std::string(kUnkToken), std::string(kEosToken)} {
    index_.emplace(tokens_[0], kUnkId);
    index_.emplace(tokens_[1], kEosId);
  }

  std::size_t size() const { return tokens_.size(); }

  /// Unknown tokens map to `<unk>`.
  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) {
      throw IndexError("vocab: id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(tokens_.size()) + ")");
    }
    return tokens_[id];
  }

  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  /// "token<TAB>id" per line, in id order.
  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      out += tokens_[i];
      out += '\t';
      out += std::to_string(i);
      out += '\n';
    }
    return out;
  }

  void save(const std::filesystem::path& path) const { atomic_write(path, serialize()); }

  static Vocab parse(std::istream& in) {
    Vocab v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos || tab == 0) {
        throw FormatError("vocab line " + std::to_string(lineno) + ": expected token<TAB>id");
      }
      const std::string tok = line.substr(0, tab);
      std::size_t id = 0;
      try {
        std::size_t used = 0;
        id = std::stoul(line.substr(tab + 1), &used);
        if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw FormatError("vocab line " + std::to_string(lineno) + ": bad id");
      }
      if (id != v.tokens_.size() || v.index_.count(tok)) {
        throw FormatError("vocab line " + std::to_string(lineno) + ": ids must be dense and tokens unique");
      }
      v.tokens_.push_back(tok);
      v.index_.emplace(tok, id);
    }
    if (v.tokens_.size() < 2 || v.tokens_[kUnkId] != kUnkToken || v.tokens_[kEosId] != kEosToken) {
      throw FormatError("vocab must start with <unk> (0) and <eos> (1)");
    }
    return v;
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open vocab file " + path.string());
    return parse(in);
  }

  friend Vocab build_vocab(const std::vector<std::string>& tokens, std::size_t min_count);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Tokens seen fewer than `min_count` times map to `<unk>`. Kept tokens are
/// ordered by descending frequency, ties broken lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& tokens, std::size_t min_count) {
  if (tokens.empty()) throw IngestionError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens) {
    if (t == kUnkToken || t == kEosToken) continue;
    ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (auto& [tok, n] : kept) {
    v.index_.emplace(tok, v.tokens_.size());
    v.tokens_.push_back(tok);
  }
  return v;
}

/// One truncated-BPTT window. Both arrays are [len x batch] row-major:
/// entry (t, b) lives at t * batch + b, and targets are inputs shifted by one
/// step along each column.
struct Window {
  std::size_t len = 0;
  std::size_t batch = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

/// The corpus laid out as `batch_size` contiguous columns of `steps` tokens;
/// the trailing remainder that does not fill a column is dropped.
class BatchStream {
 public:
  BatchStream(const std::vector<TokenId>& ids, std::size_t batch_size, std::size_t bptt_len)
      : batch_(batch_size), bptt_(bptt_len) {
    if (batch_size == 0 || bptt_len == 0) {
      throw ConfigError("batchify: batch_size and bptt_len must be positive");
    }
    if (ids.size() < 2 * batch_size) {
      throw ConfigError("batchify: " + std::to_string(ids.size()) +
                        " tokens is too short for batch_size " + std::to_string(batch_size));
    }
    steps_ = ids.size() / batch_size;
    data_.resize(steps_ * batch_);
    for (std::size_t b = 0; b < batch_; ++b)
      for (std::size_t t = 0; t < steps_; ++t) data_[t * batch_ + b] = ids[b * steps_ + t];
  }

  std::size_t batch_size() const { return batch_; }
  std::size_t bptt_len() const { return bptt_; }
  std::size_t steps() const { return steps_; }
  std::size_t window_count() const { return (steps_ - 1) / bptt_; }
  std::size_t target_count() const { return window_count() * bptt_ * batch_; }

  TokenId at(std::size_t step, std::size_t column) const { return data_[step * batch_ + column]; }

  Window window(std::size_t k) const {
    if (k >= window_count()) {
      throw IndexError("window " + std::to_string(k) + " of " + std::to_string(window_count()));
    }
    Window w{bptt_, batch_, {}, {}};
    const std::size_t begin = k * bptt_ * batch_;
    const std::size_t n = bptt_ * batch_;
    w.inputs.assign(data_.begin() + static_cast<std::ptrdiff_t>(begin),
                    data_.begin() + static_cast<std::ptrdiff_t>(begin + n));
    w.targets.assign(data_.begin() + static_cast<std::ptrdiff_t>(begin + batch_),
                     data_.begin() + static_cast<std::ptrdiff_t>(begin + batch_ + n));
    return w;
  }

  void rewind() { cursor_ = 0; }
  bool next(Window& out) {
    if (cursor_ >= window_count()) return false;
    out = window(cursor_++);
    return true;
  }

 private:
  std::size_t batch_;
  std::size_t bptt_;
  std::size_t steps_ = 0;
  std::size_t cursor_ = 0;
  std::vector<TokenId> data_;  // [steps x batch]
};

inline BatchStream batchify(const std::vector<TokenId>& ids, std::size_t batch_size,
                            std::size_t bptt_len) {
  return BatchStream(ids, batch_size, bptt_len);
}

}  // namespace advlm
