// SPDX-License-Identifier: Apache-2.0
#pragma once

// Byte-level vocabulary with four reserved control ids, plus one extra id per
// learned concept ("<sks_j>") appended after the base vocabulary.

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "mcvlm/errors.hpp"

namespace mcvlm {

namespace tok {
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kUser = 258;
inline constexpr int kAssistant = 259;
inline constexpr int kBaseVocab = 512;
}  // namespace tok

/// Display form of concept j (1-based in text, 0-based in code).
inline std::string identifier_name(int j) { return "<sks_" + std::to_string(j + 1) + ">"; }

class Vocabulary {
 public:
  Vocabulary(int base_size = tok::kBaseVocab, int concepts = 0) : base_(base_size), concepts_(concepts) {
    require(base_size > tok::kAssistant, ErrorKind::Input, "base vocabulary too small for the control ids");
    require(concepts >= 0, ErrorKind::Input, "negative concept count");
  }

  int base_size() const { return base_; }
  int concepts() const { return concepts_; }
  int size() const { return base_ + concepts_; }

  /// A copy with m identifier entries appended; base ids are untouched.
  Vocabulary expanded(int m) const { return Vocabulary(base_, m); }

  bool is_identifier(int id) const { return id >= base_ && id < size(); }
  int identifier_id(int j) const {
    require(j >= 0 && j < concepts_, ErrorKind::Input, "concept index " + std::to_string(j) + " out of range");
    return base_ + j;
  }
  int concept_of(int id) const { return id - base_; }

  /// Bytes map to themselves; "<sks_j>" maps to its identifier id when
  /// 1 <= j <= concepts(), otherwise it is spelled out byte by byte.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < text.size();) {
      if (const auto [len, j] = match_identifier(text.substr(i)); len > 0 && j >= 1 && j <= concepts_) {
        out.push_back(base_ + j - 1);
        i += len;
        continue;
      }
      out.push_back(static_cast<unsigned char>(text[i]));
      ++i;
    }
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string s;
    for (int id : ids) {
      require(id >= 0 && id < size(), ErrorKind::Input, "token id " + std::to_string(id) + " out of range");
      if (id < 256)
        s += static_cast<char>(id);
      else if (is_identifier(id))
        s += identifier_name(concept_of(id));
      else if (id == tok::kBos || id == tok::kEos)
        continue;
      else if (id == tok::kUser)
        s += "\nUSER: ";
      else if (id == tok::kAssistant)
        s += "\nASSISTANT: ";
    }
    return s;
  }

 private:
  // Length of a leading "<sks_N>" and its N, or {0, 0}.
  static std::pair<std::size_t, int> match_identifier(std::string_view s) {
    constexpr std::string_view head = "<sks_";
    if (s.substr(0, head.size()) != head) return {0, 0};
    std::size_t i = head.size();
    int n = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])) && i < head.size() + 4) n = n * 10 + (s[i++] - '0');
    if (i == head.size() || i >= s.size() || s[i] != '>') return {0, 0};
    return {i + 1, n};
  }

  int base_;
  int concepts_;
};

}  // namespace mcvlm
