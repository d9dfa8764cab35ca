// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mcvlm/errors.hpp"

namespace mcvlm {

// ---------------------------------------------------------------------------
// Recognition

enum class YesNo { Yes, No };

/// Leading "yes" / "no", case-insensitive, after leading whitespace. Anything
/// else is unparseable and always scored wrong.
inline std::optional<YesNo> parse_yes_no(std::string_view reply) {
  std::size_t i = 0;
  while (i < reply.size() && std::isspace(static_cast<unsigned char>(reply[i]))) ++i;
  auto starts = [&](std::string_view word) {
    if (reply.size() - i < word.size()) return false;
    for (std::size_t k = 0; k < word.size(); ++k)
      if (std::tolower(static_cast<unsigned char>(reply[i + k])) != word[k]) return false;
    return true;
  };
  if (starts("yes")) return YesNo::Yes;
  if (starts("no")) return YesNo::No;
  return std::nullopt;
}

/// Mean of the recall on positive items and the recall on negative items.
inline double balanced_recall(std::span<const bool> expected_yes, std::span<const std::string> replies) {
  require(expected_yes.size() == replies.size(), ErrorKind::Input, "every recognition item needs a reply");
  std::size_t pos = 0, neg = 0, tp = 0, tn = 0;
  for (std::size_t i = 0; i < replies.size(); ++i) {
    const auto parsed = parse_yes_no(replies[i]);
    if (expected_yes[i]) {
      ++pos;
      tp += parsed == YesNo::Yes ? 1 : 0;
    } else {
      ++neg;
      tn += parsed == YesNo::No ? 1 : 0;
    }
  }
  require(pos > 0 && neg > 0, ErrorKind::Input, "balanced recall undefined without both positive and negative items");
  return 0.5 * static_cast<double>(tp) / static_cast<double>(pos) + 0.5 * static_cast<double>(tn) / static_cast<double>(neg);
}

// ---------------------------------------------------------------------------
// BLEU

inline std::vector<std::string> bleu_tokens(std::string_view text) {
  std::string lowered(text);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream in(lowered);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

/// Sentence BLEU up to 4-grams: clipped precisions, add-one smoothing on the
/// 2..4-gram precisions, brevity penalty. Lowercased whitespace tokens.
inline double bleu(std::string_view candidate, std::string_view reference, int max_order = 4) {
  const auto cand = bleu_tokens(candidate);
  const auto ref = bleu_tokens(reference);
  require(!ref.empty(), ErrorKind::Input, "BLEU reference is empty");
  if (cand.empty()) return 0.0;

  auto ngram_counts = [](const std::vector<std::string>& toks, int n) {
    std::map<std::vector<std::string>, int> counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
      ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                        toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    return counts;
  };

  double log_sum = 0.0;
  for (int n = 1; n <= max_order; ++n) {
    const auto c = ngram_counts(cand, n);
    const auto r = ngram_counts(ref, n);
    int matched = 0, total = 0;
    for (const auto& [gram, cnt] : c) {
      total += cnt;
      if (auto it = r.find(gram); it != r.end()) matched += std::min(cnt, it->second);
    }
    double p;
    if (n == 1) {
      if (matched == 0) return 0.0;
      p = static_cast<double>(matched) / total;
    } else {
      p = (matched + 1.0) / (total + 1.0);
    }
    log_sum += std::log(p);
  }
  const double c_len = static_cast<double>(cand.size()), r_len = static_cast<double>(ref.size());
  const double bp = c_len >= r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
  return bp * std::exp(log_sum / max_order);
}

// ---------------------------------------------------------------------------
// Captioning

/// Micro recall: identifier occurrences found / identifier occurrences required.
inline double captioning_recall(std::span<const std::string> captions,
                                std::span<const std::vector<std::string>> required) {
  require(!captions.empty(), ErrorKind::Input, "captioning recall needs at least one caption");
  require(captions.size() == required.size(), ErrorKind::Input, "one required-identifier list per caption");
  std::size_t found = 0, needed = 0;
  for (std::size_t i = 0; i < captions.size(); ++i)
    for (const auto& id : required[i]) {
      ++needed;
      found += captions[i].find(id) != std::string::npos ? 1 : 0;
    }
  return needed == 0 ? 1.0 : static_cast<double>(found) / static_cast<double>(needed);
}

// ---------------------------------------------------------------------------
// Grounding choice

enum class HorizontalThird { Left, Middle, Right };

inline const char* choice_label(HorizontalThird t) {
  switch (t) {
    case HorizontalThird::Left: return "A. Left.";
    case HorizontalThird::Middle: return "B. Middle.";
    case HorizontalThird::Right: return "C. Right.";
  }
  return "?";
}

/// Thirds of the image width; a coordinate exactly on a boundary belongs to
/// the lower third.
inline HorizontalThird third_of(double x, int width) {
  if (3.0 * x <= width) return HorizontalThird::Left;
  if (3.0 * x <= 2.0 * width) return HorizontalThird::Middle;
  return HorizontalThird::Right;
}

// ---------------------------------------------------------------------------
// Aggregation

/// Sample-count weighted combination of single- and multi-concept scores.
inline double weighted_score(double single, std::size_t n_single, double multi, std::size_t n_multi) {
  require(n_single + n_multi > 0, ErrorKind::Input, "weighted score needs at least one item");
  return (static_cast<double>(n_single) * single + static_cast<double>(n_multi) * multi) /
         static_cast<double>(n_single + n_multi);
}

// ---------------------------------------------------------------------------
// Test-suite composition counts for an n-concept scenario.

struct RecognitionCounts {
  long long positives = 0;
  long long negatives = 0;
  long long total() const { return positives + negatives; }
};

/// 5n single-concept images queried with each of n concepts, 5 multi-concept
/// images queried per concept and jointly, 50 + 50 external negatives.
inline RecognitionCounts recognition_counts(long long n) {
  return {5 * n + 5 * (n + 1), 100 + 5 * n * (n - 1)};
}

inline long long visual_qa_count(long long n) { return 5 * (n + (1LL << n) - 1); }
inline long long text_qa_count(long long n) { return 5 * n + 5; }
inline long long joint_negative_count(long long m, long long n) { return m * (m - 1) * n; }

}  // namespace mcvlm
