// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcvlm/archive.hpp"
#include "mcvlm/errors.hpp"
#include "mcvlm/image.hpp"
#include "mcvlm/metrics.hpp"
#include "mcvlm/model.hpp"
#include "mcvlm/synth.hpp"
#include "mcvlm/tokenizer.hpp"

namespace mcvlm {

// ---------------------------------------------------------------------------
// Templates

struct ConversationTemplate {
  std::string question;  // placeholders: {id}
  std::string answer;    // placeholders: {id} {color} {shape} {side}
};

struct TemplatePool {
  std::vector<std::string> positive;  // "{id}" marks the identifier slot
  std::vector<std::string> negative;
  std::vector<ConversationTemplate> conversation;

  static const TemplatePool& standard() {
    static const TemplatePool pool{
        {"Can you see {id} in this photo?", "Is {id} in this image?", "Does this picture show {id}?",
         "Is {id} visible here?", "Do you notice {id} in this picture?", "Is there {id} in the photo?",
         "Can {id} be found in this image?", "Does {id} appear in this photo?", "Is {id} present in this picture?",
         "Could you spot {id} here?"},
        {"Is {id} shown in this photo?", "Can you find {id} in this image?", "Do you see {id} here?",
         "Is {id} anywhere in this picture?", "Does this image contain {id}?", "Would you say {id} is in this photo?",
         "Is {id} part of this scene?", "Can you spot {id} in the picture?", "Is {id} captured in this image?",
         "Does {id} show up in this photo?"},
        {{"What color is {id}?", "{id} is {color}."},
         {"What shape is {id}?", "{id} is a {shape}."},
         {"Where is {id} in the image?", "{id} is {side}."},
         {"Describe {id}.", "{id} is a {color} {shape}."},
         {"What does {id} look like?", "{id} is a {color} {shape}."},
         {"Which color does {id} have?", "{id} is {color}."},
         {"Tell me the shape of {id}.", "{id} is a {shape}."},
         {"On which side of the picture is {id}?", "{id} is {side}."},
         {"What is {id}?", "{id} is a {color} {shape}."},
         {"Is {id} on the left, in the middle or on the right?", "{id} is {side}."}},
    };
    return pool;
  }
};

/// Conversation templates that make sense without an image.
inline constexpr std::array<int, 5> kTextOnlyTemplates = {0, 1, 3, 4, 8};

inline std::string replace_all(std::string s, const std::string& key, const std::string& value) {
  for (std::size_t at = s.find(key); at != std::string::npos; at = s.find(key, at + value.size()))
    s.replace(at, key.size(), value);
  return s;
}

inline std::string join(std::span<const std::string> parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

inline std::string side_phrase(HorizontalThird t) {
  switch (t) {
    case HorizontalThird::Left: return "on the left";
    case HorizontalThird::Middle: return "in the middle";
    case HorizontalThird::Right: return "on the right";
  }
  return "";
}

struct Attributes {
  std::string color;
  std::string shape;
  std::optional<HorizontalThird> side;
};

inline std::string render(const std::string& tmpl, const std::string& id, const Attributes& a) {
  std::string s = replace_all(tmpl, "{id}", id);
  s = replace_all(s, "{color}", a.color);
  s = replace_all(s, "{shape}", a.shape);
  if (s.find("{side}") != std::string::npos) {
    require(a.side.has_value(), ErrorKind::Input, "template needs a position but none is known");
    s = replace_all(s, "{side}", side_phrase(*a.side));
  }
  return s;
}

inline std::string recognition_query(std::span<const std::string> identifiers) {
  require(!identifiers.empty(), ErrorKind::Input, "recognition query needs an identifier");
  return "Can you see " + join(identifiers, " and ") + " in this photo? Answer with a single word: Yes or No.";
}

inline std::string grounding_query(const std::string& identifier) {
  return "Where is " + identifier + " located in this photo? A. Left. B. Middle. C. Right.";
}

inline std::string caption_query(std::span<const std::string> identifiers) {
  return "Can you see " + join(identifiers, " ") +
         " in the image? Don't answer the question, but remember it, and only respond with a detailed caption for "
         "the image. Your caption:";
}

// ---------------------------------------------------------------------------
// Prompt assembly

/// "<sks_j> is <token...>." for each concept in ascending order.
inline void append_system_prompt(SequenceBuilder& b, int concepts, int k) {
  for (int j = 0; j < concepts; ++j) {
    b.identifier(j).text(" is ");
    for (int t = 0; t < k; ++t) b.soft(j, t);
    b.text(".");
  }
}

struct PromptParts {
  const Matrix* image = nullptr;  // projected features, or none
  std::string location;           // visual-prompt clauses, may be empty
  std::string question;
  std::optional<std::string> answer;  // absent for inference prompts
};

/// BOS, image, system prompt, location clauses, USER question, ASSISTANT answer EOS.
inline Sequence assemble(const Vocabulary& vocab, int concepts, int k, const PromptParts& p) {
  SequenceBuilder b(vocab);
  b.token(tok::kBos);
  if (p.image) b.image(*p.image);
  append_system_prompt(b, concepts, k);
  if (!p.location.empty()) b.text(" " + p.location);
  b.token(tok::kUser).text(p.question).token(tok::kAssistant);
  if (p.answer) {
    b.begin_answer().text(*p.answer).token(tok::kEos);
  }
  return b.build();
}

// ---------------------------------------------------------------------------
// Samples

enum class SampleKind { PositiveRec, RandomRec, JointRec, Conversation };

inline const char* kind_name(SampleKind k) {
  switch (k) {
    case SampleKind::PositiveRec: return "positive_rec";
    case SampleKind::RandomRec: return "random_rec";
    case SampleKind::JointRec: return "joint_rec";
    case SampleKind::Conversation: return "conversation";
  }
  return "?";
}

inline SampleKind kind_from_name(const std::string& s) {
  for (auto k : {SampleKind::PositiveRec, SampleKind::RandomRec, SampleKind::JointRec, SampleKind::Conversation})
    if (s == kind_name(k)) return k;
  fail(ErrorKind::Validation, "unknown sample kind '" + s + "'");
}

struct TrainSample {
  std::optional<std::string> image;  // scenario-relative path
  std::string question;
  std::string answer;
  SampleKind kind = SampleKind::Conversation;
  std::vector<int> concepts;  // concepts the question mentions
};

// ---------------------------------------------------------------------------
// Scenario

struct ConceptRecord {
  std::string id;
  std::string identifier;
  ConceptLook look;
  std::vector<std::string> train_images;
  std::vector<std::string> train_masks;
  std::vector<Placement> train_at;
};

struct TestImage {
  std::string path;
  std::vector<int> concepts;  // present concepts, in drawing order
  std::vector<Placement> at;  // one per present concept
};

struct Scenario {
  std::string id = "scenario";
  std::uint64_t seed = 0;
  int n_images = 0;
  std::vector<ConceptRecord> concepts;
  std::vector<std::string> external_train;  // random-negative pool
  std::vector<TestImage> test_single;
  std::vector<TestImage> test_multi;
  std::vector<std::string> external_single;
  std::vector<std::string> external_multi;
  std::map<std::string, Image> images;
  std::map<std::string, ConceptMask> masks;

  int m() const { return static_cast<int>(concepts.size()); }
  std::vector<std::string> identifiers() const {
    std::vector<std::string> out;
    for (const auto& c : concepts) out.push_back(c.identifier);
    return out;
  }
  const Image& image(const std::string& path) const {
    auto it = images.find(path);
    require(it != images.end(), ErrorKind::Input, "scenario has no image '" + path + "'");
    return it->second;
  }
  const ConceptMask& mask(const std::string& path) const {
    auto it = masks.find(path);
    require(it != masks.end(), ErrorKind::Input, "scenario has no mask '" + path + "'");
    return it->second;
  }
  Attributes attributes(int j, std::optional<Placement> at = std::nullopt) const {
    const auto& c = concepts[static_cast<std::size_t>(j)];
    Attributes a{c.look.color_name, shape_name(c.look.shape), std::nullopt};
    if (at) a.side = third_of(at->cx, kSceneSize);
    return a;
  }
};

/// The personalised system prompt alone, one clause per concept block.
inline Sequence system_prompt(const Scenario& s, const Theta& theta) {
  for (int j = 0; j < s.m(); ++j)
    require(j < theta.concepts(), ErrorKind::Input, "no token block for concept '" + s.concepts[static_cast<std::size_t>(j)].id + "'");
  require(theta.concepts() == s.m(), ErrorKind::Input, "token blocks do not match the scenario's concepts");
  const Vocabulary vocab = Vocabulary().expanded(s.m());
  SequenceBuilder b(vocab);
  append_system_prompt(b, s.m(), theta.k());
  return b.build();
}

inline constexpr int kTestImagesPerConcept = 5;
inline constexpr int kTestMultiImages = 5;
inline constexpr int kExternalTrain = 100;
inline constexpr int kExternalTest = 50;

namespace detail {
inline std::string numbered(const std::string& dir, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", i);
  return dir + "/" + buf + ".png";
}
}  // namespace detail

/// Concepts are the first m palette entries; every image is seeded from `seed`.
inline Scenario generate_synthetic_scenario(int m, int n, std::uint64_t seed, std::string id = "scenario") {
  require(m >= 1 && m <= static_cast<int>(concept_palette().size()), ErrorKind::Input,
          "scenario concept count must be 1..4");
  require(n >= 1, ErrorKind::Input, "need at least one training image per concept");
  Rng rng(seed);
  Scenario s;
  s.id = std::move(id);
  s.seed = seed;
  s.n_images = n;
  for (int j = 0; j < m; ++j) {
    ConceptRecord c;
    c.id = "c" + std::to_string(j + 1);
    c.identifier = identifier_name(j);
    c.look = concept_palette()[static_cast<std::size_t>(j)];
    const std::string base = "concepts/" + c.id;
    for (int i = 0; i < n; ++i) {
      Image img = background(rng);
      ConceptMask mask;
      c.train_at.push_back(draw_single(img, rng, c.look, &mask));
      c.train_images.push_back(detail::numbered(base + "/train", i));
      c.train_masks.push_back(detail::numbered(base + "/masks", i));
      s.images[c.train_images.back()] = std::move(img);
      s.masks[c.train_masks.back()] = std::move(mask);
    }
    s.concepts.push_back(std::move(c));
  }
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < kTestImagesPerConcept; ++i) {
      Image img = background(rng);
      const Placement p = draw_single(img, rng, s.concepts[static_cast<std::size_t>(j)].look);
      if (uniform(rng, 0.0, 1.0) < 0.3) draw_distractor(img, rng, {p});
      TestImage t{detail::numbered("test/single", j * kTestImagesPerConcept + i), {j}, {p}};
      s.images[t.path] = std::move(img);
      s.test_single.push_back(std::move(t));
    }
  for (int i = 0; i < kTestMultiImages; ++i) {
    Image img = background(rng);
    TestImage t{detail::numbered("test/multi", i), {}, multi_layout(rng, m)};
    for (int j = 0; j < m; ++j) {
      const auto& look = s.concepts[static_cast<std::size_t>(j)].look;
      const auto& p = t.at[static_cast<std::size_t>(j)];
      draw_shape(img, look.shape, look.color, p.cx, p.cy, p.r);
      t.concepts.push_back(j);
    }
    s.images[t.path] = std::move(img);
    s.test_multi.push_back(std::move(t));
  }
  auto externals = [&](const std::string& dir, int count, int lo, int hi, std::vector<std::string>& out) {
    for (int i = 0; i < count; ++i) {
      out.push_back(detail::numbered(dir, i));
      s.images[out.back()] = distractor_image(rng, uniform_int(rng, lo, hi));
    }
  };
  externals("external/train", kExternalTrain, 1, 2, s.external_train);
  externals("external/single", kExternalTest, 1, 1, s.external_single);
  externals("external/multi", kExternalTest, 2, 3, s.external_multi);
  return s;
}

// ---------------------------------------------------------------------------
// Sample builders

namespace detail {
inline std::vector<int> sample_without_replacement(Rng& rng, int population, int count) {
  std::vector<int> idx(static_cast<std::size_t>(population));
  for (int i = 0; i < population; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(std::min(count, population)));
  return idx;
}
}  // namespace detail

inline constexpr int kPositivePerImage = 5;
inline constexpr int kJointPerImageAppendix = 10;

/// Five distinct positive templates per training image, answer "Yes".
inline std::vector<TrainSample> build_positive(const Scenario& s, const TemplatePool& pool, std::uint64_t seed) {
  require(!pool.positive.empty(), ErrorKind::Input, "empty positive template pool");
  Rng rng(seed);
  std::vector<TrainSample> out;
  for (int j = 0; j < s.m(); ++j) {
    const auto& c = s.concepts[static_cast<std::size_t>(j)];
    for (const auto& img : c.train_images)
      for (int t : detail::sample_without_replacement(rng, static_cast<int>(pool.positive.size()), kPositivePerImage))
        out.push_back({img, replace_all(pool.positive[static_cast<std::size_t>(t)], "{id}", c.identifier), "Yes",
                       SampleKind::PositiveRec, {j}});
  }
  return out;
}

/// One negative template per external image (at most 100), answer "No".
inline std::vector<TrainSample> build_random_negatives(const Scenario& s, std::span<const std::string> external,
                                                       const TemplatePool& pool, std::uint64_t seed) {
  require(!external.empty(), ErrorKind::Input, "random negatives need at least one external image");
  require(!pool.negative.empty(), ErrorKind::Input, "empty negative template pool");
  Rng rng(seed);
  std::vector<TrainSample> out;
  const std::size_t count = std::min<std::size_t>(kExternalTrain, external.size());
  for (std::size_t i = 0; i < count; ++i) {
    const int j = uniform_int(rng, 0, s.m() - 1);
    const int t = uniform_int(rng, 0, static_cast<int>(pool.negative.size()) - 1);
    out.push_back({external[i],
                   replace_all(pool.negative[static_cast<std::size_t>(t)], "{id}",
                               s.concepts[static_cast<std::size_t>(j)].identifier),
                   "No", SampleKind::RandomRec, {j}});
  }
  return out;
}

/// For every ordered pair (a, b), a != b: concept a's images asked about b.
inline std::vector<TrainSample> build_joint_negatives(const Scenario& s, const TemplatePool& pool, std::uint64_t seed,
                                                      bool appendix_mode = false) {
  Rng rng(seed);
  std::vector<TrainSample> out;
  const int per_image = appendix_mode ? kJointPerImageAppendix : 1;
  for (int a = 0; a < s.m(); ++a)
    for (int b = 0; b < s.m(); ++b) {
      if (a == b) continue;
      for (const auto& img : s.concepts[static_cast<std::size_t>(a)].train_images)
        for (int q = 0; q < per_image; ++q) {
          const int t = uniform_int(rng, 0, static_cast<int>(pool.negative.size()) - 1);
          out.push_back({img,
                         replace_all(pool.negative[static_cast<std::size_t>(t)], "{id}",
                                     s.concepts[static_cast<std::size_t>(b)].identifier),
                         "No", SampleKind::JointRec, {b}});
        }
    }
  return out;
}

/// Every conversation template on every training image of every concept.
inline std::vector<TrainSample> build_conversation(const Scenario& s, const TemplatePool& pool) {
  std::vector<TrainSample> out;
  for (int j = 0; j < s.m(); ++j) {
    const auto& c = s.concepts[static_cast<std::size_t>(j)];
    require(c.train_at.size() == c.train_images.size(), ErrorKind::Input,
            "concept '" + c.id + "' lacks placement metadata");
    for (std::size_t i = 0; i < c.train_images.size(); ++i) {
      const Attributes attr = s.attributes(j, c.train_at[i]);
      for (const auto& t : pool.conversation)
        out.push_back({c.train_images[i], render(t.question, c.identifier, attr), render(t.answer, c.identifier, attr),
                       SampleKind::Conversation, {j}});
    }
  }
  return out;
}

/// The full per-epoch training set in a fixed order.
inline std::vector<TrainSample> build_training_set(const Scenario& s, std::uint64_t seed,
                                                   const TemplatePool& pool = TemplatePool::standard()) {
  std::vector<TrainSample> all = build_positive(s, pool, seed);
  for (auto&& part : {build_random_negatives(s, s.external_train, pool, seed + 1),
                      build_joint_negatives(s, pool, seed + 2), build_conversation(s, pool)})
    all.insert(all.end(), part.begin(), part.end());
  return all;
}

/// Per-concept steps per epoch with the dense joint-negative mode: 5 positives and
/// 10 conversations per image, 100 random negatives, and 10 joint negatives per
/// image for each other concept.
inline long long appendix_steps_per_concept(long long concepts, long long images_per_concept) {
  return kPositivePerImage * images_per_concept + kExternalTrain + 10 * images_per_concept +
         kJointPerImageAppendix * images_per_concept * (concepts - 1);
}

// ---------------------------------------------------------------------------
// Evaluation QA items

struct QAItem {
  std::optional<std::string> image;
  std::string question;
  std::string answer;
  std::vector<std::string> options;
  int correct = 0;
  std::vector<int> concepts;
  bool multi = false;
};

namespace detail {

inline std::vector<std::string> shuffled_options(Rng& rng, std::string correct, std::vector<std::string> wrong,
                                                 int& correct_index) {
  std::vector<std::string> opts{std::move(correct)};
  for (auto& w : wrong) opts.push_back(std::move(w));
  std::vector<int> order{0, 1, 2};
  order.resize(opts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.push_back(opts[static_cast<std::size_t>(order[i])]);
    if (order[i] == 0) correct_index = static_cast<int>(i);
  }
  return out;
}

// Two wrong answers by swapping in other attribute values.
inline std::vector<std::string> wrong_answers(const ConversationTemplate& t, const std::string& id, const Attributes& a,
                                              Rng& rng) {
  static const std::array<const char*, 6> colors = {"red", "blue", "green", "yellow", "purple", "orange"};
  static const std::array<const char*, 4> shapes = {"circle", "square", "triangle", "diamond"};
  static const std::array<HorizontalThird, 3> sides = {HorizontalThird::Left, HorizontalThird::Middle,
                                                       HorizontalThird::Right};
  const std::string right = render(t.answer, id, a);
  std::vector<std::string> out;
  for (int attempt = 0; attempt < 100 && out.size() < 2; ++attempt) {
    Attributes w = a;
    w.color = colors[static_cast<std::size_t>(uniform_int(rng, 0, colors.size() - 1))];
    w.shape = shapes[static_cast<std::size_t>(uniform_int(rng, 0, shapes.size() - 1))];
    if (a.side) w.side = sides[static_cast<std::size_t>(uniform_int(rng, 0, 2))];
    const std::string cand = render(t.answer, id, w);
    if (cand != right && std::find(out.begin(), out.end(), cand) == out.end()) out.push_back(cand);
  }
  return out;
}

inline QAItem describe_item(const Scenario& s, std::optional<std::string> image, const std::vector<int>& subset,
                            const std::vector<std::optional<Placement>>& at, Rng& rng, bool multi) {
  const ConversationTemplate t{"Describe {id}.", "{id} is a {color} {shape}."};
  std::vector<std::string> ids, right, wrong1, wrong2;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const int j = subset[i];
    const std::string& id = s.concepts[static_cast<std::size_t>(j)].identifier;
    const Attributes a = s.attributes(j, at[i]);
    ids.push_back(id);
    right.push_back(render(t.answer, id, a));
    auto w = wrong_answers(t, id, a, rng);
    wrong1.push_back(w.at(0).substr(0, w.at(0).size() - 1));
    wrong2.push_back(w.at(1).substr(0, w.at(1).size() - 1));
    right.back().pop_back();
  }
  QAItem item;
  item.image = std::move(image);
  item.question = "Describe " + join(ids, " and ") + ".";
  item.answer = join(right, " and ") + ".";
  item.options = shuffled_options(rng, item.answer, {join(wrong1, " and ") + ".", join(wrong2, " and ") + "."},
                                  item.correct);
  item.concepts = subset;
  item.multi = multi;
  return item;
}

inline QAItem template_item(const Scenario& s, std::optional<std::string> image, int j, std::optional<Placement> at,
                            int template_index, Rng& rng, bool multi) {
  const auto& t = TemplatePool::standard().conversation[static_cast<std::size_t>(template_index)];
  const std::string& id = s.concepts[static_cast<std::size_t>(j)].identifier;
  const Attributes a = s.attributes(j, at);
  QAItem item;
  item.image = std::move(image);
  item.question = render(t.question, id, a);
  item.answer = render(t.answer, id, a);
  item.options = shuffled_options(rng, item.answer, wrong_answers(t, id, a, rng), item.correct);
  item.concepts = {j};
  item.multi = multi;
  return item;
}

}  // namespace detail

/// 5n single-image items plus one item per non-empty concept subset on each
/// multi-concept image: 5(n + 2^n - 1) in total.
inline std::vector<QAItem> compose_visual_qa(const Scenario& s, std::uint64_t seed) {
  require(static_cast<int>(s.test_single.size()) == kTestImagesPerConcept * s.m() &&
              static_cast<int>(s.test_multi.size()) == kTestMultiImages,
          ErrorKind::Input, "scenario lacks the standard test images");
  Rng rng(seed);
  std::vector<QAItem> out;
  int rot = 0;
  for (const auto& t : s.test_single) out.push_back(detail::template_item(s, t.path, t.concepts[0], t.at[0], rot++ % 10, rng, false));
  for (const auto& t : s.test_multi)
    for (unsigned mask = 1; mask < (1u << s.m()); ++mask) {
      std::vector<int> subset;
      std::vector<std::optional<Placement>> at;
      for (int j = 0; j < s.m(); ++j)
        if (mask & (1u << j)) {
          subset.push_back(j);
          at.push_back(t.at[static_cast<std::size_t>(j)]);
        }
      if (subset.size() == 1)
        out.push_back(detail::template_item(s, t.path, subset[0], at[0], rot++ % 10, rng, true));
      else
        out.push_back(detail::describe_item(s, t.path, subset, at, rng, true));
    }
  return out;
}

/// 5 single-concept questions per concept and 5 about all concepts, no image.
inline std::vector<QAItem> compose_text_qa(const Scenario& s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<QAItem> out;
  for (int j = 0; j < s.m(); ++j)
    for (int t : kTextOnlyTemplates) out.push_back(detail::template_item(s, std::nullopt, j, std::nullopt, t, rng, false));
  std::vector<int> all;
  for (int j = 0; j < s.m(); ++j) all.push_back(j);
  for (int i = 0; i < 5; ++i)
    out.push_back(detail::describe_item(s, std::nullopt, all, std::vector<std::optional<Placement>>(all.size()), rng, true));
  return out;
}

// ---------------------------------------------------------------------------
// JSON and directory I/O

inline json to_json(const Placement& p) { return {{"cx", p.cx}, {"cy", p.cy}, {"r", p.r}}; }
inline Placement placement_from(const json& j) { return {j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("r").get<double>()}; }

inline json to_json(const TrainSample& t) {
  json j;
  j["image"] = t.image ? json(*t.image) : json(nullptr);
  j["question"] = t.question;
  j["answer"] = t.answer;
  j["kind"] = kind_name(t.kind);
  j["concepts"] = t.concepts;
  return j;
}

inline TrainSample sample_from(const json& j) {
  TrainSample t;
  if (!j.at("image").is_null()) t.image = j.at("image").get<std::string>();
  t.question = j.at("question").get<std::string>();
  t.answer = j.at("answer").get<std::string>();
  t.kind = kind_from_name(j.at("kind").get<std::string>());
  t.concepts = j.at("concepts").get<std::vector<int>>();
  return t;
}

inline json to_json(const QAItem& q) {
  json j;
  j["image"] = q.image ? json(*q.image) : json(nullptr);
  j["question"] = q.question;
  j["answer"] = q.answer;
  j["options"] = q.options;
  j["correct"] = q.correct;
  j["concepts"] = q.concepts;
  j["multi"] = q.multi;
  return j;
}

inline QAItem qa_from(const json& j) {
  QAItem q;
  if (!j.at("image").is_null()) q.image = j.at("image").get<std::string>();
  q.question = j.at("question").get<std::string>();
  q.answer = j.at("answer").get<std::string>();
  q.options = j.at("options").get<std::vector<std::string>>();
  q.correct = j.at("correct").get<int>();
  q.concepts = j.at("concepts").get<std::vector<int>>();
  q.multi = j.at("multi").get<bool>();
  require(q.correct >= 0 && q.correct < static_cast<int>(q.options.size()), ErrorKind::Validation,
          "QA item has an invalid correct option");
  return q;
}

inline json scenario_meta(const Scenario& s) {
  json j;
  j["format"] = "mcvlm-scenario";
  j["version"] = 1;
  j["id"] = s.id;
  j["seed"] = s.seed;
  j["images_per_concept"] = s.n_images;
  j["concepts"] = json::array();
  for (const auto& c : s.concepts) {
    json cj;
    cj["id"] = c.id;
    cj["identifier"] = c.identifier;
    cj["color"] = c.look.color_name;
    cj["rgb"] = {c.look.color.r, c.look.color.g, c.look.color.b};
    cj["shape"] = shape_name(c.look.shape);
    cj["train"] = json::array();
    for (std::size_t i = 0; i < c.train_images.size(); ++i)
      cj["train"].push_back({{"image", c.train_images[i]}, {"mask", c.train_masks[i]}, {"at", to_json(c.train_at[i])}});
    j["concepts"].push_back(cj);
  }
  auto tests = [](const std::vector<TestImage>& v) {
    json a = json::array();
    for (const auto& t : v) {
      json objs = json::array();
      for (std::size_t i = 0; i < t.concepts.size(); ++i)
        objs.push_back({{"concept", t.concepts[i]},
                        {"at", to_json(t.at[i])},
                        {"third", choice_label(third_of(t.at[i].cx, kSceneSize))}});
      a.push_back({{"image", t.path}, {"objects", objs}});
    }
    return a;
  };
  j["test"] = {{"single", tests(s.test_single)}, {"multi", tests(s.test_multi)}};
  j["external"] = {{"train", s.external_train}, {"single", s.external_single}, {"multi", s.external_multi}};
  return j;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << j.dump(2, ' ', false, json::error_handler_t::replace) << "\n";
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, "malformed JSON in '" + path.string() + "': " + e.what());
  }
}

/// Writes images, masks, meta.json and the qa/ files under `dir`.
inline void save_scenario(const std::filesystem::path& dir, const Scenario& s, std::uint64_t qa_seed) {
  for (const auto& [rel, img] : s.images) {
    std::filesystem::create_directories((dir / rel).parent_path());
    write_png(dir / rel, img);
  }
  for (const auto& [rel, mask] : s.masks) {
    std::filesystem::create_directories((dir / rel).parent_path());
    write_mask(dir / rel, mask);
  }
  write_json(dir / "meta.json", scenario_meta(s));
  json train = json::array();
  for (const auto& t : build_training_set(s, qa_seed)) train.push_back(to_json(t));
  write_json(dir / "qa" / "train.json", train);
  json vqa = json::array(), text = json::array();
  for (const auto& q : compose_visual_qa(s, qa_seed)) vqa.push_back(to_json(q));
  for (const auto& q : compose_text_qa(s, qa_seed)) text.push_back(to_json(q));
  write_json(dir / "qa" / "vqa.json", vqa);
  write_json(dir / "qa" / "text_qa.json", text);
}

inline Scenario load_scenario(const std::filesystem::path& dir) {
  const json j = read_json(dir / "meta.json");
  require(j.value("format", "") == "mcvlm-scenario", ErrorKind::Validation,
          "'" + (dir / "meta.json").string() + "' is not a scenario manifest");
  Scenario s;
  try {
    s.id = j.at("id").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.n_images = j.at("images_per_concept").get<int>();
    for (const auto& cj : j.at("concepts")) {
      ConceptRecord c;
      c.id = cj.at("id").get<std::string>();
      c.identifier = cj.at("identifier").get<std::string>();
      c.look.color_name = cj.at("color").get<std::string>();
      const auto rgb = cj.at("rgb").get<std::vector<int>>();
      require(rgb.size() == 3, ErrorKind::Validation, "rgb needs three channels");
      c.look.color = {static_cast<std::uint8_t>(rgb[0]), static_cast<std::uint8_t>(rgb[1]),
                      static_cast<std::uint8_t>(rgb[2])};
      c.look.shape = shape_from_name(cj.at("shape").get<std::string>());
      for (const auto& t : cj.at("train")) {
        c.train_images.push_back(t.at("image").get<std::string>());
        c.train_masks.push_back(t.at("mask").get<std::string>());
        c.train_at.push_back(placement_from(t.at("at")));
      }
      s.concepts.push_back(std::move(c));
    }
    auto tests = [](const json& a) {
      std::vector<TestImage> v;
      for (const auto& t : a) {
        TestImage ti;
        ti.path = t.at("image").get<std::string>();
        for (const auto& o : t.at("objects")) {
          ti.concepts.push_back(o.at("concept").get<int>());
          ti.at.push_back(placement_from(o.at("at")));
        }
        v.push_back(std::move(ti));
      }
      return v;
    };
    s.test_single = tests(j.at("test").at("single"));
    s.test_multi = tests(j.at("test").at("multi"));
    s.external_train = j.at("external").at("train").get<std::vector<std::string>>();
    s.external_single = j.at("external").at("single").get<std::vector<std::string>>();
    s.external_multi = j.at("external").at("multi").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, "scenario manifest: " + std::string(e.what()));
  }
  require(s.m() >= 1, ErrorKind::Validation, "scenario has no concepts");
  auto load = [&](const std::string& rel) { s.images[rel] = read_image(dir / rel); };
  for (const auto& c : s.concepts) {
    for (const auto& p : c.train_images) load(p);
    for (const auto& p : c.train_masks) s.masks[p] = read_mask(dir / p);
  }
  for (const auto* v : {&s.test_single, &s.test_multi})
    for (const auto& t : *v) load(t.path);
  for (const auto* v : {&s.external_train, &s.external_single, &s.external_multi})
    for (const auto& p : *v) load(p);
  return s;
}

inline std::vector<TrainSample> load_training_set(const std::filesystem::path& dir) {
  std::vector<TrainSample> out;
  for (const auto& j : read_json(dir / "qa" / "train.json")) out.push_back(sample_from(j));
  return out;
}

inline std::vector<QAItem> load_qa(const std::filesystem::path& file) {
  std::vector<QAItem> out;
  for (const auto& j : read_json(file)) out.push_back(qa_from(j));
  return out;
}

}  // namespace mcvlm
