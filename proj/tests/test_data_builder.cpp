#include <gtest/gtest.h>

#include <set>

#include "mcvlm/data.hpp"
#include "support.hpp"

using namespace mcvlm;

namespace {

const TemplatePool& pool() { return TemplatePool::standard(); }

int count_substr(const std::string& s, const std::string& needle) {
  int n = 0;
  for (std::size_t p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

// Identifiers "<sks_N>" appearing in a string.
std::set<std::string> identifiers_in(const std::string& s) {
  std::set<std::string> out;
  for (std::size_t p = s.find("<sks_"); p != std::string::npos; p = s.find("<sks_", p + 1))
    out.insert(s.substr(p, s.find('>', p) - p + 1));
  return out;
}

}  // namespace

TEST(SystemPrompt, SingleConceptLayout) {
  const Scenario s = generate_synthetic_scenario(1, 1, 1);
  const Theta th = mcvlm::testing::tiny_theta(1, 2, 4);
  const Sequence seq = system_prompt(s, th);
  // <sks_1> ' ' 'i' 's' ' ' <t1> <t2> '.'
  ASSERT_EQ(seq.size(), 8u);
  EXPECT_EQ(seq.items[0].slot, Slot::Identifier);
  EXPECT_EQ(seq.items[0].index, 0);
  const std::string is = " is ";
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(seq.items[1 + static_cast<std::size_t>(i)].slot, Slot::Token);
    EXPECT_EQ(seq.items[1 + static_cast<std::size_t>(i)].index, is[static_cast<std::size_t>(i)]);
  }
  EXPECT_EQ(seq.items[5].slot, Slot::Soft);
  EXPECT_EQ(seq.items[5].sub, 0);
  EXPECT_EQ(seq.items[6].slot, Slot::Soft);
  EXPECT_EQ(seq.items[6].sub, 1);
  EXPECT_EQ(seq.items[7].index, '.');
}

TEST(SystemPrompt, ClausesInAscendingOrderWithAllConceptPositions) {
  for (int m : {2, 3, 4}) {
    const Scenario s = generate_synthetic_scenario(m, 1, 2);
    const int k = 3;
    const Sequence seq = system_prompt(s, mcvlm::testing::tiny_theta(m, k, 4));
    int last_concept = -1, concept_positions = 0;
    for (const Element& e : seq.items) {
      if (e.slot == Slot::Identifier || e.slot == Slot::Soft) {
        EXPECT_GE(e.index, last_concept);
        last_concept = e.index;
        ++concept_positions;
      }
    }
    EXPECT_EQ(concept_positions, m * (k + 1));
    EXPECT_EQ(last_concept, m - 1);
  }
}

TEST(SystemPrompt, MissingBlockIsAnInputError) {
  const Scenario s = generate_synthetic_scenario(3, 1, 3);
  try {
    system_prompt(s, mcvlm::testing::tiny_theta(2, 2, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
    EXPECT_NE(std::string(e.what()).find("c3"), std::string::npos);
  }
}

TEST(Positive, FivePerImage) {
  const Scenario s = generate_synthetic_scenario(2, 10, 4);
  const auto pos = build_positive(s, pool(), 1);
  EXPECT_EQ(pos.size(), 100u);
  EXPECT_EQ(build_positive(generate_synthetic_scenario(1, 1, 5), pool(), 1).size(), 5u);
  for (const auto& t : pos) {
    EXPECT_EQ(t.answer, "Yes");
    EXPECT_EQ(t.kind, SampleKind::PositiveRec);
    const std::string& id = s.concepts[static_cast<std::size_t>(t.concepts.at(0))].identifier;
    EXPECT_EQ(identifiers_in(t.question), std::set<std::string>{id});
    // the image really belongs to that concept
    const auto& imgs = s.concepts[static_cast<std::size_t>(t.concepts[0])].train_images;
    EXPECT_NE(std::find(imgs.begin(), imgs.end(), *t.image), imgs.end());
  }
}

TEST(Positive, TemplatesDistinctWithinImage) {
  const Scenario s = generate_synthetic_scenario(1, 4, 6);
  const auto pos = build_positive(s, pool(), 2);
  for (std::size_t i = 0; i < pos.size(); i += 5) {
    std::set<std::string> qs;
    for (std::size_t j = i; j < i + 5; ++j) qs.insert(pos[j].question);
    EXPECT_EQ(qs.size(), 5u);
  }
}

TEST(RandomNegatives, CappedAtAvailability) {
  const Scenario s = generate_synthetic_scenario(2, 2, 7);
  EXPECT_EQ(build_random_negatives(s, s.external_train, pool(), 1).size(), 100u);
  const std::vector<std::string> seven(s.external_train.begin(), s.external_train.begin() + 7);
  const auto neg = build_random_negatives(s, seven, pool(), 1);
  ASSERT_EQ(neg.size(), 7u);
  for (const auto& t : neg) {
    EXPECT_EQ(t.answer, "No");
    EXPECT_EQ(t.kind, SampleKind::RandomRec);
  }
  try {
    build_random_negatives(s, std::vector<std::string>{}, pool(), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

TEST(JointNegatives, OrderedPairsTimesImages) {
  EXPECT_EQ(build_joint_negatives(generate_synthetic_scenario(3, 10, 8), pool(), 1).size(), 60u);
  EXPECT_EQ(build_joint_negatives(generate_synthetic_scenario(1, 10, 9), pool(), 1).size(), 0u);
  EXPECT_EQ(build_joint_negatives(generate_synthetic_scenario(2, 1, 10), pool(), 1).size(), 2u);
  EXPECT_EQ(build_joint_negatives(generate_synthetic_scenario(2, 3, 10), pool(), 1, true).size(), 60u);
}

TEST(JointNegatives, QuestionConceptAbsentFromImage) {
  const Scenario s = generate_synthetic_scenario(3, 4, 11);
  for (const auto& t : build_joint_negatives(s, pool(), 3)) {
    EXPECT_EQ(t.answer, "No");
    const int asked = t.concepts.at(0);
    const auto& own = s.concepts[static_cast<std::size_t>(asked)].train_images;
    EXPECT_EQ(std::find(own.begin(), own.end(), *t.image), own.end());
    // the pixels of the asked concept's colour are nowhere in the image
    const Rgb c = s.concepts[static_cast<std::size_t>(asked)].look.color;
    const Image& img = s.image(*t.image);
    bool seen = false;
    for (int y = 0; y < img.height && !seen; ++y)
      for (int x = 0; x < img.width && !seen; ++x) seen = img.at(x, y) == c;
    EXPECT_FALSE(seen);
  }
}

TEST(Conversation, TenKindsPerConceptFromMetadata) {
  const Scenario s = generate_synthetic_scenario(2, 3, 12);
  const auto conv = build_conversation(s, pool());
  EXPECT_EQ(conv.size(), 2u * 3u * 10u);
  std::set<std::string> kinds;
  for (const auto& t : conv) kinds.insert(t.question);
  EXPECT_EQ(kinds.size(), 20u);
  for (const auto& t : conv) {
    const int j = t.concepts.at(0);
    const auto& c = s.concepts[static_cast<std::size_t>(j)];
    const auto idx = static_cast<std::size_t>(std::find(c.train_images.begin(), c.train_images.end(), *t.image) - c.train_images.begin());
    ASSERT_LT(idx, c.train_images.size());
    // metadata lookup: colour, shape and side come from the record directly
    const double cx = c.train_at[idx].cx;
    const std::string side = cx < 64.0 / 3 ? "left" : cx < 128.0 / 3 ? "middle" : "right";
    const bool mentions = t.answer.find(c.look.color_name) != std::string::npos ||
                          t.answer.find(shape_name(c.look.shape)) != std::string::npos ||
                          t.answer.find(side) != std::string::npos;
    EXPECT_TRUE(mentions) << t.question << " -> " << t.answer;
    EXPECT_EQ(t.answer.rfind(c.identifier, 0), 0u);
    if (t.question == "What color is " + c.identifier + "?") EXPECT_EQ(t.answer, c.identifier + " is " + c.look.color_name + ".");
  }
  const auto red = std::find_if(conv.begin(), conv.end(), [](const TrainSample& t) { return t.question == "What color is <sks_1>?"; });
  ASSERT_NE(red, conv.end());
  EXPECT_NE(red->answer.find("red"), std::string::npos);
}

TEST(Conversation, MissingMetadataIsAnError) {
  Scenario s = generate_synthetic_scenario(1, 2, 13);
  s.concepts[0].train_at.clear();
  try {
    build_conversation(s, pool());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

TEST(Scenario, CountsAndIdentifiers) {
  const Scenario s = generate_synthetic_scenario(2, 10, 14);
  int images = 0;
  std::set<std::string> ids;
  for (const auto& c : s.concepts) {
    images += static_cast<int>(c.train_images.size());
    EXPECT_EQ(c.train_masks.size(), c.train_images.size());
    ids.insert(c.identifier);
  }
  EXPECT_EQ(images, 20);
  EXPECT_EQ(ids.size(), 2u);
  EXPECT_EQ(s.test_single.size(), 10u);
  EXPECT_EQ(s.test_multi.size(), 5u);
}

TEST(Scenario, MultiConceptShapesNeverOverlap) {
  for (int m : {2, 3, 4}) {
    const Scenario s = generate_synthetic_scenario(m, 1, 15 + static_cast<std::uint64_t>(m));
    for (const auto& t : s.test_multi)
      for (std::size_t a = 0; a < t.at.size(); ++a)
        for (std::size_t b = a + 1; b < t.at.size(); ++b) {
          const auto& p = t.at[a];
          const auto& q = t.at[b];
          const bool apart = p.cx + p.r < q.cx - q.r || q.cx + q.r < p.cx - p.r || p.cy + p.r < q.cy - q.r || q.cy + q.r < p.cy - p.r;
          EXPECT_TRUE(apart);
        }
  }
}

TEST(Scenario, MaskIsExactlyTheConceptColour) {
  const Scenario s = generate_synthetic_scenario(4, 3, 16);
  for (const auto& c : s.concepts)
    for (std::size_t i = 0; i < c.train_images.size(); ++i) {
      const Image& img = s.image(c.train_images[i]);
      const ConceptMask& mask = s.mask(c.train_masks[i]);
      int bad = 0;
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) bad += (img.at(x, y) == c.look.color) != mask.at(x, y);
      EXPECT_EQ(bad, 0) << c.id << " image " << i;
      EXPECT_GT(mask.count(), 0);
    }
}

TEST(Scenario, DeterministicUnderSeed) {
  const Scenario a = generate_synthetic_scenario(2, 3, 17), b = generate_synthetic_scenario(2, 3, 17);
  ASSERT_EQ(a.images.size(), b.images.size());
  for (const auto& [path, img] : a.images) EXPECT_EQ(img.pixels, b.image(path).pixels) << path;
  const auto ta = build_training_set(a, 5), tb = build_training_set(b, 5);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].question, tb[i].question);
}

TEST(Scenario, RejectsBadSizes) {
  EXPECT_THROW(generate_synthetic_scenario(5, 1, 1), Error);
  EXPECT_THROW(generate_synthetic_scenario(0, 1, 1), Error);
  EXPECT_THROW(generate_synthetic_scenario(1, 0, 1), Error);
}

TEST(TrainingSet, TotalIsSumOfKinds) {
  for (int m = 1; m <= 4; ++m) {
    const int n = 10;
    const Scenario s = generate_synthetic_scenario(m, n, 18);
    const auto all = build_training_set(s, 3);
    const std::size_t expect = static_cast<std::size_t>(5 * m * n + 100 + m * (m - 1) * n + 10 * m * n);
    EXPECT_EQ(all.size(), expect) << m;
    for (const auto& t : all)
      if (t.kind != SampleKind::Conversation) EXPECT_TRUE(t.answer == "Yes" || t.answer == "No");
  }
}

TEST(TrainingSet, StepFormulaDecomposition) {
  for (long long m = 1; m <= 6; ++m) EXPECT_EQ(appendix_steps_per_concept(m, 10), 250 + 100 * (m - 1));
  // Per-concept composition with the reference accounting, built from samples.
  for (int m = 1; m <= 3; ++m) {
    const Scenario s = generate_synthetic_scenario(m, 10, 19);
    const long long total = static_cast<long long>(build_positive(s, pool(), 1).size()) + 100LL * m +
                            static_cast<long long>(build_joint_negatives(s, pool(), 1, true).size()) +
                            static_cast<long long>(build_conversation(s, pool()).size());
    EXPECT_EQ(total, m * appendix_steps_per_concept(m, 10));
  }
}

TEST(QA, VisualAndTextCounts) {
  for (int m = 1; m <= 4; ++m) {
    const Scenario s = generate_synthetic_scenario(m, 1, 20);
    EXPECT_EQ(static_cast<long long>(compose_visual_qa(s, 1).size()), 5LL * (m + (1LL << m) - 1)) << m;
    EXPECT_EQ(static_cast<long long>(compose_text_qa(s, 1).size()), 5LL * m + 5) << m;
  }
}

TEST(QA, CorrectOptionIsTheAnswer) {
  const Scenario s = generate_synthetic_scenario(3, 1, 21);
  for (const auto& q : compose_visual_qa(s, 2)) {
    ASSERT_GE(q.options.size(), 2u);
    EXPECT_EQ(q.options[static_cast<std::size_t>(q.correct)], q.answer);
    EXPECT_EQ(std::set<std::string>(q.options.begin(), q.options.end()).size(), q.options.size());
    for (int j : q.concepts) EXPECT_GE(count_substr(q.question + q.answer, s.concepts[static_cast<std::size_t>(j)].identifier), 1);
  }
}
