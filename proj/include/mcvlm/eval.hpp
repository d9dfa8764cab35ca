// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mcvlm/data.hpp"
#include "mcvlm/grounding.hpp"
#include "mcvlm/metrics.hpp"
#include "mcvlm/model.hpp"
#include "mcvlm/trainer.hpp"

namespace mcvlm {

// ---------------------------------------------------------------------------
// Suite

struct RecognitionItem {
  std::string image;
  std::vector<int> queried;
  bool expected_yes = false;
  bool multi = false;
};

struct GroundingItem {
  std::string image;
  int concept_index = 0;
  HorizontalThird expected = HorizontalThird::Left;
  bool multi = false;
};

struct CaptionItem {
  std::string image;
  std::vector<int> required;
  bool multi = false;
};

struct EvalSuite {
  std::vector<RecognitionItem> recognition;
  std::vector<GroundingItem> grounding;
  std::vector<QAItem> visual_qa;
  std::vector<QAItem> text_qa;
  std::vector<CaptionItem> captions;
};

/// 5n^2 single-image queries, 5(n+1) multi-image queries (each concept and all
/// jointly), and 50 + 50 external negatives about a seeded concept.
inline std::vector<RecognitionItem> compose_recognition(const Scenario& s, std::uint64_t seed) {
  const int n = s.m();
  require(static_cast<int>(s.test_single.size()) == kTestImagesPerConcept * n, ErrorKind::Input,
          "recognition suite needs 5 single-concept test images per concept");
  require(static_cast<int>(s.test_multi.size()) == kTestMultiImages, ErrorKind::Input,
          "recognition suite needs 5 multi-concept test images");
  require(static_cast<int>(s.external_single.size()) >= kExternalTest &&
              static_cast<int>(s.external_multi.size()) >= kExternalTest,
          ErrorKind::Input, "recognition suite needs 50 + 50 external images");
  Rng rng(seed);
  std::vector<RecognitionItem> out;
  for (const auto& t : s.test_single)
    for (int q = 0; q < n; ++q) out.push_back({t.path, {q}, t.concepts.front() == q, false});
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) all[static_cast<std::size_t>(j)] = j;
  for (const auto& t : s.test_multi) {
    for (int q = 0; q < n; ++q) out.push_back({t.path, {q}, true, true});
    out.push_back({t.path, all, true, true});
  }
  for (int i = 0; i < kExternalTest; ++i)
    out.push_back({s.external_single[static_cast<std::size_t>(i)], {uniform_int(rng, 0, n - 1)}, false, false});
  for (int i = 0; i < kExternalTest; ++i)
    out.push_back({s.external_multi[static_cast<std::size_t>(i)], {uniform_int(rng, 0, n - 1)}, false, true});
  return out;
}

/// One item per present concept on every test image.
inline std::vector<GroundingItem> compose_grounding(const Scenario& s) {
  std::vector<GroundingItem> out;
  for (const auto* set : {&s.test_single, &s.test_multi})
    for (const auto& t : *set) {
      require(t.at.size() == t.concepts.size(), ErrorKind::Input, "test image '" + t.path + "' lacks locations");
      for (std::size_t i = 0; i < t.concepts.size(); ++i)
        out.push_back({t.path, t.concepts[i], third_of(t.at[i].cx, kSceneSize), set == &s.test_multi});
    }
  return out;
}

inline std::vector<CaptionItem> compose_captions(const Scenario& s) {
  std::vector<CaptionItem> out;
  for (const auto& t : s.test_single) out.push_back({t.path, t.concepts, false});
  for (const auto& t : s.test_multi) out.push_back({t.path, t.concepts, true});
  return out;
}

/// Checks QA lists against the composition formulas.
inline void check_qa_counts(const Scenario& s, const std::vector<QAItem>& visual, const std::vector<QAItem>& text) {
  require(static_cast<long long>(visual.size()) == visual_qa_count(s.m()), ErrorKind::Validation,
          "visual QA has " + std::to_string(visual.size()) + " items, expected " +
              std::to_string(visual_qa_count(s.m())));
  require(static_cast<long long>(text.size()) == text_qa_count(s.m()), ErrorKind::Validation,
          "text-only QA has " + std::to_string(text.size()) + " items, expected " +
              std::to_string(text_qa_count(s.m())));
}

inline EvalSuite compose_suite(const Scenario& s, std::uint64_t seed) {
  EvalSuite suite{compose_recognition(s, seed), compose_grounding(s), compose_visual_qa(s, seed),
                  compose_text_qa(s, seed), compose_captions(s)};
  check_qa_counts(s, suite.visual_qa, suite.text_qa);
  return suite;
}

// ---------------------------------------------------------------------------
// Report

struct TaskScore {
  double single = 0.0;
  double multi = 0.0;
  double weighted = 0.0;
  std::size_t n_single = 0;
  std::size_t n_multi = 0;
};

inline TaskScore make_score(double single, std::size_t n_single, double multi, std::size_t n_multi) {
  return {single, multi, weighted_score(single, n_single, multi, n_multi), n_single, n_multi};
}

struct MetricReport {
  std::map<std::string, TaskScore> tasks;
  std::vector<std::uint64_t> seeds;
};

/// Arithmetic mean of per-seed reports; counts must agree.
inline MetricReport average_reports(const std::vector<MetricReport>& reports) {
  require(!reports.empty(), ErrorKind::Input, "nothing to average");
  MetricReport out;
  for (const auto& r : reports) out.seeds.insert(out.seeds.end(), r.seeds.begin(), r.seeds.end());
  const double inv = 1.0 / static_cast<double>(reports.size());
  for (const auto& [name, first] : reports.front().tasks) {
    TaskScore t{0.0, 0.0, 0.0, first.n_single, first.n_multi};
    for (const auto& r : reports) {
      auto it = r.tasks.find(name);
      require(it != r.tasks.end() && it->second.n_single == first.n_single && it->second.n_multi == first.n_multi,
              ErrorKind::Validation, "reports disagree on task '" + name + "'");
      t.single += inv * it->second.single;
      t.multi += inv * it->second.multi;
      t.weighted += inv * it->second.weighted;
    }
    out.tasks[name] = t;
  }
  return out;
}

inline json to_json(const MetricReport& r) {
  json j;
  j["seeds"] = r.seeds;
  j["tasks"] = json::object();
  for (const auto& [name, t] : r.tasks)
    j["tasks"][name] = {{"single", t.single},     {"multi", t.multi},    {"weighted", t.weighted},
                        {"n_single", t.n_single}, {"n_multi", t.n_multi}};
  return j;
}

/// One line per suite item.
struct AuditLine {
  std::string id;
  std::string query;
  std::string reply;
  bool correct = false;
  std::string choice;  // multiple-choice pick, QA items only
};

// ---------------------------------------------------------------------------
// Running the model

inline constexpr int kMaxReplyTokens = 64;

class Evaluator {
 public:
  Evaluator(const BaseModel& m, const Scenario& s, const Checkpoint& ck, GroundingConfig gcfg = {})
      : m_(m), s_(s), ck_(ck), theta_(ck.theta()), vocab_(Vocabulary().expanded(s.m())), gcfg_(gcfg),
        cache_(project_images(m, s)) {
    require(theta_.concepts() == s.m(), ErrorKind::Input, "checkpoint does not match the scenario's concepts");
  }

  Sequence prompt(const std::optional<std::string>& image, const std::string& question,
                  const std::optional<std::string>& answer = std::nullopt) const {
    PromptParts p;
    p.image = image ? &cache_.at(*image) : nullptr;
    p.question = question;
    p.answer = answer;
    return assemble(vocab_, s_.m(), theta_.k(), p);
  }

  std::string reply(const std::optional<std::string>& image, const std::string& question,
                    int max_new = kMaxReplyTokens) const {
    return vocab_.decode(generate(m_, prompt(image, question), theta_, max_new));
  }

  /// Index of the option with the highest answer log-likelihood.
  int choose(const QAItem& q) const {
    int best = 0;
    double best_loss = 0.0;
    for (std::size_t i = 0; i < q.options.size(); ++i) {
      const double l = loss(m_, prompt(q.image, q.question, q.options[i]), theta_);
      if (i == 0 || l < best_loss) {
        best_loss = l;
        best = static_cast<int>(i);
      }
    }
    return best;
  }

  std::vector<std::string> identifiers(const std::vector<int>& idx) const {
    std::vector<std::string> out;
    for (int j : idx) out.push_back(s_.concepts[static_cast<std::size_t>(j)].identifier);
    return out;
  }

  std::vector<FeatureBank> banks() const {
    if (!ck_.banks.empty()) return ck_.banks;
    std::vector<FeatureBank> out;
    for (int j = 0; j < s_.m(); ++j) out.push_back(concept_bank(m_, s_, j, FeatureSpace::Encoder, ck_.config.n));
    return out;
  }

  TaskScore recognition(const std::vector<RecognitionItem>& items, std::vector<AuditLine>* audit) const {
    std::vector<bool> ys, ym;
    std::vector<std::string> rs, rm;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      const std::string q = recognition_query(identifiers(it.queried));
      const std::string r = reply(it.image, q, 4);
      (it.multi ? ym : ys).push_back(it.expected_yes);
      (it.multi ? rm : rs).push_back(r);
      if (audit) {
        const auto yn = parse_yes_no(r);
        const bool ok = yn && (*yn == YesNo::Yes) == it.expected_yes;
        audit->push_back({"recognition/" + std::to_string(i), it.image + " | " + q, r, ok});
      }
    }
    auto score = [](const std::vector<bool>& y, const std::vector<std::string>& r) {
      std::unique_ptr<bool[]> buf(new bool[y.size()]);
      std::copy(y.begin(), y.end(), buf.get());
      return balanced_recall(std::span<const bool>(buf.get(), y.size()), r);
    };
    return make_score(score(ys, rs), ys.size(), score(ym, rm), ym.size());
  }

  TaskScore grounding(const std::vector<GroundingItem>& items, std::vector<AuditLine>* audit) const {
    const auto bs = banks();
    const auto ids = identifiers([&] {
      std::vector<int> all;
      for (int j = 0; j < s_.m(); ++j) all.push_back(j);
      return all;
    }());
    const Encoder enc = m_.make_encoder();
    std::map<std::string, GroundingResult> results;
    double hit_s = 0, hit_m = 0;
    std::size_t n_s = 0, n_m = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      auto r = results.find(it.image);
      if (r == results.end()) r = results.emplace(it.image, ground(bs, ids, enc, s_.image(it.image), gcfg_)).first;
      const Detection& d = r->second.detections[static_cast<std::size_t>(it.concept_index)];
      std::string answer = "none";
      bool ok = false;
      if (d.present && d.location) {
        const HorizontalThird t = third_of(d.location->x, s_.image(it.image).width);
        answer = choice_label(t);
        ok = t == it.expected;
      }
      (it.multi ? hit_m : hit_s) += ok ? 1.0 : 0.0;
      ++(it.multi ? n_m : n_s);
      if (audit)
        audit->push_back({"grounding/" + std::to_string(i),
                          it.image + " | " + grounding_query(ids[static_cast<std::size_t>(it.concept_index)]), answer,
                          ok});
    }
    return make_score(n_s ? hit_s / n_s : 0.0, n_s, n_m ? hit_m / n_m : 0.0, n_m);
  }

  /// Multiple-choice accuracy and BLEU of the greedy reply.
  std::pair<TaskScore, TaskScore> qa(const std::vector<QAItem>& items, const std::string& tag,
                                     std::vector<AuditLine>* audit) const {
    double acc[2] = {0, 0}, bl[2] = {0, 0};
    std::size_t n[2] = {0, 0};
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& q = items[i];
      const int g = q.multi ? 1 : 0;
      const int pick = choose(q);
      const std::string r = reply(q.image, q.question);
      const double b = bleu(r, q.answer);
      acc[g] += pick == q.correct ? 1.0 : 0.0;
      bl[g] += b;
      ++n[g];
      if (audit)
        audit->push_back({tag + "/" + std::to_string(i), q.question, r, pick == q.correct,
                          q.options[static_cast<std::size_t>(pick)]});
    }
    auto avg = [&](const double* v, int g) { return n[g] ? v[g] / static_cast<double>(n[g]) : 0.0; };
    return {make_score(avg(acc, 0), n[0], avg(acc, 1), n[1]), make_score(avg(bl, 0), n[0], avg(bl, 1), n[1])};
  }

  TaskScore captions(const std::vector<CaptionItem>& items, std::vector<AuditLine>* audit) const {
    std::vector<int> all;
    for (int j = 0; j < s_.m(); ++j) all.push_back(j);
    const std::string q = caption_query(identifiers(all));
    std::vector<std::string> cs, cm;
    std::vector<std::vector<std::string>> rs, rm;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      const std::string c = reply(it.image, q);
      const auto req = identifiers(it.required);
      (it.multi ? cm : cs).push_back(c);
      (it.multi ? rm : rs).push_back(req);
      if (audit) {
        const std::vector<std::string> one{c};
        const std::vector<std::vector<std::string>> oreq{req};
        audit->push_back({"caption/" + std::to_string(i), it.image + " | " + q, c, captioning_recall(one, oreq) == 1.0});
      }
    }
    auto score = [](const std::vector<std::string>& c, const std::vector<std::vector<std::string>>& r) {
      return c.empty() ? 0.0 : captioning_recall(c, r);
    };
    return make_score(score(cs, rs), cs.size(), score(cm, rm), cm.size());
  }

  MetricReport run(const EvalSuite& suite, std::vector<AuditLine>* audit = nullptr) const {
    MetricReport r;
    r.seeds = {ck_.config.seed};
    r.tasks["recognition"] = recognition(suite.recognition, audit);
    r.tasks["grounding"] = grounding(suite.grounding, audit);
    const auto [vc, vb] = qa(suite.visual_qa, "vqa", audit);
    r.tasks["choice_v"] = vc;
    r.tasks["bleu_v"] = vb;
    const auto [tc, tb] = qa(suite.text_qa, "text", audit);
    r.tasks["choice_t"] = tc;
    r.tasks["bleu_t"] = tb;
    r.tasks["caption_recall"] = captions(suite.captions, audit);
    return r;
  }

 private:
  const BaseModel& m_;
  const Scenario& s_;
  const Checkpoint& ck_;
  Theta theta_;
  Vocabulary vocab_;
  GroundingConfig gcfg_;
  FeatureCache cache_;
};

inline void write_report_text(std::ostream& out, const MetricReport& r) {
  out << "seeds";
  for (auto s : r.seeds) out << " " << s;
  out << "\n";
  out << "task single multi weighted n_single n_multi\n";
  for (const auto& [name, t] : r.tasks)
    out << name << " " << t.single << " " << t.multi << " " << t.weighted << " " << t.n_single << " " << t.n_multi
        << "\n";
}

inline void write_audit(std::ostream& out, const std::vector<AuditLine>& lines) {
  for (const auto& l : lines) {
    json j = {{"id", l.id}, {"query", l.query}, {"reply", l.reply}, {"verdict", l.correct ? "correct" : "wrong"}};
    if (!l.choice.empty()) j["choice"] = l.choice;
    out << j.dump(-1, ' ', false, json::error_handler_t::replace) << "\n";
  }
}

}  // namespace mcvlm
