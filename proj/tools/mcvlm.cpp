// SPDX-License-Identifier: Apache-2.0
// mcvlm: dataset generation, concept training, grounding and evaluation.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "mcvlm/base_build.hpp"
#include "mcvlm/config.hpp"
#include "mcvlm/data.hpp"
#include "mcvlm/eval.hpp"
#include "mcvlm/grounding.hpp"
#include "mcvlm/trainer.hpp"

namespace fs = std::filesystem;
using namespace mcvlm;

namespace {

enum Exit { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::optional<double> gamma;
  std::optional<int> k;
  std::optional<std::string> init;
  std::optional<int> epochs;
};

void add_common(CLI::App* cmd, Overrides& o, bool training) {
  cmd->add_option("--config", o.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run a single seed instead of the configured list");
  cmd->add_option("--tau", o.tau, "grounding confidence threshold");
  cmd->add_option("--gamma", o.gamma, "grounding minimum presence ratio");
  if (training) {
    cmd->add_option("--k", o.k, "soft tokens per concept")->check(CLI::PositiveNumber);
    cmd->add_option("--init", o.init, "token initialisation")->check(CLI::IsMember({"kmeans", "random"}));
    cmd->add_option("--epochs", o.epochs, "training epochs")->check(CLI::PositiveNumber);
  }
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = load_run_config(o.config);
  if (o.seed) c.seeds = {*o.seed};
  if (o.tau) c.grounding.tau = *o.tau;
  if (o.gamma) c.grounding.gamma = *o.gamma;
  if (o.k) c.train.k = *o.k;
  if (o.init) c.train.init = init_mode_from_name(*o.init);
  if (o.epochs) c.train.epochs = *o.epochs;
  c.validate();
  return c;
}

fs::path checkpoint_stem(const RunConfig& c, std::uint64_t seed) {
  return c.checkpoint_dir / ("seed_" + std::to_string(seed));
}

void write_text(const fs::path& p, const std::string& text) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) fail(ErrorKind::Io, "cannot write '" + p.string() + "'");
  out << text;
}

int cmd_build_base(const fs::path& out, const BaseBuildConfig& cfg) {
  std::clog << "building base model (" << cfg.steps << " steps)\n";
  const BaseModel m = build_base_model(cfg, &std::clog);
  save_model(out, m);
  std::clog << "wrote " << out << "\n";
  return kOk;
}

int cmd_build_dataset(const fs::path& out, int concepts, int images, std::uint64_t seed) {
  const Scenario s = generate_synthetic_scenario(concepts, images, seed, out.filename().string());
  save_scenario(out, s, seed);
  std::clog << "wrote scenario " << out << " (" << s.m() << " concepts, " << s.images.size() << " images)\n";
  return kOk;
}

int cmd_train(const RunConfig& c) {
  const BaseModel m = load_model(c.base_model);
  const Scenario s = load_scenario(c.scenario_dir);
  const auto samples = load_training_set(c.scenario_dir);
  for (std::uint64_t seed : c.seeds) {
    TrainConfig tc = c.train;
    tc.seed = seed;
    std::ostringstream history;
    const Checkpoint ck = train(m, s, samples, tc, [&](const EpochEnd& e) {
      std::clog << "seed " << seed << " epoch " << e.epoch << " mean loss " << e.mean_loss << "\n";
      history << e.epoch << " " << e.mean_loss << "\n";
    });
    save_checkpoint(checkpoint_stem(c, seed), ck);
    write_text(checkpoint_stem(c, seed).string() + ".loss.txt", history.str());
  }
  return kOk;
}

int cmd_ground(const RunConfig& c, const fs::path& image, const fs::path& out) {
  const Image img = read_image(image);  // fails before anything is written
  const BaseModel m = load_model(c.base_model);
  const Checkpoint ck = load_checkpoint(checkpoint_stem(c, c.seeds.front()));
  require(!ck.banks.empty(), ErrorKind::Validation, "checkpoint carries no feature banks");
  std::vector<std::string> ids;
  for (std::size_t j = 0; j < ck.banks.size(); ++j) ids.push_back(identifier_name(static_cast<int>(j)));
  const GroundingResult r = ground(ck.banks, ids, m.make_encoder(), img, c.grounding);
  std::ostringstream report;
  report << "concept identifier present x y max_confidence exceedance_ratio\n";
  for (std::size_t j = 0; j < r.detections.size(); ++j) {
    const auto& d = r.detections[j];
    report << d.concept_id << " " << ids[j] << " " << (d.present ? "yes" : "no") << " ";
    if (d.location)
      report << d.location->x << " " << d.location->y;
    else
      report << "- -";
    report << " " << d.max_confidence << " " << d.exceedance_ratio << "\n";
  }
  fs::create_directories(out);
  write_png(out / "annotated.png", r.annotated.image);
  write_text(out / "detections.txt", report.str());
  write_text(out / "prompt.txt", r.annotated.prompt + "\n");
  std::cout << report.str() << "prompt: " << r.annotated.prompt << "\n";
  return kOk;
}

int cmd_evaluate(const RunConfig& c) {
  const BaseModel m = load_model(c.base_model);
  const Scenario s = load_scenario(c.scenario_dir);
  EvalSuite suite = compose_suite(s, c.eval_seed);
  if (fs::exists(c.scenario_dir / "qa" / "vqa.json")) suite.visual_qa = load_qa(c.scenario_dir / "qa" / "vqa.json");
  if (fs::exists(c.scenario_dir / "qa" / "text_qa.json"))
    suite.text_qa = load_qa(c.scenario_dir / "qa" / "text_qa.json");
  check_qa_counts(s, suite.visual_qa, suite.text_qa);
  std::vector<MetricReport> reports;
  for (std::uint64_t seed : c.seeds) {
    const Checkpoint ck = load_checkpoint(checkpoint_stem(c, seed));
    const Evaluator ev(m, s, ck, c.grounding);
    std::vector<AuditLine> audit;
    MetricReport r = ev.run(suite, &audit);
    r.seeds = {seed};
    const fs::path stem = c.report_dir / ("seed_" + std::to_string(seed));
    write_json(stem.string() + ".json", to_json(r));
    std::ostringstream text, log;
    write_report_text(text, r);
    write_audit(log, audit);
    write_text(stem.string() + ".txt", text.str());
    write_text(stem.string() + ".audit.jsonl", log.str());
    reports.push_back(std::move(r));
  }
  const MetricReport summary = average_reports(reports);
  write_json(c.report_dir / "summary.json", to_json(summary));
  std::ostringstream text;
  write_report_text(text, summary);
  write_text(c.report_dir / "summary.txt", text.str());
  std::cout << text.str();
  return kOk;
}

int cmd_ablate_init(const RunConfig& c) {
  const BaseModel m = load_model(c.base_model);
  const Scenario s = load_scenario(c.scenario_dir);
  const auto samples = load_training_set(c.scenario_dir);
  json out = json::array();
  int wins = 0;
  for (std::uint64_t seed : c.seeds) {
    json row{{"seed", seed}};
    for (InitMode mode : {InitMode::KMeans, InitMode::Random}) {
      TrainConfig tc = c.train;
      tc.seed = seed;
      tc.init = mode;
      const Checkpoint ck = train(m, s, samples, tc, [&](const EpochEnd& e) {
        std::clog << "seed " << seed << " " << init_mode_name(mode) << " epoch " << e.epoch << " " << e.mean_loss
                  << "\n";
      });
      row[init_mode_name(mode)] = ck.loss_history;
    }
    const auto& km = row["kmeans"];
    const auto& rd = row["random"];
    const std::size_t e = std::min<std::size_t>(3, km.size()) - 1;
    const bool win = km[e].get<double>() <= rd[e].get<double>();
    wins += win ? 1 : 0;
    row["kmeans_not_worse_at_epoch"] = {{"epoch", e + 1}, {"value", win}};
    out.push_back(row);
  }
  write_json(c.report_dir / "ablation_init.json", out);
  std::cout << "k-means init no worse than random at epoch 3 in " << wins << " of " << c.seeds.size() << " seeds\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-concept personalization of a miniature vision-language model"};
  app.require_subcommand(1);

  fs::path base_out = "base.mcvlm";
  BaseBuildConfig bcfg;
  auto* base = app.add_subcommand("build-base", "build the frozen base model");
  base->add_option("--out", base_out, "output model file");
  base->add_option("--steps", bcfg.steps, "corpus training steps")->check(CLI::NonNegativeNumber);
  base->add_option("--seed", bcfg.seed, "build seed");

  fs::path ds_out;
  int concepts = 2, images = 10;
  std::uint64_t ds_seed = 0;
  auto* ds = app.add_subcommand("build-dataset", "generate a synthetic scenario");
  ds->add_option("--out", ds_out, "scenario directory")->required();
  ds->add_option("--concepts", concepts, "concept count")->check(CLI::Range(1, 4));
  ds->add_option("--images", images, "training images per concept")->check(CLI::PositiveNumber);
  ds->add_option("--seed", ds_seed, "generation seed");

  Overrides tr_o, gr_o, ev_o, ab_o;
  auto* tr = app.add_subcommand("train", "train concept tokens, one checkpoint per seed");
  add_common(tr, tr_o, true);
  auto* gr = app.add_subcommand("ground", "detect and mark concepts in an image");
  add_common(gr, gr_o, false);
  fs::path gr_image, gr_out = "grounding";
  gr->add_option("--image", gr_image, "input image (PNG or PPM)")->required();
  gr->add_option("--out", gr_out, "output directory");
  auto* ev = app.add_subcommand("evaluate", "score checkpoints and write reports");
  add_common(ev, ev_o, false);
  auto* ab = app.add_subcommand("ablate-init", "compare k-means and random token initialisation");
  add_common(ab, ab_o, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*base) return cmd_build_base(base_out, bcfg);
    if (*ds) return cmd_build_dataset(ds_out, concepts, images, ds_seed);
    if (*tr) return cmd_train(resolve(tr_o));
    if (*gr) return cmd_ground(resolve(gr_o), gr_image, gr_out);
    if (*ev) return cmd_evaluate(resolve(ev_o));
    if (*ab) return cmd_ablate_init(resolve(ab_o));
  } catch (const Error& e) {
    std::cerr << "mcvlm: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::Io:
      case ErrorKind::NonFinite: return kRuntime;
      default: return kValidation;
    }
  } catch (const std::exception& e) {
    std::cerr << "mcvlm: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
