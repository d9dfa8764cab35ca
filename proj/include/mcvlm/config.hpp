// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcvlm/archive.hpp"
#include "mcvlm/data.hpp"
#include "mcvlm/errors.hpp"
#include "mcvlm/grounding.hpp"
#include "mcvlm/trainer.hpp"

namespace mcvlm {

struct RunConfig {
  std::filesystem::path scenario_dir = "scenario";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path report_dir = "reports";
  std::filesystem::path base_model = "base.mcvlm";
  TrainConfig train;
  GroundingConfig grounding;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::uint64_t eval_seed = 2024;

  void validate() const {
    train.validate();
    grounding.validate();
    require(!seeds.empty(), ErrorKind::Validation, "seed list must not be empty");
  }
};

inline json to_json(const RunConfig& c) {
  return {{"paths",
           {{"scenario", c.scenario_dir.string()},
            {"checkpoints", c.checkpoint_dir.string()},
            {"reports", c.report_dir.string()},
            {"base_model", c.base_model.string()}}},
          {"train", to_json(c.train)},
          {"grounding", {{"tau", c.grounding.tau}, {"gamma", c.grounding.gamma}}},
          {"seeds", c.seeds},
          {"eval_seed", c.eval_seed}};
}

/// Relative paths resolve against the config file's directory.
inline RunConfig run_config_from(const json& j, const std::filesystem::path& base_dir = {}) {
  require(j.is_object(), ErrorKind::Validation, "config must be an object");
  RunConfig c;
  auto path = [&](const json& v) {
    std::filesystem::path p = v.get<std::string>();
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "paths") {
        require(v.is_object(), ErrorKind::Validation, "'paths' must be an object");
        for (const auto& [pk, pv] : v.items()) {
          if (pk == "scenario") c.scenario_dir = path(pv);
          else if (pk == "checkpoints") c.checkpoint_dir = path(pv);
          else if (pk == "reports") c.report_dir = path(pv);
          else if (pk == "base_model") c.base_model = path(pv);
          else fail(ErrorKind::Validation, "unknown path key '" + pk + "'");
        }
      } else if (key == "train") {
        c.train = train_config_from(v);
      } else if (key == "grounding") {
        require(v.is_object(), ErrorKind::Validation, "'grounding' must be an object");
        for (const auto& [gk, gv] : v.items()) {
          if (gk == "tau") c.grounding.tau = gv.get<double>();
          else if (gk == "gamma") c.grounding.gamma = gv.get<double>();
          else fail(ErrorKind::Validation, "unknown grounding key '" + gk + "'");
        }
      } else if (key == "seeds") {
        c.seeds = v.get<std::vector<std::uint64_t>>();
      } else if (key == "eval_seed") {
        c.eval_seed = v.get<std::uint64_t>();
      } else {
        fail(ErrorKind::Validation, "unknown config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& file) {
  return run_config_from(read_json(file), file.parent_path());
}

}  // namespace mcvlm
