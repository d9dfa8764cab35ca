// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "mcvlm/archive.hpp"
#include "mcvlm/data.hpp"
#include "mcvlm/model.hpp"
#include "mcvlm/optim.hpp"
#include "mcvlm/token_init.hpp"
#include "mcvlm/vision.hpp"

namespace mcvlm {

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 15;
  int batch = 1;
  int k = 16;
  int n = 10;
  std::uint64_t seed = 0;
  InitMode init = InitMode::KMeans;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    require(lr > 0.0, ErrorKind::Validation, "learning rate must be > 0");
    require(epochs >= 1, ErrorKind::Validation, "epochs must be >= 1");
    require(batch >= 1, ErrorKind::Validation, "batch size must be >= 1");
    require(k >= 1, ErrorKind::Validation, "k must be >= 1");
    require(n >= 1, ErrorKind::Validation, "n must be >= 1");
    optimizer().validate();
  }
  AdamWConfig optimizer() const { return {lr, beta1, beta2, eps, weight_decay}; }
};

inline json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},       {"epochs", c.epochs}, {"batch", c.batch},
          {"k", c.k},         {"n", c.n},           {"seed", c.seed},
          {"init", init_mode_name(c.init)},         {"beta1", c.beta1},
          {"beta2", c.beta2}, {"eps", c.eps},       {"weight_decay", c.weight_decay}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from(const json& j, TrainConfig c = {}) {
  require(j.is_object(), ErrorKind::Validation, "train config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch") c.batch = v.get<int>();
      else if (key == "k") c.k = v.get<int>();
      else if (key == "n") c.n = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "init") c.init = init_mode_from_name(v.get<std::string>());
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "eps") c.eps = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else fail(ErrorKind::Validation, "unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, std::string("train config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Validation) throw;
    fail(ErrorKind::Validation, e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Inputs

/// Projected image features, computed once per image path.
struct FeatureCache {
  std::map<std::string, Matrix> projected;

  const Matrix& at(const std::string& path) const {
    auto it = projected.find(path);
    require(it != projected.end(), ErrorKind::Input, "no features cached for '" + path + "'");
    return it->second;
  }
};

inline FeatureCache project_images(const BaseModel& m, const Scenario& s) {
  const Encoder enc = m.make_encoder();
  const Projector proj = m.make_projector();
  FeatureCache cache;
  for (const auto& [path, img] : s.images) cache.projected[path] = proj.project(enc.encode(img)).features;
  return cache;
}

inline Sequence sample_sequence(const Vocabulary& vocab, int concepts, int k, const TrainSample& t,
                                const FeatureCache& cache) {
  PromptParts p;
  p.image = t.image ? &cache.at(*t.image) : nullptr;
  p.question = t.question;
  p.answer = t.answer;
  return assemble(vocab, concepts, k, p);
}

/// Mask-filtered training features of one concept, in encoder or projector space.
inline FeatureBank concept_bank(const BaseModel& m, const Scenario& s, int j, FeatureSpace space, int max_images = -1) {
  const auto& c = s.concepts[static_cast<std::size_t>(j)];
  const std::size_t n = max_images < 0 ? c.train_images.size()
                                        : std::min(c.train_images.size(), static_cast<std::size_t>(max_images));
  std::vector<Image> imgs;
  std::vector<ConceptMask> masks;
  for (std::size_t i = 0; i < n; ++i) {
    imgs.push_back(s.image(c.train_images[i]));
    masks.push_back(s.mask(c.train_masks[i]));
  }
  return build_bank(m.make_encoder(), m.make_projector(), imgs, masks, space, c.id);
}

/// k-means blocks from projected features, or seeded Gaussian blocks; both
/// aligned to the frozen table's mean norm. Columns start at the identifier rows.
inline Theta init_theta(const BaseModel& m, const Scenario& s, const TrainConfig& cfg) {
  const double ko = m.reference_norm();
  std::vector<ConceptTokenBlock> blocks;
  for (int j = 0; j < s.m(); ++j) {
    const std::uint64_t seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(j);
    const auto& id = s.concepts[static_cast<std::size_t>(j)].id;
    if (cfg.init == InitMode::KMeans)
      blocks.push_back(init_block(concept_bank(m, s, j, FeatureSpace::Projector, cfg.n), cfg.k, seed, ko));
    else
      blocks.push_back(random_block(id, cfg.k, m.cfg.dim, seed, ko));
  }
  return make_theta(std::move(blocks));
}

// ---------------------------------------------------------------------------
// Checkpoint

struct Checkpoint {
  std::vector<ConceptTokenBlock> blocks;
  Matrix columns;
  TrainConfig config;
  int epoch = 0;
  std::vector<double> loss_history;  // mean loss per epoch
  std::vector<FeatureBank> banks;    // encoder-space banks for grounding

  Theta theta() const {
    Theta t;
    t.blocks = blocks;
    t.columns = columns;
    return t;
  }
};

inline constexpr const char* kCheckpointFormat = "mcvlm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ck) {
  ArrayArchive ar;
  ar.meta["config"] = to_json(ck.config);
  ar.meta["epoch"] = ck.epoch;
  ar.meta["loss_history"] = ck.loss_history;
  ar.meta["concepts"] = json::array();
  for (const auto& b : ck.blocks) {
    ar.meta["concepts"].push_back(b.concept_id);
    ar.arrays.push_back({"block." + b.concept_id, b.rows});
  }
  ar.arrays.push_back({"columns", ck.columns});
  for (const auto& b : ck.banks) ar.arrays.push_back({"bank." + b.concept_id, b.vectors});
  write_archive(stem, ar, kCheckpointFormat, kCheckpointVersion);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  const ArrayArchive ar = read_archive(stem, kCheckpointFormat, kCheckpointVersion);
  Checkpoint ck;
  try {
    ck.config = train_config_from(ar.meta.at("config"));
    ck.epoch = ar.meta.at("epoch").get<int>();
    ck.loss_history = ar.meta.at("loss_history").get<std::vector<double>>();
    for (const auto& id : ar.meta.at("concepts")) {
      const std::string cid = id.get<std::string>();
      ck.blocks.push_back({cid, ar.get("block." + cid)});
      if (ar.has("bank." + cid)) ck.banks.push_back({cid, FeatureSpace::Encoder, ar.get("bank." + cid)});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, "checkpoint manifest: " + std::string(e.what()));
  }
  ck.columns = ar.get("columns");
  require(!ck.blocks.empty(), ErrorKind::Validation, "checkpoint holds no concepts");
  require(ck.columns.cols() == static_cast<Eigen::Index>(ck.blocks.size()), ErrorKind::Validation,
          "checkpoint columns do not match its concept count");
  return ck;
}

// ---------------------------------------------------------------------------
// Training

struct EpochEnd {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  const Theta* theta = nullptr;
  long long steps = 0;  // optimizer updates so far
};

/// Per-epoch shuffled passes with AdamW on theta only. Returns the final state
/// rounded to float32, which is exactly what a saved checkpoint holds.
template <class OnEpoch>
Checkpoint train(const BaseModel& m, const Scenario& s, const std::vector<TrainSample>& samples,
                 const TrainConfig& cfg, OnEpoch&& on_epoch, Theta theta) {
  cfg.validate();
  require(!samples.empty(), ErrorKind::Input, "no training samples");
  require(theta.concepts() == s.m(), ErrorKind::Input, "theta does not match the scenario's concepts");
  const Vocabulary vocab = Vocabulary().expanded(s.m());
  const FeatureCache cache = project_images(m, s);
  std::vector<Sequence> seqs;
  seqs.reserve(samples.size());
  for (const auto& t : samples) seqs.push_back(sample_sequence(vocab, s.m(), theta.k(), t, cache));

  Rng rng(cfg.seed ^ 0x5151'7e11ULL);
  AdamWState state;
  const AdamWConfig opt = cfg.optimizer();
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  Checkpoint ck;
  ck.config = cfg;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      ThetaGrad acc = ThetaGrad::zeros_like(theta);
      for (std::size_t i = start; i < end; ++i) {
        const LossGrad lg = loss_and_grad(m, seqs[order[i]], theta);
        if (!std::isfinite(lg.loss)) {
          const auto& t = samples[order[i]];
          fail(ErrorKind::NonFinite, "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                         std::to_string(start / static_cast<std::size_t>(cfg.batch) + 1) +
                                         " (kind " + kind_name(t.kind) + ", question \"" + t.question + "\")");
        }
        total += lg.loss;
        for (std::size_t b = 0; b < acc.blocks.size(); ++b) acc.blocks[b] += lg.theta.blocks[b];
        acc.columns += lg.theta.columns;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& b : acc.blocks) b *= inv;
      acc.columns *= inv;
      adamw_step(theta.params(), acc.params(), state, opt);
    }
    ck.loss_history.push_back(total / static_cast<double>(seqs.size()));
    ck.epoch = epoch;
    on_epoch(EpochEnd{epoch, ck.loss_history.back(), &theta, state.t});
  }
  ck.blocks = theta.blocks;
  for (auto& b : ck.blocks) b.rows = to_f32(b.rows);
  ck.columns = to_f32(theta.columns);
  for (int j = 0; j < s.m(); ++j) {
    FeatureBank bank = concept_bank(m, s, j, FeatureSpace::Encoder, cfg.n);
    bank.vectors = to_f32(bank.vectors);
    ck.banks.push_back(std::move(bank));
  }
  return ck;
}

template <class OnEpoch>
Checkpoint train(const BaseModel& m, const Scenario& s, const std::vector<TrainSample>& samples,
                 const TrainConfig& cfg, OnEpoch&& on_epoch) {
  cfg.validate();
  return train(m, s, samples, cfg, std::forward<OnEpoch>(on_epoch), init_theta(m, s, cfg));
}

inline Checkpoint train(const BaseModel& m, const Scenario& s, const std::vector<TrainSample>& samples,
                        const TrainConfig& cfg, std::ostream* log = nullptr) {
  return train(m, s, samples, cfg, [&](const EpochEnd& e) {
    if (log) *log << "epoch " << e.epoch << " mean loss " << e.mean_loss << "\n";
  });
}

}  // namespace mcvlm
