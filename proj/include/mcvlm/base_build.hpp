// SPDX-License-Identifier: Apache-2.0
#pragma once

// Seeded construction of the frozen base model. Attention weights are set by
// hand so the network can (1) match each question identifier against the image
// patches and (2) read the question characters; the second-layer MLP and the
// output classifier are then fitted on a synthetic corpus of recognition and
// attribute questions about randomly drawn concepts. Nothing here is touched
// by concept training.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include "mcvlm/data.hpp"
#include "mcvlm/model.hpp"
#include "mcvlm/optim.hpp"
#include "mcvlm/synth.hpp"
#include "mcvlm/token_init.hpp"
#include "mcvlm/vision.hpp"

namespace mcvlm {

/// Residual-stream layout of the constructed model (D = 64).
namespace lane {
inline constexpr int kVisual = 20;  // dims [0, 20): whitened image content
inline constexpr int kOne = 20;
inline constexpr int kImage = 21;
inline constexpr int kBos = 22;
inline constexpr int kUser = 23;
inline constexpr int kAssistant = 24;
inline constexpr int kPresence = 25;
inline constexpr int kQuestion = 26;
inline constexpr int kIdentifier = 27;
inline constexpr int kReadPresence = 28;
inline constexpr int kImageX = 29;
inline constexpr int kPresenceX = 30;
inline constexpr int kReadPresenceX = 31;
inline constexpr int kImageY = 32;
inline constexpr int kBag = 33;  // 7 dims
inline constexpr int kBagDims = 7;
inline constexpr int kChar = 40;  // 24 dims
inline constexpr int kCharDims = 24;
inline constexpr int kWidth = 64;
}  // namespace lane

struct BaseBuildConfig {
  std::uint64_t seed = 11;
  int calibration_looks = 30;
  int calibration_scenes = 200;
  int pool_concepts = 120;
  int pool_images = 10;
  int k = 16;
  int steps = 1500;
  int batch = 8;
  double lr = 3e-3;
  // Corpus mix: recognition, visual conversation, text-only conversation,
  // captions (the remainder).
  double p_recognition = 0.45;
  double p_visual = 0.3;
  double p_text = 0.15;

  void validate() const {
    require(calibration_looks >= 3 && calibration_scenes >= 1 && pool_concepts >= 3 && pool_images >= 1 && k >= 1,
            ErrorKind::Validation, "base build sizes out of range");
    require(steps >= 0 && batch >= 1 && lr > 0.0, ErrorKind::Validation, "base build optimizer settings out of range");
    require(p_recognition >= 0 && p_visual >= 0 && p_text >= 0 && p_recognition + p_visual + p_text <= 1.0,
            ErrorKind::Validation, "corpus mix must be a sub-probability");
  }
};

// ---------------------------------------------------------------------------
// Scenes used only by the base build

struct PoolConcept {
  ConceptLook look;
  ConceptTokenBlock block;
};

/// Draws `present` (indices into looks) at disjoint thirds, or alone at a
/// random spot; 30% of scenes also get a gray distractor.
inline std::vector<Placement> compose_scene(Image& img, Rng& rng, const std::vector<const ConceptLook*>& looks,
                                            const std::vector<int>& present) {
  std::vector<Placement> at;
  if (present.size() == 1) {
    at.push_back(draw_single(img, rng, *looks[static_cast<std::size_t>(present[0])]));
  } else if (!present.empty()) {
    at = multi_layout(rng, static_cast<int>(present.size()));
    for (std::size_t i = 0; i < present.size(); ++i) {
      const auto& look = *looks[static_cast<std::size_t>(present[i])];
      draw_shape(img, look.shape, look.color, at[i].cx, at[i].cy, at[i].r);
    }
  }
  if (uniform(rng, 0.0, 1.0) < 0.3) draw_distractor(img, rng, at);
  return at;
}

namespace detail {

inline std::vector<int> permutation(Rng& rng, int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace detail

/// Whitening projector: encoder features minus their dominant mean direction,
/// rotated onto the top principal axes with damped whitening, placed in the
/// visual lanes. Rows beyond kVisual are zero.
inline Matrix calibrate_projector(const Encoder& enc, const BaseBuildConfig& cfg) {
  Rng rng(cfg.seed ^ 0xca11'b2a7ULL);
  std::vector<ConceptLook> looks;
  for (int i = 0; i < cfg.calibration_looks; ++i) looks.push_back(random_look(rng));
  const int c = enc.config().channels;
  std::vector<Matrix> grids;
  for (int s = 0; s < cfg.calibration_scenes; ++s) {
    const auto pick = detail::permutation(rng, cfg.calibration_looks);
    std::vector<const ConceptLook*> chosen{&looks[static_cast<std::size_t>(pick[0])],
                                           &looks[static_cast<std::size_t>(pick[1])],
                                           &looks[static_cast<std::size_t>(pick[2])]};
    auto order = detail::permutation(rng, 3);
    order.resize(static_cast<std::size_t>(uniform_int(rng, 0, 3)));
    Image img = background(rng);
    compose_scene(img, rng, chosen, order);
    grids.push_back(enc.encode(img).features);
  }
  Matrix g(static_cast<Eigen::Index>(grids.size()) * grids.front().rows(), c);
  for (std::size_t i = 0; i < grids.size(); ++i)
    g.middleRows(static_cast<Eigen::Index>(i) * grids.front().rows(), grids.front().rows()) = grids[i];

  RowVector mu = g.colwise().mean();
  mu /= mu.norm();
  const Matrix pi = Matrix::Identity(c, c) - mu.transpose() * mu;
  const Matrix gp = g * pi;
  const Matrix centered = gp.rowwise() - gp.colwise().mean();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(g.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd w = eig.eigenvalues().cwiseMax(0.0);  // ascending
  const double damp = 0.1 * w.maxCoeff();
  Matrix wh(lane::kVisual, c);
  for (int i = 0; i < lane::kVisual; ++i) {
    const Eigen::Index col = c - 1 - i;
    wh.row(i) = eig.eigenvectors().col(col).transpose() / std::sqrt(w[col] + damp);
  }
  wh = wh * pi;
  wh /= (g * wh.transpose()).rowwise().norm().mean();
  Matrix proj = Matrix::Zero(lane::kWidth, c);
  proj.topRows(lane::kVisual) = wh;
  return proj;
}

/// Hand-set attention circuits; MLPs, classifier and norms initialised plainly.
inline BaseModel construct_base(const BaseBuildConfig& cfg) {
  BaseModel m;
  ModelConfig& c = m.cfg;
  require(c.dim == lane::kWidth && c.heads == 2 && c.layers == 2 && c.head_dim == 32, ErrorKind::Validation,
          "constructed base needs D=64, 2 layers, 2 heads of width 32");
  m.vision.model_dim = c.dim;
  Rng rng(cfg.seed);

  m.token_embedding = Matrix::Zero(c.vocab, c.dim);
  m.token_embedding.middleCols(lane::kChar, lane::kCharDims) =
      gaussian_matrix(rng, c.vocab, lane::kCharDims, 1.0 / std::sqrt(double(lane::kCharDims)));
  for (auto [id, flag] : {std::pair{tok::kBos, lane::kBos}, {tok::kUser, lane::kUser}, {tok::kAssistant, lane::kAssistant}}) {
    m.token_embedding.row(id).setZero();
    m.token_embedding(id, flag) = 1.0;
  }
  m.position_embedding = Matrix::Zero(c.context, c.dim);
  m.position_embedding.col(lane::kOne).setOnes();
  m.image_embedding = Matrix::Zero(c.image_tokens, c.dim);
  const int grid_w = static_cast<int>(std::lround(std::sqrt(double(c.image_tokens))));
  for (int p = 0; p < c.image_tokens; ++p) {
    const double phi = ((p % grid_w) + 0.5) / grid_w * (M_PI / 2.0);
    m.image_embedding(p, lane::kImage) = 1.0;
    m.image_embedding(p, lane::kImageX) = std::cos(phi);
    m.image_embedding(p, lane::kImageY) = std::sin(phi);
  }
  m.identifier_embedding = RowVector::Zero(c.dim);
  m.identifier_embedding[lane::kIdentifier] = 1.0;
  m.image_norm = m.reference_norm();

  const int inner = c.heads * c.head_dim;
  auto blank = [&] {
    Layer ly;
    ly.attn_norm = RowVector::Ones(c.dim);
    ly.mlp_norm = RowVector::Ones(c.dim);
    ly.wq = Matrix::Zero(c.dim, inner);
    ly.wk = Matrix::Zero(c.dim, inner);
    ly.wv = Matrix::Zero(c.dim, inner);
    ly.wo = Matrix::Zero(inner, c.dim);
    ly.w1 = Matrix::Zero(c.dim, c.ffn);
    ly.b1 = RowVector::Zero(c.ffn);
    ly.w2 = Matrix::Zero(c.ffn, c.dim);
    ly.b2 = RowVector::Zero(c.dim);
    return ly;
  };
  const int h1 = c.head_dim;  // column offset of head 1
  const double a2 = 20.0, a = std::sqrt(a2), rs = std::sqrt(std::sqrt(double(c.head_dim)) / 8.0);
  const double out = 1.0 / 5.66, kappa = 4.0;

  // Layer 0, head 0: each position attends to image patches resembling it;
  // BOS is the fallback sink. Carries "an image patch matched" plus its x.
  Layer l0 = blank();
  for (int d = 0; d < lane::kVisual; ++d) {
    l0.wq(d, d) = a * rs;
    l0.wk(d, d) = a * rs;
  }
  l0.wq(lane::kOne, lane::kVisual) = rs;
  l0.wk(lane::kImage, lane::kVisual) = 1.17 * a2 * rs;
  l0.wk(lane::kBos, lane::kVisual) = 1.2 * a2 * rs;
  l0.wv(lane::kImage, 0) = 1.0;
  l0.wv(lane::kImageX, 1) = 1.0;
  l0.wo(0, lane::kPresence) = 1.0 / 2.7;
  l0.wo(1, lane::kPresenceX) = 1.0 / 2.7;
  // Layer 0, head 1: marks positions after the USER token.
  l0.wq(lane::kOne, h1) = 1.0;
  l0.wk(lane::kUser, h1) = 8.0;
  l0.wk(lane::kBos, h1) = 4.0;
  l0.wv(lane::kUser, h1) = 1.0;
  l0.wo(h1, lane::kQuestion) = out;

  // Layer 1, head 0: averages the identifiers inside the question.
  Layer l1 = blank();
  l1.wq(lane::kOne, 0) = 1.0;
  l1.wk(lane::kQuestion, 0) = kappa;
  l1.wk(lane::kIdentifier, 0) = kappa;
  l1.wk(lane::kOne, 0) = -1.5 * kappa;
  l1.wk(lane::kBos, 0) = 1.5 * kappa;
  l1.wv(lane::kPresence, 0) = 1.0;
  l1.wv(lane::kPresenceX, 1) = 1.0;
  l1.wo(0, lane::kReadPresence) = out;
  l1.wo(1, lane::kReadPresenceX) = out;
  for (int d = 0; d < lane::kVisual; ++d) {
    l1.wv(d, 2 + d) = 1.0;
    l1.wo(2 + d, d) = out;
  }
  // Layer 1, head 1: bag of question characters.
  l1.wq(lane::kOne, h1) = 1.0;
  l1.wk(lane::kQuestion, h1) = kappa;
  l1.wk(lane::kOne, h1) = -0.5 * kappa;
  Rng bag_rng(cfg.seed + 3);
  const Matrix bag = gaussian_matrix(bag_rng, lane::kCharDims, lane::kBagDims, 1.0 / std::sqrt(double(lane::kCharDims)));
  for (int i = 0; i < lane::kCharDims; ++i)
    for (int j = 0; j < lane::kBagDims; ++j) l1.wv(lane::kChar + i, h1 + j) = bag(i, j);
  for (int j = 0; j < lane::kBagDims; ++j) l1.wo(h1 + j, lane::kBag + j) = out;
  l1.w1 = gaussian_matrix(rng, c.dim, c.ffn, 0.05);
  l1.w2 = gaussian_matrix(rng, c.ffn, c.dim, 0.01);

  m.layers = {std::move(l0), std::move(l1)};
  m.final_norm = RowVector::Ones(c.dim);
  m.classifier = gaussian_matrix(rng, c.dim, c.vocab, 0.02);
  m.projector = calibrate_projector(m.make_encoder(), cfg);
  round_to_f32(m);
  return m;
}

/// Randomly drawn concepts with k-means token blocks, for the base corpus.
inline std::vector<PoolConcept> build_concept_pool(const BaseModel& m, const BaseBuildConfig& cfg) {
  Rng rng(cfg.seed ^ 0x9001ULL);
  const Encoder enc = m.make_encoder();
  const Projector proj = m.make_projector();
  const double ko = m.reference_norm();
  std::vector<PoolConcept> pool;
  for (int i = 0; i < cfg.pool_concepts; ++i) {
    PoolConcept pc;
    pc.look = random_look(rng);
    std::vector<Image> imgs;
    std::vector<ConceptMask> masks;
    for (int n = 0; n < cfg.pool_images; ++n) {
      imgs.push_back(background(rng));
      masks.emplace_back();
      draw_single(imgs.back(), rng, pc.look, &masks.back());
    }
    const FeatureBank bank = build_bank(enc, proj, imgs, masks, FeatureSpace::Projector, "pool" + std::to_string(i));
    pc.block = init_block(bank, std::min<int>(cfg.k, static_cast<int>(bank.count())), rng(), ko);
    pool.push_back(std::move(pc));
  }
  return pool;
}

// ---------------------------------------------------------------------------
// Base corpus

struct CorpusSample {
  Sequence seq;
  Theta theta;
};

namespace detail {

// m concepts from the pool with pairwise hue gaps above 0.17.
inline std::vector<const PoolConcept*> pick_concepts(Rng& rng, const std::vector<PoolConcept>& pool, int m) {
  std::vector<const PoolConcept*> out;
  while (static_cast<int>(out.size()) < m) {
    const auto* c = &pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
    if (std::all_of(out.begin(), out.end(),
                    [&](const PoolConcept* o) { return hue_distance(o->look.color, c->look.color) > 0.17; }))
      out.push_back(c);
  }
  return out;
}

inline Theta theta_of(const std::vector<const PoolConcept*>& cs) {
  std::vector<ConceptTokenBlock> blocks;
  for (const auto* c : cs) blocks.push_back(c->block);
  return make_theta(std::move(blocks));
}

inline std::vector<std::string> recognition_templates() {
  const auto& pool = TemplatePool::standard();
  std::vector<std::string> out = pool.positive;
  out.insert(out.end(), pool.negative.begin(), pool.negative.end());
  out.push_back("Can you see {id} in this photo? Answer with a single word: Yes or No.");
  return out;
}

}  // namespace detail

/// One corpus sample about 1..3 random pool concepts: recognition (Yes/No), a
/// visual or text-only attribute question, or a caption naming the concepts
/// that are present, left to right.
inline CorpusSample corpus_sample(const BaseModel& m, const std::vector<PoolConcept>& pool, Rng& rng,
                                  const BaseBuildConfig& cfg) {
  static const std::vector<std::string> rec = detail::recognition_templates();
  const auto& conv = TemplatePool::standard().conversation;
  const int mc = uniform_int(rng, 1, 3);
  const auto cs = detail::pick_concepts(rng, pool, mc);
  std::vector<const ConceptLook*> looks;
  for (const auto* c : cs) looks.push_back(&c->look);
  const Vocabulary vocab = Vocabulary().expanded(mc);
  const Encoder enc = m.make_encoder();
  const Projector proj = m.make_projector();
  const int k = cs.front()->block.k();

  const double u = uniform(rng, 0.0, 1.0);
  Image img = background(rng);
  PromptParts parts;
  Matrix feats;
  if (u < cfg.p_recognition) {
    std::vector<int> present;
    const double r = uniform(rng, 0.0, 1.0);
    if (r < 0.45) {
      present = {uniform_int(rng, 0, mc - 1)};
    } else if (r >= 0.6) {
      present = detail::permutation(rng, mc);
      present.resize(static_cast<std::size_t>(uniform_int(rng, 1, mc)));
    }
    compose_scene(img, rng, looks, present);
    std::vector<int> asked;
    if (mc == 1 || uniform(rng, 0.0, 1.0) < 0.7) {
      asked = {uniform_int(rng, 0, mc - 1)};
    } else {
      asked = detail::permutation(rng, mc);
      asked.resize(2);
    }
    std::vector<std::string> ids;
    bool yes = true;
    for (int j : asked) {
      ids.push_back(identifier_name(j));
      yes = yes && std::find(present.begin(), present.end(), j) != present.end();
    }
    const auto& t = rec[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(rec.size()) - 1))];
    parts.question = replace_all(t, "{id}", join(ids, " and "));
    parts.answer = yes ? "Yes" : "No";
  } else if (u >= cfg.p_recognition + cfg.p_visual + cfg.p_text) {
    std::vector<int> present = detail::permutation(rng, mc);
    present.resize(static_cast<std::size_t>(uniform_int(rng, 0, mc)));
    const auto at = compose_scene(img, rng, looks, present);
    std::vector<std::pair<double, std::string>> seen;
    for (std::size_t i = 0; i < present.size(); ++i) seen.emplace_back(at[i].cx, identifier_name(present[i]));
    std::sort(seen.begin(), seen.end());
    std::vector<std::string> ids, names;
    for (int j = 0; j < mc; ++j) ids.push_back(identifier_name(j));
    for (const auto& [x, id] : seen) names.push_back(id);
    parts.question = caption_query(ids);
    parts.answer = names.empty() ? "A photo with none of them." : "A photo of " + join(names, " and ") + ".";
  } else {
    const bool visual = u < cfg.p_recognition + cfg.p_visual;
    const int j = uniform_int(rng, 0, mc - 1);
    std::vector<int> present{j};
    for (int i = 0; i < mc; ++i)
      if (i != j && uniform(rng, 0.0, 1.0) < 0.5) present.push_back(i);
    const auto at = compose_scene(img, rng, looks, present);
    const auto& look = cs[static_cast<std::size_t>(j)]->look;
    Attributes attr{look.color_name, shape_name(look.shape), third_of(at[0].cx, kSceneSize)};
    const int ti = visual ? uniform_int(rng, 0, static_cast<int>(conv.size()) - 1)
                          : kTextOnlyTemplates[static_cast<std::size_t>(uniform_int(rng, 0, kTextOnlyTemplates.size() - 1))];
    parts.question = render(conv[static_cast<std::size_t>(ti)].question, identifier_name(j), attr);
    parts.answer = render(conv[static_cast<std::size_t>(ti)].answer, identifier_name(j), attr);
    if (!visual) img = Image();
  }
  if (!img.empty()) {
    feats = proj.project(enc.encode(img)).features;
    parts.image = &feats;
  }
  return {assemble(vocab, mc, k, parts), detail::theta_of(cs)};
}

struct BaseBuildLog {
  std::vector<double> loss;      // mean per-token loss per logging window
  std::vector<double> first_ok;  // first-answer-token accuracy per window
};

/// Fits the second-layer MLP and the classifier with Adam (no weight decay).
inline BaseBuildLog pretrain(BaseModel& m, const std::vector<PoolConcept>& pool, const BaseBuildConfig& cfg,
                             std::ostream* log = nullptr, int log_every = 100) {
  Rng rng(cfg.seed ^ 0x7a11ULL);
  AdamWState state;
  AdamWConfig opt{cfg.lr, 0.9, 0.999, 1e-8, 0.0};
  Layer& l1 = m.layers.back();
  BaseBuildLog out;
  double win_loss = 0.0, win_ok = 0.0;
  int win_n = 0, win_ok_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    BaseGrad g = BaseGrad::zeros_like(m);
    for (int b = 0; b < cfg.batch; ++b) {
      const CorpusSample s = corpus_sample(m, pool, rng, cfg);
      const LossGrad lg = loss_and_grad(m, s.seq, s.theta, &g);
      win_loss += lg.loss / static_cast<double>(s.seq.answer_length());
      ++win_n;
      if (b == 0) {  // first-token accuracy on one sample per batch
        const Matrix lgts = forward(m, s.seq, s.theta);
        Eigen::Index best = 0;
        lgts.row(static_cast<Eigen::Index>(s.seq.answer_start - 1)).maxCoeff(&best);
        win_ok += static_cast<int>(best) == target_id(m, s.seq.items[s.seq.answer_start]) ? 1.0 : 0.0;
        ++win_ok_n;
      }
    }
    Layer& gl = g.layers.back();
    const double inv = 1.0 / cfg.batch;
    gl.w1 *= inv;
    gl.w2 *= inv;
    Matrix gb1 = gl.b1 * inv;
    g.classifier *= inv;
    Matrix b1 = l1.b1;
    adamw_step({&l1.w1, &b1, &l1.w2, &m.classifier}, {&gl.w1, &gb1, &gl.w2, &g.classifier}, state, opt);
    l1.b1 = b1.row(0);
    if ((step + 1) % log_every == 0 || step + 1 == cfg.steps) {
      out.loss.push_back(win_loss / win_n);
      out.first_ok.push_back(win_ok / std::max(1, win_ok_n));
      if (log) *log << "base step " << step + 1 << " loss " << out.loss.back() << " first-token acc " << out.first_ok.back() << "\n";
      win_loss = win_ok = 0.0;
      win_n = win_ok_n = 0;
    }
  }
  round_to_f32(m);
  return out;
}

/// The whole seeded build: construct, calibrate, pretrain.
inline BaseModel build_base_model(const BaseBuildConfig& cfg = {}, std::ostream* log = nullptr) {
  cfg.validate();
  BaseModel m = construct_base(cfg);
  const auto pool = build_concept_pool(m, cfg);
  pretrain(m, pool, cfg, log);
  return m;
}

}  // namespace mcvlm
