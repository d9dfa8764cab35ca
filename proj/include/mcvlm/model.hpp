// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small frozen decoder-only transformer (pre-norm, RMSNorm, tanh-GELU MLP)
// with reverse-mode gradients for the concept parameters and, for the base
// build step, for the frozen weights themselves.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "mcvlm/archive.hpp"
#include "mcvlm/errors.hpp"
#include "mcvlm/linalg.hpp"
#include "mcvlm/token_init.hpp"
#include "mcvlm/tokenizer.hpp"
#include "mcvlm/vision.hpp"

namespace mcvlm {

struct ModelConfig {
  int dim = 64;
  int layers = 2;
  int heads = 2;
  int head_dim = 32;
  int ffn = 256;
  int vocab = tok::kBaseVocab;
  int context = 384;
  int image_tokens = 64;
  double norm_eps = 1e-6;

  void validate() const {
    require(dim >= 1 && layers >= 1 && heads >= 1 && head_dim >= 1 && ffn >= 1, ErrorKind::Validation,
            "model dimensions must be positive");
    require(vocab > tok::kAssistant, ErrorKind::Validation, "vocabulary too small");
    require(context >= 2 && image_tokens >= 0, ErrorKind::Validation, "bad context or image token count");
    require(norm_eps > 0.0, ErrorKind::Validation, "norm epsilon must be positive");
  }
};

// ---------------------------------------------------------------------------
// Sequences

enum class Slot : std::uint8_t { Token, Image, Identifier, Soft };

struct Element {
  Slot slot = Slot::Token;
  int index = 0;  // token id, image cell, or concept index
  int sub = 0;    // soft-token index within its concept
};

/// One training or inference sequence. Image slots read rows of `image`;
/// identifier and soft slots read the concept parameters.
struct Sequence {
  std::vector<Element> items;
  Matrix image;                  // cells x D projected features (empty without image)
  std::size_t answer_start = 0;  // first answer element; items.size() for a bare prompt

  std::size_t size() const { return items.size(); }
  std::size_t answer_length() const { return items.size() - answer_start; }
};

class SequenceBuilder {
 public:
  explicit SequenceBuilder(const Vocabulary& vocab) : vocab_(vocab) {}

  SequenceBuilder& token(int id) {
    seq_.items.push_back({Slot::Token, id, 0});
    return *this;
  }
  SequenceBuilder& identifier(int j) {
    seq_.items.push_back({Slot::Identifier, j, 0});
    return *this;
  }
  SequenceBuilder& soft(int j, int t) {
    seq_.items.push_back({Slot::Soft, j, t});
    return *this;
  }
  SequenceBuilder& image(const Matrix& projected) {
    seq_.image = projected;
    for (Eigen::Index p = 0; p < projected.rows(); ++p) seq_.items.push_back({Slot::Image, static_cast<int>(p), 0});
    return *this;
  }
  /// Text with "<sks_j>" spelled inline; identifiers become identifier slots.
  SequenceBuilder& text(std::string_view s) {
    for (int id : vocab_.encode(s)) {
      if (vocab_.is_identifier(id))
        identifier(vocab_.concept_of(id));
      else
        token(id);
    }
    return *this;
  }
  SequenceBuilder& begin_answer() {
    seq_.answer_start = seq_.items.size();
    answer_marked_ = true;
    return *this;
  }
  Sequence build() {
    if (!answer_marked_) seq_.answer_start = seq_.items.size();
    return seq_;
  }

 private:
  const Vocabulary& vocab_;
  Sequence seq_;
  bool answer_marked_ = false;
};

// ---------------------------------------------------------------------------
// Parameters

struct Layer {
  RowVector attn_norm;
  Matrix wq, wk, wv;  // D x (heads * head_dim)
  Matrix wo;          // (heads * head_dim) x D
  RowVector mlp_norm;
  Matrix w1;  // D x ffn
  RowVector b1;
  Matrix w2;  // ffn x D
  RowVector b2;
};

struct BaseModel {
  ModelConfig cfg;
  VisionConfig vision;
  Matrix token_embedding;          // vocab x D
  Matrix position_embedding;       // context x D
  Matrix image_embedding;          // image_tokens x D, added at image slots
  RowVector identifier_embedding;  // added at identifier slots
  double image_norm = 1.0;         // image features are rescaled to this L2 norm
  std::vector<Layer> layers;
  RowVector final_norm;
  Matrix classifier;  // D x vocab
  Matrix projector;   // D x c

  Projector make_projector() const { return Projector::from_weights(projector); }
  Encoder make_encoder() const { return Encoder(vision); }

  /// Mean row norm of the frozen token table, the target for norm alignment.
  double reference_norm() const { return mcvlm::reference_norm(token_embedding); }
};

/// The trainable set: one token block per concept and the appended classifier
/// columns (D x m).
struct Theta {
  std::vector<ConceptTokenBlock> blocks;
  Matrix columns;

  int concepts() const { return static_cast<int>(blocks.size()); }
  int k() const { return blocks.empty() ? 0 : blocks.front().k(); }

  std::vector<Matrix*> params() {
    std::vector<Matrix*> out;
    for (auto& b : blocks) out.push_back(&b.rows);
    out.push_back(&columns);
    return out;
  }
  std::vector<const Matrix*> params() const {
    std::vector<const Matrix*> out;
    for (const auto& b : blocks) out.push_back(&b.rows);
    out.push_back(&columns);
    return out;
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += static_cast<std::size_t>(p->size());
    return n;
  }
};

/// Theta with the new classifier columns initialised to the identifier rows.
inline Theta make_theta(std::vector<ConceptTokenBlock> blocks) {
  require(!blocks.empty(), ErrorKind::Input, "theta needs at least one concept");
  const int k = blocks.front().k();
  const int d = blocks.front().dim();
  Theta t;
  t.columns.resize(d, static_cast<Eigen::Index>(blocks.size()));
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    require(blocks[j].k() == k && blocks[j].dim() == d, ErrorKind::Dimension, "concept blocks differ in shape");
    t.columns.col(static_cast<Eigen::Index>(j)) = blocks[j].identifier().transpose();
  }
  t.blocks = std::move(blocks);
  return t;
}

// ---------------------------------------------------------------------------
// Forward

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

// y = x / rms(x) * g per row; returns y and stores 1/rms in inv.
inline Matrix rms_norm(const Matrix& x, const RowVector& g, double eps, Vector& inv) {
  inv.resize(x.rows());
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    inv[i] = 1.0 / std::sqrt(x.row(i).squaredNorm() / static_cast<double>(x.cols()) + eps);
    y.row(i) = x.row(i).cwiseProduct(g) * inv[i];
  }
  return y;
}

inline Matrix rms_norm_backward(const Matrix& x, const RowVector& g, const Vector& inv, const Matrix& dy,
                                RowVector* dg) {
  const double d = static_cast<double>(x.cols());
  Matrix dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowVector gdy = dy.row(i).cwiseProduct(g);
    const double dot = gdy.dot(x.row(i));
    dx.row(i) = gdy * inv[i] - x.row(i) * (inv[i] * inv[i] * inv[i] * dot / d);
    if (dg) *dg += dy.row(i).cwiseProduct(x.row(i)) * inv[i];
  }
  return dx;
}

}  // namespace detail

struct LayerCache {
  Matrix input;  // residual stream entering the layer
  Vector inv1;
  Matrix a;  // normed attention input
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, L x L (upper triangle zero)
  Matrix heads;               // concatenated head outputs
  Matrix mid;                 // residual after attention
  Vector inv2;
  Matrix b;  // normed MLP input
  Matrix pre;
  Matrix act;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix final_input;
  Vector inv_final;
  Matrix z;
};

/// Input rows for every slot: embeddings plus positional terms.
inline Matrix embed_sequence(const BaseModel& m, const Sequence& seq, const Theta& theta) {
  const auto& cfg = m.cfg;
  require(!seq.items.empty(), ErrorKind::Input, "empty sequence");
  require(static_cast<int>(seq.size()) <= cfg.context, ErrorKind::Capacity,
          "sequence of " + std::to_string(seq.size()) + " tokens exceeds context " + std::to_string(cfg.context));
  Matrix x(static_cast<Eigen::Index>(seq.size()), cfg.dim);
  for (std::size_t p = 0; p < seq.size(); ++p) {
    const Element& e = seq.items[p];
    auto row = x.row(static_cast<Eigen::Index>(p));
    switch (e.slot) {
      case Slot::Token:
        require(e.index >= 0 && e.index < cfg.vocab, ErrorKind::Input, "unknown token id " + std::to_string(e.index));
        row = m.token_embedding.row(e.index);
        break;
      case Slot::Image: {
        require(e.index >= 0 && e.index < seq.image.rows() && e.index < cfg.image_tokens, ErrorKind::Input,
                "image slot " + std::to_string(e.index) + " has no feature");
        require(seq.image.cols() == cfg.dim, ErrorKind::Dimension, "image features must have model width");
        const double n = seq.image.row(e.index).norm();
        row = n > 0.0 ? RowVector(seq.image.row(e.index) * (m.image_norm / n)) : RowVector::Zero(cfg.dim);
        row += m.image_embedding.row(e.index);
        break;
      }
      case Slot::Identifier:
        require(e.index >= 0 && e.index < theta.concepts(), ErrorKind::Input,
                "identifier " + std::to_string(e.index) + " has no concept block");
        row = theta.blocks[static_cast<std::size_t>(e.index)].identifier();
        row += m.identifier_embedding;
        break;
      case Slot::Soft:
        require(e.index >= 0 && e.index < theta.concepts() && e.sub >= 0 &&
                    e.sub < theta.blocks[static_cast<std::size_t>(e.index)].k(),
                ErrorKind::Input, "soft token out of range");
        row = theta.blocks[static_cast<std::size_t>(e.index)].token(e.sub);
        break;
    }
    row += m.position_embedding.row(static_cast<Eigen::Index>(p));
  }
  return x;
}

/// Final normed hidden states z (L x D).
inline Matrix hidden_states(const BaseModel& m, const Matrix& x, ForwardCache* cache = nullptr) {
  const auto& cfg = m.cfg;
  const Eigen::Index L = x.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  Matrix h = x;
  if (cache) cache->layers.resize(m.layers.size());
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const Layer& ly = m.layers[li];
    LayerCache local;
    LayerCache& c = cache ? cache->layers[li] : local;
    c.input = h;
    c.a = detail::rms_norm(h, ly.attn_norm, cfg.norm_eps, c.inv1);
    c.q = c.a * ly.wq;
    c.k = c.a * ly.wk;
    c.v = c.a * ly.wv;
    c.heads = Matrix::Zero(L, cfg.heads * cfg.head_dim);
    c.probs.assign(static_cast<std::size_t>(cfg.heads), Matrix());
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const auto q = c.q.middleCols(hd * cfg.head_dim, cfg.head_dim);
      const auto k = c.k.middleCols(hd * cfg.head_dim, cfg.head_dim);
      const auto v = c.v.middleCols(hd * cfg.head_dim, cfg.head_dim);
      Matrix s = (q * k.transpose()) * scale;
      Matrix& p = c.probs[static_cast<std::size_t>(hd)];
      p = Matrix::Zero(L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) sum += (p(i, j) = std::exp(s(i, j) - mx));
        p.row(i).head(i + 1) /= sum;
      }
      c.heads.middleCols(hd * cfg.head_dim, cfg.head_dim) = p * v;
    }
    c.mid = h + c.heads * ly.wo;
    c.b = detail::rms_norm(c.mid, ly.mlp_norm, cfg.norm_eps, c.inv2);
    c.pre = (c.b * ly.w1).rowwise() + ly.b1;
    c.act = c.pre.unaryExpr([](double u) { return detail::gelu(u); });
    h = (c.mid + c.act * ly.w2).rowwise() + ly.b2;
  }
  Vector inv;
  Matrix z = detail::rms_norm(h, m.final_norm, cfg.norm_eps, inv);
  if (cache) {
    cache->final_input = h;
    cache->inv_final = inv;
    cache->z = z;
  }
  return z;
}

/// Logits over the expanded vocabulary (vocab + m) for hidden rows z.
/// Base-vocabulary logits from hidden states. Always evaluated into a fresh
/// matrix so every caller gets bit-identical values from the same kernel.
inline Matrix vocab_logits(const BaseModel& m, const Matrix& z) {
  Matrix out = z * m.classifier;
  return out;
}

inline Matrix expanded_logits(const BaseModel& m, const Theta& theta, const Matrix& z) {
  require(theta.columns.rows() == m.cfg.dim || theta.concepts() == 0, ErrorKind::Dimension,
          "classifier columns must have model width");
  Matrix out(z.rows(), m.cfg.vocab + theta.concepts());
  out.leftCols(m.cfg.vocab) = vocab_logits(m, z);
  if (theta.concepts() > 0) out.rightCols(theta.concepts()) = z * theta.columns;
  return out;
}

/// Per-position logits over vocab + m.
inline Matrix forward(const BaseModel& m, const Sequence& seq, const Theta& theta) {
  return expanded_logits(m, theta, hidden_states(m, embed_sequence(m, seq, theta)));
}

/// Base-vocabulary logits of the unexpanded model.
inline Matrix base_logits(const BaseModel& m, const Sequence& seq) {
  const Theta none;
  return vocab_logits(m, hidden_states(m, embed_sequence(m, seq, none)));
}

inline int target_id(const BaseModel& m, const Element& e) {
  switch (e.slot) {
    case Slot::Token: return e.index;
    case Slot::Identifier: return m.cfg.vocab + e.index;
    default: fail(ErrorKind::Input, "answer positions must hold tokens or identifiers");
  }
}

namespace detail {

inline void check_answer(const Sequence& seq) {
  require(seq.answer_start >= 1 && seq.answer_start < seq.size(), ErrorKind::Input,
          "sequence needs a prompt and at least one answer token");
}

inline double log_softmax_at(const RowVector& row, int target, RowVector* probs) {
  const double mx = row.maxCoeff();
  const RowVector e = (row.array() - mx).exp().matrix();
  const double sum = e.sum();
  if (probs) *probs = e / sum;
  return row[target] - mx - std::log(sum);
}

}  // namespace detail

/// Negative log-likelihood summed over the answer positions.
inline double loss(const BaseModel& m, const Sequence& seq, const Theta& theta) {
  detail::check_answer(seq);
  const Matrix z = hidden_states(m, embed_sequence(m, seq, theta));
  const std::size_t a = seq.answer_start;
  const Matrix lg = expanded_logits(m, theta, z.middleRows(static_cast<Eigen::Index>(a - 1), static_cast<Eigen::Index>(seq.size() - a)));
  double total = 0.0;
  for (std::size_t p = a; p < seq.size(); ++p)
    total -= detail::log_softmax_at(lg.row(static_cast<Eigen::Index>(p - a)), target_id(m, seq.items[p]), nullptr);
  return total;
}

// ---------------------------------------------------------------------------
// Backward

/// Gradients with respect to every frozen weight; used only by the base build.
struct BaseGrad {
  std::vector<Layer> layers;
  RowVector final_norm;
  Matrix classifier;

  static BaseGrad zeros_like(const BaseModel& m) {
    BaseGrad g;
    for (const auto& ly : m.layers) {
      Layer z;
      z.attn_norm = RowVector::Zero(ly.attn_norm.size());
      z.wq = Matrix::Zero(ly.wq.rows(), ly.wq.cols());
      z.wk = Matrix::Zero(ly.wk.rows(), ly.wk.cols());
      z.wv = Matrix::Zero(ly.wv.rows(), ly.wv.cols());
      z.wo = Matrix::Zero(ly.wo.rows(), ly.wo.cols());
      z.mlp_norm = RowVector::Zero(ly.mlp_norm.size());
      z.w1 = Matrix::Zero(ly.w1.rows(), ly.w1.cols());
      z.b1 = RowVector::Zero(ly.b1.size());
      z.w2 = Matrix::Zero(ly.w2.rows(), ly.w2.cols());
      z.b2 = RowVector::Zero(ly.b2.size());
      g.layers.push_back(std::move(z));
    }
    g.final_norm = RowVector::Zero(m.final_norm.size());
    g.classifier = Matrix::Zero(m.classifier.rows(), m.classifier.cols());
    return g;
  }
};

/// Propagates dL/dz back to dL/dx; accumulates weight gradients when asked.
inline Matrix backward(const BaseModel& m, const ForwardCache& c, const Matrix& dz, BaseGrad* wg = nullptr) {
  const auto& cfg = m.cfg;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  Matrix dh = detail::rms_norm_backward(c.final_input, m.final_norm, c.inv_final, dz, wg ? &wg->final_norm : nullptr);
  for (std::size_t li = m.layers.size(); li-- > 0;) {
    const Layer& ly = m.layers[li];
    const LayerCache& lc = c.layers[li];
    Layer* g = wg ? &wg->layers[li] : nullptr;
    const Eigen::Index L = lc.input.rows();

    // MLP block
    Matrix dpre = (dh * ly.w2.transpose()).cwiseProduct(lc.pre.unaryExpr([](double u) { return detail::gelu_grad(u); }));
    if (g) {
      g->w2 += lc.act.transpose() * dh;
      g->b2 += dh.colwise().sum();
      g->w1 += lc.b.transpose() * dpre;
      g->b1 += dpre.colwise().sum();
    }
    Matrix db = dpre * ly.w1.transpose();
    Matrix dmid = dh + detail::rms_norm_backward(lc.mid, ly.mlp_norm, lc.inv2, db, g ? &g->mlp_norm : nullptr);

    // attention block
    Matrix dheads = dmid * ly.wo.transpose();
    if (g) g->wo += lc.heads.transpose() * dmid;
    Matrix dq = Matrix::Zero(L, lc.q.cols()), dk = Matrix::Zero(L, lc.k.cols()), dv = Matrix::Zero(L, lc.v.cols());
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const Eigen::Index off = hd * cfg.head_dim;
      const Matrix& p = lc.probs[static_cast<std::size_t>(hd)];
      const auto dout = dheads.middleCols(off, cfg.head_dim);
      const auto v = lc.v.middleCols(off, cfg.head_dim);
      dv.middleCols(off, cfg.head_dim) = p.transpose() * dout;
      Matrix dp = dout * v.transpose();
      Matrix ds(L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        const double dot = p.row(i).dot(dp.row(i));
        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
      }
      ds *= scale;
      dq.middleCols(off, cfg.head_dim) = ds * lc.k.middleCols(off, cfg.head_dim);
      dk.middleCols(off, cfg.head_dim) = ds.transpose() * lc.q.middleCols(off, cfg.head_dim);
    }
    if (g) {
      g->wq += lc.a.transpose() * dq;
      g->wk += lc.a.transpose() * dk;
      g->wv += lc.a.transpose() * dv;
    }
    Matrix da = dq * ly.wq.transpose() + dk * ly.wk.transpose() + dv * ly.wv.transpose();
    dh = dmid + detail::rms_norm_backward(lc.input, ly.attn_norm, lc.inv1, da, g ? &g->attn_norm : nullptr);
  }
  return dh;
}

struct ThetaGrad {
  std::vector<Matrix> blocks;
  Matrix columns;

  static ThetaGrad zeros_like(const Theta& t) {
    ThetaGrad g;
    for (const auto& b : t.blocks) g.blocks.push_back(Matrix::Zero(b.rows.rows(), b.rows.cols()));
    g.columns = Matrix::Zero(t.columns.rows(), t.columns.cols());
    return g;
  }
  std::vector<const Matrix*> params() const {
    std::vector<const Matrix*> out;
    for (const auto& b : blocks) out.push_back(&b);
    out.push_back(&columns);
    return out;
  }
};

struct LossGrad {
  double loss = 0.0;
  ThetaGrad theta;
};

/// Loss plus exact gradients for theta; optionally also for the frozen weights.
inline LossGrad loss_and_grad(const BaseModel& m, const Sequence& seq, const Theta& theta, BaseGrad* wg = nullptr) {
  detail::check_answer(seq);
  ForwardCache cache;
  const Matrix x = embed_sequence(m, seq, theta);
  const Matrix z = hidden_states(m, x, &cache);
  const std::size_t a = seq.answer_start;
  const auto rows = static_cast<Eigen::Index>(seq.size() - a);
  const Matrix za = z.middleRows(static_cast<Eigen::Index>(a - 1), rows);
  const Matrix lg = expanded_logits(m, theta, za);

  LossGrad out;
  out.theta = ThetaGrad::zeros_like(theta);
  Matrix dlogits(rows, lg.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    RowVector probs;
    const int target = target_id(m, seq.items[a + static_cast<std::size_t>(r)]);
    out.loss -= detail::log_softmax_at(lg.row(r), target, &probs);
    probs[target] -= 1.0;
    dlogits.row(r) = probs;
  }
  const int vocab = m.cfg.vocab;
  const int mc = theta.concepts();
  if (mc > 0) out.theta.columns = za.transpose() * dlogits.rightCols(mc);
  if (wg) wg->classifier += za.transpose() * dlogits.leftCols(vocab);

  Matrix dz = Matrix::Zero(z.rows(), z.cols());
  dz.middleRows(static_cast<Eigen::Index>(a - 1), rows) = dlogits.leftCols(vocab) * m.classifier.transpose();
  if (mc > 0) dz.middleRows(static_cast<Eigen::Index>(a - 1), rows) += dlogits.rightCols(mc) * theta.columns.transpose();
  const Matrix dx = backward(m, cache, dz, wg);

  for (std::size_t p = 0; p < seq.size(); ++p) {
    const Element& e = seq.items[p];
    if (e.slot == Slot::Identifier)
      out.theta.blocks[static_cast<std::size_t>(e.index)].row(0) += dx.row(static_cast<Eigen::Index>(p));
    else if (e.slot == Slot::Soft)
      out.theta.blocks[static_cast<std::size_t>(e.index)].row(1 + e.sub) += dx.row(static_cast<Eigen::Index>(p));
  }
  return out;
}

inline ThetaGrad grad_theta(const BaseModel& m, const Sequence& seq, const Theta& theta) {
  return loss_and_grad(m, seq, theta).theta;
}

// ---------------------------------------------------------------------------
// Decoding

/// Greedy decoding from a bare prompt; stops at EOS (not included) or max_new.
inline std::vector<int> generate(const BaseModel& m, const Sequence& prompt, const Theta& theta, int max_new) {
  require(max_new >= 1, ErrorKind::Input, "max_new must be >= 1");
  Sequence seq = prompt;
  seq.answer_start = seq.size();
  std::vector<int> out;
  for (int step = 0; step < max_new && static_cast<int>(seq.size()) < m.cfg.context; ++step) {
    const Matrix z = hidden_states(m, embed_sequence(m, seq, theta));
    const RowVector lg = expanded_logits(m, theta, z.bottomRows(1)).row(0);
    Eigen::Index best = 0;
    lg.maxCoeff(&best);
    const int id = static_cast<int>(best);
    if (id == tok::kEos) break;
    out.push_back(id);
    if (id >= m.cfg.vocab)
      seq.items.push_back({Slot::Identifier, id - m.cfg.vocab, 0});
    else
      seq.items.push_back({Slot::Token, id, 0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary format: magic, version, dims, then named float32 arrays.

inline constexpr char kModelMagic[8] = {'M', 'C', 'V', 'L', 'M', 'B', 'A', 'S'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

inline void put_named(std::ostream& out, const std::string& name, const Matrix& a) {
  le::put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  le::put_u32(out, static_cast<std::uint32_t>(a.rows()));
  le::put_u32(out, static_cast<std::uint32_t>(a.cols()));
  le::put_matrix(out, a);
}

inline Matrix get_named(std::istream& in, const std::string& expect, Eigen::Index rows, Eigen::Index cols) {
  const std::uint32_t n = le::get_u32(in);
  require(n < 256, ErrorKind::Validation, "corrupt array name in model file");
  std::string name(n, '\0');
  in.read(name.data(), n);
  require(static_cast<bool>(in) && name == expect, ErrorKind::Validation,
          "model file: expected array '" + expect + "', found '" + name + "'");
  const auto r = le::get_u32(in), c = le::get_u32(in);
  require(r == rows && c == cols, ErrorKind::Validation, "model file: array '" + expect + "' has wrong shape");
  Matrix a(rows, cols);
  le::get_matrix(in, a);
  return a;
}

template <class Fn>
void visit_arrays(BaseModel& m, Fn&& fn) {
  const auto& c = m.cfg;
  const int inner = c.heads * c.head_dim;
  auto row = [&](const std::string& name, RowVector& v, int n) {
    Matrix t = v.size() == n ? Matrix(v) : Matrix(1, n);
    fn(name, t, 1, n);
    v = t.row(0);
  };
  fn("token_embedding", m.token_embedding, c.vocab, c.dim);
  fn("position_embedding", m.position_embedding, c.context, c.dim);
  fn("image_embedding", m.image_embedding, c.image_tokens, c.dim);
  row("identifier_embedding", m.identifier_embedding, c.dim);
  Matrix norm(1, 1);
  norm(0, 0) = m.image_norm;
  fn("image_norm", norm, 1, 1);
  m.image_norm = norm(0, 0);
  m.layers.resize(static_cast<std::size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    auto& ly = m.layers[static_cast<std::size_t>(l)];
    const std::string p = "layer" + std::to_string(l) + ".";
    row(p + "attn_norm", ly.attn_norm, c.dim);
    fn(p + "wq", ly.wq, c.dim, inner);
    fn(p + "wk", ly.wk, c.dim, inner);
    fn(p + "wv", ly.wv, c.dim, inner);
    fn(p + "wo", ly.wo, inner, c.dim);
    row(p + "mlp_norm", ly.mlp_norm, c.dim);
    fn(p + "w1", ly.w1, c.dim, c.ffn);
    row(p + "b1", ly.b1, c.ffn);
    fn(p + "w2", ly.w2, c.ffn, c.dim);
    row(p + "b2", ly.b2, c.dim);
  }
  row("final_norm", m.final_norm, c.dim);
  fn("classifier", m.classifier, c.dim, c.vocab);
  fn("projector", m.projector, c.dim, m.vision.channels);
}

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const BaseModel& model) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out.write(kModelMagic, sizeof kModelMagic);
  le::put_u32(out, kModelVersion);
  const auto& c = model.cfg;
  for (int v : {c.dim, c.layers, c.heads, c.head_dim, c.ffn, c.vocab, c.context, c.image_tokens, model.vision.patch,
                model.vision.channels})
    le::put_u32(out, static_cast<std::uint32_t>(v));
  le::put_u32(out, static_cast<std::uint32_t>(model.vision.seed));
  le::put_u32(out, static_cast<std::uint32_t>(model.vision.seed >> 32));
  BaseModel copy = model;
  detail::visit_arrays(copy, [&](const std::string& name, Matrix& a, Eigen::Index, Eigen::Index) {
    detail::put_named(out, name, a);
  });
  if (!out) fail(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

inline BaseModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open model '" + path.string() + "'");
  char magic[sizeof kModelMagic];
  in.read(magic, sizeof magic);
  require(static_cast<bool>(in) && std::equal(magic, magic + sizeof magic, kModelMagic), ErrorKind::Validation,
          "'" + path.string() + "' is not a model file");
  const auto version = le::get_u32(in);
  require(version == kModelVersion, ErrorKind::Validation, "unsupported model version " + std::to_string(version));
  BaseModel m;
  auto& c = m.cfg;
  int* dims[] = {&c.dim, &c.layers, &c.heads, &c.head_dim, &c.ffn, &c.vocab, &c.context, &c.image_tokens,
                 &m.vision.patch, &m.vision.channels};
  for (int* d : dims) *d = static_cast<int>(le::get_u32(in));
  m.vision.model_dim = c.dim;
  const std::uint64_t lo = le::get_u32(in), hi = le::get_u32(in);
  m.vision.seed = lo | hi << 32;
  c.validate();
  detail::visit_arrays(m, [&](const std::string& name, Matrix& a, Eigen::Index r, Eigen::Index cols) {
    a = detail::get_named(in, name, r, cols);
  });
  return m;
}

/// Rounds every weight to float32 so that the in-memory model equals its file.
inline void round_to_f32(BaseModel& m) {
  detail::visit_arrays(m, [](const std::string&, Matrix& a, Eigen::Index, Eigen::Index) { a = to_f32(a); });
}

}  // namespace mcvlm
