// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "mcvlm/errors.hpp"
#include "mcvlm/linalg.hpp"

namespace mcvlm {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    require(lr >= 0.0, ErrorKind::Validation, "learning rate must be >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::Validation,
            "betas must lie in [0, 1)");
    require(eps > 0.0 && weight_decay >= 0.0, ErrorKind::Validation, "eps must be > 0, weight decay >= 0");
  }
};

/// Moment buffers shaped like the parameter list they serve.
struct AdamWState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long long t = 0;
};

/// Decoupled weight decay, bias-corrected moments:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
inline void adamw_step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, AdamWState& st,
                       const AdamWConfig& cfg) {
  require(params.size() == grads.size(), ErrorKind::Input, "parameter and gradient lists differ in length");
  if (st.m.empty()) {
    for (const Matrix* p : params) {
      st.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      st.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  require(st.m.size() == params.size(), ErrorKind::Input, "optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(grads[i]->rows() == params[i]->rows() && grads[i]->cols() == params[i]->cols(), ErrorKind::Dimension,
            "gradient shape mismatch");
    require(grads[i]->allFinite(), ErrorKind::NonFinite, "non-finite gradient");
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = *grads[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const auto mhat = (st.m[i] / c1).array();
    const auto vhat = (st.v[i] / c2).array();
    p.array() -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p.array());
  }
}

}  // namespace mcvlm
