#pragma once

#include <cmath>
#include <vector>

#include "gridloop/tape.hpp"

namespace gridloop {

// Adam with decoupled weight decay. Decay applies only to tensors flagged
// for it (matrices and embeddings; not layer-norm scales or biases).
template <class S>
struct AdamW {
  double lr = 5e-5;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;
  long step_count = 0;
  std::vector<std::vector<S>> m, v;

  void init(const ParamSet<S>& ps) {
    m.resize(ps.t.size());
    v.resize(ps.t.size());
    for (size_t i = 0; i < ps.t.size(); ++i) {
      m[i].assign(ps.t[i].size(), S(0));
      v[i].assign(ps.t[i].size(), S(0));
    }
    step_count = 0;
  }

  void step(ParamSet<S>& ps, const GradSet<S>& g) {
    ++step_count;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < ps.t.size(); ++i) {
      auto& w = ps.t[i].w;
      bool decay = ps.t[i].decay;
      for (size_t j = 0; j < w.size(); ++j) {
        double gj = g.g[i][j];
        double mj = beta1 * m[i][j] + (1.0 - beta1) * gj;
        double vj = beta2 * v[i][j] + (1.0 - beta2) * gj * gj;
        m[i][j] = static_cast<S>(mj);
        v[i][j] = static_cast<S>(vj);
        double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
        double wj = w[j] - lr * update;
        if (decay) wj -= lr * weight_decay * w[j];
        w[j] = static_cast<S>(wj);
      }
    }
  }
};

}  // namespace gridloop
