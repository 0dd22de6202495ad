#pragma once

#include <vector>

#include "lndetr/model/parameters.hpp"

namespace lndetr::harness {

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam moments with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
// Parameters without a gradient still decay.
class AdamW {
 public:
  AdamW(model::ParameterSet<float>& params, const AdamWParams& hp);

  void step(double lr);
  int steps() const { return t_; }

 private:
  model::ParameterSet<float>& params_;
  AdamWParams hp_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm (no-op
// for max_norm <= 0) and returns the norm before clipping.
double clip_grad_norm(model::ParameterSet<float>& params, double max_norm);

}  // namespace lndetr::harness
