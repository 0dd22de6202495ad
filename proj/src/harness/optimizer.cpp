#include "lndetr/harness/optimizer.hpp"

#include <cmath>

namespace lndetr::harness {

AdamW::AdamW(model::ParameterSet<float>& params, const AdamWParams& hp) : params_(params), hp_(hp) {
  for (const auto& [name, t] : params_.entries()) {
    m_.emplace_back(std::size_t(t.numel()), 0.0);
    v_.emplace_back(std::size_t(t.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(hp_.beta1, t_), c2 = 1.0 - std::pow(hp_.beta2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto t = params_.entries()[i].second;
    auto p = t.mutable_data();
    const auto g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      double update = hp_.weight_decay * double(p[j]);
      if (!g.empty()) {
        const double gj = g[j];
        m[j] = hp_.beta1 * m[j] + (1 - hp_.beta1) * gj;
        v[j] = hp_.beta2 * v[j] + (1 - hp_.beta2) * gj * gj;
      }
      update += (m[j] / c1) / (std::sqrt(v[j] / c2) + hp_.eps);
      p[j] = float(double(p[j]) - lr * update);
    }
  }
}

double clip_grad_norm(model::ParameterSet<float>& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, t] : params.entries())
    for (float g : t.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (auto [name, t] : params.entries())
      for (auto& g : t.mutable_grad()) g = float(double(g) * scale);
  }
  return norm;
}

}  // namespace lndetr::harness
