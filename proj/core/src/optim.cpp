#include "das/optim.hpp"

#include <cmath>

namespace das {

Sgd::Sgd(std::vector<Parameter> params, double lr)
    : params_(std::move(params)), lr_(lr) {}

void Sgd::step() {
  for (Parameter& p : params_) {
    if (p.frozen() || !p.tensor().has_grad()) continue;
    auto w = p.tensor().values_mut();
    auto g = p.tensor().grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
  }
}

void Sgd::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

AdamW::AdamW(std::vector<Parameter> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), 0.0);
    v_[i].assign(params_[i].numel(), 0.0);
  }
}

void AdamW::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = params_[i];
    if (p.frozen() || !p.tensor().has_grad()) continue;
    auto w = p.tensor().values_mut();
    auto g = p.tensor().grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                         cfg_.weight_decay * w[k]);
    }
  }
}

void AdamW::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

}  // namespace das
