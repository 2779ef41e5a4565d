#include "readpvla/optimizer.hpp"

#include <cmath>

#include "readpvla/errors.hpp"

namespace readpvla {

void adamw_step(std::vector<double>& param, const std::vector<double>& grad,
                std::vector<double>& m, std::vector<double>& v,
                std::size_t step, const AdamWConfig& cfg) {
  if (param.size() != grad.size() || m.size() != param.size() ||
      v.size() != param.size()) {
    throw DimensionError("adamw: parameter, gradient, and state sizes differ");
  }
  if (step == 0) throw ConfigError("adamw: step counter must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] *= decay;
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

void AdamW::add_param(const std::string& name, Tensor param) {
  Slot slot;
  slot.name = name;
  slot.param = std::move(param);
  slot.m.assign(slot.param.numel(), 0.0);
  slot.v.assign(slot.param.numel(), 0.0);
  slots_.push_back(std::move(slot));
}

void AdamW::step() {
  // Validate every gradient before touching any parameter.
  for (const Slot& slot : slots_) {
    if (!slot.param.has_grad()) {
      throw ConfigError("adamw: no gradient recorded for " + slot.name);
    }
    for (double g : slot.param.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adamw: non-finite gradient in " + slot.name +
                           "; step aborted");
      }
    }
  }
  ++t_;
  for (Slot& slot : slots_) {
    adamw_step(slot.param.mutable_data(), slot.param.grad(), slot.m, slot.v,
               t_, cfg_);
  }
}

void AdamW::zero_grad() {
  for (Slot& slot : slots_) slot.param.zero_grad();
}

}  // namespace readpvla
