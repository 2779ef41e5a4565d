#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "readpvla/tensor.hpp"

namespace readpvla {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One decoupled-weight-decay step on a raw parameter/gradient pair:
// p <- p * (1 - lr*wd), then the bias-corrected adaptive update.
// `step` is the 1-based step counter after this update.
void adamw_step(std::vector<double>& param, const std::vector<double>& grad,
                std::vector<double>& m, std::vector<double>& v,
                std::size_t step, const AdamWConfig& cfg);

// Holds moment state for a set of registered tensors. Non-finite gradients
// abort the whole step before any parameter moves.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void add_param(const std::string& name, Tensor param);
  void step();
  void zero_grad();
  std::size_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

}  // namespace readpvla
