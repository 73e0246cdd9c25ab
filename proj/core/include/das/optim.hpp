#pragma once

#include <cstdint>
#include <vector>

#include "das/tensor.hpp"

namespace das {

/// Plain SGD. Frozen parameters are skipped.
class Sgd {
 public:
  Sgd(std::vector<Parameter> params, double lr);
  void step();
  void zero_grad();

 private:
  std::vector<Parameter> params_;
  double lr_;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay. Frozen parameters are skipped.
class AdamW {
 public:
  AdamW(std::vector<Parameter> params, AdamWConfig cfg);
  void step();
  void zero_grad();
  std::uint64_t step_count() const { return step_count_; }

 private:
  std::vector<Parameter> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t step_count_ = 0;
};

}  // namespace das
