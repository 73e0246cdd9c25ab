#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "das/network.hpp"
#include "das/rng.hpp"

namespace das {

/// The c candidate subnetworks validated in one interval, with their
/// rewards e^{-loss} once filled.
struct CandidateBatch {
  std::vector<SkipMask> masks;
  std::vector<double> rewards;

  bool filled() const { return rewards.size() == masks.size(); }
};

struct RedundancySnapshot {
  std::size_t step;
  std::vector<double> r;
};

/// Per-module redundancy degrees: the bandit's arm statistics. r starts at
/// zero everywhere and moves by mean-centered rewards; with a fixed skip
/// count per candidate the sum of r is conserved by every update.
class RedundancyState {
 public:
  explicit RedundancyState(std::size_t n);

  std::size_t n() const { return r_.size(); }
  const std::vector<double>& r() const { return r_; }
  std::size_t step() const { return step_; }
  const std::vector<RedundancySnapshot>& trajectory() const {
    return trajectory_;
  }

  /// Credits each candidate's centered reward v_h - mean(v) to every module
  /// it skipped, then appends a trajectory snapshot.
  void apply_update(const CandidateBatch& batch);

  /// Top-m modules by redundancy; lowest index wins ties. The deployed
  /// architecture's skip set.
  SkipMask final_skip_set(std::size_t m) const;

  /// CSV with header step,module_0,...,module_{n-1}.
  void write_trajectory_csv(std::ostream& out) const;

 private:
  std::vector<double> r_;
  std::size_t step_ = 0;
  std::vector<RedundancySnapshot> trajectory_;
};

/// One score per module: s_i ~ U(0, sigmoid(r_i)).
std::vector<double> sample_scores(const RedundancyState& state, Rng& rng);

/// The m largest-scoring modules; ties go to the lower index.
SkipMask select_skip_set(const std::vector<double>& scores, std::size_t m);

/// v = e^{-loss}; in (0, 1] for any nonnegative finite loss.
double reward_from_loss(double loss);

/// Draws a full candidate batch through the sampling policy.
CandidateBatch sample_candidates(const RedundancyState& state, std::size_t c,
                                 std::size_t m, Rng& rng);

}  // namespace das
