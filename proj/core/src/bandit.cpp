#include "das/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "das/errors.hpp"
#include "das/text.hpp"

namespace das {

namespace {

std::vector<std::size_t> top_m_indices(const std::vector<double>& values,
                                       std::size_t m) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return values[a] > values[b];
  });
  idx.resize(m);
  return idx;
}

}  // namespace

RedundancyState::RedundancyState(std::size_t n) : r_(n, 0.0) {
  if (n == 0) throw UsageError("redundancy state: n must be positive");
}

void RedundancyState::apply_update(const CandidateBatch& batch) {
  if (!batch.filled()) {
    throw UsageError("redundancy update: rewards not filled");
  }
  if (batch.masks.empty()) {
    throw UsageError("redundancy update: empty candidate batch");
  }
  const std::size_t m = batch.masks[0].count();
  for (const SkipMask& mask : batch.masks) {
    if (mask.n() != n()) {
      throw UsageError("redundancy update: mask size mismatch");
    }
    if (mask.count() != m) {
      throw UsageError("redundancy update: candidates must share skip count");
    }
  }
  double mean = 0.0;
  for (double v : batch.rewards) {
    if (!std::isfinite(v)) {
      throw NumericAbortError("redundancy update: non-finite reward");
    }
    if (v <= 0.0 || v > 1.0) {
      throw UsageError("redundancy update: reward " + format_double(v) +
                       " outside (0, 1]");
    }
    mean += v;
  }
  mean /= double(batch.rewards.size());

  for (std::size_t h = 0; h < batch.masks.size(); ++h) {
    const double delta = batch.rewards[h] - mean;
    for (std::size_t i : batch.masks[h].skipped()) r_[i] += delta;
  }
  ++step_;
  trajectory_.push_back({step_, r_});
}

SkipMask RedundancyState::final_skip_set(std::size_t m) const {
  if (m > n()) throw UsageError("final_skip_set: m > n");
  return SkipMask(n(), top_m_indices(r_, m));
}

void RedundancyState::write_trajectory_csv(std::ostream& out) const {
  out << "step";
  for (std::size_t i = 0; i < n(); ++i) out << ",module_" << i;
  out << '\n';
  for (const RedundancySnapshot& snap : trajectory_) {
    out << snap.step;
    for (double v : snap.r) out << ',' << format_double(v);
    out << '\n';
  }
}

std::vector<double> sample_scores(const RedundancyState& state, Rng& rng) {
  std::vector<double> s(state.n());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform(0.0, sigmoid(state.r()[i]));
  }
  return s;
}

SkipMask select_skip_set(const std::vector<double>& scores, std::size_t m) {
  if (m > scores.size()) {
    throw UsageError("select_skip_set: m=" + std::to_string(m) + " exceeds n=" +
                     std::to_string(scores.size()));
  }
  return SkipMask(scores.size(), top_m_indices(scores, m));
}

double reward_from_loss(double loss) {
  if (std::isnan(loss)) {
    throw NumericAbortError("reward: NaN validation loss");
  }
  return std::exp(-loss);
}

CandidateBatch sample_candidates(const RedundancyState& state, std::size_t c,
                                 std::size_t m, Rng& rng) {
  CandidateBatch batch;
  batch.masks.reserve(c);
  for (std::size_t h = 0; h < c; ++h) {
    batch.masks.push_back(select_skip_set(sample_scores(state, rng), m));
  }
  return batch;
}

}  // namespace das
