#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>

#include "das/bandit.hpp"
#include "das/dataset.hpp"
#include "das/network.hpp"
#include "das/optim.hpp"

namespace das {

/// Hyperparameters of the warmup/search/finetune schedule.
struct SearchConfig {
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t c = 4;
  std::size_t interval = 10;
  std::size_t warmup_epochs = 1;
  std::size_t search_epochs = 2;
  std::size_t finetune_epochs = 10;
  std::size_t batch_size = 32;
  std::size_t validation_batch_size = 32;
  double lr_adapters = 1e-3;
  double lr_head = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
  static SearchConfig from_json_file(const std::string& path);
  static SearchConfig from_json_string(const std::string& text);
  std::string to_json_string() const;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct PhaseStats {
  double mean_train_loss = 0.0;
  EvalResult val;
};

struct RandomBaselineResult {
  std::size_t m = 0;
  std::vector<SkipMask> subsets;
  std::vector<EvalResult> results;  // test-set metrics per subset
  double mean_accuracy = 0.0;
  double stddev_accuracy = 0.0;  // population stddev across subsets
};

/// Everything a finished run reports. Wall-clock numbers stay out of the
/// JSON so identical configs produce identical bytes; they ride along in
/// the struct for the run manifest.
struct SearchReport {
  SearchConfig config;
  SkipMask final_mask;
  std::string trajectory_csv = "trajectory.csv";
  std::map<std::string, PhaseStats> phases;
  EvalResult test;
  std::uint64_t flop_full = 0;
  std::uint64_t flop_pruned = 0;
  double flop_saved_fraction = 0.0;
  std::size_t trainable_param_count = 0;
  std::size_t pruned_trainable_param_count = 0;
  std::size_t pruned_frozen_param_count = 0;
  std::optional<RandomBaselineResult> random_baseline;

  std::map<std::string, double> phase_seconds;  // not serialized

  std::string to_json_string() const;
  static SearchReport from_json_file(const std::string& path);
};

/// No-gradient mean loss and top-1 accuracy over a whole dataset.
EvalResult evaluate(const std::function<Tensor(const Tensor&)>& forward,
                    const Dataset& data, std::size_t batch_size);
EvalResult evaluate_masked(const SkippableNetwork& net, const SkipMask& mask,
                           const Dataset& data, std::size_t batch_size);
EvalResult evaluate_pruned(const PrunedNetwork& net, const Dataset& data,
                           std::size_t batch_size);

/// Trains a pruned network's adapters/head in place for `steps` optimizer
/// steps. Returns the mean training loss. Aborts on NaN.
double train_pruned(PrunedNetwork& net, const Dataset& train,
                    std::size_t steps, std::size_t batch_size,
                    double lr_adapters, double lr_head, Rng& rng);

/// Runs the three phases in order over a frozen-backbone network:
/// one epoch of random-mask warmup, bandit search with interval
/// validation, then pruning and finetuning of the selected subnetwork.
class TrainingPipeline {
 public:
  TrainingPipeline(SkippableNetwork& net, const Dataset& train,
                   const Dataset& val, const Dataset& test, SearchConfig cfg);

  /// Adapter/head training under uniformly random m-subsets; redundancy
  /// stays untouched.
  void warmup();

  /// Policy-sampled training plus candidate validation every `interval`
  /// steps. Returns the redundancy state with its full trajectory.
  const RedundancyState& search();

  /// Prunes to the selected mask, trains the remainder, evaluates.
  SearchReport finetune();

  /// DAS-vs-random comparison: prunes the post-search network to k random
  /// m-subsets, finetunes each with the finetune budget, evaluates on test.
  RandomBaselineResult run_random_baseline(std::size_t k, std::size_t m);

  const RedundancyState& redundancy() const;
  const SkipMask& final_mask() const;
  const PrunedNetwork& pruned() const;
  const SearchReport& report() const;

  /// Per-interval progress lines (CSV) go here when set.
  void set_progress_stream(std::ostream* out) { progress_ = out; }

 private:
  enum class Phase { kFresh, kWarmedUp, kSearched, kFinetuned };

  void require_phase(Phase expected, const char* op) const;
  double train_step_masked(const SkipMask& mask,
                           const std::vector<std::size_t>& batch,
                           std::size_t step_number);
  double candidate_loss(const SkipMask& mask, const Tensor& vx,
                        const std::vector<int>& vy) const;

  SkippableNetwork& net_;
  const Dataset& train_;
  const Dataset& val_;
  const Dataset& test_;
  SearchConfig cfg_;
  Phase phase_ = Phase::kFresh;

  Rng rng_shuffle_;
  Rng rng_policy_;
  Rng rng_val_;

  std::optional<AdamW> adapters_opt_;
  std::optional<AdamW> head_opt_;
  RedundancyState redundancy_;
  SkipMask final_mask_;
  std::optional<PrunedNetwork> pruned_;
  SearchReport report_;
  std::ostream* progress_ = nullptr;
};

}  // namespace das
