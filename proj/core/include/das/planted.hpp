#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "das/dataset.hpp"
#include "das/network.hpp"

namespace das {

/// Recipe for a synthetic pretrained network with known-redundant blocks
/// and a matching classification task.
struct PlantedSpec {
  std::size_t n = 8;
  std::vector<std::size_t> redundant;
  std::size_t d = 64;
  std::size_t d_ff = 256;
  std::size_t h_adapt = 8;
  std::size_t h_skip = 16;
  std::size_t classes = 4;
  std::size_t input_dim = 16;
  std::size_t train_size = 512;
  std::size_t val_size = 256;
  std::size_t test_size = 512;
  double noise_scale = 0.05;
  std::uint64_t seed = 0;

  NetworkDims dims() const;
  void validate() const;
  static PlantedSpec from_json_file(const std::string& path);
  static PlantedSpec from_json_string(const std::string& text);
  std::string to_json_string() const;
};

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

struct GenStats {
  std::size_t pretrain_epochs = 0;
  double pretrain_accuracy = 0.0;      // train accuracy before planting
  double planted_accuracy = 0.0;       // train accuracy after planting
  double probe_accuracy = 0.0;         // linear probe on raw inputs
  std::vector<double> contribution_ratios;  // per block, after planting

  std::string to_json_string() const;
};

struct PlantedBundle {
  SkippableNetwork net;
  DataSplits data;
  GenStats stats;
};

/// Gaussian-mixture classification data. Each class owns a mirrored pair
/// of clusters (+/- its direction vector), so no linear map solves the
/// task; splits are disjoint and class-balanced to within one sample.
DataSplits gen_dataset(const PlantedSpec& spec);

/// Mean per-sample ||block_i(h)|| / ||h|| at block i's chain position.
std::vector<double> block_contribution_ratios(const SkippableNetwork& net,
                                              const Tensor& x);

/// Full generation flow: pretrain the backbone on the generated task,
/// shrink the planted blocks' residual contribution below noise_scale of
/// the essential mean (with recovery training in between), verify a linear
/// probe underperforms the network, freeze, attach fresh adapters.
PlantedBundle gen_pretrained(const PlantedSpec& spec);

struct OracleEntry {
  SkipMask mask;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Exhaustive ranking of every m-subset by validation loss.
struct OracleResult {
  std::size_t m = 0;
  std::size_t budget_steps = 0;
  std::vector<OracleEntry> ranking;  // ascending by loss

  const OracleEntry& best() const;
  /// Position of the mask in the ranking (0 = best).
  std::size_t rank_of(const SkipMask& mask) const;
};

/// For every m-subset of blocks: fresh zero-init adapters, a short
/// finetune on the training split, then loss/accuracy on the validation
/// split. n is capped at 12 to keep enumeration tractable.
OracleResult oracle_best_skip_set(const SkippableNetwork& net,
                                  const Dataset& train, const Dataset& val,
                                  std::size_t m, std::size_t budget_steps,
                                  std::size_t batch_size, std::uint64_t seed);

void write_oracle_csv(const OracleResult& result, std::ostream& out);
OracleResult load_oracle_csv(const std::string& path, std::size_t n);

/// Lexicographic enumeration of all m-subsets of [0, n).
std::vector<std::vector<std::size_t>> enumerate_subsets(std::size_t n,
                                                        std::size_t m);

}  // namespace das
