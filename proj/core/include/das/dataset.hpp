#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "das/rng.hpp"
#include "das/tensor.hpp"

namespace das {

/// Row-major feature matrix with integer class labels.
struct Dataset {
  std::size_t input_dim = 0;
  std::size_t classes = 0;
  std::vector<double> x;  // size() * input_dim
  std::vector<int> y;

  std::size_t size() const { return y.size(); }

  /// Feature rows for the given sample indices as a [k x input_dim] tensor.
  Tensor gather_x(const std::vector<std::size_t>& indices) const;
  std::vector<int> gather_y(const std::vector<std::size_t>& indices) const;

  Tensor all_x() const;
};

void save_dataset_csv(const Dataset& data, const std::string& path);
Dataset load_dataset_csv(const std::string& path, std::size_t classes);

/// Seeded epoch iteration: shuffled index permutation cut into fixed-size
/// batches; a trailing partial batch is dropped so every step sees the
/// same batch size.
class BatchPlan {
 public:
  BatchPlan(std::size_t dataset_size, std::size_t batch_size);

  std::size_t batches_per_epoch() const { return dataset_size_ / batch_size_; }

  /// Index lists for one epoch, freshly shuffled from rng.
  std::vector<std::vector<std::size_t>> epoch(Rng& rng) const;

  /// One uniformly drawn batch (with distinct indices).
  std::vector<std::size_t> sample_batch(Rng& rng) const;

 private:
  std::size_t dataset_size_;
  std::size_t batch_size_;
};

}  // namespace das
