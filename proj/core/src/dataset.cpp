#include "das/dataset.hpp"

#include <fstream>

#include "das/errors.hpp"
#include "das/text.hpp"

namespace das {

Tensor Dataset::gather_x(const std::vector<std::size_t>& indices) const {
  std::vector<double> out;
  out.reserve(indices.size() * input_dim);
  for (std::size_t idx : indices) {
    if (idx >= size()) throw UsageError("dataset: index out of range");
    const double* row = x.data() + idx * input_dim;
    out.insert(out.end(), row, row + input_dim);
  }
  return Tensor({indices.size(), input_dim}, std::move(out));
}

std::vector<int> Dataset::gather_y(
    const std::vector<std::size_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(y.at(idx));
  return out;
}

Tensor Dataset::all_x() const {
  return Tensor({size(), input_dim}, x);
}

void save_dataset_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  for (std::size_t j = 0; j < data.input_dim; ++j) out << 'x' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < data.input_dim; ++j) {
      out << format_double(data.x[i * data.input_dim + j]) << ',';
    }
    out << data.y[i] << '\n';
  }
}

Dataset load_dataset_csv(const std::string& path, std::size_t classes) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  const std::size_t cols = split(line, ',').size();
  if (cols < 2) throw ParseError(path + ": expected feature columns + label");

  Dataset data;
  data.input_dim = cols - 1;
  data.classes = classes;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != cols) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": wrong column count");
    }
    try {
      for (std::size_t j = 0; j < data.input_dim; ++j) {
        data.x.push_back(parse_double(fields[j]));
      }
      int label = std::stoi(fields.back());
      if (label < 0 || std::size_t(label) >= classes) {
        throw ValidationError(path + ":" + std::to_string(lineno) +
                              ": label outside [0, " + std::to_string(classes) +
                              ")");
      }
      data.y.push_back(label);
    } catch (const std::invalid_argument& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return data;
}

BatchPlan::BatchPlan(std::size_t dataset_size, std::size_t batch_size)
    : dataset_size_(dataset_size), batch_size_(batch_size) {
  if (batch_size == 0 || batch_size > dataset_size) {
    throw ValidationError("batch plan: batch size " +
                          std::to_string(batch_size) + " for dataset of " +
                          std::to_string(dataset_size));
  }
}

std::vector<std::vector<std::size_t>> BatchPlan::epoch(Rng& rng) const {
  std::vector<std::size_t> perm(dataset_size_);
  for (std::size_t i = 0; i < dataset_size_; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<std::vector<std::size_t>> batches;
  batches.reserve(batches_per_epoch());
  for (std::size_t b = 0; b < batches_per_epoch(); ++b) {
    batches.emplace_back(perm.begin() + b * batch_size_,
                         perm.begin() + (b + 1) * batch_size_);
  }
  return batches;
}

std::vector<std::size_t> BatchPlan::sample_batch(Rng& rng) const {
  return rng.sample_subset(dataset_size_, batch_size_);
}

}  // namespace das
