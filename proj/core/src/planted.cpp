#include "das/planted.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "das/errors.hpp"
#include "das/optim.hpp"
#include "das/pipeline.hpp"
#include "das/text.hpp"

namespace das {

namespace {

using nlohmann::json;

constexpr std::size_t kOracleMaxModules = 12;
constexpr std::size_t kPretrainMaxEpochs = 400;
constexpr std::size_t kHealMaxRounds = 12;
constexpr double kAccuracyThreshold = 0.95;
constexpr double kHealShrink = 0.3;
constexpr double kClusterRadius = 2.0;
constexpr double kClusterStddev = 0.55;

constexpr std::uint64_t kDataTrainTag = 0x4454;
constexpr std::uint64_t kDataValTag = 0x4456;
constexpr std::uint64_t kDataTestTag = 0x4445;
constexpr std::uint64_t kNetTag = 0x4e45;
constexpr std::uint64_t kPretrainTag = 0x5054;
constexpr std::uint64_t kAdapterTag = 0x4144;
constexpr std::uint64_t kProbeTag = 0x5052;
constexpr std::uint64_t kOracleTag = 0x4f52;

Dataset gen_split(const PlantedSpec& spec,
                  const std::vector<std::vector<double>>& directions,
                  std::size_t size, Rng rng) {
  Dataset data;
  data.input_dim = spec.input_dim;
  data.classes = spec.classes;

  // Exact class balance: size/k per class, remainder to the lowest labels.
  std::vector<int> labels;
  labels.reserve(size);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::size_t count = size / spec.classes + (c < size % spec.classes);
    labels.insert(labels.end(), count, int(c));
  }
  rng.shuffle(labels);

  data.y = labels;
  data.x.reserve(size * spec.input_dim);
  for (int label : labels) {
    const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
    const auto& dir = directions[std::size_t(label)];
    for (std::size_t j = 0; j < spec.input_dim; ++j) {
      data.x.push_back(sign * kClusterRadius * dir[j] +
                       kClusterStddev * rng.gaussian());
    }
  }
  return data;
}

double train_accuracy_backbone(const SkippableNetwork& net,
                               const Dataset& data) {
  return evaluate([&](const Tensor& x) { return net.backbone_forward(x); },
                  data, 64)
      .accuracy;
}

// One epoch of full-backbone training; returns mean loss.
double backbone_epoch(SkippableNetwork& net, AdamW& opt, const Dataset& train,
                      std::size_t batch_size, Rng& rng) {
  BatchPlan plan(train.size(), batch_size);
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (const auto& batch : plan.epoch(rng)) {
    Tensor x = train.gather_x(batch);
    std::vector<int> y = train.gather_y(batch);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = softmax_cross_entropy(net.backbone_forward(x), y);
    if (!std::isfinite(loss.item())) {
      throw GenerationError("pretraining: non-finite loss");
    }
    tape.backward(loss);
    opt.step();
    net.zero_grad();
    loss_sum += loss.item();
    ++steps;
  }
  return loss_sum / double(steps);
}

double linear_probe_accuracy(const Dataset& train, Rng rng) {
  Linear probe;
  Tensor w = Tensor::zeros({train.input_dim, train.classes});
  for (double& v : w.values_mut()) {
    v = rng.gaussian() / std::sqrt(double(train.input_dim));
  }
  probe.w = Parameter(std::move(w));
  probe.b = Parameter(Tensor::zeros({train.classes}));
  AdamW opt({probe.w, probe.b}, {.lr = 0.05});

  Tensor x = train.all_x();
  for (std::size_t step = 0; step < 300; ++step) {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = softmax_cross_entropy(probe.forward(x), train.y);
    tape.backward(loss);
    opt.step();
    probe.w.zero_grad();
    probe.b.zero_grad();
  }
  return evaluate([&](const Tensor& in) { return probe.forward(in); }, train,
                  train.size())
      .accuracy;
}

}  // namespace

NetworkDims PlantedSpec::dims() const {
  return {input_dim, d, d_ff, h_adapt, h_skip, classes, n};
}

void PlantedSpec::validate() const {
  dims().validate();
  if (redundant.size() >= n) {
    throw ValidationError("planted spec: all blocks marked redundant");
  }
  for (std::size_t i : redundant) {
    if (i >= n) {
      throw ValidationError("planted spec: redundant index " +
                            std::to_string(i) + " outside [0, " +
                            std::to_string(n) + ")");
    }
  }
  if (train_size == 0 || val_size == 0 || test_size == 0) {
    throw ValidationError("planted spec: split sizes must be positive");
  }
  if (noise_scale <= 0.0 || noise_scale >= 1.0) {
    throw ValidationError("planted spec: noise_scale must be in (0, 1)");
  }
}

PlantedSpec PlantedSpec::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed planted spec: ") + e.what());
  }
  PlantedSpec spec;
  try {
    static const char* known[] = {"n",          "redundant",  "d",
                                  "d_ff",       "h_adapt",    "h_skip",
                                  "classes",    "input_dim",  "train_size",
                                  "val_size",   "test_size",  "noise_scale",
                                  "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for (const char* k : known) ok = ok || (it.key() == k);
      if (!ok) {
        throw ParseError("planted spec: unknown field '" + it.key() + "'");
      }
    }
    if (j.contains("n")) spec.n = j.at("n").get<std::size_t>();
    if (j.contains("redundant")) {
      spec.redundant = j.at("redundant").get<std::vector<std::size_t>>();
    }
    if (j.contains("d")) spec.d = j.at("d").get<std::size_t>();
    if (j.contains("d_ff")) spec.d_ff = j.at("d_ff").get<std::size_t>();
    if (j.contains("h_adapt")) spec.h_adapt = j.at("h_adapt").get<std::size_t>();
    if (j.contains("h_skip")) spec.h_skip = j.at("h_skip").get<std::size_t>();
    if (j.contains("classes")) spec.classes = j.at("classes").get<std::size_t>();
    if (j.contains("input_dim")) {
      spec.input_dim = j.at("input_dim").get<std::size_t>();
    }
    if (j.contains("train_size")) {
      spec.train_size = j.at("train_size").get<std::size_t>();
    }
    if (j.contains("val_size")) spec.val_size = j.at("val_size").get<std::size_t>();
    if (j.contains("test_size")) {
      spec.test_size = j.at("test_size").get<std::size_t>();
    }
    if (j.contains("noise_scale")) {
      spec.noise_scale = j.at("noise_scale").get<double>();
    }
    if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("planted spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

PlantedSpec PlantedSpec::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  try {
    return from_json_string(text);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

std::string PlantedSpec::to_json_string() const {
  json j;
  j["n"] = n;
  j["redundant"] = redundant;
  j["d"] = d;
  j["d_ff"] = d_ff;
  j["h_adapt"] = h_adapt;
  j["h_skip"] = h_skip;
  j["classes"] = classes;
  j["input_dim"] = input_dim;
  j["train_size"] = train_size;
  j["val_size"] = val_size;
  j["test_size"] = test_size;
  j["noise_scale"] = noise_scale;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

std::string GenStats::to_json_string() const {
  json j;
  j["pretrain_epochs"] = pretrain_epochs;
  j["pretrain_accuracy"] = pretrain_accuracy;
  j["planted_accuracy"] = planted_accuracy;
  j["probe_accuracy"] = probe_accuracy;
  j["contribution_ratios"] = contribution_ratios;
  return j.dump(2) + "\n";
}

DataSplits gen_dataset(const PlantedSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  // Class directions shared by all splits.
  Rng dir_rng = root.child(0x4449);
  std::vector<std::vector<double>> directions(spec.classes);
  for (auto& dir : directions) {
    dir.resize(spec.input_dim);
    double norm2 = 0.0;
    for (double& v : dir) {
      v = dir_rng.gaussian();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& v : dir) v *= inv;
  }
  DataSplits splits;
  splits.train = gen_split(spec, directions, spec.train_size,
                           root.child(kDataTrainTag));
  splits.val = gen_split(spec, directions, spec.val_size,
                         root.child(kDataValTag));
  splits.test = gen_split(spec, directions, spec.test_size,
                          root.child(kDataTestTag));
  return splits;
}

std::vector<double> block_contribution_ratios(const SkippableNetwork& net,
                                              const Tensor& x) {
  const std::size_t rows = x.rows();
  std::vector<double> ratios(net.n(), 0.0);
  Tensor h = net.embed().forward(x);
  for (std::size_t i = 0; i < net.n(); ++i) {
    Tensor b = net.block(i).forward(h);
    const std::size_t cols = h.cols();
    auto hv = h.values();
    auto bv = b.values();
    double ratio_sum = 0.0;
    for (std::size_t row = 0; row < rows; ++row) {
      double hn = 0.0, bn = 0.0;
      for (std::size_t jj = 0; jj < cols; ++jj) {
        hn += hv[row * cols + jj] * hv[row * cols + jj];
        bn += bv[row * cols + jj] * bv[row * cols + jj];
      }
      ratio_sum += std::sqrt(bn) / std::sqrt(hn);
    }
    ratios[i] = ratio_sum / double(rows);
    h = add(h, b);
  }
  return ratios;
}

PlantedBundle gen_pretrained(const PlantedSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  DataSplits data = gen_dataset(spec);

  Rng net_rng = root.child(kNetTag);
  SkippableNetwork net(spec.dims(), net_rng);

  std::vector<bool> planted(spec.n, false);
  for (std::size_t i : spec.redundant) planted[i] = true;

  GenStats stats;
  Rng train_rng = root.child(kPretrainTag);
  AdamW opt(net.backbone_params(), {.lr = 2e-3});

  // Phase 1: train the whole backbone to the accuracy threshold.
  double acc = 0.0;
  std::size_t epoch = 0;
  for (; epoch < kPretrainMaxEpochs; ++epoch) {
    backbone_epoch(net, opt, data.train, 32, train_rng);
    acc = train_accuracy_backbone(net, data.train);
    if (acc >= kAccuracyThreshold) break;
  }
  if (acc < kAccuracyThreshold) {
    throw GenerationError(
        "pretraining failed to reach accuracy " +
        format_double(kAccuracyThreshold) + " within " +
        std::to_string(kPretrainMaxEpochs) + " epochs (got " +
        format_double(acc) + "); re-seed");
  }
  stats.pretrain_epochs = epoch + 1;
  stats.pretrain_accuracy = acc;

  // Phase 2: shrink planted blocks stepwise, letting the rest of the
  // backbone recover in between, until their residual contribution sits
  // below noise_scale of the essential mean.
  if (!spec.redundant.empty()) {
    const std::size_t probe_rows = std::min<std::size_t>(100, data.val.size());
    std::vector<std::size_t> probe_idx(probe_rows);
    std::iota(probe_idx.begin(), probe_idx.end(), 0);
    Tensor probe_x = data.val.gather_x(probe_idx);

    std::vector<Parameter> recover_params;
    {
      recover_params.push_back(net.embed().w);
      recover_params.push_back(net.embed().b);
      for (std::size_t i = 0; i < spec.n; ++i) {
        if (planted[i]) continue;
        const ResidualBlock& b = net.block(i);
        recover_params.push_back(b.fc1.w);
        recover_params.push_back(b.fc1.b);
        recover_params.push_back(b.fc2.w);
        recover_params.push_back(b.fc2.b);
      }
      recover_params.push_back(net.head().w);
      recover_params.push_back(net.head().b);
    }

    auto target_ratio = [&](const std::vector<double>& ratios) {
      double essential_sum = 0.0;
      std::size_t essential_count = 0;
      for (std::size_t i = 0; i < spec.n; ++i) {
        if (!planted[i]) {
          essential_sum += ratios[i];
          ++essential_count;
        }
      }
      return spec.noise_scale * essential_sum / double(essential_count);
    };

    for (std::size_t round = 0; round < kHealMaxRounds; ++round) {
      std::vector<double> ratios = block_contribution_ratios(net, probe_x);
      const double target = target_ratio(ratios);
      bool done = true;
      for (std::size_t i : spec.redundant) {
        if (ratios[i] > target) {
          done = false;
          // Shrink at most kHealShrink per round; aim below target so the
          // verification pass has slack.
          const double factor = std::max(0.5 * target / ratios[i], kHealShrink);
          net.block(i).scale_output(factor);
        }
      }
      if (done) break;
      // Recovery: train everything except the planted blocks.
      AdamW recover_opt(recover_params, {.lr = 1e-3});
      for (std::size_t e = 0; e < 3; ++e) {
        BatchPlan plan(data.train.size(), 32);
        for (const auto& batch : plan.epoch(train_rng)) {
          Tensor x = data.train.gather_x(batch);
          std::vector<int> y = data.train.gather_y(batch);
          Tape tape;
          TapeScope scope(tape);
          Tensor loss = softmax_cross_entropy(net.backbone_forward(x), y);
          tape.backward(loss);
          recover_opt.step();
          net.zero_grad();
        }
      }
    }

    // Exact final trim, then verify.
    std::vector<double> ratios = block_contribution_ratios(net, probe_x);
    double target = target_ratio(ratios);
    for (std::size_t i : spec.redundant) {
      if (ratios[i] > 0.0 && ratios[i] > 0.5 * target) {
        net.block(i).scale_output(0.5 * target / ratios[i]);
      }
    }
    ratios = block_contribution_ratios(net, probe_x);
    target = target_ratio(ratios);
    for (std::size_t i : spec.redundant) {
      if (ratios[i] > target) {
        throw GenerationError("planting failed: block " + std::to_string(i) +
                              " contribution " + format_double(ratios[i]) +
                              " above target " + format_double(target));
      }
    }
    stats.contribution_ratios = ratios;
  } else {
    stats.contribution_ratios =
        block_contribution_ratios(net, data.val.all_x());
  }

  stats.planted_accuracy = train_accuracy_backbone(net, data.train);
  if (stats.planted_accuracy < kAccuracyThreshold - 0.05) {
    throw GenerationError("planting degraded train accuracy to " +
                          format_double(stats.planted_accuracy) + "; re-seed");
  }

  stats.probe_accuracy = linear_probe_accuracy(data.train, root.child(kProbeTag));
  if (stats.probe_accuracy >= stats.planted_accuracy) {
    throw GenerationError("task solvable by a linear probe (probe " +
                          format_double(stats.probe_accuracy) +
                          " vs network " +
                          format_double(stats.planted_accuracy) + "); re-seed");
  }

  net.freeze_blocks();
  Rng adapter_rng = root.child(kAdapterTag);
  net.attach_fresh_adapters(adapter_rng);

  return PlantedBundle{std::move(net), std::move(data), std::move(stats)};
}

// --- oracle ---

std::vector<std::vector<std::size_t>> enumerate_subsets(std::size_t n,
                                                        std::size_t m) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> current(m);
  // Standard lexicographic combination walk.
  if (m == 0) {
    out.push_back({});
    return out;
  }
  for (std::size_t i = 0; i < m; ++i) current[i] = i;
  while (true) {
    out.push_back(current);
    std::size_t i = m;
    while (i > 0 && current[i - 1] == n - m + (i - 1)) --i;
    if (i == 0) break;
    ++current[i - 1];
    for (std::size_t j = i; j < m; ++j) current[j] = current[j - 1] + 1;
  }
  return out;
}

const OracleEntry& OracleResult::best() const {
  if (ranking.empty()) throw UsageError("oracle result: empty ranking");
  return ranking.front();
}

std::size_t OracleResult::rank_of(const SkipMask& mask) const {
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    if (ranking[i].mask == mask) return i;
  }
  throw UsageError("oracle result: mask " + mask.to_string() +
                   " not in ranking");
}

OracleResult oracle_best_skip_set(const SkippableNetwork& net,
                                  const Dataset& train, const Dataset& val,
                                  std::size_t m, std::size_t budget_steps,
                                  std::size_t batch_size, std::uint64_t seed) {
  if (net.n() > kOracleMaxModules) {
    throw UsageError("oracle: n=" + std::to_string(net.n()) +
                     " exceeds the exhaustive cap of " +
                     std::to_string(kOracleMaxModules) +
                     "; use the sampled random-skip baseline instead");
  }
  if (m > net.n()) throw UsageError("oracle: m > n");

  Rng root = Rng(seed).child(kOracleTag);
  OracleResult result;
  result.m = m;
  result.budget_steps = budget_steps;

  const auto subsets = enumerate_subsets(net.n(), m);
  result.ranking.reserve(subsets.size());
  for (std::size_t rank = 0; rank < subsets.size(); ++rank) {
    SkipMask mask(net.n(), subsets[rank]);
    PrunedNetwork candidate = net.prune(mask);
    Rng sub_rng = root.child(rank + 1);
    candidate.attach_fresh_adapters(sub_rng);
    Rng train_rng = sub_rng.child(1);
    train_pruned(candidate, train, budget_steps, batch_size, 1e-3, 1e-3,
                 train_rng);
    EvalResult eval = evaluate_pruned(candidate, val, 64);
    result.ranking.push_back({mask, eval.loss, eval.accuracy});
  }
  std::stable_sort(result.ranking.begin(), result.ranking.end(),
                   [](const OracleEntry& a, const OracleEntry& b) {
                     return a.loss < b.loss;
                   });
  return result;
}

void write_oracle_csv(const OracleResult& result, std::ostream& out) {
  out << "subset,loss,accuracy\n";
  for (const OracleEntry& e : result.ranking) {
    out << e.mask.to_string() << ',' << format_double(e.loss) << ','
        << format_double(e.accuracy) << '\n';
  }
}

OracleResult load_oracle_csv(const std::string& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "subset,loss,accuracy") {
    throw ParseError(path + ": bad oracle CSV header");
  }
  OracleResult result;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != 3) throw ParseError(path + ": bad oracle CSV row");
    std::vector<std::size_t> idx;
    if (fields[0] != "-") {
      for (const std::string& part : split(fields[0], '|')) {
        idx.push_back(std::stoul(part));
      }
    }
    OracleEntry entry;
    entry.mask = SkipMask(n, idx);
    entry.loss = parse_double(fields[1]);
    entry.accuracy = parse_double(fields[2]);
    result.ranking.push_back(std::move(entry));
  }
  if (!result.ranking.empty()) result.m = result.ranking[0].mask.count();
  return result;
}

}  // namespace das
