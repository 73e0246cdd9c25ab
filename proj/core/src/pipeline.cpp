#include "das/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "das/errors.hpp"
#include "das/text.hpp"

namespace das {

namespace {

using nlohmann::json;

constexpr std::uint64_t kShuffleTag = 0x5348;
constexpr std::uint64_t kPolicyTag = 0x504f;
constexpr std::uint64_t kValTag = 0x5641;
constexpr std::uint64_t kBaselineTag = 0x4241;

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

json config_to_json(const SearchConfig& cfg) {
  json j;
  j["n"] = cfg.n;
  j["m"] = cfg.m;
  j["c"] = cfg.c;
  j["interval"] = cfg.interval;
  j["warmup_epochs"] = cfg.warmup_epochs;
  j["search_epochs"] = cfg.search_epochs;
  j["finetune_epochs"] = cfg.finetune_epochs;
  j["batch_size"] = cfg.batch_size;
  j["validation_batch_size"] = cfg.validation_batch_size;
  j["lr_adapters"] = cfg.lr_adapters;
  j["lr_head"] = cfg.lr_head;
  j["seed"] = cfg.seed;
  return j;
}

SearchConfig config_from_json(const json& j) {
  static const char* known[] = {
      "n",           "m",             "c",
      "interval",    "warmup_epochs", "search_epochs",
      "finetune_epochs", "batch_size", "validation_batch_size",
      "lr_adapters", "lr_head",       "seed"};
  SearchConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || (it.key() == k);
    if (!ok) throw ParseError("config: unknown field '" + it.key() + "'");
  }
  if (!j.contains("n") || !j.contains("m")) {
    throw ParseError("config: fields 'n' and 'm' are required");
  }
  cfg.n = j.at("n").get<std::size_t>();
  cfg.m = j.at("m").get<std::size_t>();
  if (j.contains("c")) cfg.c = j.at("c").get<std::size_t>();
  if (j.contains("interval")) cfg.interval = j.at("interval").get<std::size_t>();
  if (j.contains("warmup_epochs"))
    cfg.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
  if (j.contains("search_epochs"))
    cfg.search_epochs = j.at("search_epochs").get<std::size_t>();
  if (j.contains("finetune_epochs"))
    cfg.finetune_epochs = j.at("finetune_epochs").get<std::size_t>();
  if (j.contains("batch_size"))
    cfg.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("validation_batch_size"))
    cfg.validation_batch_size = j.at("validation_batch_size").get<std::size_t>();
  if (j.contains("lr_adapters")) cfg.lr_adapters = j.at("lr_adapters").get<double>();
  if (j.contains("lr_head")) cfg.lr_head = j.at("lr_head").get<double>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

json eval_to_json(const EvalResult& e) {
  return json{{"loss", e.loss}, {"accuracy", e.accuracy}};
}

EvalResult eval_from_json(const json& j) {
  return {j.at("loss").get<double>(), j.at("accuracy").get<double>()};
}

}  // namespace

void SearchConfig::validate() const {
  if (n == 0) throw ValidationError("config: n must be positive");
  if (m > n) throw ValidationError("config: m exceeds n");
  if (c < 2) throw ValidationError("config: c must be at least 2");
  if (interval < 1) throw ValidationError("config: interval must be >= 1");
  if (batch_size == 0 || validation_batch_size == 0) {
    throw ValidationError("config: batch sizes must be positive");
  }
  if (lr_adapters <= 0.0 || lr_head <= 0.0) {
    throw ValidationError("config: learning rates must be positive");
  }
}

SearchConfig SearchConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("malformed JSON in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

SearchConfig SearchConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed config JSON: ") + e.what());
  }
  return config_from_json(j);
}

std::string SearchConfig::to_json_string() const {
  return config_to_json(*this).dump(2) + "\n";
}

std::string SearchReport::to_json_string() const {
  json j;
  j["config"] = config_to_json(config);
  j["final_mask"] = final_mask.skipped();
  j["trajectory_csv"] = trajectory_csv;
  json jp = json::object();
  for (const auto& [name, stats] : phases) {
    jp[name] = {{"mean_train_loss", stats.mean_train_loss},
                {"val", eval_to_json(stats.val)}};
  }
  j["phases"] = std::move(jp);
  j["test"] = eval_to_json(test);
  j["flop_full"] = flop_full;
  j["flop_pruned"] = flop_pruned;
  j["flop_saved_fraction"] = flop_saved_fraction;
  j["trainable_param_count"] = trainable_param_count;
  j["pruned_trainable_param_count"] = pruned_trainable_param_count;
  j["pruned_frozen_param_count"] = pruned_frozen_param_count;
  if (random_baseline) {
    json jb;
    jb["m"] = random_baseline->m;
    json subsets = json::array();
    for (const SkipMask& s : random_baseline->subsets) {
      subsets.push_back(s.to_string());
    }
    jb["subsets"] = std::move(subsets);
    json accs = json::array(), losses = json::array();
    for (const EvalResult& e : random_baseline->results) {
      accs.push_back(e.accuracy);
      losses.push_back(e.loss);
    }
    jb["accuracies"] = std::move(accs);
    jb["losses"] = std::move(losses);
    jb["mean_accuracy"] = random_baseline->mean_accuracy;
    jb["stddev_accuracy"] = random_baseline->stddev_accuracy;
    j["random_baseline"] = std::move(jb);
  }
  return j.dump(2) + "\n";
}

SearchReport SearchReport::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("malformed JSON in " + path + ": " + e.what());
  }
  SearchReport rep;
  try {
    rep.config = config_from_json(j.at("config"));
    rep.final_mask = SkipMask(rep.config.n,
                              j.at("final_mask").get<std::vector<std::size_t>>());
    rep.trajectory_csv = j.at("trajectory_csv").get<std::string>();
    for (auto it = j.at("phases").begin(); it != j.at("phases").end(); ++it) {
      PhaseStats ps;
      ps.mean_train_loss = it.value().at("mean_train_loss").get<double>();
      ps.val = eval_from_json(it.value().at("val"));
      rep.phases[it.key()] = ps;
    }
    rep.test = eval_from_json(j.at("test"));
    rep.flop_full = j.at("flop_full").get<std::uint64_t>();
    rep.flop_pruned = j.at("flop_pruned").get<std::uint64_t>();
    rep.flop_saved_fraction = j.at("flop_saved_fraction").get<double>();
    rep.trainable_param_count = j.at("trainable_param_count").get<std::size_t>();
    rep.pruned_trainable_param_count =
        j.at("pruned_trainable_param_count").get<std::size_t>();
    rep.pruned_frozen_param_count =
        j.at("pruned_frozen_param_count").get<std::size_t>();
    if (j.contains("random_baseline")) {
      const json& jb = j.at("random_baseline");
      RandomBaselineResult rb;
      rb.m = jb.at("m").get<std::size_t>();
      auto accs = jb.at("accuracies").get<std::vector<double>>();
      auto losses = jb.at("losses").get<std::vector<double>>();
      auto subsets = jb.at("subsets").get<std::vector<std::string>>();
      for (std::size_t i = 0; i < accs.size(); ++i) {
        std::vector<std::size_t> idx;
        if (subsets[i] != "-") {
          for (const std::string& part : split(subsets[i], '|')) {
            idx.push_back(std::stoul(part));
          }
        }
        rb.subsets.emplace_back(rep.config.n, idx);
        rb.results.push_back({losses[i], accs[i]});
      }
      rb.mean_accuracy = jb.at("mean_accuracy").get<double>();
      rb.stddev_accuracy = jb.at("stddev_accuracy").get<double>();
      rep.random_baseline = std::move(rb);
    }
  } catch (const json::exception& e) {
    throw ParseError("report " + path + ": " + e.what());
  }
  return rep;
}

// --- evaluation ---

EvalResult evaluate(const std::function<Tensor(const Tensor&)>& forward,
                    const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw UsageError("evaluate: empty dataset");
  if (batch_size == 0) throw UsageError("evaluate: zero batch size");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - start);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    Tensor x = data.gather_x(idx);
    std::vector<int> y = data.gather_y(idx);
    Tensor logits = forward(x);
    Tensor loss = softmax_cross_entropy(logits, y);
    loss_sum += loss.item() * double(count);
    auto lv = logits.values();
    const std::size_t classes = logits.cols();
    for (std::size_t i = 0; i < count; ++i) {
      const double* row = lv.data() + i * classes;
      std::size_t best = 0;
      for (std::size_t jj = 1; jj < classes; ++jj) {
        if (row[jj] > row[best]) best = jj;
      }
      if (best == std::size_t(y[i])) ++correct;
    }
  }
  return {loss_sum / double(data.size()),
          double(correct) / double(data.size())};
}

EvalResult evaluate_masked(const SkippableNetwork& net, const SkipMask& mask,
                           const Dataset& data, std::size_t batch_size) {
  return evaluate([&](const Tensor& x) { return net.forward(x, mask); }, data,
                  batch_size);
}

EvalResult evaluate_pruned(const PrunedNetwork& net, const Dataset& data,
                           std::size_t batch_size) {
  return evaluate([&](const Tensor& x) { return net.forward(x); }, data,
                  batch_size);
}

double train_pruned(PrunedNetwork& net, const Dataset& train,
                    std::size_t steps, std::size_t batch_size,
                    double lr_adapters, double lr_head, Rng& rng) {
  AdamW adapters_opt(net.adapter_params(), {.lr = lr_adapters});
  AdamW head_opt(net.head_params(), {.lr = lr_head});
  BatchPlan plan(train.size(), batch_size);
  double loss_sum = 0.0;
  std::size_t done = 0;
  while (done < steps) {
    for (const auto& batch : plan.epoch(rng)) {
      if (done == steps) break;
      Tensor x = train.gather_x(batch);
      std::vector<int> y = train.gather_y(batch);
      Tape tape;
      TapeScope scope(tape);
      Tensor loss = softmax_cross_entropy(net.forward(x), y);
      if (!std::isfinite(loss.item())) {
        throw NumericAbortError("finetune: non-finite loss at step " +
                                std::to_string(done + 1));
      }
      tape.backward(loss);
      adapters_opt.step();
      head_opt.step();
      net.zero_grad();
      loss_sum += loss.item();
      ++done;
    }
  }
  return steps > 0 ? loss_sum / double(steps) : 0.0;
}

// --- TrainingPipeline ---

TrainingPipeline::TrainingPipeline(SkippableNetwork& net, const Dataset& train,
                                   const Dataset& val, const Dataset& test,
                                   SearchConfig cfg)
    : net_(net),
      train_(train),
      val_(val),
      test_(test),
      cfg_(std::move(cfg)),
      rng_shuffle_(Rng(cfg_.seed).child(kShuffleTag)),
      rng_policy_(Rng(cfg_.seed).child(kPolicyTag)),
      rng_val_(Rng(cfg_.seed).child(kValTag)),
      redundancy_(cfg_.n),
      final_mask_(cfg_.n) {
  cfg_.validate();
  if (net_.n() != cfg_.n) {
    throw ValidationError("pipeline: config n=" + std::to_string(cfg_.n) +
                          " but network has " + std::to_string(net_.n()) +
                          " modules");
  }
  report_.config = cfg_;
  report_.trainable_param_count = net_.trainable_param_count();
}

void TrainingPipeline::require_phase(Phase expected, const char* op) const {
  if (phase_ != expected) {
    throw UsageError(std::string(op) +
                     ": phases must run in order warmup -> search -> finetune");
  }
}

double TrainingPipeline::train_step_masked(
    const SkipMask& mask, const std::vector<std::size_t>& batch,
    std::size_t step_number) {
  Tensor x = train_.gather_x(batch);
  std::vector<int> y = train_.gather_y(batch);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = softmax_cross_entropy(net_.forward(x, mask), y);
  if (!std::isfinite(loss.item())) {
    throw NumericAbortError("training: non-finite loss at step " +
                            std::to_string(step_number) + ", mask " +
                            mask.to_string());
  }
  tape.backward(loss);
  adapters_opt_->step();
  head_opt_->step();
  net_.zero_grad();
  return loss.item();
}

void TrainingPipeline::warmup() {
  require_phase(Phase::kFresh, "warmup");
  auto t0 = std::chrono::steady_clock::now();

  adapters_opt_.emplace(net_.adapter_params(), AdamWConfig{.lr = cfg_.lr_adapters});
  head_opt_.emplace(net_.head_params(), AdamWConfig{.lr = cfg_.lr_head});

  BatchPlan plan(train_.size(), cfg_.batch_size);
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < cfg_.warmup_epochs; ++epoch) {
    for (const auto& batch : plan.epoch(rng_shuffle_)) {
      SkipMask mask(cfg_.n, rng_policy_.sample_subset(cfg_.n, cfg_.m));
      loss_sum += train_step_masked(mask, batch, steps + 1);
      ++steps;
    }
  }

  PhaseStats stats;
  stats.mean_train_loss = steps > 0 ? loss_sum / double(steps) : 0.0;
  stats.val = evaluate_masked(net_, SkipMask(cfg_.n), val_,
                              cfg_.validation_batch_size);
  report_.phases["warmup"] = stats;
  report_.phase_seconds["warmup"] = elapsed_seconds(t0);
  phase_ = Phase::kWarmedUp;
}

double TrainingPipeline::candidate_loss(const SkipMask& mask, const Tensor& vx,
                                        const std::vector<int>& vy) const {
  // No tape active: pure inference.
  Tensor loss = softmax_cross_entropy(net_.forward(vx, mask), vy);
  return loss.item();
}

const RedundancyState& TrainingPipeline::search() {
  require_phase(Phase::kWarmedUp, "search");
  auto t0 = std::chrono::steady_clock::now();

  if (progress_ != nullptr) {
    *progress_ << "step,mean_train_loss";
    for (std::size_t h = 0; h < cfg_.c; ++h) *progress_ << ",reward_" << h;
    *progress_ << ",top_indices\n";
  }

  BatchPlan train_plan(train_.size(), cfg_.batch_size);
  BatchPlan val_plan(val_.size(), cfg_.validation_batch_size);
  double loss_sum = 0.0;
  double interval_loss_sum = 0.0;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg_.search_epochs; ++epoch) {
    for (const auto& batch : train_plan.epoch(rng_shuffle_)) {
      SkipMask mask = select_skip_set(sample_scores(redundancy_, rng_policy_),
                                      cfg_.m);
      const double step_loss = train_step_masked(mask, batch, step + 1);
      loss_sum += step_loss;
      interval_loss_sum += step_loss;
      ++step;

      if (step % cfg_.interval != 0) continue;

      // One validation batch shared by all c candidates.
      const auto val_idx = val_plan.sample_batch(rng_val_);
      Tensor vx = val_.gather_x(val_idx);
      std::vector<int> vy = val_.gather_y(val_idx);

      CandidateBatch cand = sample_candidates(redundancy_, cfg_.c, cfg_.m,
                                              rng_policy_);
      cand.rewards.reserve(cfg_.c);
      for (const SkipMask& cm : cand.masks) {
        const double vloss = candidate_loss(cm, vx, vy);
        if (!std::isfinite(vloss)) {
          throw NumericAbortError("search: non-finite validation loss at step " +
                                  std::to_string(step) + ", mask " +
                                  cm.to_string());
        }
        cand.rewards.push_back(reward_from_loss(vloss));
      }
      redundancy_.apply_update(cand);

      if (progress_ != nullptr) {
        *progress_ << step << ','
                   << format_double(interval_loss_sum / double(cfg_.interval));
        for (double v : cand.rewards) *progress_ << ',' << format_double(v);
        *progress_ << ',' << redundancy_.final_skip_set(cfg_.m).to_string()
                   << '\n';
      }
      interval_loss_sum = 0.0;
    }
  }

  PhaseStats stats;
  stats.mean_train_loss = step > 0 ? loss_sum / double(step) : 0.0;
  stats.val = evaluate_masked(net_, redundancy_.final_skip_set(cfg_.m), val_,
                              cfg_.validation_batch_size);
  report_.phases["search"] = stats;
  report_.phase_seconds["search"] = elapsed_seconds(t0);

  final_mask_ = redundancy_.final_skip_set(cfg_.m);
  phase_ = Phase::kSearched;
  return redundancy_;
}

SearchReport TrainingPipeline::finetune() {
  require_phase(Phase::kSearched, "finetune");
  auto t0 = std::chrono::steady_clock::now();

  pruned_ = net_.prune(final_mask_);
  BatchPlan plan(train_.size(), cfg_.batch_size);
  const std::size_t steps = cfg_.finetune_epochs * plan.batches_per_epoch();
  const double mean_loss = train_pruned(*pruned_, train_, steps,
                                        cfg_.batch_size, cfg_.lr_adapters,
                                        cfg_.lr_head, rng_shuffle_);

  PhaseStats stats;
  stats.mean_train_loss = mean_loss;
  stats.val = evaluate_pruned(*pruned_, val_, cfg_.validation_batch_size);
  report_.phases["finetune"] = stats;
  report_.phase_seconds["finetune"] = elapsed_seconds(t0);

  report_.final_mask = final_mask_;
  report_.test = evaluate_pruned(*pruned_, test_, cfg_.validation_batch_size);
  FlopReport fr = flop_report(net_.dims(), final_mask_);
  report_.flop_full = fr.full;
  report_.flop_pruned = fr.pruned;
  report_.flop_saved_fraction = fr.saved_fraction;
  report_.pruned_trainable_param_count = pruned_->trainable_param_count();
  report_.pruned_frozen_param_count = pruned_->frozen_param_count();

  phase_ = Phase::kFinetuned;
  return report_;
}

RandomBaselineResult TrainingPipeline::run_random_baseline(std::size_t k,
                                                           std::size_t m) {
  if (phase_ != Phase::kSearched && phase_ != Phase::kFinetuned) {
    throw UsageError("random baseline: requires a completed search");
  }
  Rng rng = Rng(cfg_.seed).child(kBaselineTag + m);
  BatchPlan plan(train_.size(), cfg_.batch_size);
  const std::size_t steps = cfg_.finetune_epochs * plan.batches_per_epoch();

  RandomBaselineResult out;
  out.m = m;
  for (std::size_t i = 0; i < k; ++i) {
    SkipMask mask(cfg_.n, rng.sample_subset(cfg_.n, m));
    PrunedNetwork candidate = net_.prune(mask);
    Rng train_rng = rng.child(i + 1);
    train_pruned(candidate, train_, steps, cfg_.batch_size, cfg_.lr_adapters,
                 cfg_.lr_head, train_rng);
    out.subsets.push_back(mask);
    out.results.push_back(
        evaluate_pruned(candidate, test_, cfg_.validation_batch_size));
  }

  double mean = 0.0;
  for (const EvalResult& e : out.results) mean += e.accuracy;
  mean /= double(k);
  double var = 0.0;
  for (const EvalResult& e : out.results) {
    var += (e.accuracy - mean) * (e.accuracy - mean);
  }
  out.mean_accuracy = mean;
  out.stddev_accuracy = std::sqrt(var / double(k));
  return out;
}

const RedundancyState& TrainingPipeline::redundancy() const {
  return redundancy_;
}

const SkipMask& TrainingPipeline::final_mask() const {
  if (phase_ == Phase::kFresh || phase_ == Phase::kWarmedUp) {
    throw UsageError("final_mask: search has not run");
  }
  return final_mask_;
}

const PrunedNetwork& TrainingPipeline::pruned() const {
  if (!pruned_) throw UsageError("pruned: finetune has not run");
  return *pruned_;
}

const SearchReport& TrainingPipeline::report() const { return report_; }

}  // namespace das
