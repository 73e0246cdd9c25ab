// Command-line front end: generate planted benchmarks, run the
// warmup/search/finetune pipeline, run the exhaustive oracle, evaluate
// checkpoints, and aggregate run reports.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "das/bandit.hpp"
#include "das/dataset.hpp"
#include "das/errors.hpp"
#include "das/manifest.hpp"
#include "das/network.hpp"
#include "das/pipeline.hpp"
#include "das/planted.hpp"
#include "das/text.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitParse = 2;
constexpr int kExitValidation = 3;
constexpr int kExitNumericAbort = 4;
constexpr int kExitGeneration = 5;

// Relative output dirs resolve under DAS_OUTPUT_ROOT when it is set.
std::string resolve_out_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_absolute()) return p.string();
  const char* root = std::getenv("DAS_OUTPUT_ROOT");
  if (root != nullptr && *root != '\0') return (fs::path(root) / p).string();
  return p.string();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw das::ValidationError("cannot write " + path);
  out << content;
}

std::string data_file(const std::string& data_dir, const char* name) {
  return (fs::path(data_dir) / name).string();
}

void hash_output(das::RunManifest& manifest, const std::string& out_dir,
                 const std::string& filename) {
  manifest.outputs[filename] =
      das::git_blob_sha1_file((fs::path(out_dir) / filename).string());
}

struct LoadedData {
  das::Dataset train;
  das::Dataset val;
  das::Dataset test;
};

LoadedData load_data_dir(const std::string& data_dir, std::size_t classes,
                         std::size_t input_dim) {
  LoadedData data;
  data.train = das::load_dataset_csv(data_file(data_dir, "train.csv"), classes);
  data.val = das::load_dataset_csv(data_file(data_dir, "val.csv"), classes);
  data.test = das::load_dataset_csv(data_file(data_dir, "test.csv"), classes);
  for (const das::Dataset* d : {&data.train, &data.val, &data.test}) {
    if (d->input_dim != input_dim) {
      throw das::ValidationError(
          "dataset input_dim " + std::to_string(d->input_dim) +
          " does not match checkpoint input_dim " + std::to_string(input_dim));
    }
  }
  return data;
}

int cmd_gen(const std::string& spec_path, const std::string& out_dir_arg) {
  const std::string out_dir = resolve_out_dir(out_dir_arg);
  fs::create_directories(out_dir);
  das::DirLock lock(out_dir);

  das::RunManifest manifest;
  manifest.command = "gen";
  manifest.args = {"--spec", spec_path, "--out", out_dir_arg};
  manifest.output_dir = out_dir;
  manifest.started_at = das::iso8601_utc_now();
  manifest.inputs[spec_path] = das::git_blob_sha1_file(spec_path);

  das::PlantedSpec spec = das::PlantedSpec::from_json_file(spec_path);
  manifest.seed = spec.seed;
  das::PlantedBundle bundle = das::gen_pretrained(spec);

  das::save_checkpoint(bundle.net,
                       (fs::path(out_dir) / "checkpoint.json").string());
  das::save_dataset_csv(bundle.data.train,
                        (fs::path(out_dir) / "train.csv").string());
  das::save_dataset_csv(bundle.data.val,
                        (fs::path(out_dir) / "val.csv").string());
  das::save_dataset_csv(bundle.data.test,
                        (fs::path(out_dir) / "test.csv").string());
  write_file((fs::path(out_dir) / "planted_spec.json").string(),
             spec.to_json_string());
  write_file((fs::path(out_dir) / "gen_stats.json").string(),
             bundle.stats.to_json_string());

  for (const char* f : {"checkpoint.json", "train.csv", "val.csv", "test.csv",
                        "planted_spec.json", "gen_stats.json"}) {
    hash_output(manifest, out_dir, f);
  }
  manifest.finished_at = das::iso8601_utc_now();
  manifest.write((fs::path(out_dir) / "manifest.json").string());

  std::cout << "generated benchmark in " << out_dir << " (pretrain acc "
            << das::format_double(bundle.stats.pretrain_accuracy)
            << ", planted acc "
            << das::format_double(bundle.stats.planted_accuracy)
            << ", probe acc "
            << das::format_double(bundle.stats.probe_accuracy) << ")\n";
  return 0;
}

int cmd_search(const std::string& config_path, const std::string& ckpt_path,
               const std::string& data_dir, const std::string& out_dir_arg,
               std::optional<std::size_t> skip_override,
               std::optional<std::size_t> candidates_override,
               std::optional<std::size_t> interval_override,
               std::optional<std::uint64_t> seed_override,
               std::size_t random_baseline) {
  das::SearchConfig cfg = das::SearchConfig::from_json_file(config_path);
  if (skip_override) cfg.m = *skip_override;
  if (candidates_override) cfg.c = *candidates_override;
  if (interval_override) cfg.interval = *interval_override;
  if (seed_override) cfg.seed = *seed_override;
  cfg.validate();

  if (das::checkpoint_is_pruned(ckpt_path)) {
    throw das::ValidationError("search requires a full checkpoint, got a "
                               "pruned export: " + ckpt_path);
  }
  das::SkippableNetwork net = das::load_checkpoint(ckpt_path);
  if (net.n() != cfg.n) {
    throw das::ValidationError("config n=" + std::to_string(cfg.n) +
                               " does not match checkpoint n=" +
                               std::to_string(net.n()));
  }

  LoadedData data = load_data_dir(data_dir, net.dims().classes,
                                  net.dims().input_dim);

  const std::string out_dir = resolve_out_dir(out_dir_arg);
  fs::create_directories(out_dir);
  das::DirLock lock(out_dir);

  das::RunManifest manifest;
  manifest.command = "search";
  manifest.args = {"--config", config_path, "--checkpoint", ckpt_path,
                   "--data", data_dir, "--out", out_dir_arg};
  manifest.seed = cfg.seed;
  manifest.output_dir = out_dir;
  manifest.started_at = das::iso8601_utc_now();
  manifest.inputs[config_path] = das::git_blob_sha1_file(config_path);
  manifest.inputs[ckpt_path] = das::git_blob_sha1_file(ckpt_path);
  for (const char* f : {"train.csv", "val.csv", "test.csv"}) {
    manifest.inputs[data_file(data_dir, f)] =
        das::git_blob_sha1_file(data_file(data_dir, f));
  }

  std::ofstream progress((fs::path(out_dir) / "progress.log").string(),
                         std::ios::binary);
  das::TrainingPipeline pipeline(net, data.train, data.val, data.test, cfg);
  pipeline.set_progress_stream(&progress);

  pipeline.warmup();
  std::cout << "warmup done (val acc "
            << das::format_double(
                   pipeline.report().phases.at("warmup").val.accuracy)
            << ")\n";
  pipeline.search();
  std::cout << "search done (mask " << pipeline.final_mask().to_string()
            << ")\n";
  das::SearchReport report = pipeline.finetune();
  std::cout << "finetune done (test acc "
            << das::format_double(report.test.accuracy) << ", flops saved "
            << das::format_double(report.flop_saved_fraction) << ")\n";

  if (random_baseline > 0) {
    report.random_baseline =
        pipeline.run_random_baseline(random_baseline, cfg.m);
    std::ostringstream rb_csv;
    rb_csv << "subset,loss,accuracy\n";
    for (std::size_t i = 0; i < report.random_baseline->subsets.size(); ++i) {
      rb_csv << report.random_baseline->subsets[i].to_string() << ','
             << das::format_double(report.random_baseline->results[i].loss)
             << ','
             << das::format_double(
                    report.random_baseline->results[i].accuracy)
             << '\n';
    }
    write_file((fs::path(out_dir) / "random_baseline.csv").string(),
               rb_csv.str());
  }

  {
    std::ostringstream traj;
    pipeline.redundancy().write_trajectory_csv(traj);
    write_file((fs::path(out_dir) / "trajectory.csv").string(), traj.str());
  }
  write_file((fs::path(out_dir) / "report.json").string(),
             report.to_json_string());
  das::save_pruned_checkpoint(
      pipeline.pruned(), (fs::path(out_dir) / "pruned_checkpoint.json").string());

  progress.close();
  manifest.phase_seconds = report.phase_seconds;
  for (const char* f : {"trajectory.csv", "report.json",
                        "pruned_checkpoint.json", "progress.log"}) {
    hash_output(manifest, out_dir, f);
  }
  if (random_baseline > 0) hash_output(manifest, out_dir, "random_baseline.csv");
  manifest.finished_at = das::iso8601_utc_now();
  manifest.write((fs::path(out_dir) / "manifest.json").string());
  return 0;
}

int cmd_oracle(const std::string& ckpt_path, const std::string& data_dir,
               std::size_t m, const std::string& out_dir_arg,
               std::size_t budget, std::size_t batch_size,
               std::uint64_t seed) {
  das::SkippableNetwork net = das::load_checkpoint(ckpt_path);
  LoadedData data = load_data_dir(data_dir, net.dims().classes,
                                  net.dims().input_dim);

  const std::string out_dir = resolve_out_dir(out_dir_arg);
  fs::create_directories(out_dir);
  das::DirLock lock(out_dir);

  das::RunManifest manifest;
  manifest.command = "oracle";
  manifest.args = {"--checkpoint", ckpt_path, "--data", data_dir, "--skip",
                   std::to_string(m), "--out", out_dir_arg};
  manifest.seed = seed;
  manifest.output_dir = out_dir;
  manifest.started_at = das::iso8601_utc_now();
  manifest.inputs[ckpt_path] = das::git_blob_sha1_file(ckpt_path);
  for (const char* f : {"train.csv", "val.csv"}) {
    manifest.inputs[data_file(data_dir, f)] =
        das::git_blob_sha1_file(data_file(data_dir, f));
  }

  das::OracleResult result = das::oracle_best_skip_set(
      net, data.train, data.val, m, budget, batch_size, seed);

  std::ostringstream csv;
  das::write_oracle_csv(result, csv);
  write_file((fs::path(out_dir) / "oracle.csv").string(), csv.str());

  hash_output(manifest, out_dir, "oracle.csv");
  manifest.finished_at = das::iso8601_utc_now();
  manifest.write((fs::path(out_dir) / "manifest.json").string());

  std::cout << "oracle best " << result.best().mask.to_string() << " (loss "
            << das::format_double(result.best().loss) << ", acc "
            << das::format_double(result.best().accuracy) << ") over "
            << result.ranking.size() << " subsets\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& split, const std::string& mask_arg,
             std::size_t batch_size) {
  das::EvalResult result;
  if (das::checkpoint_is_pruned(ckpt_path)) {
    if (!mask_arg.empty()) {
      throw das::ValidationError(
          "--mask applies to full checkpoints; this one is already pruned");
    }
    das::PrunedNetwork net = das::load_pruned_checkpoint(ckpt_path);
    das::Dataset data = das::load_dataset_csv(
        data_file(data_dir, (split + ".csv").c_str()), net.dims().classes);
    result = das::evaluate_pruned(net, data, batch_size);
  } else {
    das::SkippableNetwork net = das::load_checkpoint(ckpt_path);
    das::Dataset data = das::load_dataset_csv(
        data_file(data_dir, (split + ".csv").c_str()), net.dims().classes);
    std::vector<std::size_t> idx;
    if (!mask_arg.empty() && mask_arg != "-") {
      for (const std::string& part : das::split(mask_arg, '|')) {
        idx.push_back(std::stoul(part));
      }
    }
    das::SkipMask mask(net.n(), idx);
    result = das::evaluate_masked(net, mask, data, batch_size);
  }
  std::cout << "{\"loss\": " << das::format_double(result.loss)
            << ", \"accuracy\": " << das::format_double(result.accuracy)
            << "}\n";
  return 0;
}

struct RunRow {
  std::string run;
  das::SearchReport report;
};

int cmd_report(const std::vector<std::string>& run_dirs,
               const std::string& out_dir_arg) {
  std::vector<std::string> missing;
  std::vector<RunRow> rows;
  for (const std::string& dir : run_dirs) {
    const std::string path = (fs::path(dir) / "report.json").string();
    if (!fs::exists(path)) {
      missing.push_back(path);
      continue;
    }
    rows.push_back({dir, das::SearchReport::from_json_file(path)});
  }
  if (!missing.empty()) {
    std::string what = "missing report files:";
    for (const std::string& p : missing) what += " " + p;
    throw das::ValidationError(what);
  }
  if (rows.empty()) {
    throw das::ValidationError("report: at least one run directory required");
  }

  std::stable_sort(rows.begin(), rows.end(),
                   [](const RunRow& a, const RunRow& b) {
                     if (a.report.config.m != b.report.config.m) {
                       return a.report.config.m < b.report.config.m;
                     }
                     return a.report.config.seed < b.report.config.seed;
                   });

  const std::string out_dir = resolve_out_dir(out_dir_arg);
  fs::create_directories(out_dir);

  das::RunManifest manifest;
  manifest.command = "report";
  manifest.output_dir = out_dir;
  manifest.started_at = das::iso8601_utc_now();
  for (const RunRow& row : rows) {
    const std::string path = (fs::path(row.run) / "report.json").string();
    manifest.inputs[path] = das::git_blob_sha1_file(path);
    manifest.args.push_back(row.run);
  }

  std::ostringstream csv;
  csv << "run,seed,m,final_mask,test_accuracy,test_loss,flop_saved_fraction,"
         "trainable_param_count\n";
  std::ostringstream md;
  md << "| m | seed | final mask | test accuracy | FLOPs saved | trainable "
        "params |\n";
  md << "|---|------|------------|---------------|-------------|-----------"
        "-------|\n";
  for (const RunRow& row : rows) {
    const das::SearchReport& r = row.report;
    csv << row.run << ',' << r.config.seed << ',' << r.config.m << ','
        << r.final_mask.to_string() << ','
        << das::format_double(r.test.accuracy) << ','
        << das::format_double(r.test.loss) << ','
        << das::format_double(r.flop_saved_fraction) << ','
        << r.trainable_param_count << '\n';
    md << "| " << r.config.m << " | " << r.config.seed << " | "
       << r.final_mask.to_string() << " | "
       << das::format_double(r.test.accuracy) << " | "
       << das::format_double(r.flop_saved_fraction) << " | "
       << r.trainable_param_count << " |\n";
  }
  write_file((fs::path(out_dir) / "summary.csv").string(), csv.str());
  write_file((fs::path(out_dir) / "summary.md").string(), md.str());

  // DAS-vs-random comparison, recomputed from each run's raw per-subset CSV
  // and cross-checked against the report's aggregate.
  std::ostringstream cmp;
  cmp << "run,seed,m,das_accuracy,random_mean_accuracy,"
         "random_stddev_accuracy,n_random\n";
  bool any_baseline = false;
  for (const RunRow& row : rows) {
    if (!row.report.random_baseline) continue;
    any_baseline = true;
    const std::string raw_path =
        (fs::path(row.run) / "random_baseline.csv").string();
    if (!fs::exists(raw_path)) {
      throw das::ValidationError("missing raw baseline CSV: " + raw_path);
    }
    std::ifstream raw(raw_path);
    std::string line;
    std::getline(raw, line);  // header
    std::vector<double> accs;
    while (std::getline(raw, line)) {
      if (line.empty()) continue;
      auto fields = das::split(line, ',');
      if (fields.size() != 3) {
        throw das::ParseError(raw_path + ": bad row '" + line + "'");
      }
      accs.push_back(das::parse_double(fields[2]));
    }
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= double(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    const double stddev = std::sqrt(var / double(accs.size()));
    if (std::abs(mean - row.report.random_baseline->mean_accuracy) > 1e-12) {
      throw das::ValidationError(
          row.run + ": report baseline mean disagrees with raw CSV");
    }
    cmp << row.run << ',' << row.report.config.seed << ','
        << row.report.random_baseline->m << ','
        << das::format_double(row.report.test.accuracy) << ','
        << das::format_double(mean) << ',' << das::format_double(stddev)
        << ',' << accs.size() << '\n';
  }
  if (any_baseline) {
    write_file((fs::path(out_dir) / "random_comparison.csv").string(),
               cmp.str());
  }

  hash_output(manifest, out_dir, "summary.csv");
  hash_output(manifest, out_dir, "summary.md");
  if (any_baseline) hash_output(manifest, out_dir, "random_comparison.csv");
  manifest.finished_at = das::iso8601_utc_now();
  manifest.write((fs::path(out_dir) / "report_manifest.json").string());

  std::cout << "aggregated " << rows.size() << " runs into " << out_dir
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic architecture skipping for frozen residual networks"};
  app.require_subcommand(1);

  // gen
  std::string gen_spec, gen_out;
  CLI::App* gen = app.add_subcommand(
      "gen", "generate a planted benchmark (checkpoint + data splits)");
  gen->add_option("--spec", gen_spec, "planted spec JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  // search
  std::string se_config, se_ckpt, se_data, se_out;
  std::optional<std::size_t> se_skip, se_cand, se_interval;
  std::optional<std::uint64_t> se_seed;
  std::size_t se_baseline = 0;
  CLI::App* search = app.add_subcommand(
      "search", "run warmup, redundancy search, and finetune");
  search->add_option("--config", se_config, "search config JSON")->required();
  search->add_option("--checkpoint", se_ckpt, "full checkpoint")->required();
  search->add_option("--data", se_data, "dataset directory")->required();
  search->add_option("--out", se_out, "output directory")->required();
  search->add_option("--skip", se_skip, "override skip count m");
  search->add_option("--candidates", se_cand, "override candidate count c");
  search->add_option("--interval", se_interval, "override validation interval");
  search->add_option("--seed", se_seed, "override seed");
  search->add_option("--random-baseline", se_baseline,
                     "also finetune this many random m-subsets");

  // oracle
  std::string or_ckpt, or_data, or_out;
  std::size_t or_m = 0, or_budget = 200, or_batch = 32;
  std::uint64_t or_seed = 0;
  CLI::App* oracle = app.add_subcommand(
      "oracle", "exhaustively rank every m-subset by validation loss");
  oracle->add_option("--checkpoint", or_ckpt, "full checkpoint")->required();
  oracle->add_option("--data", or_data, "dataset directory")->required();
  oracle->add_option("--skip", or_m, "subset size m")->required();
  oracle->add_option("--out", or_out, "output directory")->required();
  oracle->add_option("--budget", or_budget, "finetune steps per subset");
  oracle->add_option("--batch", or_batch, "finetune batch size");
  oracle->add_option("--seed", or_seed, "oracle seed");

  // eval
  std::string ev_ckpt, ev_data, ev_split = "test", ev_mask;
  std::size_t ev_batch = 64;
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", ev_ckpt, "full or pruned checkpoint")
      ->required();
  eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
  eval_cmd->add_option("--split", ev_split, "train|val|test");
  eval_cmd->add_option("--mask", ev_mask,
                       "skip mask like 2|5 (full checkpoints only)");
  eval_cmd->add_option("--batch", ev_batch, "evaluation batch size");

  // report
  std::vector<std::string> rp_runs;
  std::string rp_out;
  CLI::App* report = app.add_subcommand(
      "report", "aggregate run reports into summary tables");
  report->add_option("--runs", rp_runs, "run directories")->required();
  report->add_option("--out", rp_out, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen(gen_spec, gen_out);
    if (search->parsed()) {
      return cmd_search(se_config, se_ckpt, se_data, se_out, se_skip, se_cand,
                        se_interval, se_seed, se_baseline);
    }
    if (oracle->parsed()) {
      return cmd_oracle(or_ckpt, or_data, or_m, or_out, or_budget, or_batch,
                        or_seed);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(ev_ckpt, ev_data, ev_split, ev_mask, ev_batch);
    }
    if (report->parsed()) return cmd_report(rp_runs, rp_out);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const das::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitParse;
  } catch (const das::NumericAbortError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumericAbort;
  } catch (const das::GenerationError& e) {
    std::cerr << "generation error: " << e.what() << "\n";
    return kExitGeneration;
  } catch (const das::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const das::UsageError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
