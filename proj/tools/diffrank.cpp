#include <CLI11.hpp>

#include <exception>
#include <iostream>

#include "diffrank/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "diffrank: discriminative and diffusion-generative learning-to-rank"};
  app.require_subcommand(1);

  diffrank::cli::PrepareOptions prep;
  auto* prepare = app.add_subcommand(
      "prepare", "Parse a LETOR/MSLR fold, fit the quantile transform on the "
                 "training split and write a binary cache");
  prepare->add_option("--input", prep.input_dir,
                      "Directory with train.txt, vali.txt, test.txt")
      ->required();
  prepare->add_option("--dataset", prep.dataset, "letor or mslr")->required();
  prepare->add_option("--out", prep.out_cache, "Cache file to write")
      ->required();
  prepare->add_option("--features", prep.features,
                      "Feature count override (default 46 letor / 136 mslr)");
  prepare->add_option("--quantiles", prep.quantile_count,
                      "Reference quantile count (default 1000)");

  diffrank::cli::TrainOptions tr;
  double train_k = -1;
  long long train_seed = -1;
  std::string train_out;
  auto* train = app.add_subcommand("train", "Train a ranker from a run config");
  train->add_option("--config", tr.config_path, "Run config file")->required();
  train->add_option("--k", train_k, "Override the training fraction K");
  train->add_option("--seed", train_seed, "Override the run seed");
  train->add_option("--out-dir", train_out, "Override the output directory");

  diffrank::cli::TrainOptions ab;
  double ablate_noise = 0.1;
  double ablate_k = -1;
  long long ablate_seed = -1;
  std::string ablate_out;
  auto* ablate = app.add_subcommand(
      "ablate", "Train a discriminative ranker on noise-perturbed features "
                "(evaluation stays clean)");
  ablate->add_option("--config", ab.config_path, "Run config file")->required();
  ablate->add_option("--noise-std", ablate_noise,
                     "Gaussian noise std on the transformed features");
  ablate->add_option("--k", ablate_k, "Override the training fraction K");
  ablate->add_option("--seed", ablate_seed, "Override the run seed");
  ablate->add_option("--out-dir", ablate_out, "Override the output directory");

  diffrank::cli::EvalOptions ev;
  auto* evaluate = app.add_subcommand(
      "evaluate", "Score a trained run on a cache split and write "
                  "results.csv / per-query metrics");
  evaluate->add_option("--run", ev.run_dir, "Run directory from `train`")
      ->required();
  evaluate->add_option("--split", ev.split, "train, vali or test");
  evaluate->add_option("--k", ev.k, "Metric cutoff (default 10)");
  std::string eval_cache;
  evaluate->add_option("--cache", eval_cache, "Cache path override");

  diffrank::cli::SubsampleOptions sub;
  auto* subsample = app.add_subcommand(
      "subsample", "Write a cache whose training split keeps a deterministic "
                   "K-fraction of queries");
  subsample->add_option("--cache", sub.cache, "Input cache")->required();
  subsample->add_option("--out", sub.out_cache, "Output cache")->required();
  subsample->add_option("--k", sub.k, "Fraction of training queries to keep")
      ->required();
  subsample->add_option("--seed", sub.seed, "Subsampling seed (default 9601)");

  diffrank::cli::ReportOptions rep;
  auto* report = app.add_subcommand(
      "report", "Aggregate run directories into tables, significance tests "
                "and training-curve CSVs");
  report->add_option("--runs", rep.runs_dir, "Directory containing run dirs")
      ->required();
  report->add_option("--out", rep.out_dir, "Report output directory")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) return diffrank::cli::cmd_prepare(prep);
    if (train->parsed()) {
      if (train_k >= 0) tr.k_override = train_k;
      if (train_seed >= 0) tr.seed_override = static_cast<uint64_t>(train_seed);
      if (!train_out.empty()) tr.out_dir_override = train_out;
      return diffrank::cli::cmd_train(tr);
    }
    if (ablate->parsed()) {
      if (ablate_k >= 0) ab.k_override = ablate_k;
      if (ablate_seed >= 0) ab.seed_override = static_cast<uint64_t>(ablate_seed);
      if (!ablate_out.empty()) ab.out_dir_override = ablate_out;
      return diffrank::cli::cmd_ablate(ab, ablate_noise);
    }
    if (evaluate->parsed()) {
      if (!eval_cache.empty()) ev.cache_override = eval_cache;
      return diffrank::cli::cmd_evaluate(ev);
    }
    if (subsample->parsed()) return diffrank::cli::cmd_subsample(sub);
    if (report->parsed()) return diffrank::cli::cmd_report(rep);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
