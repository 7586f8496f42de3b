#ifndef DIFFRANK_CLI_HPP_
#define DIFFRANK_CLI_HPP_

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "diffrank/data.hpp"
#include "diffrank/eval.hpp"
#include "diffrank/train.hpp"

namespace diffrank::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// prepare: raw LETOR/MSLR fold -> transformed binary cache + transform file
// ---------------------------------------------------------------------------

struct PrepareOptions {
  std::string input_dir;
  std::string dataset;  // "letor" or "mslr"
  std::string out_cache;
  int features = 0;          // 0 = the collection default (46 / 136)
  int quantile_count = 1000;
};

inline int cmd_prepare(const PrepareOptions& opt) {
  LabelScheme scheme;
  int features = opt.features;
  if (opt.dataset == "letor") {
    scheme = LabelScheme::kLetor;
    if (features == 0) features = 46;
  } else if (opt.dataset == "mslr") {
    scheme = LabelScheme::kMslr;
    if (features == 0) features = 136;
  } else {
    std::cerr << "prepare: unknown dataset '" << opt.dataset
              << "' (expected letor or mslr)\n";
    return 2;
  }

  DatasetBundle bundle;
  const char* names[3] = {"train.txt", "vali.txt", "test.txt"};
  Dataset* splits[3] = {&bundle.train, &bundle.vali, &bundle.test};
  for (int i = 0; i < 3; ++i) {
    const fs::path p = fs::path(opt.input_dir) / names[i];
    if (!fs::exists(p)) {
      std::cerr << "prepare: missing split file " << p.string() << "\n";
      return 2;
    }
    *splits[i] = parse_letor(p.string(), features, scheme);
  }

  auto transform = QuantileTransform::fit(bundle.train, opt.quantile_count,
                                          QuantileOutput::kNormal);
  for (Dataset* ds : splits) transform.apply_in_place(*ds);
  bundle.transformed = true;

  if (const fs::path parent = fs::path(opt.out_cache).parent_path();
      !parent.empty()) {
    fs::create_directories(parent);
  }
  save_cache(bundle, opt.out_cache);
  transform.save(opt.out_cache + ".quant");

  std::printf("%-22s %10s %10s %10s\n", "", "train", "vali", "test");
  std::printf("%-22s %10zu %10zu %10zu\n", "queries",
              bundle.train.query_count(), bundle.vali.query_count(),
              bundle.test.query_count());
  std::printf("%-22s %10zu %10zu %10zu\n", "rows", bundle.train.total_rows(),
              bundle.vali.total_rows(), bundle.test.total_rows());
  std::printf("%-22s %10zu\n", "rows (total)",
              bundle.train.total_rows() + bundle.vali.total_rows() +
                  bundle.test.total_rows());
  std::printf("%-22s %10d\n", "features", features);
  std::printf("%-22s %10d\n", "relevance labels", grade_levels(scheme));
  std::printf("cache written to %s\n", opt.out_cache.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train / ablate
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string config_path;
  std::optional<double> noise_std_override;  // set by the ablate command
  std::optional<double> k_override;
  std::optional<uint64_t> seed_override;
  std::optional<std::string> out_dir_override;
};

inline int cmd_train(const TrainOptions& opt) {
  RunConfig cfg = load_run_config(opt.config_path);
  if (opt.noise_std_override) cfg.noise_std = *opt.noise_std_override;
  if (opt.k_override) cfg.k_fraction = *opt.k_override;
  if (opt.seed_override) {
    cfg.seed = *opt.seed_override;
    cfg.seed_set = true;
  }
  if (opt.out_dir_override) cfg.out_dir = *opt.out_dir_override;
  cfg.validate();
  if (cfg.out_dir.empty()) {
    std::cerr << "train: config must set out_dir\n";
    return 2;
  }
  if (!fs::exists(cfg.cache)) {
    std::cerr << "train: cache not found: " << cfg.cache << "\n";
    return 2;
  }

  const DatasetBundle data = load_cache(cfg.cache);
  fs::create_directories(cfg.out_dir);
  save_run_config(cfg, (fs::path(cfg.out_dir) / "config_resolved.cfg").string());

  TrainResult result = train(cfg, data);
  result.best.save((fs::path(cfg.out_dir) / "checkpoint.bin").string());
  result.log.save_csv((fs::path(cfg.out_dir) / "trainlog.csv").string());

  std::printf("method=%s dataset=%s K=%g steps=%lld best_val_ndcg10=%.6f\n",
              cfg.method_name().c_str(), cfg.dataset_name.c_str(),
              cfg.k_fraction, static_cast<long long>(result.total_steps),
              result.best_val_ndcg10);
  if (result.aborted) {
    std::cerr << "train: aborted (" << result.abort_reason
              << "); last good checkpoint retained\n";
    return 1;
  }
  return 0;
}

inline int cmd_ablate(const TrainOptions& base, double noise_std) {
  RunConfig cfg = load_run_config(base.config_path);
  if (is_generative(cfg.objective)) {
    std::cerr << "ablate: the perturbation ablation is defined for "
                 "discriminative objectives only\n";
    return 2;
  }
  TrainOptions opt = base;
  opt.noise_std_override = noise_std;
  return cmd_train(opt);
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string run_dir;
  std::string split = "test";
  int k = 10;
  std::optional<std::string> cache_override;
};

inline int cmd_evaluate(const EvalOptions& opt) {
  const fs::path dir(opt.run_dir);
  const fs::path cfg_path = dir / "config_resolved.cfg";
  const fs::path ckpt_path = dir / "checkpoint.bin";
  if (!fs::exists(cfg_path) || !fs::exists(ckpt_path)) {
    std::cerr << "evaluate: " << opt.run_dir
              << " lacks config_resolved.cfg / checkpoint.bin\n";
    return 2;
  }
  RunConfig cfg = load_run_config(cfg_path.string());
  const std::string cache_path =
      opt.cache_override ? *opt.cache_override : cfg.cache;
  if (!fs::exists(cache_path)) {
    std::cerr << "evaluate: cache not found: " << cache_path << "\n";
    return 2;
  }
  const DatasetBundle data = load_cache(cache_path);
  const Dataset* split = nullptr;
  if (opt.split == "test") split = &data.test;
  else if (opt.split == "vali") split = &data.vali;
  else if (opt.split == "train") split = &data.train;
  else {
    std::cerr << "evaluate: unknown split '" << opt.split << "'\n";
    return 2;
  }

  DenoiserNet net = DenoiserNet::load(ckpt_path.string());
  RunReport report = evaluate(net, *split, opt.k);

  char buf[256];
  {
    std::ofstream out(dir / "results.csv", std::ios::trunc);
    out << "method,dataset,K,ndcg10,map10,n_queries\n";
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%.17g,%zu\n",
                  cfg.method_name().c_str(), cfg.dataset_name.c_str(),
                  cfg.k_fraction, report.mean_ndcg10, report.mean_map10,
                  report.query_ids.size());
    out << buf;
  }
  {
    std::ofstream out(dir / ("perquery_" + opt.split + ".csv"),
                      std::ios::trunc);
    out << "query_id,ndcg10,map10\n";
    for (size_t i = 0; i < report.query_ids.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g\n",
                    report.query_ids[i].c_str(), report.ndcg10[i],
                    report.map10[i]);
      out << buf;
    }
  }
  std::printf("%s %s split=%s ndcg@%d=%.6f map@%d=%.6f n=%zu\n",
              cfg.method_name().c_str(), cfg.dataset_name.c_str(),
              opt.split.c_str(), opt.k, report.mean_ndcg10, opt.k,
              report.mean_map10, report.query_ids.size());
  return 0;
}

// ---------------------------------------------------------------------------
// subsample: materialize a deterministic K-fraction cache
// ---------------------------------------------------------------------------

struct SubsampleOptions {
  std::string cache;
  std::string out_cache;
  double k = 1.0;
  uint64_t seed = 9601;
};

inline int cmd_subsample(const SubsampleOptions& opt) {
  if (!fs::exists(opt.cache)) {
    std::cerr << "subsample: cache not found: " << opt.cache << "\n";
    return 2;
  }
  DatasetBundle bundle = load_cache(opt.cache);
  const size_t before = bundle.train.query_count();
  bundle.train = subsample(bundle.train, opt.k, opt.seed);
  save_cache(bundle, opt.out_cache);
  std::printf("train queries %zu -> %zu (K=%g, seed=%llu); vali/test untouched\n",
              before, bundle.train.query_count(), opt.k,
              static_cast<unsigned long long>(opt.seed));
  return 0;
}

// ---------------------------------------------------------------------------
// report: aggregate run directories into tables + significance tests
// ---------------------------------------------------------------------------

struct ReportOptions {
  std::string runs_dir;
  std::string out_dir;
};

namespace detail {

struct RunRecord {
  std::string run_name;
  std::string method;
  std::string dataset;
  double k = 1.0;
  double ndcg10 = 0;
  double map10 = 0;
  size_t n_queries = 0;
  std::vector<std::string> perquery_ids;
  std::vector<double> perquery_ndcg;
  std::vector<double> perquery_map;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  return fields;
}

inline std::optional<RunRecord> read_run(const fs::path& dir) {
  const fs::path results = dir / "results.csv";
  if (!fs::exists(results)) return std::nullopt;
  std::ifstream in(results);
  std::string header, line;
  if (!std::getline(in, header) || !std::getline(in, line)) {
    return std::nullopt;
  }
  const auto f = split_csv_line(line);
  if (f.size() != 6) return std::nullopt;
  RunRecord rec;
  rec.run_name = dir.filename().string();
  try {
    rec.method = f[0];
    rec.dataset = f[1];
    rec.k = std::stod(f[2]);
    rec.ndcg10 = std::stod(f[3]);
    rec.map10 = std::stod(f[4]);
    rec.n_queries = static_cast<size_t>(std::stoull(f[5]));
  } catch (const std::exception&) {
    return std::nullopt;
  }

  const fs::path perquery = dir / "perquery_test.csv";
  if (fs::exists(perquery)) {
    std::ifstream pq(perquery);
    std::string pline;
    std::getline(pq, pline);  // header
    while (std::getline(pq, pline)) {
      const auto pf = split_csv_line(pline);
      if (pf.size() != 3) continue;
      rec.perquery_ids.push_back(pf[0]);
      rec.perquery_ndcg.push_back(std::stod(pf[1]));
      rec.perquery_map.push_back(std::stod(pf[2]));
    }
  }
  return rec;
}

}  // namespace detail

inline int cmd_report(const ReportOptions& opt) {
  if (!fs::is_directory(opt.runs_dir)) {
    std::cerr << "report: not a directory: " << opt.runs_dir << "\n";
    return 2;
  }
  std::vector<detail::RunRecord> runs;
  std::vector<fs::path> run_dirs;
  for (const auto& entry : fs::directory_iterator(opt.runs_dir)) {
    if (!entry.is_directory()) continue;
    run_dirs.push_back(entry.path());
  }
  std::sort(run_dirs.begin(), run_dirs.end());
  for (const auto& dir : run_dirs) {
    auto rec = detail::read_run(dir);
    if (!rec) {
      std::cerr << "report: skipping " << dir.string()
                << " (no readable results.csv)\n";
      continue;
    }
    runs.push_back(std::move(*rec));
  }
  if (runs.empty()) {
    std::cerr << "report: no completed runs under " << opt.runs_dir << "\n";
    return 2;
  }

  fs::create_directories(opt.out_dir);
  fs::create_directories(fs::path(opt.out_dir) / "curves");
  char buf[256];

  // flat aggregate
  {
    std::ofstream out(fs::path(opt.out_dir) / "report.csv", std::ios::trunc);
    out << "run,method,dataset,K,ndcg10,map10,n_queries\n";
    for (const auto& r : runs) {
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%.17g,%zu\n",
                    r.run_name.c_str(), r.method.c_str(), r.dataset.c_str(),
                    r.k, r.ndcg10, r.map10, r.n_queries);
      out << buf;
    }
  }

  // per-(dataset, K) markdown tables, best cell per metric bolded
  {
    std::ofstream md(fs::path(opt.out_dir) / "report.md", std::ios::trunc);
    md << "# Results\n";
    std::map<std::pair<std::string, double>, std::vector<const detail::RunRecord*>>
        blocks;
    for (const auto& r : runs) {
      blocks[{r.dataset, r.k}].push_back(&r);
    }
    for (const auto& [key, block] : blocks) {
      md << "\n## " << key.first << ", K = " << key.second << "\n\n";
      md << "| method | NDCG@10 | MAP@10 |\n|---|---|---|\n";
      double best_ndcg = -1, best_map = -1;
      for (const auto* r : block) {
        best_ndcg = std::max(best_ndcg, r->ndcg10);
        best_map = std::max(best_map, r->map10);
      }
      for (const auto* r : block) {
        const auto cell = [&](double v, double best) {
          std::snprintf(buf, sizeof buf, v == best ? "**%.4f**" : "%.4f", v);
          return std::string(buf);
        };
        md << "| " << r->method << " | " << cell(r->ndcg10, best_ndcg)
           << " | " << cell(r->map10, best_map) << " |\n";
      }
    }
  }

  // pairwise significance on aligned per-query vectors, one file per
  // (dataset, K) block
  {
    std::map<std::pair<std::string, double>, std::string> sig_rows;
    for (size_t i = 0; i < runs.size(); ++i) {
      for (size_t j = i + 1; j < runs.size(); ++j) {
        const auto& a = runs[i];
        const auto& b = runs[j];
        if (a.dataset != b.dataset || a.k != b.k) continue;
        if (a.perquery_ids.empty() || a.perquery_ids != b.perquery_ids) {
          if (!a.perquery_ids.empty() || !b.perquery_ids.empty()) {
            std::cerr << "report: per-query vectors of " << a.run_name
                      << " and " << b.run_name << " not aligned; skipping\n";
          }
          continue;
        }
        const auto emit = [&](const char* metric,
                              const std::vector<double>& va,
                              const std::vector<double>& vb) {
          const TTestResult t = paired_t_test(va, vb);
          std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%d\n",
                        a.method.c_str(), b.method.c_str(), metric, t.t, t.p,
                        t.significant ? 1 : 0);
          sig_rows[{a.dataset, a.k}] += buf;
        };
        emit("ndcg10", a.perquery_ndcg, b.perquery_ndcg);
        emit("map10", a.perquery_map, b.perquery_map);
      }
    }
    for (const auto& [key, rows] : sig_rows) {
      std::string tag = key.first;
      for (char& c : tag) {
        if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
      }
      std::snprintf(buf, sizeof buf, "significance_%s_K%g.csv", tag.c_str(),
                    key.second);
      std::ofstream out(fs::path(opt.out_dir) / buf, std::ios::trunc);
      out << "method_a,method_b,metric,t,p,significant\n" << rows;
    }
  }

  // training curves, one CSV per run
  for (const auto& dir : run_dirs) {
    const fs::path log = dir / "trainlog.csv";
    if (fs::exists(log)) {
      fs::copy_file(log,
                    fs::path(opt.out_dir) / "curves" /
                        (dir.filename().string() + ".csv"),
                    fs::copy_options::overwrite_existing);
    }
  }

  std::printf("report: %zu runs aggregated into %s\n", runs.size(),
              opt.out_dir.c_str());
  return 0;
}

}  // namespace diffrank::cli

#endif  // DIFFRANK_CLI_HPP_
