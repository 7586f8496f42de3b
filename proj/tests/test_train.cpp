#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "diffrank/train.hpp"
#include "synthetic.hpp"

using namespace diffrank;

namespace {

std::vector<Param> single_param(Values v) {
  Param p;
  p.name = "p";
  p.rows = 1;
  p.cols = static_cast<int>(v.size());
  p.value = std::move(v);
  p.grad.assign(p.value.size(), Real(0));
  return {std::move(p)};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

RunConfig toy_config(const std::string& out_dir) {
  RunConfig cfg;
  cfg.objective = ObjectiveKind::kDiscPointwise;
  cfg.cache = "unused";
  cfg.out_dir = out_dir;
  cfg.seed = 7;
  cfg.seed_set = true;
  cfg.epochs = 40;
  cfg.batch_size = 128;
  cfg.learning_rate = 3e-3;
  cfg.hidden_dim = 16;
  cfg.num_hidden_layers = 2;
  cfg.dropout = 0.0;
  cfg.time_embed_dim = 4;
  return cfg;
}

}  // namespace

TEST_CASE("adamw update rule") {
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;

  SECTION("zero gradient and zero decay leave parameters alone") {
    auto params = single_param({1.0, -2.0, 3.0});
    cfg.weight_decay = 0.0;
    auto state = OptimState::init(params);
    adamw_step(params, state, cfg);
    CHECK(params[0].value == Values{1.0, -2.0, 3.0});
  }
  SECTION("first step moves by -lr * g / (|g| + eps)") {
    auto params = single_param({0.5, -0.5, 2.0});
    params[0].grad = {0.3, -0.7, 0.001};
    cfg.weight_decay = 0.0;
    auto state = OptimState::init(params);
    const Values before = params[0].value;
    adamw_step(params, state, cfg);
    for (int i = 0; i < 3; ++i) {
      const double g = params[0].grad[i];
      const double expect =
          before[i] - 0.1 * g / (std::abs(g) + 1e-8);
      CHECK(params[0].value[i] == Catch::Approx(expect).epsilon(1e-9));
    }
  }
  SECTION("pure decay strictly shrinks the parameter norm") {
    auto params = single_param({1.0, -2.0, 3.0});
    cfg.weight_decay = 0.5;
    auto state = OptimState::init(params);
    const auto norm = [&]() {
      double s = 0;
      for (Real v : params[0].value) s += v * v;
      return s;
    };
    double prev = norm();
    for (int i = 0; i < 5; ++i) {
      adamw_step(params, state, cfg);
      const double cur = norm();
      CHECK(cur < prev);
      prev = cur;
    }
  }
  SECTION("non-finite gradients abort with a diagnostic") {
    auto params = single_param({1.0});
    params[0].grad = {std::nan("")};
    auto state = OptimState::init(params);
    CHECK_THROWS_AS(adamw_step(params, state, cfg), std::runtime_error);
  }
}

TEST_CASE("run config round trip and validation") {
  RunConfig cfg = toy_config("out");
  cfg.objective = ObjectiveKind::kGenPairwise;
  cfg.k_fraction = 0.25;
  cfg.lambda_num_end = 0.05;
  cfg.pair_time_weight = false;
  save_run_config(cfg, "tmp_cfg.txt");
  RunConfig back = load_run_config("tmp_cfg.txt");
  CHECK(back.objective == cfg.objective);
  CHECK(back.k_fraction == cfg.k_fraction);
  CHECK(back.lambda_num_end == cfg.lambda_num_end);
  CHECK(back.pair_time_weight == cfg.pair_time_weight);
  CHECK(back.seed == cfg.seed);

  save_run_config(back, "tmp_cfg2.txt");
  CHECK(slurp("tmp_cfg.txt") == slurp("tmp_cfg2.txt"));
  std::remove("tmp_cfg.txt");
  std::remove("tmp_cfg2.txt");

  SECTION("unknown keys rejected") {
    std::ofstream bad("tmp_cfg_bad.txt");
    bad << "objective = disc_pointwise\nnot_a_key = 3\n";
    bad.close();
    CHECK_THROWS_AS(load_run_config("tmp_cfg_bad.txt"), std::invalid_argument);
    std::remove("tmp_cfg_bad.txt");
  }
  SECTION("perturbation plus generative objective rejected") {
    RunConfig c = toy_config("out");
    c.objective = ObjectiveKind::kGenPointwise;
    c.noise_std = 0.1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
  SECTION("missing seed rejected") {
    RunConfig c = toy_config("out");
    c.seed_set = false;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
}

TEST_CASE("training on a separable toy problem reaches perfect validation") {
  synthetic::Spec spec;
  spec.n_queries = 40;
  spec.docs_per_query = 10;
  spec.features = 6;
  spec.label_noise = 0.0;
  auto data = synthetic::make_bundle(spec);

  RunConfig cfg = toy_config("out");
  auto result = train(cfg, data);
  CHECK_FALSE(result.aborted);
  CHECK(result.best_val_ndcg10 == 1.0);
}

TEST_CASE("eval_interval equal to the step budget yields one entry") {
  synthetic::Spec spec;
  spec.n_queries = 12;
  spec.docs_per_query = 6;
  auto data = synthetic::make_bundle(spec);

  RunConfig cfg = toy_config("out");
  cfg.epochs = 4;
  cfg.batch_size = 72;  // one step per epoch
  cfg.eval_interval = 4;
  auto result = train(cfg, data);
  REQUIRE(result.log.entries.size() == 1);
  CHECK(result.log.entries[0].step == 4);
  CHECK(result.best.train_step == 4);
}

TEST_CASE("training is deterministic and selects the best checkpoint") {
  synthetic::Spec spec;
  spec.n_queries = 20;
  spec.docs_per_query = 8;
  spec.label_noise = 1.0;
  auto data = synthetic::make_bundle(spec);

  RunConfig cfg = toy_config("out");
  cfg.epochs = 8;
  cfg.objective = ObjectiveKind::kGenPointwise;
  cfg.dropout = 0.1;

  auto r1 = train(cfg, data);
  auto r2 = train(cfg, data);

  SECTION("identical logs and checkpoints across reruns") {
    REQUIRE(r1.log.entries.size() == r2.log.entries.size());
    for (size_t i = 0; i < r1.log.entries.size(); ++i) {
      CHECK(r1.log.entries[i].step == r2.log.entries[i].step);
      CHECK(r1.log.entries[i].train_loss == r2.log.entries[i].train_loss);
      CHECK(r1.log.entries[i].val_ndcg10 == r2.log.entries[i].val_ndcg10);
    }
    r1.log.save_csv("tmp_log1.csv");
    r2.log.save_csv("tmp_log2.csv");
    CHECK(slurp("tmp_log1.csv") == slurp("tmp_log2.csv"));
    std::remove("tmp_log1.csv");
    std::remove("tmp_log2.csv");

    r1.best.save("tmp_b1.bin");
    r2.best.save("tmp_b2.bin");
    CHECK(slurp("tmp_b1.bin") == slurp("tmp_b2.bin"));
    std::remove("tmp_b1.bin");
    std::remove("tmp_b2.bin");
  }
  SECTION("reported checkpoint dominates every logged validation point") {
    for (const auto& e : r1.log.entries) {
      CHECK(r1.best_val_ndcg10 >= e.val_ndcg10 - 1e-12);
    }
    CHECK(r1.best.best_val_metric == r1.best_val_ndcg10);
  }
  SECTION("checkpoint round trip preserves validation metrics") {
    r1.best.save("tmp_best.bin");
    auto loaded = DenoiserNet::load("tmp_best.bin");
    std::remove("tmp_best.bin");
    auto direct = evaluate(r1.best, data.vali, 10);
    auto from_disk = evaluate(loaded, data.vali, 10);
    CHECK(direct.mean_ndcg10 == from_disk.mean_ndcg10);
    CHECK(direct.ndcg10 == from_disk.ndcg10);
  }
}

TEST_CASE("training aborts on a diverging run and keeps a checkpoint") {
  synthetic::Spec spec;
  spec.n_queries = 10;
  spec.docs_per_query = 6;
  auto data = synthetic::make_bundle(spec);

  RunConfig cfg = toy_config("out");
  cfg.epochs = 5;
  cfg.learning_rate = 1e154;  // drives activations to inf, then nan
  auto result = train(cfg, data);
  CHECK(result.aborted);
  CHECK_FALSE(result.abort_reason.empty());
  CHECK(result.best.params().size() > 0);
}
