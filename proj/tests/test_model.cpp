#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "diffrank/model.hpp"
#include "oracles.hpp"

using namespace diffrank;

namespace {

NetConfig letor_pointwise_disc() {
  NetConfig cfg;
  cfg.io = ModelIo::kDiscLogits;
  cfg.feature_count = 46;
  cfg.hidden_dim = 256;
  cfg.num_hidden_layers = 4;
  cfg.label_classes = 2;
  return cfg;
}

NetConfig tiny_gen_pointwise() {
  NetConfig cfg;
  cfg.io = ModelIo::kGenPointwise;
  cfg.feature_count = 5;
  cfg.hidden_dim = 8;
  cfg.num_hidden_layers = 2;
  cfg.label_classes = 2;
  cfg.time_embed_dim = 4;
  cfg.dropout_rate = 0.0;
  return cfg;
}

Values random_matrix(Rng& rng, int rows, int cols) {
  Values v(static_cast<size_t>(rows) * cols);
  for (Real& x : v) x = rng.normal();
  return v;
}

void zero_param(DenoiserNet& net, const std::string& name) {
  for (auto& p : net.params()) {
    if (p.name == name) std::fill(p.value.begin(), p.value.end(), Real(0));
  }
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
  auto net = DenoiserNet::init(letor_pointwise_disc(), 1);
  const int64_t layer1 = 46 * 256 + 256 + 256 + 256;
  const int64_t layerN = 256 * 256 + 256 + 256 + 256;
  const int64_t head = 256 * 2 + 2;
  CHECK(net.parameter_count() == layer1 + 3 * layerN + head);
}

TEST_CASE("zero head gives zero logits for any input") {
  auto net = DenoiserNet::init(letor_pointwise_disc(), 3);
  zero_param(net, "head.w");
  zero_param(net, "head.b");
  Rng rng(4);
  auto b = net.bind_const();
  auto logits = net.forward_discriminative(
      b, Tape::constant(random_matrix(rng, 3, 46), 3, 46), false, nullptr);
  for (Real v : logits.values()) CHECK(v == 0.0);
}

TEST_CASE("inference is deterministic with dropout off") {
  auto net = DenoiserNet::init(letor_pointwise_disc(), 5);
  Rng rng(6);
  const Values x = random_matrix(rng, 4, 46);
  auto b = net.bind_const();
  auto y1 = net.forward_discriminative(b, Tape::constant(x, 4, 46), false,
                                       nullptr);
  auto y2 = net.forward_discriminative(b, Tape::constant(x, 4, 46), false,
                                       nullptr);
  CHECK(y1.values() == y2.values());
}

TEST_CASE("initialization is seeded, biases zero, weights centered") {
  NetConfig big;
  big.io = ModelIo::kDiscScore;
  big.feature_count = 1024;
  big.hidden_dim = 1024;
  big.num_hidden_layers = 1;
  auto a = DenoiserNet::init(big, 17);
  auto b = DenoiserNet::init(big, 17);
  auto c = DenoiserNet::init(big, 18);

  bool identical = true, differs = false;
  for (size_t i = 0; i < a.params().size(); ++i) {
    identical = identical && a.params()[i].value == b.params()[i].value;
    differs = differs || a.params()[i].value != c.params()[i].value;
  }
  CHECK(identical);
  CHECK(differs);

  for (const auto& p : a.params()) {
    if (p.name.ends_with(".b") || p.name.ends_with(".ln_bias")) {
      for (Real v : p.value) CHECK(v == 0.0);
    }
    if (p.name.ends_with(".ln_gain")) {
      for (Real v : p.value) CHECK(v == 1.0);
    }
  }

  // mean of N uniform(-bound, bound) draws concentrates as bound / sqrt(3N)
  const auto& w = a.params()[0];
  REQUIRE(w.name == "h0.w");
  double mean = 0;
  for (Real v : w.value) mean += v;
  mean /= static_cast<double>(w.value.size());
  const double bound = 1.0 / std::sqrt(1024.0);
  const double tol = 3.0 * bound / std::sqrt(3.0 * static_cast<double>(w.value.size()));
  CHECK(std::abs(mean) < tol);
}

TEST_CASE("denoiser output widths follow the construction contract") {
  NetConfig cfg;
  cfg.io = ModelIo::kGenPointwise;
  cfg.feature_count = 46;
  cfg.hidden_dim = 32;
  cfg.label_classes = 2;
  cfg.dropout_rate = 0.0;
  auto net = DenoiserNet::init(cfg, 2);
  CHECK(cfg.input_dim() == 46 + 3 + 16);
  CHECK(cfg.output_dim() == 46 + 2);

  Rng rng(1);
  auto b = net.bind_const();
  auto out = net.forward_denoiser(
      b, Tape::constant(random_matrix(rng, 2, 46), 2, 46),
      net.one_hot_labels({net.mask_index(), 0}), {0.0, 0.5}, false, nullptr);
  CHECK(out.chi.cols() == 46);
  CHECK(out.psi.cols() == 2);

  NetConfig pw = cfg;
  pw.io = ModelIo::kGenPairwise;
  CHECK(pw.output_dim() == 46 + 1);
}

TEST_CASE("denoiser rejects bad label input") {
  auto net = DenoiserNet::init(tiny_gen_pointwise(), 9);
  auto b = net.bind_const();
  Rng rng(2);
  const Values x = random_matrix(rng, 1, 5);

  Values not_one_hot = {0.5, 0.5, 0.0};
  CHECK_THROWS_AS(
      net.forward_denoiser(b, Tape::constant(x, 1, 5),
                           Tape::constant(not_one_hot, 1, 3), {0.0}, false,
                           nullptr),
      std::invalid_argument);
  Values two_hot = {1.0, 1.0, 0.0};
  CHECK_THROWS_AS(
      net.forward_denoiser(b, Tape::constant(x, 1, 5),
                           Tape::constant(two_hot, 1, 3), {0.0}, false,
                           nullptr),
      std::invalid_argument);
  CHECK_THROWS_AS(
      net.forward_denoiser(b, Tape::constant(x, 1, 5),
                           net.one_hot_labels({0}), {1.5}, false, nullptr),
      std::domain_error);
}

TEST_CASE("discriminative and generative configs share the backbone shape") {
  NetConfig disc = letor_pointwise_disc();
  NetConfig gen = disc;
  gen.io = ModelIo::kGenPointwise;
  auto dn = DenoiserNet::init(disc, 1);
  auto gn = DenoiserNet::init(gen, 1);
  auto dd = dn.layer_dims();
  auto gd = gn.layer_dims();
  REQUIRE(dd.size() == gd.size());
  for (size_t i = 1; i + 1 < dd.size(); ++i) CHECK(dd[i] == gd[i]);
  CHECK(dd.front().second == gd.front().second);  // same hidden width
  CHECK(dd.back().first == gd.back().first);
  CHECK(dd.front().first != gd.front().first);    // extra inputs
  CHECK(dd.back().second != gd.back().second);    // extra noise outputs
}

TEST_CASE("full FFN gradient check against finite differences") {
  auto cfg = tiny_gen_pointwise();
  auto net = DenoiserNet::init(cfg, 31);
  Rng data_rng(32);
  const int n = 4;
  const Values x = random_matrix(data_rng, n, cfg.feature_count);
  const std::vector<int> y_in = {net.mask_index(), 0, 1, net.mask_index()};
  const std::vector<Real> ts = {0.1, 0.4, 0.7, 1.0};
  const Values w_chi = random_matrix(data_rng, n, cfg.feature_count);

  auto loss_of = [&](DenoiserNet& m) {
    Tape tape;
    auto b = m.bind(tape);
    auto out = m.forward_denoiser(b, Tape::constant(x, n, cfg.feature_count),
                                  m.one_hot_labels(y_in), ts, false, nullptr);
    // exercise both heads
    auto psi_loss = softmax_cross_entropy(out.psi, {0, 1, 0, 1});
    auto chi_loss =
        mean(mul(out.chi, Tape::constant(w_chi, n, cfg.feature_count)));
    auto loss = add(psi_loss, chi_loss);
    return std::make_pair(loss, std::move(b));
  };

  Tape tape;
  auto b = net.bind(tape);
  auto out = net.forward_denoiser(b, Tape::constant(x, n, cfg.feature_count),
                                  net.one_hot_labels(y_in), ts, false,
                                  nullptr);
  auto loss = add(softmax_cross_entropy(out.psi, {0, 1, 0, 1}),
                  mean(mul(out.chi, Tape::constant(w_chi, n, cfg.feature_count))));
  tape.backward(loss);
  net.read_grads(tape, b);

  for (auto& p : net.params()) {
    std::vector<double> theta(p.value.begin(), p.value.end());
    auto f = [&]() {
      for (size_t i = 0; i < theta.size(); ++i) p.value[i] = theta[i];
      auto [l, bound] = loss_of(net);
      return l.scalar();
    };
    auto fd = oracles::finite_difference(theta, f, 1e-4);
    for (size_t i = 0; i < theta.size(); ++i) p.value[i] = theta[i];
    INFO("param " << p.name);
    CHECK(oracles::max_rel_error(
              std::vector<double>(p.grad.begin(), p.grad.end()), fd) < 1e-3);
  }
}

TEST_CASE("generative pointwise scoring") {
  auto cfg = tiny_gen_pointwise();
  auto net = DenoiserNet::init(cfg, 41);
  Rng rng(42);
  const Values x = random_matrix(rng, 6, cfg.feature_count);

  SECTION("zero head scores 0.5 everywhere") {
    auto z = net;
    zero_param(z, "head.w");
    zero_param(z, "head.b");
    for (Real s : z.score_rows(x, 6)) CHECK(s == 0.5);
  }
  SECTION("scores live in (0, 1)") {
    for (Real s : net.score_rows(x, 6)) {
      CHECK(s > 0.0);
      CHECK(s < 1.0);
    }
  }
  SECTION("zeroing the noise head leaves scores bitwise unchanged") {
    auto scores = net.score_rows(x, 6);
    auto clipped = net;
    for (auto& p : clipped.params()) {
      if (p.name == "head.w") {
        // zero the chi columns of the head weight
        for (int r = 0; r < p.rows; ++r)
          for (int c = 0; c < cfg.noise_dim(); ++c)
            p.value[static_cast<size_t>(r) * p.cols + c] = 0;
      }
      if (p.name == "head.b") {
        for (int c = 0; c < cfg.noise_dim(); ++c) p.value[static_cast<size_t>(c)] = 0;
      }
    }
    auto scores2 = clipped.score_rows(x, 6);
    CHECK(scores == scores2);
  }
}

TEST_CASE("time embedding is deterministic and injective on a grid") {
  TimeEmbedding emb(16);
  auto e0 = emb.embed(0.0);
  CHECK(e0.size() == 16);
  for (size_t i = 0; i < 16; i += 2) {
    CHECK(e0[i] == 0.0);      // sin(0)
    CHECK(e0[i + 1] == 1.0);  // cos(0)
  }
  auto e0b = emb.embed(0.0);
  CHECK(e0 == e0b);

  std::vector<std::vector<Real>> seen;
  for (int k = 0; k <= 50; ++k) {
    auto e = emb.embed(static_cast<Real>(k) / 50);
    for (const auto& prev : seen) CHECK(prev != e);
    seen.push_back(e);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto net = DenoiserNet::init(tiny_gen_pointwise(), 77);
  net.train_step = 1234;
  net.best_val_metric = 0.625;
  net.save("tmp_ckpt.bin");
  auto loaded = DenoiserNet::load("tmp_ckpt.bin");

  CHECK(loaded.config() == net.config());
  CHECK(loaded.train_step == 1234);
  CHECK(loaded.best_val_metric == 0.625);
  REQUIRE(loaded.params().size() == net.params().size());
  for (size_t i = 0; i < net.params().size(); ++i) {
    CHECK(loaded.params()[i].name == net.params()[i].name);
    CHECK(loaded.params()[i].value == net.params()[i].value);
  }

  loaded.save("tmp_ckpt2.bin");
  std::ifstream f1("tmp_ckpt.bin", std::ios::binary);
  std::ifstream f2("tmp_ckpt2.bin", std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::remove("tmp_ckpt.bin");
  std::remove("tmp_ckpt2.bin");
}
