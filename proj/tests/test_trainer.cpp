#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "dcgmm/constraints.hpp"
#include "dcgmm/trainer.hpp"
#include "helpers.hpp"

using namespace dcgmm;

namespace {

struct Blobs {
  Tensor x;
  std::vector<int> labels;
};

// Well-separated scalar blobs around the given centers.

Blobs blobs_1d(const std::vector<double> &centers, std::size_t per,
               double sigma, Rng &rng) {
  Blobs out;
  out.x = Tensor({centers.size() * per, 1});
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      out.x.at(c * per + i, 0) = centers[c] + sigma * rng.normal();
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

} // namespace

TEST_CASE("learning rate schedule") {
  RunConfig cfg;
  cfg.learning_rate = 0.001;
  cfg.lr_decay = 0.9;
  cfg.lr_decay_every = 20;
  REQUIRE(cfg.lr_at_epoch(0) == Catch::Approx(0.001));
  REQUIRE(cfg.lr_at_epoch(19) == Catch::Approx(0.001));
  REQUIRE(cfg.lr_at_epoch(20) == Catch::Approx(0.0009));
  REQUIRE(cfg.lr_at_epoch(40) == Catch::Approx(0.001 * 0.81));
}

TEST_CASE("uniform batches cover every index exactly once") {
  RunConfig cfg;
  cfg.batching = BatchingMode::uniform;
  cfg.batch_size = 7;
  PairwiseWeights w(23);
  Rng rng(3);
  auto batches = make_batches(23, cfg, w, rng);
  REQUIRE(batches.size() == 4); // 7 + 7 + 7 + 2
  std::vector<int> seen(23, 0);
  for (const auto &b : batches)
    for (std::size_t i : b) seen[i] += 1;
  for (int s : seen) REQUIRE(s == 1);
}

TEST_CASE("pair-aware batches pack constrained pairs") {
  RunConfig cfg;
  cfg.batching = BatchingMode::pair_aware;
  cfg.batch_size = 16;
  const std::size_t n = 200;
  PairwiseWeights w(n);
  Rng wrng(5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t i = wrng.uniform_index(n);
    std::size_t j = wrng.uniform_index(n - 1);
    if (j >= i) ++j;
    w.set(i, j, 1.0);
  }
  Rng rng(6);
  auto batches = make_batches(n, cfg, w, rng);
  REQUIRE(batches.size() == (n + 15) / 16);
  for (const auto &b : batches) {
    REQUIRE(b.size() == 16);
    std::set<std::size_t> uniq(b.begin(), b.end());
    REQUIRE(uniq.size() == b.size()); // distinct
    // first 2 * floor(B/4) slots hold the packed pairs, adjacent
    std::size_t pairs = 0;
    for (std::size_t p = 0; p + 1 < b.size(); p += 2) {
      if (w.get(b[p], b[p + 1]) != 0.0) ++pairs;
      else break;
    }
    REQUIRE(pairs >= 1);
    REQUIRE(pairs <= cfg.batch_size / 4);
  }
}

TEST_CASE("uniform-mode constrained pairs per batch match the "
          "hypergeometric rate") {
  const std::size_t n = 300, b = 30;
  RunConfig cfg;
  cfg.batching = BatchingMode::uniform;
  cfg.batch_size = b;
  PairwiseWeights w(n);
  Rng wrng(8);
  const std::size_t n_pairs = 120;
  std::size_t added = 0;
  while (added < n_pairs) {
    const std::size_t i = wrng.uniform_index(n);
    std::size_t j = wrng.uniform_index(n - 1);
    if (j >= i) ++j;
    if (w.get(i, j) == 0.0) {
      w.set(i, j, 1.0);
      ++added;
    }
  }

  Rng rng(9);
  std::vector<double> counts;
  for (int epoch = 0; epoch < 300; ++epoch) {
    auto batches = make_batches(n, cfg, w, rng);
    for (const auto &batch : batches) {
      std::set<std::size_t> in(batch.begin(), batch.end());
      double c = 0;
      for (const auto &e : w.entries())
        if (in.count(e.i) && in.count(e.j)) ++c;
      counts.push_back(c);
    }
  }
  double mean = 0.0;
  for (double c : counts) mean += c;
  mean /= static_cast<double>(counts.size());
  double var = 0.0;
  for (double c : counts) var += (c - mean) * (c - mean);
  var /= static_cast<double>(counts.size());
  const double se = std::sqrt(var / static_cast<double>(counts.size()));

  // P(both endpoints of a fixed pair are in a uniform B-subset) =
  // B (B - 1) / (n (n - 1))
  const double expected = static_cast<double>(n_pairs) * b * (b - 1.0) /
                          (n * (n - 1.0));
  REQUIRE(std::abs(mean - expected) <= 4.0 * se);
}

TEST_CASE("batch size larger than n is rejected") {
  RunConfig cfg;
  cfg.batch_size = 100;
  PairwiseWeights w(10);
  Rng rng(1);
  REQUIRE_THROWS_AS(make_batches(10, cfg, w, rng), ConfigError);
}

TEST_CASE("pretraining") {
  Rng data_rng(11);
  Blobs blobs = blobs_1d({-2.0, 2.0}, 60, 0.4, data_rng);

  NetworkSpec spec;
  spec.input_dim = 1;
  spec.hidden = {8};
  spec.latent_dim = 1;
  spec.decoder = DecoderFamily::gaussian;

  RunConfig cfg;
  cfg.k = 2;
  cfg.latent_dim = 1;
  cfg.hidden = {8};
  cfg.batch_size = 30;
  cfg.pretrain_epochs = 15;
  cfg.learning_rate = 0.005;

  SECTION("zero epochs is the identity") {
    Rng rng(21);
    VaeModel model(spec, rng);
    const Tensor before = model.parameters()[0].value();
    RunConfig zero = cfg;
    zero.pretrain_epochs = 0;
    Rng train_rng(22);
    auto elbos = pretrain(model, blobs.x, zero, train_rng);
    REQUIRE(elbos.empty());
    const Tensor &after = model.parameters()[0].value();
    for (std::size_t i = 0; i < before.numel(); ++i)
      REQUIRE(before[i] == after[i]);
  }

  SECTION("elbo improves with at most two transient dips") {
    Rng rng(23);
    VaeModel model(spec, rng);
    Rng train_rng(24);
    auto elbos = pretrain(model, blobs.x, cfg, train_rng);
    REQUIRE(elbos.size() == cfg.pretrain_epochs);
    for (double e : elbos) REQUIRE(std::isfinite(e));
    int dips = 0;
    for (std::size_t i = 1; i < elbos.size(); ++i)
      if (elbos[i] < elbos[i - 1]) ++dips;
    REQUIRE(dips <= 2);
    REQUIRE(elbos.back() > elbos.front());
  }
}

TEST_CASE("mixture initialization") {
  SECTION("separated blobs recover their centers") {
    Rng data_rng(31);
    Blobs blobs = blobs_1d({-4.0, 0.0, 4.0}, 80, 0.05, data_rng);
    VaeModel ident = dcgmm::testing::make_affine_scalar_model(
        {1.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}, {0.0, 0.0},
        DecoderFamily::gaussian);
    Rng rng(32);
    MixtureParams mix = init_mixture(ident, blobs.x, 3, rng);
    std::vector<double> centers = {mix.means.value()[0], mix.means.value()[1],
                                   mix.means.value()[2]};
    std::sort(centers.begin(), centers.end());
    REQUIRE(centers[0] == Catch::Approx(-4.0).margin(0.1));
    REQUIRE(centers[1] == Catch::Approx(0.0).margin(0.1));
    REQUIRE(centers[2] == Catch::Approx(4.0).margin(0.1));
    // variances respect the floor
    for (std::size_t i = 0; i < mix.logvars.value().numel(); ++i)
      REQUIRE(std::exp(mix.logvars.value()[i]) >= kInitVarianceFloor - 1e-12);
  }

  SECTION("K = 1 gives the global mean and variance") {
    Rng data_rng(33);
    Blobs blobs = blobs_1d({1.0}, 200, 0.7, data_rng);
    VaeModel ident = dcgmm::testing::make_affine_scalar_model(
        {1.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}, {0.0, 0.0},
        DecoderFamily::gaussian);
    Rng rng(34);
    MixtureParams mix = init_mixture(ident, blobs.x, 1, rng);
    double mean = 0.0;
    for (std::size_t i = 0; i < blobs.x.numel(); ++i) mean += blobs.x[i];
    mean /= static_cast<double>(blobs.x.numel());
    double var = 0.0;
    for (std::size_t i = 0; i < blobs.x.numel(); ++i)
      var += (blobs.x[i] - mean) * (blobs.x[i] - mean);
    var /= static_cast<double>(blobs.x.numel());
    REQUIRE(mix.means.value()[0] == Catch::Approx(mean).margin(1e-9));
    REQUIRE(std::exp(mix.logvars.value()[0]) == Catch::Approx(var).margin(1e-6));
  }

  SECTION("restarts select the lowest-distortion run") {
    Rng data_rng(35);
    Blobs blobs = blobs_1d({-3.0, -1.0, 1.0, 3.0}, 40, 0.3, data_rng);
    Rng rng_multi(36);
    KmeansResult multi = kmeans(blobs.x, 4, rng_multi, 10, 100);
    // the same stream, consumed one restart at a time
    Rng rng_single(36);
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < 10; ++r) {
      best = std::min(best, kmeans(blobs.x, 4, rng_single, 1, 100).inertia);
    }
    REQUIRE(multi.inertia == Catch::Approx(best).margin(1e-12));
  }
}

TEST_CASE("training") {
  // 2 scalar blobs, tiny network; enough to exercise the full loop fast.
  Rng data_rng(41);
  Blobs blobs = blobs_1d({-2.5, 2.5}, 64, 0.5, data_rng);

  RunConfig cfg;
  cfg.k = 2;
  cfg.latent_dim = 1;
  cfg.hidden = {8};
  cfg.batch_size = 32;
  cfg.epochs = 5;
  cfg.pretrain_epochs = 3;
  cfg.learning_rate = 0.003;
  cfg.decoder = DecoderFamily::gaussian;
  cfg.seed = 7;

  NetworkSpec spec;
  spec.input_dim = 1;
  spec.hidden = cfg.hidden;
  spec.latent_dim = cfg.latent_dim;
  spec.decoder = cfg.decoder;

  auto run_once = [&](const PairwiseWeights &w) {
    Rng rng(cfg.seed);
    VaeModel model(spec, rng);
    pretrain(model, blobs.x, cfg, rng);
    MixtureParams mix = init_mixture(model, blobs.x, cfg.k, rng);
    EvalSplit eval{blobs.x, blobs.labels};
    TrainResult res = train(model, mix, blobs.x, &eval, w, cfg, rng);
    return std::make_tuple(std::move(res), snapshot_parameters(model, mix));
  };

  SECTION("identical seeds give identical logs and parameters") {
    Rng crng(42);
    auto constraints = sample_constraints(blobs.labels, 40, crng, 100.0);
    PairwiseWeights w = build_weights(constraints, blobs.x.rows());

    auto [res1, snap1] = run_once(w);
    auto [res2, snap2] = run_once(w);
    REQUIRE(res1.log.rows.size() == res2.log.rows.size());
    for (std::size_t e = 0; e < res1.log.rows.size(); ++e) {
      REQUIRE(res1.log.rows[e].sums.total == res2.log.rows[e].sums.total);
      REQUIRE(res1.log.rows[e].test_ari == res2.log.rows[e].test_ari);
    }
    REQUIRE(snap1.size() == snap2.size());
    for (std::size_t p = 0; p < snap1.size(); ++p) {
      REQUIRE(snap1[p].first == snap2[p].first);
      for (std::size_t i = 0; i < snap1[p].second.numel(); ++i)
        REQUIRE(snap1[p].second[i] == snap2[p].second[i]);
    }
  }

  SECTION("unconstrained training has an exactly zero pairwise term") {
    PairwiseWeights w(blobs.x.rows());
    auto [res, snap] = run_once(w);
    for (const auto &row : res.log.rows) REQUIRE(row.sums.pairwise == 0.0);
  }

  SECTION("pi stays frozen and variances respect the floor") {
    Rng crng(43);
    auto constraints = sample_constraints(blobs.labels, 40, crng, 100.0);
    PairwiseWeights w = build_weights(constraints, blobs.x.rows());
    Rng rng(cfg.seed);
    VaeModel model(spec, rng);
    pretrain(model, blobs.x, cfg, rng);
    MixtureParams mix = init_mixture(model, blobs.x, cfg.k, rng);
    const Tensor pi_before = mix.log_pi.value();
    EvalSplit eval{blobs.x, blobs.labels};
    train(model, mix, blobs.x, &eval, w, cfg, rng);
    for (std::size_t i = 0; i < pi_before.numel(); ++i)
      REQUIRE(mix.log_pi.value()[i] == pi_before[i]);
    const Tensor vars = mix.variances();
    for (std::size_t i = 0; i < vars.numel(); ++i)
      REQUIRE(vars[i] >= kMixtureVarianceFloor);
  }

  SECTION("epochs are strictly increasing in the log") {
    PairwiseWeights w(blobs.x.rows());
    auto [res, snap] = run_once(w);
    for (std::size_t e = 1; e < res.log.rows.size(); ++e)
      REQUIRE(res.log.rows[e].epoch == res.log.rows[e - 1].epoch + 1);
  }
}
