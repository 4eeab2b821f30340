#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "dcgmm/prior.hpp"
#include "dcgmm/rng.hpp"

using namespace dcgmm;
using ad::Var;

namespace {

double log_normal_pdf(double x, double mean, double var) {
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) +
                 (x - mean) * (x - mean) / var);
}

} // namespace

TEST_CASE("pairwise weights storage") {
  PairwiseWeights w(5);
  REQUIRE(w.get(0, 1) == 0.0);
  w.set(1, 3, 2.5);
  REQUIRE(w.get(1, 3) == 2.5);
  REQUIRE(w.get(3, 1) == 2.5); // symmetric
  w.set(3, 1, -1.0);           // overwrite, last wins
  REQUIRE(w.get(1, 3) == -1.0);
  REQUIRE(w.overwrite_count() == 1);
  REQUIRE_THROWS_AS(w.set(2, 2, 1.0), DataError);
  REQUIRE_THROWS_AS(w.set(0, 7, 1.0), DataError);
}

TEST_CASE("log unnormalized prior fixed cases") {
  const std::vector<double> log_pi = {std::log(0.5), std::log(0.5)};
  SECTION("no constraints") {
    PairwiseWeights w(2);
    REQUIRE(log_unnormalized_prior({0, 0}, w, log_pi) ==
            Catch::Approx(2.0 * std::log(0.5)).margin(1e-14));
  }
  SECTION("agreeing pair counts its weight twice") {
    PairwiseWeights w(2);
    const double wv = 0.7;
    w.set(0, 1, wv);
    REQUIRE(log_unnormalized_prior({0, 0}, w, log_pi) ==
            Catch::Approx(2.0 * std::log(0.5) + 2.0 * wv).margin(1e-14));
    REQUIRE(log_unnormalized_prior({0, 1}, w, log_pi) ==
            Catch::Approx(2.0 * std::log(0.5)).margin(1e-14));
  }
  SECTION("relabeling invariance under uniform pi") {
    Rng rng(3);
    PairwiseWeights w(4);
    w.set(0, 2, 1.3);
    w.set(1, 3, -0.4);
    w.set(0, 3, 0.2);
    const std::vector<double> lp(3, std::log(1.0 / 3.0));
    const std::vector<std::size_t> c = {0, 1, 2, 1};
    // permutation 0->2, 1->0, 2->1
    const std::vector<std::size_t> cp = {2, 0, 1, 0};
    REQUIRE(log_unnormalized_prior(c, w, lp) ==
            Catch::Approx(log_unnormalized_prior(cp, w, lp)).margin(1e-14));
  }
}

TEST_CASE("brute-force normalizer") {
  SECTION("W = 0 gives 1 for any pi summing to one") {
    PairwiseWeights w(3);
    const std::vector<double> log_pi = {std::log(0.2), std::log(0.5),
                                        std::log(0.3)};
    REQUIRE(brute_force_normalizer(w, log_pi, 3) ==
            Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("closed form for n = 2, K = 2") {
    for (double wv : {-2.0, -0.5, 0.0, 0.3, 1.7}) {
      PairwiseWeights w(2);
      w.set(0, 1, wv);
      const std::vector<double> log_pi = {std::log(0.5), std::log(0.5)};
      REQUIRE(brute_force_normalizer(w, log_pi, 2) ==
              Catch::Approx(0.5 * (std::exp(2.0 * wv) + 1.0)).epsilon(1e-12));
    }
  }
  SECTION("hard cannot-link limit") {
    PairwiseWeights w(2);
    w.set(0, 1, -40.0);
    const std::vector<double> log_pi = {std::log(0.5), std::log(0.5)};
    REQUIRE(brute_force_normalizer(w, log_pi, 2) ==
            Catch::Approx(0.5).epsilon(1e-10));
  }
  SECTION("size guard") {
    PairwiseWeights w(30);
    const std::vector<double> log_pi = {std::log(0.5), std::log(0.5)};
    REQUIRE_THROWS_AS(brute_force_normalizer(w, log_pi, 2), DataError);
  }
}

TEST_CASE("gather batch weights") {
  PairwiseWeights w(10);
  SECTION("empty W gives the zero matrix") {
    Tensor wb = gather_batch_weights(w, {1, 4, 7});
    for (std::size_t i = 0; i < wb.numel(); ++i) REQUIRE(wb[i] == 0.0);
  }
  SECTION("stored pair appears exactly twice, mirrored") {
    w.set(4, 7, 3.5);
    Tensor wb = gather_batch_weights(w, {1, 4, 7});
    std::size_t nonzeros = 0;
    for (std::size_t i = 0; i < wb.numel(); ++i)
      if (wb[i] != 0.0) ++nonzeros;
    REQUIRE(nonzeros == 2);
    REQUIRE(wb.at(1, 2) == 3.5);
    REQUIRE(wb.at(2, 1) == 3.5);
  }
  SECTION("random sparse W matches per-entry lookups") {
    Rng rng(11);
    for (int t = 0; t < 40; ++t) {
      const std::size_t i = rng.uniform_index(10);
      std::size_t j = rng.uniform_index(9);
      if (j >= i) ++j;
      w.set(i, j, rng.uniform(-2, 2));
    }
    const std::vector<std::size_t> idx = {9, 2, 5, 0, 7};
    Tensor wb = gather_batch_weights(w, idx);
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = 0; b < idx.size(); ++b)
        REQUIRE(wb.at(a, b) == w.get(idx[a], idx[b]));
  }
  SECTION("duplicate indices are rejected") {
    REQUIRE_THROWS_AS(gather_batch_weights(w, {1, 4, 1}), DataError);
  }
}

namespace {

Tensor random_rowstochastic(Rng &rng, std::size_t b, std::size_t k) {
  Tensor p({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p.at(i, j) = rng.uniform(0.05, 1.0);
      acc += p.at(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) p.at(i, j) /= acc;
  }
  return p;
}

Tensor random_symmetric_zero_diag(Rng &rng, std::size_t b) {
  Tensor wb({b, b});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      const double v = rng.uniform(-3, 3);
      wb.at(i, j) = v;
      wb.at(j, i) = v;
    }
  }
  return wb;
}

double penalty_bruteforce(const Tensor &p, const Tensor &wb) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.rows(); ++j) {
      if (i == j) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < p.cols(); ++k) dot += p.at(i, k) * p.at(j, k);
      acc += dot * wb.at(i, j);
    }
  return acc;
}

} // namespace

TEST_CASE("pairwise penalty fixed cases") {
  SECTION("zero weights give zero penalty, bitwise") {
    Rng rng(2);
    Tensor p = random_rowstochastic(rng, 3, 2);
    Tensor wb({3, 3});
    REQUIRE(pairwise_penalty(Var::constant(p), wb).value().item() == 0.0);
  }
  SECTION("concentrated responsibilities double the weight") {
    Tensor p({2, 2}, {1, 0, 1, 0});
    Tensor wb({2, 2});
    wb.at(0, 1) = wb.at(1, 0) = 0.9;
    REQUIRE(pairwise_penalty(Var::constant(p), wb).value().item() ==
            Catch::Approx(1.8).margin(1e-15));
  }
  SECTION("uniform responsibilities halve it") {
    Tensor p({2, 2}, {0.5, 0.5, 0.5, 0.5});
    Tensor wb({2, 2});
    wb.at(0, 1) = wb.at(1, 0) = 0.9;
    REQUIRE(pairwise_penalty(Var::constant(p), wb).value().item() ==
            Catch::Approx(0.9).margin(1e-15));
  }
  SECTION("contract errors") {
    Tensor p({2, 2}, {1, 0, 0, 1});
    Tensor diag({2, 2}, {1, 0, 0, 0});
    REQUIRE_THROWS_AS(pairwise_penalty(Var::constant(p), diag), DomainError);
    Tensor asym({2, 2}, {0, 1, 2, 0});
    REQUIRE_THROWS_AS(pairwise_penalty(Var::constant(p), asym), DomainError);
  }
}

TEST_CASE("pairwise penalty equals the brute-force double loop") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 2 + rng.uniform_index(7); // B <= 8
    const std::size_t k = 1 + rng.uniform_index(5); // K <= 5
    Tensor p = random_rowstochastic(rng, b, k);
    Tensor wb = random_symmetric_zero_diag(rng, b);
    const double fast = pairwise_penalty(Var::constant(p), wb).value().item();
    REQUIRE(fast == Catch::Approx(penalty_bruteforce(p, wb)).margin(1e-12));
  }
}

TEST_CASE("pairwise penalty is symmetric under batch reversal") {
  Rng rng(31);
  const std::size_t b = 6, k = 3;
  Tensor p = random_rowstochastic(rng, b, k);
  Tensor wb = random_symmetric_zero_diag(rng, b);
  Tensor pr({b, k}), wbr({b, b});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < k; ++j) pr.at(b - 1 - i, j) = p.at(i, j);
    for (std::size_t j = 0; j < b; ++j)
      wbr.at(b - 1 - i, b - 1 - j) = wb.at(i, j);
  }
  REQUIRE(pairwise_penalty(Var::constant(p), wb).value().item() ==
          Catch::Approx(
              pairwise_penalty(Var::constant(pr), wbr).value().item())
              .margin(1e-12));
}

TEST_CASE("pairwise penalty gradient flows into P") {
  Rng rng(41);
  Tensor p = random_rowstochastic(rng, 4, 3);
  Tensor wb = random_symmetric_zero_diag(rng, 4);
  auto f = [&](const Var &v) { return pairwise_penalty(v, wb); };
  auto report = ad::gradcheck(f, p, 1e-5, 1e-6);
  REQUIRE(report.pass);
}

TEST_CASE("gauss-hermite rule") {
  for (std::size_t n : {16UL, 64UL, 128UL}) {
    auto rule = gauss_hermite(n);
    double w_sum = 0.0, wx2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w_sum += rule.weights[i];
      wx2 += rule.weights[i] * rule.nodes[i] * rule.nodes[i];
    }
    const double sqrt_pi = std::sqrt(std::numbers::pi);
    REQUIRE(w_sum == Catch::Approx(sqrt_pi).epsilon(1e-12));
    REQUIRE(wx2 == Catch::Approx(0.5 * sqrt_pi).epsilon(1e-10));
  }
}

TEST_CASE("conditional posterior oracle") {
  // Linear-Gaussian likelihood p(x | z) = N(x; a z + b, s^2) admits exact
  // marginals: integral N(z; mu, var) p(x | z) dz = N(x; a mu + b,
  // a^2 var + s^2).
  const double a = 1.3, b = -0.4, s2 = 0.5;
  const std::vector<double> xs = {0.2, -1.1, 0.9};
  auto log_px = [&](std::size_t i, double z) {
    return log_normal_pdf(xs[i], a * z + b, s2);
  };
  const std::vector<double> mu = {-1.0, 1.2};
  const std::vector<double> var = {0.6, 0.9};
  const std::vector<double> log_pi = {std::log(0.5), std::log(0.5)};

  SECTION("W = 0: evidence matches the closed form and the table factorizes") {
    PairwiseWeights w(3);
    auto post = brute_force_conditional_posterior(3, log_px, mu, var, log_pi,
                                                  w, 64);
    double expected_log_evidence = 0.0;
    std::vector<std::vector<double>> marg(3, std::vector<double>(2));
    for (std::size_t i = 0; i < 3; ++i) {
      double px = 0.0;
      for (std::size_t k = 0; k < 2; ++k) {
        marg[i][k] = 0.5 * std::exp(log_normal_pdf(
                               xs[i], a * mu[k] + b, a * a * var[k] + s2));
        px += marg[i][k];
      }
      expected_log_evidence += std::log(px);
      for (std::size_t k = 0; k < 2; ++k) marg[i][k] /= px;
    }
    REQUIRE(post.log_evidence ==
            Catch::Approx(expected_log_evidence).margin(1e-9));
    // product test over all assignments
    for (std::size_t c0 = 0; c0 < 2; ++c0)
      for (std::size_t c1 = 0; c1 < 2; ++c1)
        for (std::size_t c2 = 0; c2 < 2; ++c2) {
          const double product = marg[0][c0] * marg[1][c1] * marg[2][c2];
          REQUIRE(post.prob({c0, c1, c2}) ==
                  Catch::Approx(product).margin(1e-9));
        }
  }

  SECTION("symmetric model with equidistant data is uniform") {
    const std::vector<double> mu_sym = {-1.0, 1.0};
    const std::vector<double> var_sym = {0.5, 0.5};
    const std::vector<double> x0 = {0.0, 0.0};
    auto log_px0 = [&](std::size_t i, double z) {
      return log_normal_pdf(x0[i], z, s2); // a=1, b=0
    };
    PairwiseWeights w(2);
    auto post = brute_force_conditional_posterior(2, log_px0, mu_sym, var_sym,
                                                  log_pi, w, 64);
    for (std::size_t c0 = 0; c0 < 2; ++c0)
      for (std::size_t c1 = 0; c1 < 2; ++c1)
        REQUIRE(post.prob({c0, c1}) == Catch::Approx(0.25).margin(1e-9));
  }

  SECTION("doubling the node count moves the evidence by less than 1e-6") {
    PairwiseWeights w(3);
    w.set(0, 1, 0.8);
    w.set(1, 2, -0.6);
    auto p64 = brute_force_conditional_posterior(3, log_px, mu, var, log_pi,
                                                 w, 64);
    auto p128 = brute_force_conditional_posterior(3, log_px, mu, var, log_pi,
                                                  w, 128);
    REQUIRE(std::abs(p64.log_evidence - p128.log_evidence) < 1e-6);
  }

  SECTION("constraints shift posterior mass as expected") {
    PairwiseWeights w(3);
    w.set(0, 1, 2.0); // must-link 0-1
    auto post = brute_force_conditional_posterior(3, log_px, mu, var, log_pi,
                                                  w, 64);
    double agree = 0.0, total = 0.0;
    for (std::size_t c0 = 0; c0 < 2; ++c0)
      for (std::size_t c1 = 0; c1 < 2; ++c1)
        for (std::size_t c2 = 0; c2 < 2; ++c2) {
          const double pr = post.prob({c0, c1, c2});
          total += pr;
          if (c0 == c1) agree += pr;
        }
    REQUIRE(total == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(agree > 0.8);
  }
}
