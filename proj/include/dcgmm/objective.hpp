// The conditional evidence lower bound and its pieces: Bayes
// responsibilities, reconstruction likelihoods, the single-draw estimator of
// the bound, and a quadrature-based bound-tightness check for tiny
// instances.
//
// The training objective drops log Omega(pi), which is constant under fixed
// uniform pi; bound_gap_check adds it back (computed exactly by the
// brute-force normalizer) before comparing against log p(X | W).

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dcgmm/autodiff.hpp"
#include "dcgmm/errors.hpp"
#include "dcgmm/model.hpp"
#include "dcgmm/prior.hpp"
#include "dcgmm/rng.hpp"

namespace dcgmm {

// Sum over all entries of log N(value | mean, exp(logvar)); differentiable
// in all three arguments. Serves both the Gaussian reconstruction term
// (value = data, constant) and log q(z | x) at the reparameterized draw.
inline ad::Var gaussian_log_density_sum(const ad::Var &value,
                                        const ad::Var &mean,
                                        const ad::Var &logvar) {
  const Tensor &xv = value.value();
  const Tensor &mv = mean.value();
  const Tensor &lv = logvar.value();
  if (!xv.same_shape(mv) || !xv.same_shape(lv)) {
    throw ShapeError("gaussian_log_density_sum: value " + xv.shape_str() +
                     ", mean " + mv.shape_str() + ", logvar " +
                     lv.shape_str());
  }
  constexpr double kLog2Pi = 1.8378770664093453;
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const double diff = xv[i] - mv[i];
    acc += kLog2Pi + lv[i] + diff * diff * std::exp(-lv[i]);
  }
  return ad::make_node(
      Tensor::scalar(-0.5 * acc), {value, mean, logvar}, [](ad::Node &self) {
        const double g = self.grad()[0];
        ad::Node &px = *self.parents[0];
        ad::Node &pm = *self.parents[1];
        ad::Node &pl = *self.parents[2];
        double *dx = px.requires_grad ? px.ensure_grad().data() : nullptr;
        double *dm = pm.requires_grad ? pm.ensure_grad().data() : nullptr;
        double *dl = pl.requires_grad ? pl.ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < px.value.numel(); ++i) {
          const double diff = px.value[i] - pm.value[i];
          const double dd = diff * std::exp(-pl.value[i]);
          if (dx) dx[i] += g * -dd;
          if (dm) dm[i] += g * dd;
          if (dl) dl[i] += g * -0.5 * (1.0 - diff * dd);
        }
      });
}

// Sum over all entries of x * l - softplus(l), the Bernoulli log-likelihood
// in logit form. Stable for logits of any magnitude.
inline ad::Var bernoulli_log_likelihood_sum(const ad::Var &logits,
                                            const ad::Var &x) {
  const Tensor &lv = logits.value();
  const Tensor &xv = x.value();
  if (!lv.same_shape(xv)) {
    throw ShapeError("bernoulli_log_likelihood_sum: logits " + lv.shape_str() +
                     " vs x " + xv.shape_str());
  }
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    if (!(xv[i] >= 0.0 && xv[i] <= 1.0)) {
      throw DomainError("bernoulli likelihood: x[" + std::to_string(i) +
                        "] = " + std::to_string(xv[i]) + " outside [0, 1]");
    }
  }
  auto softplus = [](double v) {
    return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  };
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i)
    acc += xv[i] * lv[i] - softplus(lv[i]);
  return ad::make_node(Tensor::scalar(acc), {logits, x}, [](ad::Node &self) {
    const double g = self.grad()[0];
    ad::Node &pl = *self.parents[0];
    ad::Node &px = *self.parents[1];
    double *dl = pl.requires_grad ? pl.ensure_grad().data() : nullptr;
    double *dx = px.requires_grad ? px.ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < pl.value.numel(); ++i) {
      const double l = pl.value[i];
      const double sig = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l))
                                  : std::exp(l) / (1.0 + std::exp(l));
      if (dl) dl[i] += g * (px.value[i] - sig);
      if (dx) dx[i] += g * l;
    }
  });
}

// sum_i log p_theta(x_i | z_i) for either decoder family.
inline ad::Var reconstruction_term(const Tensor &x, const DecoderOutput &dec) {
  if (dec.family == DecoderFamily::bernoulli) {
    return bernoulli_log_likelihood_sum(dec.mean, ad::Var::constant(x));
  }
  return gaussian_log_density_sum(ad::Var::constant(x), dec.mean, dec.logvar);
}

struct ResponsibilityGraph {
  ad::Var log_post; // B x K, log p(k | z), exact log domain
  ad::Var post;     // B x K, rows sum to 1
};

// Bayes responsibilities from per-cluster log densities and log pi. pi is
// frozen in this model, so log_pi must not require gradients; its entries
// are centered by their maximum (a mathematical no-op for the posterior)
// which makes the result exactly independent of a shared constant in the
// stored log pi.
inline ResponsibilityGraph responsibilities_graph(const ad::Var &log_dens,
                                                  const ad::Var &log_pi) {
  if (log_pi.requires_grad()) {
    throw ConfigError("responsibilities: log_pi is frozen and must not "
                      "require gradients");
  }
  const Tensor &lp = log_pi.value();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < lp.numel(); ++i) mx = std::max(mx, lp[i]);
  Tensor centered(lp.shape());
  for (std::size_t i = 0; i < lp.numel(); ++i) centered[i] = lp[i] - mx;

  ad::Var scores = ad::add_rowvec(log_dens, ad::Var::constant(centered));
  ad::Var lse = ad::logsumexp_rows(scores);
  ResponsibilityGraph out;
  out.log_post = ad::sub_colvec(scores, lse);
  out.post = ad::exp(out.log_post);
  return out;
}

inline ad::Var responsibilities(const ad::Var &log_dens,
                                const ad::Var &log_pi) {
  return responsibilities_graph(log_dens, log_pi).post;
}

struct ElboBreakdown {
  double reconstruction = 0.0; // sum_i log p(x_i | z_i)
  double log_p_z_given_c = 0.0; // sum_i sum_k P_ik log p(z_i | k)
  double log_prior_pi = 0.0;    // sum_i sum_k P_ik log pi_k
  double q_entropy = 0.0;       // -sum_i log q(z_i | x_i) at the draw
  double cat_entropy = 0.0;     // -sum_i sum_k P_ik log P_ik
  double pairwise = 0.0;        // batch-local constraint term
  double total = 0.0;           // sum of the six parts
  ad::Var total_var;            // differentiable root (maximize)
};

namespace detail {

inline void require_finite(double v, const char *term) {
  if (!std::isfinite(v)) {
    throw NumericalError("non-finite value " + std::to_string(v), term);
  }
}

// Entropy floor: probabilities below 1e-30 contribute through their clamped
// log only; raw probabilities are never formed outside the log domain.
inline constexpr double kLogProbFloor = -69.07755278982137; // ln(1e-30)

struct CelboTerms {
  ad::Var recon, log_pz, log_pi_term, q_ent, cat_ent;
  ResponsibilityGraph resp;
  ad::Var z;
};

inline CelboTerms celbo_terms(const Tensor &x, const Tensor &eps,
                              const VaeModel &model,
                              const MixtureParams &mixture) {
  CelboTerms t;
  EncoderOutput enc = model.encode(ad::Var::constant(x));
  t.z = reparameterize(enc.mean, enc.logvar, eps);
  DecoderOutput dec = model.decode(t.z);
  t.recon = reconstruction_term(x, dec);
  ad::Var log_q = gaussian_log_density_sum(t.z, enc.mean, enc.logvar);
  t.q_ent = ad::neg(log_q);

  ad::Var log_dens =
      gaussian_log_density(t.z, mixture.means, mixture.floored_logvars());
  t.resp = responsibilities_graph(log_dens, mixture.log_pi);
  t.log_pz = ad::sum(ad::mul(t.resp.post, log_dens));
  const std::size_t b = x.rows();
  ad::Var log_pi_rows = ad::add_rowvec(
      ad::Var::constant(Tensor({b, mixture.k})), mixture.log_pi);
  t.log_pi_term = ad::sum(ad::mul(t.resp.post, log_pi_rows));
  t.cat_ent = ad::neg(
      ad::sum(ad::mul(t.resp.post, ad::clamp(t.resp.log_post, kLogProbFloor, 0.0))));
  return t;
}

} // namespace detail

// Single-draw estimator of the conditional ELBO over one batch (a sum over
// the batch, not a mean). Wb is the dense batch slice of W from
// gather_batch_weights; the constant -log Omega(pi) is omitted.
inline ElboBreakdown celbo(const Tensor &x, const Tensor &eps,
                           const VaeModel &model, const MixtureParams &mixture,
                           const Tensor &wb) {
  detail::CelboTerms t = detail::celbo_terms(x, eps, model, mixture);
  ad::Var pen = pairwise_penalty(t.resp.post, wb);

  ElboBreakdown out;
  out.reconstruction = t.recon.value().item();
  out.log_p_z_given_c = t.log_pz.value().item();
  out.log_prior_pi = t.log_pi_term.value().item();
  out.q_entropy = t.q_ent.value().item();
  out.cat_entropy = t.cat_ent.value().item();
  out.pairwise = pen.value().item();
  detail::require_finite(out.reconstruction, "reconstruction");
  detail::require_finite(out.log_p_z_given_c, "log_p_z_given_c");
  detail::require_finite(out.log_prior_pi, "log_prior_pi");
  detail::require_finite(out.q_entropy, "q_entropy");
  detail::require_finite(out.cat_entropy, "cat_entropy");
  detail::require_finite(out.pairwise, "pairwise");

  out.total_var =
      ad::add(ad::add(ad::add(ad::add(ad::add(t.recon, t.log_pz),
                                      t.log_pi_term),
                              t.cat_ent),
                      t.q_ent),
              pen);
  out.total = out.total_var.value().item();
  return out;
}

// The W = 0 special case, assembled from the same terms in the same order
// but without a pairwise node in the graph.
inline ElboBreakdown vade_elbo(const Tensor &x, const Tensor &eps,
                               const VaeModel &model,
                               const MixtureParams &mixture) {
  detail::CelboTerms t = detail::celbo_terms(x, eps, model, mixture);
  ElboBreakdown out;
  out.reconstruction = t.recon.value().item();
  out.log_p_z_given_c = t.log_pz.value().item();
  out.log_prior_pi = t.log_pi_term.value().item();
  out.q_entropy = t.q_ent.value().item();
  out.cat_entropy = t.cat_ent.value().item();
  out.pairwise = 0.0;
  out.total_var = ad::add(
      ad::add(ad::add(ad::add(t.recon, t.log_pz), t.log_pi_term), t.cat_ent),
      t.q_ent);
  out.total = out.total_var.value().item();
  return out;
}

// ---------------------------------------------------------------------------
// Bound-tightness check (Lemma-style) on tiny D = 1 instances
// ---------------------------------------------------------------------------

struct BoundGap {
  double celbo_mean = 0.0;   // E[celbo] including -log Omega(pi)
  double celbo_stderr = 0.0; // Monte Carlo standard error of the mean
  double log_evidence = 0.0; // quadrature log p(X | W)
  double gap = 0.0;          // log_evidence - celbo_mean, >= 0 up to MC noise
};

// Averages the full-data C-ELBO over `draws` noise samples and compares it
// against the quadrature marginal likelihood. Requires latent_dim == 1 and
// an instance small enough for the enumeration oracles.
inline BoundGap bound_gap_check(const Tensor &x, const VaeModel &model,
                                const MixtureParams &mixture,
                                const PairwiseWeights &w, Rng &rng,
                                std::size_t draws = 10000,
                                std::size_t quad_nodes = 64) {
  if (model.spec().latent_dim != 1) {
    throw ConfigError("bound_gap_check requires latent_dim == 1");
  }
  const std::size_t n = x.rows();
  if (w.n() != n) {
    throw ShapeError("bound_gap_check: W has n = " + std::to_string(w.n()) +
                     ", data has " + std::to_string(n) + " rows");
  }

  // Exact side: mixture parameters as flat vectors, decoder as a likelihood
  // closure evaluated at the quadrature nodes.
  std::vector<double> mean_k(mixture.k), var_k(mixture.k), log_pi(mixture.k);
  const Tensor variances = mixture.variances();
  for (std::size_t c = 0; c < mixture.k; ++c) {
    mean_k[c] = mixture.means.value().at(c, 0);
    var_k[c] = variances.at(c, 0);
    log_pi[c] = mixture.log_pi.value()[c];
  }
  auto log_px_given_z = [&](std::size_t i, double z) {
    ad::NoGradGuard guard;
    DecoderOutput dec = model.decode(ad::Var::constant(Tensor({1, 1}, {z})));
    Tensor xi({1, x.cols()});
    for (std::size_t j = 0; j < x.cols(); ++j) xi.at(0, j) = x.at(i, j);
    return reconstruction_term(xi, dec).value().item();
  };
  ConditionalPosterior post = brute_force_conditional_posterior(
      n, log_px_given_z, mean_k, var_k, log_pi, w, quad_nodes);

  // Monte Carlo side: the true bound includes -log Omega(pi), which the
  // training objective drops.
  const double log_omega = log_brute_force_normalizer(w, log_pi, mixture.k);
  const Tensor wb = gather_batch_weights(w, [&] {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }());

  ad::NoGradGuard guard;
  double sum = 0.0, sum_sq = 0.0;
  Tensor eps({n, 1});
  for (std::size_t t = 0; t < draws; ++t) {
    rng.fill_normal(eps);
    const double v = celbo(x, eps, model, mixture, wb).total - log_omega;
    sum += v;
    sum_sq += v * v;
  }
  BoundGap out;
  const auto nd = static_cast<double>(draws);
  out.celbo_mean = sum / nd;
  const double var = std::max(0.0, sum_sq / nd - out.celbo_mean * out.celbo_mean);
  out.celbo_stderr = std::sqrt(var / nd);
  out.log_evidence = post.log_evidence;
  out.gap = out.log_evidence - out.celbo_mean;
  return out;
}

} // namespace dcgmm
