// Generative and inference networks: feed-forward encoder producing a
// diagonal-Gaussian variational posterior, feed-forward decoder with a
// Bernoulli (logit) or Gaussian head, and the latent Gaussian-mixture
// parameters. Cluster weights pi are stored but frozen at 1/K.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dcgmm/autodiff.hpp"
#include "dcgmm/errors.hpp"
#include "dcgmm/rng.hpp"
#include "dcgmm/tensor.hpp"

namespace dcgmm {

inline constexpr double kEncoderLogvarLo = -10.0;
inline constexpr double kEncoderLogvarHi = 10.0;
inline constexpr double kDecoderVarianceFloor = 1e-4;
inline constexpr double kMixtureVarianceFloor = 1e-4;

enum class DecoderFamily { bernoulli, gaussian };

inline std::string to_string(DecoderFamily f) {
  return f == DecoderFamily::bernoulli ? "bernoulli" : "gaussian";
}

struct NetworkSpec {
  std::size_t input_dim = 0;                  // M
  std::vector<std::size_t> hidden = {500, 500, 2000};
  std::size_t latent_dim = 10;                // D
  DecoderFamily decoder = DecoderFamily::bernoulli;

  void validate() const {
    if (input_dim == 0) throw ConfigError("network: input_dim must be positive");
    if (latent_dim == 0) throw ConfigError("network: latent_dim must be positive");
    if (hidden.empty()) throw ConfigError("network: need at least one hidden layer");
    for (std::size_t h : hidden) {
      if (h == 0) throw ConfigError("network: hidden widths must be positive");
    }
  }
};

struct Linear {
  ad::Var weight; // in x out
  ad::Var bias;   // out

  static Linear zeros(std::size_t in, std::size_t out) {
    return {ad::Var::param(Tensor({in, out})), ad::Var::param(Tensor({out}))};
  }

  // He-uniform fan-in initialization; biases stay zero.
  void init_he_uniform(Rng &rng) {
    const auto fan_in = static_cast<double>(weight.value().rows());
    const double bound = std::sqrt(6.0 / fan_in);
    rng.fill_uniform(weight.mutable_value(), -bound, bound);
  }

  [[nodiscard]] ad::Var apply(const ad::Var &x) const {
    return ad::add_rowvec(ad::matmul(x, weight), bias);
  }
};

struct EncoderOutput {
  ad::Var mean;   // B x D
  ad::Var logvar; // B x D, clamped to [kEncoderLogvarLo, kEncoderLogvarHi]
};

struct DecoderOutput {
  DecoderFamily family;
  ad::Var mean;   // Bernoulli: logits (B x M); Gaussian: mean (B x M)
  ad::Var logvar; // Gaussian only, variance floored
};

struct MixtureParams {
  std::size_t k = 0;
  std::size_t d = 0;
  ad::Var means;   // K x D, trainable
  ad::Var logvars; // K x D, trainable; floor applied on read
  ad::Var log_pi;  // K, frozen constant

  static MixtureParams create(std::size_t k, std::size_t d) {
    MixtureParams m;
    m.k = k;
    m.d = d;
    m.means = ad::Var::param(Tensor({k, d}));
    m.logvars = ad::Var::param(Tensor({k, d}));
    m.log_pi = ad::Var::constant(
        Tensor::full({k}, -std::log(static_cast<double>(k))));
    return m;
  }

  // log sigma^2 with the variance floor applied.
  [[nodiscard]] ad::Var floored_logvars() const {
    return ad::clamp(logvars, std::log(kMixtureVarianceFloor),
                     std::numeric_limits<double>::infinity());
  }

  [[nodiscard]] Tensor variances() const {
    Tensor v(logvars.value().shape());
    for (std::size_t i = 0; i < v.numel(); ++i)
      v[i] = std::max(std::exp(logvars.value()[i]), kMixtureVarianceFloor);
    return v;
  }

  [[nodiscard]] std::vector<ad::Var> parameters() const {
    return {means, logvars};
  }
};

// B x K matrix of log N(z_i | mu_k, sigma_k^2 I); differentiable in all
// three arguments. Fused because it pairs every sample with every cluster.
inline ad::Var gaussian_log_density(const ad::Var &z, const ad::Var &means,
                                    const ad::Var &logvars) {
  const Tensor &zv = z.value();
  const Tensor &mv = means.value();
  const Tensor &lv = logvars.value();
  if (zv.ndim() != 2 || mv.ndim() != 2 || !mv.same_shape(lv) ||
      zv.cols() != mv.cols()) {
    throw ShapeError("gaussian_log_density: z " + zv.shape_str() + ", means " +
                     mv.shape_str() + ", logvars " + lv.shape_str());
  }
  const std::size_t b = zv.rows(), k = mv.rows(), d = mv.cols();
  constexpr double kLog2Pi = 1.8378770664093453; // ln(2 pi)
  Tensor out({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = zv.at(i, j) - mv.at(c, j);
        acc += kLog2Pi + lv.at(c, j) + diff * diff * std::exp(-lv.at(c, j));
      }
      out.at(i, c) = -0.5 * acc;
    }
  }
  return ad::make_node(std::move(out), {z, means, logvars}, [](ad::Node &self) {
    const Tensor &g = self.grad();
    ad::Node &pz = *self.parents[0];
    ad::Node &pm = *self.parents[1];
    ad::Node &pl = *self.parents[2];
    const Tensor &zv = pz.value;
    const Tensor &mv = pm.value;
    const Tensor &lv = pl.value;
    const std::size_t b = zv.rows(), k = mv.rows(), d = mv.cols();
    double *dz = pz.requires_grad ? pz.ensure_grad().data() : nullptr;
    double *dm = pm.requires_grad ? pm.ensure_grad().data() : nullptr;
    double *dl = pl.requires_grad ? pl.ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        const double gik = g.at(i, c);
        if (gik == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const double inv_var = std::exp(-lv.at(c, j));
          const double diff = zv.at(i, j) - mv.at(c, j);
          const double dd = diff * inv_var;
          if (dz) dz[i * d + j] += gik * -dd;
          if (dm) dm[c * d + j] += gik * dd;
          if (dl) dl[c * d + j] += gik * -0.5 * (1.0 - diff * dd);
        }
      }
    }
  });
}

// z = mu + exp(logvar / 2) .* eps
inline ad::Var reparameterize(const ad::Var &mean, const ad::Var &logvar,
                              const Tensor &eps) {
  if (!mean.value().same_shape(logvar.value()) ||
      !mean.value().same_shape(eps)) {
    throw ShapeError("reparameterize: mean " + mean.value().shape_str() +
                     ", logvar " + logvar.value().shape_str() + ", eps " +
                     Tensor::shape_str(eps.shape()));
  }
  return ad::add(mean,
                 ad::mul(ad::exp(ad::scale(logvar, 0.5)), ad::Var::constant(eps)));
}

class VaeModel {
public:
  explicit VaeModel(NetworkSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    // encoder: M -> hidden... -> (D, D)
    std::size_t in = spec_.input_dim;
    for (std::size_t h : spec_.hidden) {
      enc_hidden_.push_back(Linear::zeros(in, h));
      in = h;
    }
    enc_mean_ = Linear::zeros(in, spec_.latent_dim);
    enc_logvar_ = Linear::zeros(in, spec_.latent_dim);
    // decoder: D -> reversed hidden... -> (M[, M])
    in = spec_.latent_dim;
    for (auto it = spec_.hidden.rbegin(); it != spec_.hidden.rend(); ++it) {
      dec_hidden_.push_back(Linear::zeros(in, *it));
      in = *it;
    }
    dec_out_ = Linear::zeros(in, spec_.input_dim);
    if (spec_.decoder == DecoderFamily::gaussian) {
      dec_logvar_ = Linear::zeros(in, spec_.input_dim);
    }
  }

  VaeModel(NetworkSpec spec, Rng &rng) : VaeModel(std::move(spec)) {
    init_weights(rng);
  }

  void init_weights(Rng &rng) {
    for (auto &l : enc_hidden_) l.init_he_uniform(rng);
    enc_mean_.init_he_uniform(rng);
    enc_logvar_.init_he_uniform(rng);
    for (auto &l : dec_hidden_) l.init_he_uniform(rng);
    dec_out_.init_he_uniform(rng);
    if (dec_logvar_.weight.defined()) dec_logvar_.init_he_uniform(rng);
  }

  [[nodiscard]] const NetworkSpec &spec() const { return spec_; }

  [[nodiscard]] EncoderOutput encode(const ad::Var &x) const {
    if (x.value().ndim() != 2 || x.value().cols() != spec_.input_dim) {
      throw ShapeError("encode: input shape " + x.value().shape_str() +
                       " does not match input_dim " +
                       std::to_string(spec_.input_dim));
    }
    ad::Var h = x;
    for (const auto &l : enc_hidden_) h = ad::relu(l.apply(h));
    EncoderOutput out;
    out.mean = enc_mean_.apply(h);
    out.logvar =
        ad::clamp(enc_logvar_.apply(h), kEncoderLogvarLo, kEncoderLogvarHi);
    return out;
  }

  [[nodiscard]] DecoderOutput decode(const ad::Var &z) const {
    if (z.value().ndim() != 2 || z.value().cols() != spec_.latent_dim) {
      throw ShapeError("decode: input shape " + z.value().shape_str() +
                       " does not match latent_dim " +
                       std::to_string(spec_.latent_dim));
    }
    ad::Var h = z;
    for (const auto &l : dec_hidden_) h = ad::relu(l.apply(h));
    DecoderOutput out;
    out.family = spec_.decoder;
    out.mean = dec_out_.apply(h);
    if (spec_.decoder == DecoderFamily::gaussian) {
      out.logvar = ad::clamp(dec_logvar_.apply(h),
                             std::log(kDecoderVarianceFloor), 10.0);
    }
    return out;
  }

  [[nodiscard]] std::vector<std::pair<std::string, ad::Var>>
  named_parameters() const {
    std::vector<std::pair<std::string, ad::Var>> out;
    for (std::size_t i = 0; i < enc_hidden_.size(); ++i) {
      out.emplace_back("enc.h" + std::to_string(i) + ".w", enc_hidden_[i].weight);
      out.emplace_back("enc.h" + std::to_string(i) + ".b", enc_hidden_[i].bias);
    }
    out.emplace_back("enc.mean.w", enc_mean_.weight);
    out.emplace_back("enc.mean.b", enc_mean_.bias);
    out.emplace_back("enc.logvar.w", enc_logvar_.weight);
    out.emplace_back("enc.logvar.b", enc_logvar_.bias);
    for (std::size_t i = 0; i < dec_hidden_.size(); ++i) {
      out.emplace_back("dec.h" + std::to_string(i) + ".w", dec_hidden_[i].weight);
      out.emplace_back("dec.h" + std::to_string(i) + ".b", dec_hidden_[i].bias);
    }
    out.emplace_back("dec.out.w", dec_out_.weight);
    out.emplace_back("dec.out.b", dec_out_.bias);
    if (dec_logvar_.weight.defined()) {
      out.emplace_back("dec.logvar.w", dec_logvar_.weight);
      out.emplace_back("dec.logvar.b", dec_logvar_.bias);
    }
    return out;
  }

  [[nodiscard]] std::vector<ad::Var> parameters() const {
    std::vector<ad::Var> out;
    for (auto &[name, v] : named_parameters()) out.push_back(v);
    return out;
  }

private:
  NetworkSpec spec_;
  std::vector<Linear> enc_hidden_;
  Linear enc_mean_, enc_logvar_;
  std::vector<Linear> dec_hidden_;
  Linear dec_out_, dec_logvar_;
};

// Samples n points from cluster k of the learnt generative process and
// returns the decoder means (for Bernoulli heads: the expected image).
inline Tensor generate(const VaeModel &model, const MixtureParams &mixture,
                       std::size_t k, std::size_t n, Rng &rng) {
  if (k >= mixture.k) {
    throw DomainError("generate: cluster " + std::to_string(k) +
                      " out of range for K = " + std::to_string(mixture.k));
  }
  ad::NoGradGuard guard;
  const Tensor variances = mixture.variances();
  Tensor z({n, mixture.d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < mixture.d; ++j) {
      z.at(i, j) = mixture.means.value().at(k, j) +
                   std::sqrt(variances.at(k, j)) * rng.normal();
    }
  }
  DecoderOutput out = model.decode(ad::Var::constant(std::move(z)));
  if (out.family == DecoderFamily::bernoulli) {
    return ad::sigmoid(out.mean).value();
  }
  return out.mean.value();
}

// Hard assignment: argmax_k p(k | z) at z = mu_phi(x) (posterior mean, not a
// sample, so evaluation is deterministic).
inline std::vector<int> cluster_assign(const VaeModel &model,
                                       const MixtureParams &mixture,
                                       const Tensor &x) {
  ad::NoGradGuard guard;
  EncoderOutput enc = model.encode(ad::Var::constant(x));
  ad::Var log_dens = gaussian_log_density(enc.mean, mixture.means,
                                          mixture.floored_logvars());
  const Tensor &ld = log_dens.value();
  const Tensor &lp = mixture.log_pi.value();
  std::vector<int> labels(ld.rows());
  for (std::size_t i = 0; i < ld.rows(); ++i) {
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < ld.cols(); ++c) {
      const double score = ld.at(i, c) + lp[c];
      if (score > best_score) {
        best_score = score;
        best = static_cast<int>(c);
      }
    }
    labels[i] = best;
  }
  return labels;
}

} // namespace dcgmm
