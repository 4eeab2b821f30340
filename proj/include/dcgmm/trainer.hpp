// Full training procedure: standard-normal VAE pretraining, mixture
// initialization by k-means on the pretrained latents, and minibatch C-ELBO
// maximization with Adam and a stepwise learning-rate decay.
//
// All randomness flows from the run seed through forked streams, so a run is
// a pure function of (config, data, constraints, seed).

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dcgmm/constraints.hpp"
#include "dcgmm/kmeans.hpp"
#include "dcgmm/metrics.hpp"
#include "dcgmm/model.hpp"
#include "dcgmm/objective.hpp"
#include "dcgmm/optim.hpp"
#include "dcgmm/prior.hpp"

namespace dcgmm {

enum class BatchingMode { uniform, pair_aware };

inline std::string to_string(BatchingMode m) {
  return m == BatchingMode::uniform ? "uniform" : "pair-aware";
}

struct RunConfig {
  std::size_t k = 10;
  std::size_t latent_dim = 10;
  std::vector<std::size_t> hidden = {500, 500, 2000};
  std::size_t batch_size = 256;
  std::size_t epochs = 500;
  double learning_rate = 1e-3;
  double lr_decay = 0.9;
  std::size_t lr_decay_every = 20;
  std::size_t pretrain_epochs = 10;
  std::uint64_t seed = 1;
  DecoderFamily decoder = DecoderFamily::bernoulli;
  BatchingMode batching = BatchingMode::pair_aware;
  double train_fraction = 6.0 / 7.0;
  double grad_clip = 1e4;

  void validate() const {
    if (k == 0) throw ConfigError("config: k must be positive");
    if (latent_dim == 0) throw ConfigError("config: latent_dim must be positive");
    if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("config: lr_decay must be in (0, 1]");
    if (lr_decay_every == 0) throw ConfigError("config: lr_decay_every must be positive");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("config: train_fraction must be in (0, 1)");
    if (hidden.empty()) throw ConfigError("config: need at least one hidden layer");
  }

  [[nodiscard]] double lr_at_epoch(std::size_t epoch) const {
    return learning_rate *
           std::pow(lr_decay, static_cast<double>(epoch / lr_decay_every));
  }
};

struct EpochRow {
  std::size_t epoch = 0; // strictly increasing
  ElboBreakdown sums;    // summed over the epoch's batches
  double lr = 0.0;
  double test_acc = std::numeric_limits<double>::quiet_NaN();
  double test_nmi = std::numeric_limits<double>::quiet_NaN();
  double test_ari = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<EpochRow> rows;
  std::size_t grad_clips = 0;
  std::size_t best_epoch = 0;
  double best_ari = -2.0;
};

// Snapshot of every parameter value, used for best-checkpoint tracking.
using ParamSnapshot = std::vector<std::pair<std::string, Tensor>>;

inline ParamSnapshot snapshot_parameters(const VaeModel &model,
                                         const MixtureParams &mixture) {
  ParamSnapshot snap;
  for (const auto &[name, v] : model.named_parameters())
    snap.emplace_back(name, v.value());
  snap.emplace_back("mix.means", mixture.means.value());
  snap.emplace_back("mix.logvars", mixture.logvars.value());
  snap.emplace_back("mix.logpi", mixture.log_pi.value());
  return snap;
}

inline void restore_parameters(VaeModel &model, MixtureParams &mixture,
                               const ParamSnapshot &snap) {
  auto named = model.named_parameters();
  for (const auto &[name, value] : snap) {
    if (name == "mix.means") {
      mixture.means.mutable_value() = value;
    } else if (name == "mix.logvars") {
      mixture.logvars.mutable_value() = value;
    } else if (name == "mix.logpi") {
      mixture.log_pi.mutable_value() = value;
    } else {
      bool found = false;
      for (auto &[n, v] : named) {
        if (n == name) {
          v.mutable_value() = value;
          found = true;
          break;
        }
      }
      if (!found) throw DataError("unknown parameter in snapshot: " + name);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// uniform: a random permutation cut into chunks (every index exactly once).
// pair-aware: each batch packs floor(B/4) random constrained pairs (both
// endpoints) and fills the rest uniformly without duplicates; with large
// sparse W this keeps the pairwise term supplied with in-batch pairs.
inline std::vector<std::vector<std::size_t>> make_batches(
    std::size_t n, const RunConfig &cfg, const PairwiseWeights &w, Rng &rng) {
  if (cfg.batch_size > n) {
    throw ConfigError("make_batches: batch size " +
                      std::to_string(cfg.batch_size) + " exceeds n = " +
                      std::to_string(n));
  }
  const std::size_t b = cfg.batch_size;
  const std::size_t n_batches = (n + b - 1) / b;
  std::vector<std::vector<std::size_t>> batches;
  batches.reserve(n_batches);

  if (cfg.batching == BatchingMode::uniform || w.entry_count() == 0) {
    std::vector<std::size_t> perm = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += b) {
      const std::size_t end = std::min(start + b, n);
      batches.emplace_back(perm.begin() + static_cast<long>(start),
                           perm.begin() + static_cast<long>(end));
    }
    return batches;
  }

  const auto entries = w.entries();
  for (std::size_t bi = 0; bi < n_batches; ++bi) {
    std::vector<std::size_t> batch;
    std::unordered_set<std::size_t> used;
    const std::size_t pair_budget = b / 4;
    std::size_t packed = 0, attempts = 0;
    while (packed < pair_budget && attempts < 4 * pair_budget + 16) {
      ++attempts;
      const auto &e = entries[rng.uniform_index(entries.size())];
      if (used.count(e.i) || used.count(e.j)) continue;
      batch.push_back(e.i);
      batch.push_back(e.j);
      used.insert(e.i);
      used.insert(e.j);
      ++packed;
    }
    while (batch.size() < b) {
      const std::size_t idx = rng.uniform_index(n);
      if (used.insert(idx).second) batch.push_back(idx);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Data helpers
// ---------------------------------------------------------------------------

inline Tensor take_rows(const Tensor &x, const std::vector<std::size_t> &rows) {
  Tensor out({rows.size(), x.cols()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(r, j) = x.at(rows[r], j);
  }
  return out;
}

// Encoder means for a full dataset, evaluated in bounded chunks.
inline Tensor encode_means(const VaeModel &model, const Tensor &x,
                           std::size_t chunk = 1024) {
  ad::NoGradGuard guard;
  const std::size_t n = x.rows();
  Tensor out({n, model.spec().latent_dim});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t end = std::min(start + chunk, n);
    std::vector<std::size_t> rows;
    rows.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) rows.push_back(i);
    Tensor mu = model.encode(ad::Var::constant(take_rows(x, rows))).mean.value();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < out.cols(); ++j)
        out.at(start + r, j) = mu.at(r, j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

// Maximizes the standard-normal-prior VAE ELBO (reconstruction minus the
// closed-form KL to N(0, I)) for cfg.pretrain_epochs epochs. The mixture is
// untouched. Returns the per-epoch ELBO sums.
inline std::vector<double> pretrain(VaeModel &model, const Tensor &x,
                                    const RunConfig &cfg, Rng &rng,
                                    std::ostream *progress = nullptr) {
  std::vector<double> epoch_elbos;
  if (cfg.pretrain_epochs == 0) return epoch_elbos;

  std::vector<ad::Var> params = model.parameters();
  AdamState opt = AdamState::init(params, cfg.learning_rate);
  Rng batch_rng = rng.fork();
  Rng eps_rng = rng.fork();
  const std::size_t d = model.spec().latent_dim;

  RunConfig uniform_cfg = cfg;
  uniform_cfg.batching = BatchingMode::uniform;
  PairwiseWeights no_w(x.rows());

  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    double elbo_sum = 0.0;
    auto batches = make_batches(x.rows(), uniform_cfg, no_w, batch_rng);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Tensor xb = take_rows(x, batches[bi]);
      Tensor eps({xb.rows(), d});
      eps_rng.fill_normal(eps);

      EncoderOutput enc = model.encode(ad::Var::constant(xb));
      ad::Var z = reparameterize(enc.mean, enc.logvar, eps);
      DecoderOutput dec = model.decode(z);
      ad::Var recon = reconstruction_term(xb, dec);
      // KL(q || N(0, I)) = -0.5 sum(1 + lv - mu^2 - e^lv)
      ad::Var kl = ad::scale(
          ad::sum(ad::sub(ad::add_scalar(enc.logvar, 1.0),
                          ad::add(ad::square(enc.mean), ad::exp(enc.logvar)))),
          -0.5);
      ad::Var elbo = ad::sub(recon, kl);
      const double value = elbo.value().item();
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite pretraining loss at epoch " +
                                 std::to_string(epoch) + " batch " +
                                 std::to_string(bi),
                             "pretrain");
      }
      elbo_sum += value;

      for (auto &p : params) p.zero_grad();
      ad::backward(ad::scale(elbo, -1.0 / static_cast<double>(xb.rows())));
      clip_grad_norm(params, cfg.grad_clip);
      opt.lr = cfg.learning_rate;
      adam_step(opt, params);
    }
    epoch_elbos.push_back(elbo_sum);
    if (progress) {
      *progress << "pretrain epoch " << epoch << " elbo " << elbo_sum << "\n";
    }
  }
  return epoch_elbos;
}

// ---------------------------------------------------------------------------
// Mixture initialization
// ---------------------------------------------------------------------------

inline constexpr double kInitVarianceFloor = 1e-3;

// k-means (k-means++ seeding, restarts) on the latent means of the training
// set; cluster variances are per-dimension within-cluster variances.
inline MixtureParams init_mixture(const VaeModel &model, const Tensor &x,
                                  std::size_t k, Rng &rng, int restarts = 10,
                                  int iters = 100) {
  const Tensor latents = encode_means(model, x);
  KmeansResult km = kmeans(latents, k, rng, restarts, iters);

  MixtureParams mix = MixtureParams::create(k, latents.cols());
  mix.means.mutable_value() = km.centroids;

  const std::size_t d = latents.cols();
  std::vector<std::size_t> counts(k, 0);
  Tensor sq_sums({k, d});
  for (std::size_t i = 0; i < latents.rows(); ++i) {
    const auto c = static_cast<std::size_t>(km.labels[i]);
    counts[c] += 1;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = latents.at(i, j) - km.centroids.at(c, j);
      sq_sums.at(c, j) += diff * diff;
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < d; ++j) {
      const double var =
          counts[c] > 0 ? sq_sums.at(c, j) / static_cast<double>(counts[c])
                        : 1.0;
      mix.logvars.mutable_value().at(c, j) =
          std::log(std::max(var, kInitVarianceFloor));
    }
  }
  return mix;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EvalSplit {
  Tensor x;
  std::vector<int> labels;
};

struct TrainResult {
  TrainLog log;
  ParamSnapshot best; // parameters of the best test-ARI epoch
};

// Minibatch C-ELBO maximization with Adam over network and mixture
// parameters (pi stays frozen). Metrics are computed on the test split after
// every epoch; the best test-ARI parameters are snapshotted.
inline TrainResult train(VaeModel &model, MixtureParams &mixture,
                         const Tensor &train_x, const EvalSplit *eval,
                         const PairwiseWeights &w, const RunConfig &cfg,
                         Rng &rng, std::ostream *progress = nullptr) {
  cfg.validate();
  if (w.n() != train_x.rows()) {
    throw ShapeError("train: W has n = " + std::to_string(w.n()) +
                     " but training data has " +
                     std::to_string(train_x.rows()) + " rows");
  }

  std::vector<ad::Var> params = model.parameters();
  for (auto &p : mixture.parameters()) params.push_back(p);
  AdamState opt = AdamState::init(params, cfg.learning_rate);
  Rng batch_rng = rng.fork();
  Rng eps_rng = rng.fork();

  TrainResult result;
  const Tensor pi_before = mixture.log_pi.value();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at_epoch(epoch);
    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;

    auto batches = make_batches(train_x.rows(), cfg, w, batch_rng);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Tensor xb = take_rows(train_x, batches[bi]);
      Tensor eps({xb.rows(), cfg.latent_dim});
      eps_rng.fill_normal(eps);
      Tensor wb = gather_batch_weights(w, batches[bi]);

      ElboBreakdown breakdown;
      try {
        breakdown = celbo(xb, eps, model, mixture, wb);
      } catch (const NumericalError &e) {
        throw NumericalError(std::string(e.what()) + " at epoch " +
                                 std::to_string(epoch) + " batch " +
                                 std::to_string(bi),
                             "train");
      }
      row.sums.reconstruction += breakdown.reconstruction;
      row.sums.log_p_z_given_c += breakdown.log_p_z_given_c;
      row.sums.log_prior_pi += breakdown.log_prior_pi;
      row.sums.q_entropy += breakdown.q_entropy;
      row.sums.cat_entropy += breakdown.cat_entropy;
      row.sums.pairwise += breakdown.pairwise;
      row.sums.total += breakdown.total;

      for (auto &p : params) p.zero_grad();
      ad::backward(
          ad::scale(breakdown.total_var, -1.0 / static_cast<double>(xb.rows())));
      if (clip_grad_norm(params, cfg.grad_clip)) result.log.grad_clips += 1;
      opt.lr = lr;
      adam_step(opt, params);
    }

    if (eval != nullptr && !eval->labels.empty()) {
      const std::vector<int> pred = cluster_assign(model, mixture, eval->x);
      row.test_acc = metrics::accuracy(pred, eval->labels);
      row.test_nmi = metrics::nmi(pred, eval->labels);
      row.test_ari = metrics::ari(pred, eval->labels);
      if (row.test_ari > result.log.best_ari) {
        result.log.best_ari = row.test_ari;
        result.log.best_epoch = epoch;
        result.best = snapshot_parameters(model, mixture);
      }
    }

    result.log.rows.push_back(row);
    if (progress) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      *progress << "epoch " << epoch << " lr " << lr << " celbo "
                << row.sums.total << " pairwise " << row.sums.pairwise;
      if (eval != nullptr && !eval->labels.empty()) {
        *progress << " test_ari " << row.test_ari;
      }
      *progress << " (" << secs << "s)\n";
    }
  }

  // pi must never move during training
  for (std::size_t i = 0; i < pi_before.numel(); ++i) {
    if (mixture.log_pi.value()[i] != pi_before[i]) {
      throw NumericalError("frozen pi changed during training", "train");
    }
  }

  if (result.best.empty()) result.best = snapshot_parameters(model, mixture);
  return result;
}

} // namespace dcgmm
