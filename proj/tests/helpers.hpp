// Shared test fixtures: scalar (M = D = 1) models whose encoder and decoder
// realize exact affine maps. A single relu hidden unit with a large positive
// bias is linear on the region the tests use, so head weights can be solved
// in closed form.

#pragma once

#include <vector>

#include "dcgmm/model.hpp"

namespace dcgmm::testing {

struct Affine {
  double a = 0.0;
  double b = 0.0;
  [[nodiscard]] double operator()(double x) const { return a * x + b; }
};

inline constexpr double kLinearShift = 100.0; // valid for inputs > -100

inline void set_linear(Linear &l, std::vector<double> w, std::vector<double> b) {
  l.weight.mutable_value().vec() = std::move(w);
  l.bias.mutable_value().vec() = std::move(b);
}

// Encoder: mean(x) = enc_mu(x), logvar(x) = enc_lv(x).
// Decoder: mean(z) = dec_mu(z), logvar(z) = dec_lv(z) (Gaussian family).
inline VaeModel make_affine_scalar_model(Affine enc_mu, Affine enc_lv,
                                         Affine dec_mu, Affine dec_lv,
                                         DecoderFamily family) {
  NetworkSpec spec;
  spec.input_dim = 1;
  spec.hidden = {1};
  spec.latent_dim = 1;
  spec.decoder = family;
  VaeModel model(spec);

  auto params = model.named_parameters();
  auto find = [&](const std::string &name) -> Linear {
    Linear l;
    for (auto &[n, v] : params) {
      if (n == name + ".w") l.weight = v;
      if (n == name + ".b") l.bias = v;
    }
    return l;
  };

  const double c = kLinearShift;
  Linear enc_h = find("enc.h0");
  set_linear(enc_h, {1.0}, {c}); // h = x + c on x > -c
  Linear mean_head = find("enc.mean");
  set_linear(mean_head, {enc_mu.a}, {enc_mu.b - enc_mu.a * c});
  Linear lv_head = find("enc.logvar");
  set_linear(lv_head, {enc_lv.a}, {enc_lv.b - enc_lv.a * c});

  Linear dec_h = find("dec.h0");
  set_linear(dec_h, {1.0}, {c}); // g = z + c on z > -c
  Linear out_head = find("dec.out");
  set_linear(out_head, {dec_mu.a}, {dec_mu.b - dec_mu.a * c});
  if (family == DecoderFamily::gaussian) {
    Linear dlv_head = find("dec.logvar");
    set_linear(dlv_head, {dec_lv.a}, {dec_lv.b - dec_lv.a * c});
  }
  return model;
}

// Generic parameter point for gradient checks: zero biases leave whole relu
// layers at their kink (pre-activation exactly 0), where central differences
// are undefined. Random biases restore twice-differentiability almost surely.
inline void randomize_parameters(VaeModel &model, Rng &rng, double lo = -0.6,
                                 double hi = 0.6) {
  for (auto &[name, v] : model.named_parameters()) {
    rng.fill_uniform(v.mutable_value(), lo, hi);
  }
}

inline MixtureParams make_scalar_mixture(const std::vector<double> &means,
                                         const std::vector<double> &logvars) {
  MixtureParams m = MixtureParams::create(means.size(), 1);
  for (std::size_t k = 0; k < means.size(); ++k) {
    m.means.mutable_value()[k] = means[k];
    m.logvars.mutable_value()[k] = logvars[k];
  }
  return m;
}

} // namespace dcgmm::testing
