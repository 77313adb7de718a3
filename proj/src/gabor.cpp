#include "sacnet/gabor.hpp"

#include <cmath>

#include "sacnet/errors.hpp"
#include "sacnet/rng.hpp"

namespace sacnet {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// fused k x k synthesis with analytic partials for the five effective
// parameters; softplus reparameterization chains in through the graph
TensorPtr gabor_grid(const TensorPtr& lambda, const TensorPtr& theta, const TensorPtr& psi,
                     const TensorPtr& sigma, const TensorPtr& gamma, int64_t k) {
  const int64_t r = (k - 1) / 2;
  const double lam = lambda->value();
  const double th = theta->value();
  const double ps = psi->value();
  const double sig = sigma->value();
  const double gam = gamma->value();
  const double ct = std::cos(th), st = std::sin(th);
  const double inv2s2 = 1.0 / (2.0 * sig * sig);

  std::vector<double> out(k * k);
  for (int64_t iy = 0; iy < k; ++iy) {
    const double y = static_cast<double>(iy - r);
    for (int64_t ix = 0; ix < k; ++ix) {
      const double x = static_cast<double>(ix - r);
      const double xp = x * ct + y * st;
      const double yp = -x * st + y * ct;
      const double env = std::exp(-(xp * xp + gam * gam * yp * yp) * inv2s2);
      const double carrier = std::cos(kTwoPi * xp / lam + ps);
      out[iy * k + ix] = env * carrier;
    }
  }
  auto res = Tensor::create({k, k}, std::move(out));
  attach_op(res, "gabor_kernel", {lambda, theta, psi, sigma, gamma},
            [self = res.get(), lambda, theta, psi, sigma, gamma, k, r]() {
              const double lam = lambda->value();
              const double th = theta->value();
              const double ps = psi->value();
              const double sig = sigma->value();
              const double gam = gamma->value();
              const double ct = std::cos(th), st = std::sin(th);
              const double inv_s2 = 1.0 / (sig * sig);
              const double inv2s2 = 0.5 * inv_s2;
              double d_lam = 0, d_th = 0, d_ps = 0, d_sig = 0, d_gam = 0;
              for (int64_t iy = 0; iy < k; ++iy) {
                const double y = static_cast<double>(iy - r);
                for (int64_t ix = 0; ix < k; ++ix) {
                  const double x = static_cast<double>(ix - r);
                  const double g = self->grad[iy * k + ix];
                  if (g == 0.0) continue;
                  const double xp = x * ct + y * st;
                  const double yp = -x * st + y * ct;
                  const double quad = xp * xp + gam * gam * yp * yp;
                  const double env = std::exp(-quad * inv2s2);
                  const double phase = kTwoPi * xp / lam + ps;
                  const double carrier = std::cos(phase);
                  const double sphase = std::sin(phase);
                  // d theta: x' rotates into y' and back
                  const double denv_dth = env * (-(1.0 - gam * gam) * xp * yp * inv_s2);
                  const double dcar_dth = -sphase * (kTwoPi / lam) * yp;
                  d_th += g * (denv_dth * carrier + env * dcar_dth);
                  d_ps += g * (-env * sphase);
                  d_lam += g * (env * sphase * kTwoPi * xp / (lam * lam));
                  d_sig += g * (env * carrier * quad / (sig * sig * sig));
                  d_gam += g * (-env * carrier * gam * yp * yp * inv_s2);
                }
              }
              auto bump = [](const TensorPtr& t, double v) {
                if (t->requires_grad) {
                  t->ensure_grad();
                  t->grad[0] += v;
                }
              };
              bump(lambda, d_lam);
              bump(theta, d_th);
              bump(psi, d_ps);
              bump(sigma, d_sig);
              bump(gamma, d_gam);
            });
  return res;
}

}  // namespace

GaborParams GaborParams::from_effective(double lambda, double theta, double psi, double sigma,
                                        double gamma, bool requires_grad) {
  GaborParams p;
  p.lambda_raw = Tensor::scalar(softplus_inverse(lambda), requires_grad);
  p.theta = Tensor::scalar(theta, requires_grad);
  p.psi = Tensor::scalar(psi, requires_grad);
  p.sigma_raw = Tensor::scalar(softplus_inverse(sigma), requires_grad);
  p.gamma_raw = Tensor::scalar(softplus_inverse(gamma), requires_grad);
  return p;
}

double GaborParams::effective_lambda() const { return softplus_value(lambda_raw->value()); }
double GaborParams::effective_sigma() const { return softplus_value(sigma_raw->value()); }
double GaborParams::effective_gamma() const { return softplus_value(gamma_raw->value()); }

double softplus_value(double raw) {
  return std::max(raw, 0.0) + std::log1p(std::exp(-std::fabs(raw)));
}

double softplus_inverse(double value) {
  // log(exp(v) - 1) == v + log(1 - exp(-v))
  return value + std::log1p(-std::exp(-value));
}

TensorPtr synthesize_kernel(const GaborParams& p, int64_t k) {
  if (k < 1 || k % 2 == 0)
    throw EvenKernelSize("synthesize_kernel: kernel size must be odd, got " + std::to_string(k));
  auto lambda = softplus(p.lambda_raw);
  auto sigma = softplus(p.sigma_raw);
  auto gamma = softplus(p.gamma_raw);
  return gabor_grid(lambda, p.theta, p.psi, sigma, gamma, k);
}

TensorPtr bank_kernels(const GaborBank& bank, int64_t in_channels) {
  std::vector<TensorPtr> per_orientation;
  per_orientation.reserve(bank.params.size());
  for (const auto& p : bank.params) {
    auto k2d = reshape(synthesize_kernel(p, bank.kernel_size),
                       {1, 1, bank.kernel_size, bank.kernel_size});
    if (in_channels > 1) {
      std::vector<TensorPtr> copies(in_channels, k2d);
      k2d = concat(copies, 1);
    }
    per_orientation.push_back(k2d);
  }
  if (per_orientation.size() == 1) return per_orientation[0];
  return concat(per_orientation, 0);
}

FeatureMap bank_forward(const GaborBank& bank, const FeatureMap& input, int64_t stride) {
  // each orientation applies one 2D kernel replicated across input channels,
  // so summing the channels first gives the identical result with a
  // single-channel convolution
  TensorPtr plane = input.tensor;
  if (input.channels() > 1) {
    const auto& s = input.tensor->shape;
    plane = reshape(reduce_sum(input.tensor, 1), {s[0], 1, s[2], s[3]});
  }
  auto kernels = bank_kernels(bank, 1);
  auto out = conv2d(plane, kernels, stride, (bank.kernel_size - 1) / 2);
  return FeatureMap(out, ChannelSemantics::orientation);
}

GaborBank init_bank(int64_t k, int64_t n_orientations, uint64_t seed) {
  if (n_orientations < 1)
    throw UsageError("init_bank: n_orientations must be >= 1");
  if (k < 1 || k % 2 == 0)
    throw EvenKernelSize("init_bank: kernel size must be odd, got " + std::to_string(k));
  GaborBank bank;
  bank.kernel_size = k;
  bank.n_orientations = n_orientations;
  Rng rng(seed);
  const double pi = 3.14159265358979323846;
  for (int64_t j = 0; j < n_orientations; ++j) {
    auto jitter = [&rng](double v) { return v * (1.0 + rng.uniform(-0.01, 0.01)); };
    const double lambda = jitter(static_cast<double>(k) / 2.0);
    const double theta = jitter(pi * static_cast<double>(j) / static_cast<double>(n_orientations));
    const double psi = jitter(0.0);
    const double sigma = jitter(static_cast<double>(k) / 4.0);
    const double gamma = jitter(1.0);
    bank.params.push_back(GaborParams::from_effective(lambda, theta, psi, sigma, gamma, true));
  }
  return bank;
}

}  // namespace sacnet
