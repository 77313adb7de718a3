#pragma once

#include <cstdint>
#include <vector>

#include "sacnet/feature_map.hpp"
#include "sacnet/tensor.hpp"

namespace sacnet {

// The five learnable scalars of one Gabor filter. Wavelength, std-dev and
// aspect ratio are stored as raw values and pass through softplus, so the
// effective parameters stay strictly positive no matter where gradient
// steps move the raws. Orientation and phase are periodic and stay raw.
struct GaborParams {
  TensorPtr lambda_raw;
  TensorPtr theta;
  TensorPtr psi;
  TensorPtr sigma_raw;
  TensorPtr gamma_raw;

  static GaborParams from_effective(double lambda, double theta, double psi, double sigma,
                                    double gamma, bool requires_grad = true);

  double effective_lambda() const;
  double effective_sigma() const;
  double effective_gamma() const;
};

struct GaborBank {
  int64_t kernel_size = 0;  // odd, so a center pixel exists
  int64_t n_orientations = 0;
  std::vector<GaborParams> params;
};

double softplus_value(double raw);
double softplus_inverse(double value);

// g(x,y) = exp(-(x'^2 + g^2 y'^2)/(2 s^2)) * cos(2 pi x'/l + psi) over integer
// offsets in [-(k-1)/2, (k-1)/2]; differentiable w.r.t. all five raw scalars.
TensorPtr synthesize_kernel(const GaborParams& p, int64_t k);

// [n_orientations, in_channels, k, k]; each 2D kernel replicated across the
// input channels
TensorPtr bank_kernels(const GaborBank& bank, int64_t in_channels);

// one LGF layer: same padding (k-1)/2, configurable stride
FeatureMap bank_forward(const GaborBank& bank, const FeatureMap& input, int64_t stride = 1);

// thetas evenly spaced at j*pi/n plus seeded +-1% noise on every value
GaborBank init_bank(int64_t k, int64_t n_orientations, uint64_t seed);

}  // namespace sacnet
