#pragma once

#include "uwm/image.hpp"

namespace uwm {

// Mean squared error over all 3*H*W elements, then 10*log10(1/MSE).
// MSE below 1e-10 returns the 99.0 dB cap.
double psnr(const Image& a, const Image& b);

// Gaussian-window SSIM: 11-tap window, sigma 1.5, k1 0.01, k2 0.03,
// dynamic range 1. Valid windows only, averaged over positions and channels.
double ssim(const Image& a, const Image& b);

}  // namespace uwm
