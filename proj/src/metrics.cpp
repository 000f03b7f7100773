#include "uwm/metrics.hpp"

#include <array>
#include <cmath>

namespace uwm {

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (k1*L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWin> gauss_kernel() {
  std::array<double, kWin> k{};
  double sum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    double d = i - (kWin - 1) / 2.0;
    k[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable valid-mode convolution of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int64_t h, int64_t w) {
  static const std::array<double, kWin> g = gauss_kernel();
  int64_t oh = h - kWin + 1, ow = w - kWin + 1;
  std::vector<double> rows((size_t)(oh * w), 0.0);
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int t = 0; t < kWin; ++t) s += g[(size_t)t] * plane[(size_t)((y + t) * w + x)];
      rows[(size_t)(y * w + x)] = s;
    }
  std::vector<double> out((size_t)(oh * ow), 0.0);
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int t = 0; t < kWin; ++t) s += g[(size_t)t] * rows[(size_t)(y * w + x + t)];
      out[(size_t)(y * ow + x)] = s;
    }
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError("psnr: extents differ, " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                     " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
  double acc = 0.0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    double d = a.px[i] - b.px[i];
    acc += d * d;
  }
  double mse = acc / (double)a.px.size();
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError("ssim: extents differ, " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                     " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
  if (a.h < kWin || a.w < kWin)
    throw DataError("ssim: image " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                    " smaller than the " + std::to_string(kWin) + "-tap window");

  int64_t n = a.h * a.w;
  double total = 0.0;
  for (int64_t c = 0; c < 3; ++c) {
    std::vector<double> pa(a.px.begin() + c * n, a.px.begin() + (c + 1) * n);
    std::vector<double> pb(b.px.begin() + c * n, b.px.begin() + (c + 1) * n);
    std::vector<double> paa(pa.size()), pbb(pb.size()), pab(pa.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    auto mu_a = filter_valid(pa, a.h, a.w);
    auto mu_b = filter_valid(pb, a.h, a.w);
    auto m_aa = filter_valid(paa, a.h, a.w);
    auto m_bb = filter_valid(pbb, a.h, a.w);
    auto m_ab = filter_valid(pab, a.h, a.w);
    double acc = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
      double va = m_aa[i] - mu_a[i] * mu_a[i];
      double vb = m_bb[i] - mu_b[i] * mu_b[i];
      double cov = m_ab[i] - mu_a[i] * mu_b[i];
      double num = (2.0 * mu_a[i] * mu_b[i] + kC1) * (2.0 * cov + kC2);
      double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2);
      acc += num / den;
    }
    total += acc / (double)mu_a.size();
  }
  return total / 3.0;
}

}  // namespace uwm
