#pragma once

#include <string>
#include <vector>

#include "uwm/common.hpp"

namespace uwm {

// RGB image in planar CHW layout, values in [0, 1]. 8-bit codec values map as
// v / 255, so 255 decodes to exactly 1.0.
struct Image {
  int64_t h = 0, w = 0;
  std::vector<double> px;  // size 3 * h * w

  double& at(int64_t c, int64_t y, int64_t x) { return px[(c * h + y) * w + x]; }
  double at(int64_t c, int64_t y, int64_t x) const { return px[(c * h + y) * w + x]; }
};

Image load_image(const std::string& path);          // .png or .ppm by extension
void save_image(const std::string& path, const Image& img);

Image load_png(const std::string& path);
void save_png(const std::string& path, const Image& img);
Image load_ppm(const std::string& path);
void save_ppm(const std::string& path, const Image& img);

// nearest-neighbor resize used only to bring tiny images up to the patch size
Image resize_nearest(const Image& img, int64_t nh, int64_t nw);

// mirror padding on the bottom/right edges (no edge duplication)
Image pad_reflect_to_multiple(const Image& img, int64_t multiple);
Image crop(const Image& img, int64_t y0, int64_t x0, int64_t nh, int64_t nw);

}  // namespace uwm
