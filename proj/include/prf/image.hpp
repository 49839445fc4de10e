#pragma once

#include <string>
#include <vector>

#include "prf/common.hpp"

namespace prf {

// RGB, row-major, values in [0,1].
struct Image {
  int width = 0, height = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 0.0) {}

  double& at(int x, int y, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const {
    return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  Vec3 pixel(int x, int y) const { return {at(x, y, 0), at(x, y, 1), at(x, y, 2)}; }
  void setPixel(int x, int y, const Vec3& v) {
    at(x, y, 0) = v.x;
    at(x, y, 1) = v.y;
    at(x, y, 2) = v.z;
  }
};

// 8-bit RGB PNG with pinned encoder settings, so regenerated datasets are
// byte-identical.
void writePng(const std::string& path, const Image& img);
Image readPng(const std::string& path);

}  // namespace prf
