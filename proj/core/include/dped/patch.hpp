#pragma once

#include <string>

#include "dped/image.hpp"

namespace dped {

/// Aligned (phone, DSLR) training pair.
struct PatchPair {
  ImageRGB source;
  ImageRGB target;
  double cc = 0.0;
  int shift_x = 0;
  int shift_y = 0;
  double rotation_deg = 0.0;
  std::string origin_image;
  int row = 0;
  int col = 0;
};

}  // namespace dped
