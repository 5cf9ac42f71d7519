#pragma once

#include <string>

#include "poisonlab/tensor.hpp"

namespace poisonlab {

/// Decode a PNG into an RGB float tensor in [0,1]. Grayscale and palette
/// images are expanded to RGB; 16-bit channels are reduced to 8; alpha is
/// dropped. Throws std::runtime_error on unreadable or corrupt files.
Tensor read_png(const std::string& path);

/// Encode an image (c == 1 or 3) as an 8-bit PNG, clamping to [0,1].
void write_png(const Tensor& image, const std::string& path);

}  // namespace poisonlab
