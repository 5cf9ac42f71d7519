#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace poisonlab {

/// Dense float32 buffer in channel-major (C, H, W) order. Used for images,
/// perturbations and trigger patterns alike; image-valued tensors keep every
/// element finite and inside [0,1].
struct Tensor {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<float> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_)
        : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, 0.0f) {}

    static Tensor zeros(int c, int h, int w) { return Tensor(c, h, w); }
    static Tensor full(int c, int h, int w, float value);

    size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
    std::string shape_str() const;

    float& at(int ci, int y, int x) {
        return v[(static_cast<size_t>(ci) * h + y) * w + x];
    }
    float at(int ci, int y, int x) const {
        return v[(static_cast<size_t>(ci) * h + y) * w + x];
    }
};

void clamp01(Tensor& t);
float max_abs(const Tensor& t);
bool all_finite(const Tensor& t);

/// Throws std::invalid_argument unless t is a valid image (finite, in [0,1]).
void validate_image(const Tensor& t, const std::string& context);

/// Bilinear resample to (out_h, out_w), half-pixel centers, edge clamped.
Tensor bilinear_resize(const Tensor& src, int out_h, int out_w);

/// Adjoint of bilinear_resize for a source of size (in_h, in_w): scatters a
/// gradient w.r.t. the resized output back to a gradient w.r.t. the source.
Tensor bilinear_resize_adjoint(const Tensor& grad_out, int in_h, int in_w);

/// FNV-1a over shape and raw pixel bytes.
uint64_t content_hash(const Tensor& t, uint64_t h0 = 1469598103934665603ull);

}  // namespace poisonlab
