#include "poisonlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "poisonlab/hash.hpp"

namespace poisonlab {

Tensor Tensor::full(int c, int h, int w, float value) {
    Tensor t(c, h, w);
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
}

std::string Tensor::shape_str() const {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

void clamp01(Tensor& t) {
    for (float& x : t.v) x = std::clamp(x, 0.0f, 1.0f);
}

float max_abs(const Tensor& t) {
    float m = 0.0f;
    for (float x : t.v) m = std::max(m, std::fabs(x));
    return m;
}

bool all_finite(const Tensor& t) {
    for (float x : t.v)
        if (!std::isfinite(x)) return false;
    return true;
}

void validate_image(const Tensor& t, const std::string& context) {
    if (t.c <= 0 || t.h <= 0 || t.w <= 0 || t.v.size() != t.size())
        throw std::invalid_argument(context + ": malformed tensor shape " + t.shape_str());
    for (float x : t.v) {
        if (!std::isfinite(x))
            throw std::invalid_argument(context + ": non-finite pixel");
        if (x < 0.0f || x > 1.0f)
            throw std::invalid_argument(context + ": pixel outside [0,1]");
    }
}

namespace {

struct Tap {
    int lo, hi;
    double w_lo, w_hi;
};

Tap tap_for(int out_i, int out_n, int in_n) {
    const double scale = static_cast<double>(in_n) / out_n;
    double src = (out_i + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in_n - 1);
    const double f = src - lo;
    return {lo, hi, 1.0 - f, f};
}

}  // namespace

Tensor bilinear_resize(const Tensor& src, int out_h, int out_w) {
    if (src.h == out_h && src.w == out_w) return src;
    Tensor dst(src.c, out_h, out_w);
    std::vector<Tap> xs(out_w), ys(out_h);
    for (int x = 0; x < out_w; ++x) xs[x] = tap_for(x, out_w, src.w);
    for (int y = 0; y < out_h; ++y) ys[y] = tap_for(y, out_h, src.h);
    for (int ci = 0; ci < src.c; ++ci) {
        for (int y = 0; y < out_h; ++y) {
            const Tap& ty = ys[y];
            for (int x = 0; x < out_w; ++x) {
                const Tap& tx = xs[x];
                const double val =
                    ty.w_lo * (tx.w_lo * src.at(ci, ty.lo, tx.lo) + tx.w_hi * src.at(ci, ty.lo, tx.hi)) +
                    ty.w_hi * (tx.w_lo * src.at(ci, ty.hi, tx.lo) + tx.w_hi * src.at(ci, ty.hi, tx.hi));
                dst.at(ci, y, x) = static_cast<float>(val);
            }
        }
    }
    return dst;
}

Tensor bilinear_resize_adjoint(const Tensor& grad_out, int in_h, int in_w) {
    if (grad_out.h == in_h && grad_out.w == in_w) return grad_out;
    Tensor grad_in(grad_out.c, in_h, in_w);
    std::vector<Tap> xs(grad_out.w), ys(grad_out.h);
    for (int x = 0; x < grad_out.w; ++x) xs[x] = tap_for(x, grad_out.w, in_w);
    for (int y = 0; y < grad_out.h; ++y) ys[y] = tap_for(y, grad_out.h, in_h);
    for (int ci = 0; ci < grad_out.c; ++ci) {
        for (int y = 0; y < grad_out.h; ++y) {
            const Tap& ty = ys[y];
            for (int x = 0; x < grad_out.w; ++x) {
                const Tap& tx = xs[x];
                const float g = grad_out.at(ci, y, x);
                grad_in.at(ci, ty.lo, tx.lo) += static_cast<float>(ty.w_lo * tx.w_lo) * g;
                grad_in.at(ci, ty.lo, tx.hi) += static_cast<float>(ty.w_lo * tx.w_hi) * g;
                grad_in.at(ci, ty.hi, tx.lo) += static_cast<float>(ty.w_hi * tx.w_lo) * g;
                grad_in.at(ci, ty.hi, tx.hi) += static_cast<float>(ty.w_hi * tx.w_hi) * g;
            }
        }
    }
    return grad_in;
}

uint64_t content_hash(const Tensor& t, uint64_t h0) {
    uint64_t h = h0;
    const int dims[3] = {t.c, t.h, t.w};
    h = fnv1a64(dims, sizeof(dims), h);
    h = fnv1a64(t.v.data(), t.v.size() * sizeof(float), h);
    return h;
}

}  // namespace poisonlab
