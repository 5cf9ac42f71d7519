#include "poisonlab/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace poisonlab::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

int conv_out(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

/// Reused per-thread scratch; conv buffers are large and short-lived, and
/// fresh heap pages per batch cost more than the GEMM itself.
std::vector<float>& scratch(int slot) {
    static thread_local std::vector<float> buffers[4];
    return buffers[slot];
}

/// Valid output-x span for one kernel tap: ix = ox*stride + kx - pad must
/// land inside [0, in_w).
struct TapSpan {
    int lo, hi;  // [lo, hi)
};

TapSpan tap_span(int kx, int stride, int pad, int in_w, int out_w) {
    int lo = 0;
    if (kx - pad < 0) lo = (pad - kx + stride - 1) / stride;
    int hi = out_w;
    const int max_ix = in_w - 1 + pad - kx;
    if (max_ix < 0)
        hi = 0;
    else
        hi = std::min(out_w, max_ix / stride + 1);
    return {lo, std::max(hi, lo)};
}

/// Column buffer for one group and the whole batch:
/// rows = (group_c * k * k), cols = (n * out_h * out_w). Border taps are
/// zero-filled up front; interiors are contiguous (stride 1) or strided copies
/// with no per-pixel branching.
void im2col_group(const Batch& x, int group, int group_c, int kernel, int stride, int pad,
                  int out_h, int out_w, std::vector<float>& col) {
    const int cols_per_image = out_h * out_w;
    const size_t total_cols = static_cast<size_t>(x.n) * cols_per_image;
    col.assign(static_cast<size_t>(group_c) * kernel * kernel * total_cols, 0.0f);
    const int c0 = group * group_c;
    for (int ci = 0; ci < group_c; ++ci) {
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                const size_t row = (static_cast<size_t>(ci) * kernel + ky) * kernel + kx;
                float* dst_row = col.data() + row * total_cols;
                const TapSpan span = tap_span(kx, stride, pad, x.w, out_w);
                for (int ni = 0; ni < x.n; ++ni) {
                    const float* src = x.example(ni) +
                                       static_cast<size_t>(c0 + ci) * x.h * x.w;
                    float* dst = dst_row + static_cast<size_t>(ni) * cols_per_image;
                    for (int oy = 0; oy < out_h; ++oy, dst += out_w) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= x.h) continue;
                        const float* src_row = src + static_cast<size_t>(iy) * x.w;
                        if (stride == 1) {
                            const int off = kx - pad;
                            std::copy(src_row + span.lo + off, src_row + span.hi + off,
                                      dst + span.lo);
                        } else {
                            for (int ox = span.lo; ox < span.hi; ++ox)
                                dst[ox] = src_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

void col2im_group(const std::vector<float>& col, int group, int group_c, int kernel, int stride,
                  int pad, int out_h, int out_w, Batch& dx) {
    const int cols_per_image = out_h * out_w;
    const size_t total_cols = static_cast<size_t>(dx.n) * cols_per_image;
    const int c0 = group * group_c;
    for (int ci = 0; ci < group_c; ++ci) {
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                const size_t row = (static_cast<size_t>(ci) * kernel + ky) * kernel + kx;
                const float* src_row = col.data() + row * total_cols;
                const TapSpan span = tap_span(kx, stride, pad, dx.w, out_w);
                for (int ni = 0; ni < dx.n; ++ni) {
                    float* dst = dx.example(ni) + static_cast<size_t>(c0 + ci) * dx.h * dx.w;
                    const float* src = src_row + static_cast<size_t>(ni) * cols_per_image;
                    for (int oy = 0; oy < out_h; ++oy, src += out_w) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= dx.h) continue;
                        float* dst_row = dst + static_cast<size_t>(iy) * dx.w;
                        if (stride == 1) {
                            const int off = kx - pad;
                            for (int ox = span.lo; ox < span.hi; ++ox)
                                dst_row[ox + off] += src[ox];
                        } else {
                            for (int ox = span.lo; ox < span.hi; ++ox)
                                dst_row[ox * stride + kx - pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

// Direct 3x3 stride-1 pad-1 convolution. For narrow layers the im2col GEMM
// is K-starved and runs far below peak; plain shifted row loops vectorize
// well and win by a wide margin.
void conv3x3_direct_forward(const Batch& x, const float* weight, const float* bias, int out_c,
                            Batch& y) {
    const int h = x.h, w = x.w;
    const size_t plane = static_cast<size_t>(h) * w;
    for (int ni = 0; ni < x.n; ++ni) {
        const float* in = x.example(ni);
        float* out = y.example(ni);
        for (int co = 0; co < out_c; ++co) {
            float* out_plane = out + static_cast<size_t>(co) * plane;
            std::fill(out_plane, out_plane + plane, bias[co]);
            for (int ci = 0; ci < x.c; ++ci) {
                const float* in_plane = in + static_cast<size_t>(ci) * plane;
                const float* wk = weight + ((static_cast<size_t>(co) * x.c) + ci) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const float w0 = wk[ky * 3 + 0], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                    for (int y_out = 0; y_out < h; ++y_out) {
                        const int y_in = y_out + ky - 1;
                        if (y_in < 0 || y_in >= h) continue;
                        const float* src = in_plane + static_cast<size_t>(y_in) * w;
                        float* dst = out_plane + static_cast<size_t>(y_out) * w;
                        dst[0] += w1 * src[0] + w2 * src[1];
                        for (int x_out = 1; x_out < w - 1; ++x_out)
                            dst[x_out] += w0 * src[x_out - 1] + w1 * src[x_out] +
                                          w2 * src[x_out + 1];
                        if (w > 1) dst[w - 1] += w0 * src[w - 2] + w1 * src[w - 1];
                    }
                }
            }
        }
    }
}

}  // namespace

void Layer::state(std::vector<std::vector<float>*>& out) {
    std::vector<Param*> ps;
    params(ps);
    for (Param* p : ps) out.push_back(&p->w);
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_c, int out_c, int kernel, int stride, int pad, int groups, Rng& init_rng)
    : in_c_(in_c), out_c_(out_c), kernel_(kernel), stride_(stride), pad_(pad), groups_(groups) {
    if (in_c % groups != 0 || out_c % groups != 0)
        throw std::invalid_argument("conv2d: channels not divisible by groups");
    const int fan_in = (in_c / groups) * kernel * kernel;
    weight_.resize(static_cast<size_t>(out_c) * fan_in);
    bias_.resize(out_c);
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (float& w : weight_.w) w = static_cast<float>(init_rng.normal() * std_dev);
}

bool Conv2d::use_direct_path(const Batch& x) const {
    // Narrow stem layers only: the im2col GEMM is K-starved there, while the
    // shifted-row loops need wide rows to vectorize.
    return kernel_ == 3 && stride_ == 1 && pad_ == 1 && groups_ == 1 && in_c_ <= 8 && x.w >= 16;
}

Batch Conv2d::run(const Batch& x) const {
    if (x.c != in_c_) throw std::invalid_argument("conv2d: input channel mismatch");
    const int out_h = conv_out(x.h, kernel_, stride_, pad_);
    const int out_w = conv_out(x.w, kernel_, stride_, pad_);
    Batch y(x.n, out_c_, out_h, out_w);
    if (use_direct_path(x)) {
        conv3x3_direct_forward(x, weight_.w.data(), bias_.w.data(), out_c_, y);
        return y;
    }
    const int group_in = in_c_ / groups_;
    const int group_out = out_c_ / groups_;
    const int fan_in = group_in * kernel_ * kernel_;
    const size_t total_cols = static_cast<size_t>(x.n) * out_h * out_w;
    const size_t plane = static_cast<size_t>(out_h) * out_w;

    std::vector<float>& col = scratch(0);
    std::vector<float>& out_buf = scratch(1);
    out_buf.resize(static_cast<size_t>(group_out) * total_cols);
    for (int g = 0; g < groups_; ++g) {
        im2col_group(x, g, group_in, kernel_, stride_, pad_, out_h, out_w, col);
        CMapRM w_map(weight_.w.data() + static_cast<size_t>(g) * group_out * fan_in, group_out,
                     fan_in);
        CMapRM col_map(col.data(), fan_in, static_cast<Eigen::Index>(total_cols));
        MapRM out_map(out_buf.data(), group_out, static_cast<Eigen::Index>(total_cols));
        out_map.noalias() = w_map * col_map;
        for (int oc = 0; oc < group_out; ++oc) {
            const float b = bias_.w[g * group_out + oc];
            const float* src = out_buf.data() + static_cast<size_t>(oc) * total_cols;
            for (int ni = 0; ni < x.n; ++ni) {
                float* dst = y.example(ni) +
                             static_cast<size_t>(g * group_out + oc) * plane;
                const float* s = src + static_cast<size_t>(ni) * plane;
                for (size_t i = 0; i < plane; ++i) dst[i] = s[i] + b;
            }
        }
    }
    return y;
}

Batch Conv2d::infer(const Batch& x) const { return run(x); }

Batch Conv2d::forward(const Batch& x, bool) {
    cached_input_ = x;
    return run(x);
}

Batch Conv2d::backward(const Batch& grad_out) {
    const Batch& x = cached_input_;
    const int out_h = grad_out.h, out_w = grad_out.w;
    const int group_in = in_c_ / groups_;
    const int group_out = out_c_ / groups_;
    const int fan_in = group_in * kernel_ * kernel_;
    const size_t total_cols = static_cast<size_t>(x.n) * out_h * out_w;
    const size_t plane = static_cast<size_t>(out_h) * out_w;

    Batch dx(x.n, x.c, x.h, x.w);
    std::vector<float>& col = scratch(0);
    std::vector<float>& gout_buf = scratch(1);
    gout_buf.resize(static_cast<size_t>(group_out) * total_cols);
    std::vector<float>& dcol = scratch(2);
    dcol.resize(static_cast<size_t>(fan_in) * total_cols);
    for (int g = 0; g < groups_; ++g) {
        // regroup grad_out as [group_out x total_cols]
        for (int oc = 0; oc < group_out; ++oc) {
            float* dst = gout_buf.data() + static_cast<size_t>(oc) * total_cols;
            for (int ni = 0; ni < x.n; ++ni) {
                const float* src = grad_out.example(ni) +
                                   static_cast<size_t>(g * group_out + oc) * plane;
                std::copy(src, src + plane, dst + static_cast<size_t>(ni) * plane);
            }
        }
        im2col_group(x, g, group_in, kernel_, stride_, pad_, out_h, out_w, col);
        CMapRM gout_map(gout_buf.data(), group_out, static_cast<Eigen::Index>(total_cols));
        CMapRM col_map(col.data(), fan_in, static_cast<Eigen::Index>(total_cols));
        MapRM dw_map(weight_.g.data() + static_cast<size_t>(g) * group_out * fan_in, group_out,
                     fan_in);
        dw_map.noalias() += gout_map * col_map.transpose();
        for (int oc = 0; oc < group_out; ++oc) {
            const float* src = gout_buf.data() + static_cast<size_t>(oc) * total_cols;
            double acc = 0.0;
            for (size_t i = 0; i < total_cols; ++i) acc += src[i];
            bias_.g[g * group_out + oc] += static_cast<float>(acc);
        }
        CMapRM w_map(weight_.w.data() + static_cast<size_t>(g) * group_out * fan_in, group_out,
                     fan_in);
        MapRM dcol_map(dcol.data(), fan_in, static_cast<Eigen::Index>(total_cols));
        dcol_map.noalias() = w_map.transpose() * gout_map;
        col2im_group(dcol, g, group_in, kernel_, stride_, pad_, out_h, out_w, dx);
    }
    return dx;
}

void Conv2d::params(std::vector<Param*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int in_features, int out_features, Rng& init_rng)
    : in_features_(in_features), out_features_(out_features) {
    weight_.resize(static_cast<size_t>(out_features) * in_features);
    bias_.resize(out_features);
    const double std_dev = std::sqrt(2.0 / in_features);
    for (float& w : weight_.w) w = static_cast<float>(init_rng.normal() * std_dev);
}

Batch Linear::run(const Batch& x) const {
    if (static_cast<int>(x.example_size()) != in_features_)
        throw std::invalid_argument("linear: input feature mismatch");
    Batch y(x.n, out_features_, 1, 1);
    CMapRM x_map(x.v.data(), x.n, in_features_);
    CMapRM w_map(weight_.w.data(), out_features_, in_features_);
    MapRM y_map(y.v.data(), x.n, out_features_);
    y_map.noalias() = x_map * w_map.transpose();
    for (int ni = 0; ni < x.n; ++ni)
        for (int o = 0; o < out_features_; ++o) y.v[static_cast<size_t>(ni) * out_features_ + o] += bias_.w[o];
    return y;
}

Batch Linear::infer(const Batch& x) const { return run(x); }

Batch Linear::forward(const Batch& x, bool) {
    cached_input_ = x;
    return run(x);
}

Batch Linear::backward(const Batch& grad_out) {
    const Batch& x = cached_input_;
    CMapRM gout_map(grad_out.v.data(), x.n, out_features_);
    CMapRM x_map(x.v.data(), x.n, in_features_);
    MapRM dw_map(weight_.g.data(), out_features_, in_features_);
    dw_map.noalias() += gout_map.transpose() * x_map;
    for (int o = 0; o < out_features_; ++o) {
        double acc = 0.0;
        for (int ni = 0; ni < x.n; ++ni) acc += grad_out.v[static_cast<size_t>(ni) * out_features_ + o];
        bias_.g[o] += static_cast<float>(acc);
    }
    Batch dx(x.n, x.c, x.h, x.w);
    CMapRM w_map(weight_.w.data(), out_features_, in_features_);
    MapRM dx_map(dx.v.data(), x.n, in_features_);
    dx_map.noalias() = gout_map * w_map;
    return dx;
}

void Linear::params(std::vector<Param*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
}

// ---------------------------------------------------------------------------
// ReLU

Batch ReLU::infer(const Batch& x) const {
    Batch y = x;
    if (cap_ > 0.0f) {
        for (float& v : y.v) v = std::clamp(v, 0.0f, cap_);
    } else {
        for (float& v : y.v) v = std::max(v, 0.0f);
    }
    return y;
}

Batch ReLU::forward(const Batch& x, bool) {
    cached_input_ = x;
    return infer(x);
}

Batch ReLU::backward(const Batch& grad_out) {
    Batch dx = grad_out;
    const float hi = cap_ > 0.0f ? cap_ : std::numeric_limits<float>::infinity();
    for (size_t i = 0; i < dx.v.size(); ++i) {
        const float x = cached_input_.v[i];
        if (x <= 0.0f || x >= hi) dx.v[i] = 0.0f;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// MaxPool2

Batch MaxPool2::run(const Batch& x, std::vector<int>* argmax) const {
    const int out_h = x.h / 2, out_w = x.w / 2;
    Batch y(x.n, x.c, out_h, out_w);
    if (argmax) argmax->resize(y.v.size());
    size_t oi = 0;
    for (int ni = 0; ni < x.n; ++ni) {
        for (int ci = 0; ci < x.c; ++ci) {
            const float* plane = x.example(ni) + static_cast<size_t>(ci) * x.h * x.w;
            for (int oy = 0; oy < out_h; ++oy) {
                for (int ox = 0; ox < out_w; ++ox, ++oi) {
                    int best_idx = (2 * oy) * x.w + 2 * ox;
                    float best = plane[best_idx];
                    const int candidates[3] = {(2 * oy) * x.w + 2 * ox + 1,
                                               (2 * oy + 1) * x.w + 2 * ox,
                                               (2 * oy + 1) * x.w + 2 * ox + 1};
                    for (int idx : candidates) {
                        if (plane[idx] > best) {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    y.v[oi] = best;
                    if (argmax)
                        (*argmax)[oi] = static_cast<int>((static_cast<size_t>(ni) * x.c + ci) *
                                                         x.h * x.w) + best_idx;
                }
            }
        }
    }
    return y;
}

Batch MaxPool2::infer(const Batch& x) const { return run(x, nullptr); }

Batch MaxPool2::forward(const Batch& x, bool) {
    in_h_ = x.h;
    in_w_ = x.w;
    return run(x, &cached_argmax_);
}

Batch MaxPool2::backward(const Batch& grad_out) {
    Batch dx(grad_out.n, grad_out.c, in_h_, in_w_);
    for (size_t i = 0; i < grad_out.v.size(); ++i)
        dx.v[cached_argmax_[i]] += grad_out.v[i];
    return dx;
}

// ---------------------------------------------------------------------------
// GlobalAvgPool

Batch GlobalAvgPool::infer(const Batch& x) const {
    Batch y(x.n, x.c, 1, 1);
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    const float inv = 1.0f / static_cast<float>(plane);
    for (int ni = 0; ni < x.n; ++ni) {
        for (int ci = 0; ci < x.c; ++ci) {
            const float* src = x.example(ni) + static_cast<size_t>(ci) * plane;
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) acc += src[i];
            y.v[static_cast<size_t>(ni) * x.c + ci] = static_cast<float>(acc) * inv;
        }
    }
    return y;
}

Batch GlobalAvgPool::forward(const Batch& x, bool) {
    in_h_ = x.h;
    in_w_ = x.w;
    return infer(x);
}

Batch GlobalAvgPool::backward(const Batch& grad_out) {
    Batch dx(grad_out.n, grad_out.c, in_h_, in_w_);
    const size_t plane = static_cast<size_t>(in_h_) * in_w_;
    const float inv = 1.0f / static_cast<float>(plane);
    for (int ni = 0; ni < grad_out.n; ++ni) {
        for (int ci = 0; ci < grad_out.c; ++ci) {
            const float g = grad_out.v[static_cast<size_t>(ni) * grad_out.c + ci] * inv;
            float* dst = dx.example(ni) + static_cast<size_t>(ci) * plane;
            for (size_t i = 0; i < plane; ++i) dst[i] = g;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels) : channels_(channels) {
    gamma_.resize(channels);
    beta_.resize(channels);
    std::fill(gamma_.w.begin(), gamma_.w.end(), 1.0f);
    running_mean_.assign(channels, 0.0f);
    running_var_.assign(channels, 1.0f);
}

namespace {
constexpr float kBnEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;
}  // namespace

Batch BatchNorm2d::infer(const Batch& x) const {
    Batch y = x;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int ci = 0; ci < channels_; ++ci) {
        const float invstd = 1.0f / std::sqrt(running_var_[ci] + kBnEps);
        const float scale = gamma_.w[ci] * invstd;
        const float shift = beta_.w[ci] - running_mean_[ci] * scale;
        for (int ni = 0; ni < x.n; ++ni) {
            float* dst = y.example(ni) + static_cast<size_t>(ci) * plane;
            for (size_t i = 0; i < plane; ++i) dst[i] = dst[i] * scale + shift;
        }
    }
    return y;
}

Batch BatchNorm2d::forward(const Batch& x, bool training) {
    cached_training_ = training;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    const size_t m = static_cast<size_t>(x.n) * plane;
    Batch y = x;
    cached_xhat_ = Batch(x.n, x.c, x.h, x.w);
    cached_invstd_.assign(channels_, 0.0f);
    for (int ci = 0; ci < channels_; ++ci) {
        float mean, var;
        if (training) {
            double sum = 0.0, sq = 0.0;
            for (int ni = 0; ni < x.n; ++ni) {
                const float* src = x.example(ni) + static_cast<size_t>(ci) * plane;
                for (size_t i = 0; i < plane; ++i) {
                    sum += src[i];
                    sq += static_cast<double>(src[i]) * src[i];
                }
            }
            mean = static_cast<float>(sum / m);
            var = static_cast<float>(std::max(0.0, sq / m - static_cast<double>(mean) * mean));
            running_mean_[ci] = (1.0f - kBnMomentum) * running_mean_[ci] + kBnMomentum * mean;
            running_var_[ci] = (1.0f - kBnMomentum) * running_var_[ci] + kBnMomentum * var;
        } else {
            mean = running_mean_[ci];
            var = running_var_[ci];
        }
        const float invstd = 1.0f / std::sqrt(var + kBnEps);
        cached_invstd_[ci] = invstd;
        for (int ni = 0; ni < x.n; ++ni) {
            const float* src = x.example(ni) + static_cast<size_t>(ci) * plane;
            float* xh = cached_xhat_.example(ni) + static_cast<size_t>(ci) * plane;
            float* dst = y.example(ni) + static_cast<size_t>(ci) * plane;
            for (size_t i = 0; i < plane; ++i) {
                xh[i] = (src[i] - mean) * invstd;
                dst[i] = gamma_.w[ci] * xh[i] + beta_.w[ci];
            }
        }
    }
    return y;
}

Batch BatchNorm2d::backward(const Batch& grad_out) {
    const size_t plane = static_cast<size_t>(grad_out.h) * grad_out.w;
    const size_t m = static_cast<size_t>(grad_out.n) * plane;
    Batch dx(grad_out.n, grad_out.c, grad_out.h, grad_out.w);
    for (int ci = 0; ci < channels_; ++ci) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int ni = 0; ni < grad_out.n; ++ni) {
            const float* dy = grad_out.example(ni) + static_cast<size_t>(ci) * plane;
            const float* xh = cached_xhat_.example(ni) + static_cast<size_t>(ci) * plane;
            for (size_t i = 0; i < plane; ++i) {
                sum_dy += dy[i];
                sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
            }
        }
        gamma_.g[ci] += static_cast<float>(sum_dy_xhat);
        beta_.g[ci] += static_cast<float>(sum_dy);
        const float invstd = cached_invstd_[ci];
        const float g = gamma_.w[ci];
        if (cached_training_) {
            const float inv_m = 1.0f / static_cast<float>(m);
            const float mean_dy = static_cast<float>(sum_dy) * inv_m;
            const float mean_dy_xhat = static_cast<float>(sum_dy_xhat) * inv_m;
            for (int ni = 0; ni < grad_out.n; ++ni) {
                const float* dy = grad_out.example(ni) + static_cast<size_t>(ci) * plane;
                const float* xh = cached_xhat_.example(ni) + static_cast<size_t>(ci) * plane;
                float* d = dx.example(ni) + static_cast<size_t>(ci) * plane;
                for (size_t i = 0; i < plane; ++i)
                    d[i] = g * invstd * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
            }
        } else {
            // Running statistics are constants: the layer is affine.
            for (int ni = 0; ni < grad_out.n; ++ni) {
                const float* dy = grad_out.example(ni) + static_cast<size_t>(ci) * plane;
                float* d = dx.example(ni) + static_cast<size_t>(ci) * plane;
                for (size_t i = 0; i < plane; ++i) d[i] = g * invstd * dy[i];
            }
        }
    }
    return dx;
}

void BatchNorm2d::params(std::vector<Param*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
}

void BatchNorm2d::state(std::vector<std::vector<float>*>& out) {
    out.push_back(&gamma_.w);
    out.push_back(&beta_.w);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
}

// ---------------------------------------------------------------------------
// Sequential / Residual

Batch Sequential::infer(const Batch& x) const {
    Batch cur = x;
    for (const auto& layer : layers_) cur = layer->infer(cur);
    return cur;
}

Batch Sequential::forward(const Batch& x, bool training) {
    Batch cur = x;
    for (const auto& layer : layers_) cur = layer->forward(cur, training);
    return cur;
}

Batch Sequential::backward(const Batch& grad_out) {
    Batch cur = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
}

void Sequential::params(std::vector<Param*>& out) {
    for (const auto& layer : layers_) layer->params(out);
}

void Sequential::state(std::vector<std::vector<float>*>& out) {
    for (const auto& layer : layers_) layer->state(out);
}

Batch Residual::infer(const Batch& x) const {
    Batch main = main_->infer(x);
    const Batch shortcut = shortcut_ ? shortcut_->infer(x) : x;
    if (relu_after_) {
        for (size_t i = 0; i < main.v.size(); ++i)
            main.v[i] = std::max(main.v[i] + shortcut.v[i], 0.0f);
    } else {
        for (size_t i = 0; i < main.v.size(); ++i) main.v[i] += shortcut.v[i];
    }
    return main;
}

Batch Residual::forward(const Batch& x, bool training) {
    Batch main = main_->forward(x, training);
    const Batch shortcut = shortcut_ ? shortcut_->forward(x, training) : x;
    for (size_t i = 0; i < main.v.size(); ++i) main.v[i] += shortcut.v[i];
    if (!relu_after_) return main;
    cached_sum_ = main;
    for (float& v : main.v) v = std::max(v, 0.0f);
    return main;
}

Batch Residual::backward(const Batch& grad_out) {
    Batch grad_sum = grad_out;
    if (relu_after_) {
        for (size_t i = 0; i < grad_sum.v.size(); ++i)
            if (cached_sum_.v[i] <= 0.0f) grad_sum.v[i] = 0.0f;
    }
    Batch dx = main_->backward(grad_sum);
    const Batch ds = shortcut_ ? shortcut_->backward(grad_sum) : grad_sum;
    for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += ds.v[i];
    return dx;
}

void Residual::params(std::vector<Param*>& out) {
    main_->params(out);
    if (shortcut_) shortcut_->params(out);
}

void Residual::state(std::vector<std::vector<float>*>& out) {
    main_->state(out);
    if (shortcut_) shortcut_->state(out);
}

// ---------------------------------------------------------------------------
// Optimizer and loss

void zero_grads(std::vector<Param*>& params) {
    for (Param* p : params) std::fill(p->g.begin(), p->g.end(), 0.0f);
}

void sgd_step(std::vector<Param*>& params, const SgdConfig& cfg) {
    for (Param* p : params) {
        for (size_t i = 0; i < p->w.size(); ++i) {
            const float g = p->g[i] + cfg.weight_decay * p->w[i];
            p->m[i] = cfg.momentum * p->m[i] + g;
            p->w[i] -= cfg.lr * p->m[i];
        }
    }
}

double softmax_cross_entropy(const Batch& logits, const std::vector<int>& targets,
                             const std::vector<float>& weights, Batch* grad_logits) {
    const int n = logits.n;
    const int classes = logits.c;
    if (static_cast<int>(targets.size()) != n || static_cast<int>(weights.size()) != n)
        throw std::invalid_argument("softmax_cross_entropy: batch size mismatch");
    if (grad_logits) *grad_logits = Batch(n, classes, 1, 1);
    double total = 0.0;
    const float inv_n = 1.0f / static_cast<float>(n);
    std::vector<double> probs(classes);
    for (int ni = 0; ni < n; ++ni) {
        const float* z = logits.v.data() + static_cast<size_t>(ni) * classes;
        double zmax = z[0];
        for (int i = 1; i < classes; ++i) zmax = std::max(zmax, static_cast<double>(z[i]));
        double sum = 0.0;
        for (int i = 0; i < classes; ++i) {
            probs[i] = std::exp(z[i] - zmax);
            sum += probs[i];
        }
        const int target = targets[ni];
        const double log_p = (z[target] - zmax) - std::log(sum);
        total += -log_p * weights[ni];
        if (grad_logits) {
            float* g = grad_logits->v.data() + static_cast<size_t>(ni) * classes;
            for (int i = 0; i < classes; ++i) {
                const double p = probs[i] / sum;
                g[i] = static_cast<float>((p - (i == target ? 1.0 : 0.0)) * weights[ni]) * inv_n;
            }
        }
    }
    return total / n;
}

}  // namespace poisonlab::nn
