#include "poisonlab/fixture.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "poisonlab/rng.hpp"

namespace poisonlab::data {

namespace {

constexpr double kTwoPi = 6.283185307179586477;

const char* kClassNames[10] = {"aqua", "brick", "coral", "dune",  "fern",
                               "iris", "moss",  "onyx",  "pearl", "slate"};

struct Wave {
    double fy, fx, phase, amp;
};

/// Per-class pattern: three seeded sinusoids per channel plus a color tint,
/// normalized so the summed waves peak at +-1 before scaling.
struct ClassPattern {
    std::array<std::array<Wave, 3>, 3> waves;  // [channel][wave]
    std::array<double, 3> tint;

    static ClassPattern make(uint64_t seed, int freq_lo, int freq_hi) {
        ClassPattern p;
        Rng rng(seed);
        for (int ci = 0; ci < 3; ++ci) {
            double total = 0.0;
            for (int j = 0; j < 3; ++j) {
                Wave& wav = p.waves[ci][j];
                wav.fy = static_cast<double>(rng.uniform_int(freq_lo, freq_hi));
                wav.fx = static_cast<double>(rng.uniform_int(freq_lo, freq_hi));
                if (rng.uniform() < 0.5) wav.fy = -wav.fy;
                wav.phase = rng.uniform(0.0, kTwoPi);
                wav.amp = rng.uniform(0.4, 1.0);
                total += wav.amp;
            }
            for (int j = 0; j < 3; ++j) p.waves[ci][j].amp /= total;
            p.tint[ci] = rng.uniform(-0.06, 0.06);
        }
        return p;
    }

    double value(int ci, double y, double x, int period) const {
        double v = 0.0;
        for (const Wave& wav : waves[ci])
            v += wav.amp * std::sin(kTwoPi * (wav.fy * y + wav.fx * x) / period + wav.phase);
        return v;
    }
};

Tensor render_sample(const ClassPattern& pattern, int h, int w, int period, float amplitude,
                     float noise_sigma, Rng& rng) {
    const double brightness = rng.uniform(-0.08, 0.08);
    const double dy = static_cast<double>(rng.uniform_int(-3, 3));
    const double dx = static_cast<double>(rng.uniform_int(-3, 3));
    Tensor img(3, h, w);
    for (int ci = 0; ci < 3; ++ci) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double v = 0.5 + pattern.tint[ci] + brightness +
                                 amplitude * pattern.value(ci, y + dy, x + dx, period) +
                                 noise_sigma * rng.normal();
                img.at(ci, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    // Local bright/dark blobs: stand-ins for specular highlights and shadows.
    const int blobs = static_cast<int>(rng.uniform_int(0, 2));
    for (int b = 0; b < blobs; ++b) {
        const int side = static_cast<int>(rng.uniform_int(2, 3));
        const int by = static_cast<int>(rng.uniform_int(0, h - side));
        const int bx = static_cast<int>(rng.uniform_int(0, w - side));
        double shift = rng.uniform(0.25, 0.4);
        if (rng.uniform() < 0.5) shift = -shift;
        for (int ci = 0; ci < 3; ++ci)
            for (int y = by; y < by + side; ++y)
                for (int x = bx; x < bx + side; ++x)
                    img.at(ci, y, x) = static_cast<float>(
                        std::clamp(img.at(ci, y, x) + shift, 0.0, 1.0));
    }
    return img;
}

std::string make_id(const char* prefix, int cls, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%02d/%06d", prefix, cls, i);
    return buf;
}

}  // namespace

namespace {

/// Solve A x = b for a small symmetric-ish system (Gaussian elimination with
/// partial pivoting); A is n x n row-major and is destroyed.
std::vector<double> solve_small(std::vector<double> a, std::vector<double> b, int n) {
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int row = col + 1; row < n; ++row)
            if (std::fabs(a[row * n + col]) > std::fabs(a[pivot * n + col])) pivot = row;
        if (std::fabs(a[pivot * n + col]) < 1e-12)
            throw std::runtime_error("fixture encoder: singular prompt gram matrix");
        for (int k = 0; k < n; ++k) std::swap(a[col * n + k], a[pivot * n + k]);
        std::swap(b[col], b[pivot]);
        for (int row = col + 1; row < n; ++row) {
            const double f = a[row * n + col] / a[col * n + col];
            for (int k = col; k < n; ++k) a[row * n + k] -= f * a[col * n + k];
            b[row] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (int col = n - 1; col >= 0; --col) {
        double acc = b[col];
        for (int k = col + 1; k < n; ++k) acc -= a[col * n + k] * x[k];
        x[col] = acc / a[col * n + col];
    }
    return x;
}

}  // namespace

std::shared_ptr<encoder::LinearEncoder> make_fixture_encoder(const FixtureParams& params,
                                                             int dim, int input_resolution) {
    const int classes = params.classes;
    if (dim < classes + 1)
        throw std::invalid_argument("fixture encoder: dim must exceed the class count");

    encoder::LinearEncoder::Params ep;
    ep.dim = dim;
    ep.input_resolution = input_resolution;
    const std::string id = "fixture:s" + std::to_string(params.seed) + ":d" +
                           std::to_string(dim) + ":r" + std::to_string(input_resolution);
    auto enc = encoder::LinearEncoder::seeded(ep, Rng::derive(params.seed, 0xa119), id);

    // Auxiliary pool from a stream disjoint from train/test/external.
    const int per_class = 200;
    std::vector<ClassPattern> patterns;
    for (int cls = 0; cls < classes; ++cls)
        patterns.push_back(ClassPattern::make(Rng::derive(params.seed, 100 + cls), 1, 4));

    const size_t z_dim = static_cast<size_t>(3) * input_resolution * input_resolution;
    std::vector<std::vector<double>> class_mean(classes, std::vector<double>(z_dim, 0.0));
    std::vector<double> global_mean(z_dim, 0.0);
    for (int cls = 0; cls < classes; ++cls) {
        for (int i = 0; i < per_class; ++i) {
            Rng rng(Rng::derive(params.seed, (7ull << 32) + cls * 1000003ull + i));
            const Tensor img = render_sample(patterns[cls], params.height, params.width,
                                             params.width, params.pattern_amplitude,
                                             params.noise_sigma, rng);
            const Tensor small = bilinear_resize(img, input_resolution, input_resolution);
            for (size_t p = 0; p < z_dim; ++p) {
                const double z = (small.v[p] - ep.pixel_mean[0]) / ep.pixel_std[0];
                class_mean[cls][p] += z;
                global_mean[p] += z;
            }
        }
    }
    for (int cls = 0; cls < classes; ++cls)
        for (double& v : class_mean[cls]) v /= per_class;
    for (double& v : global_mean) v /= static_cast<double>(classes) * per_class;

    // Image tower: centered, normalized class templates, then scaled-down
    // seeded random rows for the remaining dimensions.
    std::vector<float>& w_img = enc->image_weights();
    for (int cls = 0; cls < classes; ++cls) {
        double norm = 0.0;
        for (size_t p = 0; p < z_dim; ++p) {
            const double t = class_mean[cls][p] - global_mean[p];
            norm += t * t;
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (size_t p = 0; p < z_dim; ++p)
            w_img[cls * z_dim + p] =
                static_cast<float>((class_mean[cls][p] - global_mean[p]) / norm);
    }
    for (int row = classes; row < dim; ++row)
        for (size_t p = 0; p < z_dim; ++p) w_img[row * z_dim + p] *= 0.25f;

    // Class-direction targets in embedding space: mean embedding per class.
    std::vector<std::vector<double>> target(classes, std::vector<double>(dim, 0.0));
    for (int cls = 0; cls < classes; ++cls) {
        for (int d = 0; d < dim; ++d) {
            double acc = 0.0;
            for (size_t p = 0; p < z_dim; ++p)
                acc += w_img[d * z_dim + p] * (class_mean[cls][p] - 0.0);
            target[cls][d] = acc;
        }
        double norm = 0.0;
        for (double v : target[cls]) norm += v * v;
        norm = std::sqrt(std::max(norm, 1e-12));
        for (double& v : target[cls]) v /= norm;
    }

    // Text tower: least squares so that prompt n-gram vectors map onto their
    // class targets. W = M (G^T G)^{-1} G^T, assembled row by row.
    std::vector<std::vector<double>> grams(classes);
    {
        // Reuse the public text path of a scratch encoder with identity-ish
        // weights to obtain normalized n-gram counts per prompt.
        for (int cls = 0; cls < classes; ++cls) {
            const std::string prompt = std::string("a photo of a ") + kClassNames[cls];
            grams[cls] = encoder::ngram_histogram(prompt, ep.ngram_buckets, ep.ngram_order);
        }
    }
    std::vector<double> gram_matrix(static_cast<size_t>(classes) * classes, 0.0);
    for (int i = 0; i < classes; ++i)
        for (int j = 0; j < classes; ++j) {
            double acc = 0.0;
            for (int b = 0; b < ep.ngram_buckets; ++b) acc += grams[i][b] * grams[j][b];
            gram_matrix[i * classes + j] = acc;
        }
    std::vector<float>& w_txt = enc->text_weights();
    std::fill(w_txt.begin(), w_txt.end(), 0.0f);
    for (int d = 0; d < dim; ++d) {
        std::vector<double> rhs(classes);
        for (int cls = 0; cls < classes; ++cls) rhs[cls] = target[cls][d];
        const std::vector<double> coeff = solve_small(gram_matrix, rhs, classes);
        for (int b = 0; b < ep.ngram_buckets; ++b) {
            double acc = 0.0;
            for (int cls = 0; cls < classes; ++cls) acc += coeff[cls] * grams[cls][b];
            w_txt[static_cast<size_t>(d) * ep.ngram_buckets + b] = static_cast<float>(acc);
        }
    }
    return enc;
}

FixtureBundle make_desk_fixture(const FixtureParams& params) {
    if (params.classes < 2 || params.classes > 10)
        throw std::invalid_argument("fixture: classes must be in [2,10]");

    std::vector<ClassPattern> train_patterns, external_patterns;
    for (int cls = 0; cls < params.classes; ++cls) {
        train_patterns.push_back(
            ClassPattern::make(Rng::derive(params.seed, 100 + cls), 1, 4));
        external_patterns.push_back(
            ClassPattern::make(Rng::derive(params.seed, 900 + cls), 5, 8));
    }
    std::vector<std::string> names(kClassNames, kClassNames + params.classes);

    FixtureBundle bundle;
    auto fill = [&](Dataset& ds, Split split, const char* prefix, int per_class, int h, int w,
                    const std::vector<ClassPattern>& patterns, uint64_t stream) {
        ds.split = split;
        ds.class_count = params.classes;
        ds.class_names = names;
        for (int cls = 0; cls < params.classes; ++cls) {
            for (int i = 0; i < per_class; ++i) {
                Rng rng(Rng::derive(params.seed, stream + cls * 1000003ull + i));
                LabeledExample ex;
                ex.image = render_sample(patterns[cls], h, w, params.width,
                                         params.pattern_amplitude, params.noise_sigma, rng);
                ex.label = cls;
                ex.source_id = make_id(prefix, cls, i);
                ds.examples.push_back(std::move(ex));
            }
        }
    };

    fill(bundle.train, Split::train, "c", params.train_per_class, params.height, params.width,
         train_patterns, 1ull << 32);
    fill(bundle.test, Split::test, "t", params.test_per_class, params.height, params.width,
         train_patterns, 2ull << 32);
    const int ext_per_class = (params.external_count + params.classes - 1) / params.classes;
    fill(bundle.external_pool, Split::external_pool, "x", ext_per_class, params.external_height,
         params.external_width, external_patterns, 3ull << 32);
    bundle.external_pool.examples.resize(
        std::min<size_t>(bundle.external_pool.examples.size(), params.external_count));
    return bundle;
}

}  // namespace poisonlab::data
