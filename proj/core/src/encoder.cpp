#include "poisonlab/encoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "poisonlab/hash.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab::encoder {

namespace {

constexpr char kEncoderMagic[8] = {'P', 'L', 'E', 'N', 'C', '0', '0', '1'};
constexpr double kDenominatorGuard = 1e-8;

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_f32(std::ostream& out, float v) { out.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::istream& in, const char* what) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error(std::string("encoder bundle: truncated ") + what);
    return v;
}

float read_f32(std::istream& in, const char* what) {
    float v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error(std::string("encoder bundle: truncated ") + what);
    return v;
}

}  // namespace

std::shared_ptr<LinearEncoder> LinearEncoder::seeded(const Params& params, uint64_t seed,
                                                     std::string id) {
    auto enc = std::shared_ptr<LinearEncoder>(new LinearEncoder(params, std::move(id)));
    const size_t img_in = static_cast<size_t>(params.channels) * params.input_resolution *
                          params.input_resolution;
    enc->w_img_.resize(static_cast<size_t>(params.dim) * img_in);
    enc->w_txt_.resize(static_cast<size_t>(params.dim) * params.ngram_buckets);
    Rng img_rng(Rng::derive(seed, 0x1a6e));
    Rng txt_rng(Rng::derive(seed, 0x7e87));
    const double img_scale = 1.0 / std::sqrt(static_cast<double>(img_in));
    const double txt_scale = 1.0 / std::sqrt(static_cast<double>(params.ngram_buckets));
    for (float& w : enc->w_img_) w = static_cast<float>(img_rng.normal() * img_scale);
    for (float& w : enc->w_txt_) w = static_cast<float>(txt_rng.normal() * txt_scale);
    return enc;
}

void LinearEncoder::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("encoder bundle: cannot write " + path);
    out.write(kEncoderMagic, 8);
    write_u32(out, 1);  // version
    write_u32(out, static_cast<uint32_t>(params_.dim));  // image tower dim
    write_u32(out, static_cast<uint32_t>(params_.dim));  // text tower dim
    write_u32(out, static_cast<uint32_t>(params_.channels));
    write_u32(out, static_cast<uint32_t>(params_.input_resolution));
    write_u32(out, static_cast<uint32_t>(params_.ngram_buckets));
    write_u32(out, static_cast<uint32_t>(params_.ngram_order));
    for (int i = 0; i < 3; ++i) write_f32(out, params_.pixel_mean[i]);
    for (int i = 0; i < 3; ++i) write_f32(out, params_.pixel_std[i]);
    out.write(reinterpret_cast<const char*>(w_img_.data()), w_img_.size() * sizeof(float));
    out.write(reinterpret_cast<const char*>(w_txt_.data()), w_txt_.size() * sizeof(float));
    if (!out) throw std::runtime_error("encoder bundle: write failed: " + path);
}

std::shared_ptr<LinearEncoder> LinearEncoder::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("encoder bundle: cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kEncoderMagic, 8) != 0)
        throw std::runtime_error("encoder bundle: bad magic in " + path);
    const uint32_t version = read_u32(in, "version");
    if (version != 1)
        throw std::runtime_error("encoder bundle: unsupported version " + std::to_string(version));
    const uint32_t dim_img = read_u32(in, "image tower dim");
    const uint32_t dim_txt = read_u32(in, "text tower dim");
    if (dim_img != dim_txt)
        throw std::runtime_error("encoder bundle: image/text tower dimension mismatch (" +
                                 std::to_string(dim_img) + " vs " + std::to_string(dim_txt) + ")");
    Params p;
    p.dim = static_cast<int>(dim_img);
    p.channels = static_cast<int>(read_u32(in, "channels"));
    p.input_resolution = static_cast<int>(read_u32(in, "input resolution"));
    p.ngram_buckets = static_cast<int>(read_u32(in, "ngram buckets"));
    p.ngram_order = static_cast<int>(read_u32(in, "ngram order"));
    if (p.dim <= 0 || p.channels <= 0 || p.input_resolution <= 0 || p.ngram_buckets <= 0 ||
        p.ngram_order <= 0)
        throw std::runtime_error("encoder bundle: invalid header field in " + path);
    for (int i = 0; i < 3; ++i) p.pixel_mean[i] = read_f32(in, "pixel mean");
    for (int i = 0; i < 3; ++i) p.pixel_std[i] = read_f32(in, "pixel std");
    for (int i = 0; i < 3; ++i)
        if (!(p.pixel_std[i] > 0.0f))
            throw std::runtime_error("encoder bundle: non-positive pixel std in " + path);

    auto enc = std::shared_ptr<LinearEncoder>(new LinearEncoder(p, "linear:" + path));
    const size_t img_in =
        static_cast<size_t>(p.channels) * p.input_resolution * p.input_resolution;
    enc->w_img_.resize(static_cast<size_t>(p.dim) * img_in);
    enc->w_txt_.resize(static_cast<size_t>(p.dim) * p.ngram_buckets);
    if (!in.read(reinterpret_cast<char*>(enc->w_img_.data()), enc->w_img_.size() * sizeof(float)))
        throw std::runtime_error("encoder bundle: truncated image weights in " + path);
    if (!in.read(reinterpret_cast<char*>(enc->w_txt_.data()), enc->w_txt_.size() * sizeof(float)))
        throw std::runtime_error("encoder bundle: truncated text weights in " + path);
    return enc;
}

EmbeddingVector LinearEncoder::embed_image(const Tensor& image) const {
    if (image.c != params_.channels)
        throw std::invalid_argument("encoder: expected " + std::to_string(params_.channels) +
                                    " channels, got " + image.shape_str());
    const int r = params_.input_resolution;
    const Tensor resized = bilinear_resize(image, r, r);
    const size_t plane = static_cast<size_t>(r) * r;
    const size_t img_in = static_cast<size_t>(params_.channels) * plane;

    std::vector<double> x(img_in);
    for (int ci = 0; ci < params_.channels; ++ci) {
        const double mean = params_.pixel_mean[ci % 3];
        const double inv_std = 1.0 / params_.pixel_std[ci % 3];
        for (size_t i = 0; i < plane; ++i)
            x[ci * plane + i] = (resized.v[ci * plane + i] - mean) * inv_std;
    }
    EmbeddingVector e(params_.dim);
    for (int d = 0; d < params_.dim; ++d) {
        const float* row = w_img_.data() + static_cast<size_t>(d) * img_in;
        double acc = 0.0;
        for (size_t i = 0; i < img_in; ++i) acc += row[i] * x[i];
        e[d] = acc;
    }
    return e;
}

Tensor LinearEncoder::embed_image_vjp(const Tensor& image, const EmbeddingVector& grad) const {
    if (static_cast<int>(grad.size()) != params_.dim)
        throw std::invalid_argument("encoder: gradient dimension mismatch");
    const int r = params_.input_resolution;
    const size_t plane = static_cast<size_t>(r) * r;
    const size_t img_in = static_cast<size_t>(params_.channels) * plane;

    std::vector<double> gx(img_in, 0.0);
    for (int d = 0; d < params_.dim; ++d) {
        const double g = grad[d];
        if (g == 0.0) continue;
        const float* row = w_img_.data() + static_cast<size_t>(d) * img_in;
        for (size_t i = 0; i < img_in; ++i) gx[i] += g * row[i];
    }
    Tensor grad_resized(params_.channels, r, r);
    for (int ci = 0; ci < params_.channels; ++ci) {
        const double inv_std = 1.0 / params_.pixel_std[ci % 3];
        for (size_t i = 0; i < plane; ++i)
            grad_resized.v[ci * plane + i] = static_cast<float>(gx[ci * plane + i] * inv_std);
    }
    return bilinear_resize_adjoint(grad_resized, image.h, image.w);
}

std::vector<double> ngram_histogram(const std::string& text, int buckets, int order) {
    std::vector<double> counts(buckets, 0.0);
    const std::string padded = " " + text + " ";
    if (static_cast<int>(padded.size()) < order) return counts;
    for (size_t i = 0; i + order <= padded.size(); ++i) {
        const uint64_t h = fnv1a64(padded.data() + i, order);
        counts[h % buckets] += 1.0;
    }
    double norm = 0.0;
    for (double v : counts) norm += v * v;
    if (norm > 0.0) {
        const double inv = 1.0 / std::sqrt(norm);
        for (double& v : counts) v *= inv;
    }
    return counts;
}

std::vector<double> LinearEncoder::ngram_counts(const std::string& text) const {
    return ngram_histogram(text, params_.ngram_buckets, params_.ngram_order);
}

EmbeddingVector LinearEncoder::embed_text(const std::string& text) const {
    const std::vector<double> counts = ngram_counts(text);
    EmbeddingVector e(params_.dim);
    for (int d = 0; d < params_.dim; ++d) {
        const float* row = w_txt_.data() + static_cast<size_t>(d) * params_.ngram_buckets;
        double acc = 0.0;
        for (int i = 0; i < params_.ngram_buckets; ++i) acc += row[i] * counts[i];
        e[d] = acc;
    }
    return e;
}

EncoderHandle load_encoder(const std::string& weights_path, const std::string& adapter_id,
                           const ToyEncoderOptions& toy) {
    if (adapter_id == "toy") {
        const std::string id = "toy:s" + std::to_string(toy.seed) + ":d" +
                               std::to_string(toy.params.dim);
        return LinearEncoder::seeded(toy.params, toy.seed, id);
    }
    if (adapter_id == "linear") return LinearEncoder::from_file(weights_path);
    throw std::runtime_error("unknown encoder adapter: " + adapter_id);
}

PromptSet build_prompts(const std::vector<std::string>& class_names, const Encoder& enc) {
    if (class_names.size() < 2)
        throw std::invalid_argument("build_prompts: need >=2 classes, got " +
                                    std::to_string(class_names.size()));
    PromptSet ps;
    ps.class_names = class_names;
    ps.prompts.reserve(class_names.size());
    ps.text_embeddings.reserve(class_names.size());
    for (const std::string& name : class_names) {
        if (name.empty()) throw std::invalid_argument("build_prompts: empty class name");
        ps.prompts.push_back("a photo of a " + name);
        ps.text_embeddings.push_back(enc.embed_text(ps.prompts.back()));
    }
    return ps;
}

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("cosine_similarity: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw std::domain_error("cosine_similarity: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

std::vector<double> cosines_of(const PromptSet& prompts, const EmbeddingVector& e) {
    std::vector<double> cos(prompts.text_embeddings.size());
    for (size_t i = 0; i < prompts.text_embeddings.size(); ++i)
        cos[i] = cosine_similarity(e, prompts.text_embeddings[i]);
    return cos;
}

std::vector<double> softmax(const std::vector<double>& z) {
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    std::vector<double> s(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        s[i] = std::exp(z[i] - zmax);
        sum += s[i];
    }
    for (double& v : s) v /= sum;
    return s;
}

}  // namespace

ZeroShotResult zero_shot_scores(const Encoder& enc, const PromptSet& prompts, const Tensor& image,
                                Scoring scoring) {
    ZeroShotResult r;
    r.image_embedding = enc.embed_image(image);
    r.cosines = cosines_of(prompts, r.image_embedding);
    if (scoring == Scoring::softmax) {
        r.scores = softmax(r.cosines);
        return r;
    }
    double sum = 0.0;
    for (double ci : r.cosines) sum += ci;
    if (std::fabs(sum) < kDenominatorGuard)
        throw std::domain_error("zero_shot_scores: degenerate cosine-sum denominator");
    r.scores.resize(r.cosines.size());
    for (size_t i = 0; i < r.cosines.size(); ++i) r.scores[i] = r.cosines[i] / sum;
    return r;
}

Tensor zero_shot_scores_vjp(const Encoder& enc, const PromptSet& prompts, const Tensor& image,
                            const ZeroShotResult& zs, const std::vector<double>& grad_scores,
                            Scoring scoring) {
    const size_t C = zs.scores.size();
    if (grad_scores.size() != C)
        throw std::invalid_argument("zero_shot_scores_vjp: grad size mismatch");

    // dL/dcos from dL/dscores.
    std::vector<double> grad_cos(C, 0.0);
    if (scoring == Scoring::linear) {
        double sum = 0.0;
        for (double ci : zs.cosines) sum += ci;
        if (std::fabs(sum) < kDenominatorGuard)
            throw std::domain_error("zero_shot_scores_vjp: degenerate cosine-sum denominator");
        double gdotc = 0.0;
        for (size_t i = 0; i < C; ++i) gdotc += grad_scores[i] * zs.cosines[i];
        for (size_t i = 0; i < C; ++i)
            grad_cos[i] = grad_scores[i] / sum - gdotc / (sum * sum);
    } else {
        double gdots = 0.0;
        for (size_t i = 0; i < C; ++i) gdots += grad_scores[i] * zs.scores[i];
        for (size_t i = 0; i < C; ++i) grad_cos[i] = zs.scores[i] * (grad_scores[i] - gdots);
    }

    // dL/dembedding from dL/dcos; cos_i = <e, t_i> / (|e||t_i|).
    const EmbeddingVector& e = zs.image_embedding;
    double e_norm_sq = 0.0;
    for (double v : e) e_norm_sq += v * v;
    const double e_norm = std::sqrt(e_norm_sq);
    if (e_norm == 0.0) throw std::domain_error("zero_shot_scores_vjp: zero image embedding");

    EmbeddingVector grad_e(e.size(), 0.0);
    for (size_t i = 0; i < C; ++i) {
        const double gc = grad_cos[i];
        if (gc == 0.0) continue;
        const EmbeddingVector& t = prompts.text_embeddings[i];
        double t_norm_sq = 0.0;
        for (double v : t) t_norm_sq += v * v;
        const double t_norm = std::sqrt(t_norm_sq);
        if (t_norm == 0.0) throw std::domain_error("zero_shot_scores_vjp: zero text embedding");
        const double inv_et = 1.0 / (e_norm * t_norm);
        const double cos_i = zs.cosines[i];
        for (size_t d = 0; d < e.size(); ++d)
            grad_e[d] += gc * (t[d] * inv_et - cos_i * e[d] / e_norm_sq);
    }
    return enc.embed_image_vjp(image, grad_e);
}

int zero_shot_classify(const Encoder& enc, const PromptSet& prompts, const Tensor& image) {
    const EmbeddingVector e = enc.embed_image(image);
    const std::vector<double> cos = cosines_of(prompts, e);
    int best = 0;
    for (size_t i = 1; i < cos.size(); ++i)
        if (cos[i] > cos[best]) best = static_cast<int>(i);
    return best;
}

}  // namespace poisonlab::encoder
