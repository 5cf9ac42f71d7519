#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "poisonlab/tensor.hpp"

namespace poisonlab::encoder {

using EmbeddingVector = std::vector<double>;

/// Frozen two-tower encoder. Instances are immutable after construction and
/// safe to share across threads. `embed_image_vjp` pulls a gradient w.r.t.
/// the embedding back to a gradient w.r.t. the input pixels, which is what
/// every PGD-based optimizer consumes.
class Encoder {
public:
    virtual ~Encoder() = default;

    virtual int dim() const = 0;
    virtual int input_resolution() const = 0;
    virtual const std::string& id() const = 0;

    virtual EmbeddingVector embed_image(const Tensor& image) const = 0;
    virtual Tensor embed_image_vjp(const Tensor& image, const EmbeddingVector& grad_embedding) const = 0;
    virtual EmbeddingVector embed_text(const std::string& text) const = 0;
};

using EncoderHandle = std::shared_ptr<const Encoder>;

/// Linear two-tower encoder: images are bilinearly resized to the encoder
/// resolution, channel-normalized and linearly projected; text is hashed
/// character n-gram counts, L2-normalized and linearly projected. The toy
/// adapter draws the projections from a seeded RNG; the file adapter reads
/// the same structure from a weights bundle.
class LinearEncoder final : public Encoder {
public:
    struct Params {
        int dim = 64;
        int channels = 3;
        int input_resolution = 16;
        int ngram_buckets = 512;
        int ngram_order = 3;
        std::array<float, 3> pixel_mean{0.5f, 0.5f, 0.5f};
        std::array<float, 3> pixel_std{0.5f, 0.5f, 0.5f};
    };

    static std::shared_ptr<LinearEncoder> seeded(const Params& params, uint64_t seed,
                                                 std::string id);
    static std::shared_ptr<LinearEncoder> from_file(const std::string& path);
    void save(const std::string& path) const;

    int dim() const override { return params_.dim; }
    int input_resolution() const override { return params_.input_resolution; }
    const std::string& id() const override { return id_; }

    EmbeddingVector embed_image(const Tensor& image) const override;
    Tensor embed_image_vjp(const Tensor& image, const EmbeddingVector& grad_embedding) const override;
    EmbeddingVector embed_text(const std::string& text) const override;

    const Params& params() const { return params_; }
    std::vector<float>& image_weights() { return w_img_; }
    std::vector<float>& text_weights() { return w_txt_; }

private:
    LinearEncoder(Params params, std::string id) : params_(params), id_(std::move(id)) {}

    std::vector<double> ngram_counts(const std::string& text) const;

    Params params_;
    std::string id_;
    std::vector<float> w_img_;  // dim x (channels * res * res), row-major
    std::vector<float> w_txt_;  // dim x ngram_buckets, row-major
};

struct ToyEncoderOptions {
    uint64_t seed = 7;
    LinearEncoder::Params params;
};

/// adapter_id == "toy" ignores weights_path and builds a seeded encoder;
/// adapter_id == "linear" loads the weights bundle at weights_path.
EncoderHandle load_encoder(const std::string& weights_path, const std::string& adapter_id,
                           const ToyEncoderOptions& toy = {});

/// Prompt template plus cached text embeddings, one per class.
struct PromptSet {
    std::vector<std::string> class_names;
    std::vector<std::string> prompts;
    std::vector<EmbeddingVector> text_embeddings;  // C x d

    int class_count() const { return static_cast<int>(prompts.size()); }
};

/// Renders "a photo of a {name}" per class and caches the text embeddings.
/// Requires at least two non-empty class names.
PromptSet build_prompts(const std::vector<std::string>& class_names, const Encoder& enc);

enum class Scoring {
    linear,   // cosine_i / sum_j cosine_j
    softmax,  // softmax over cosines
};

struct ZeroShotResult {
    std::vector<double> scores;
    std::vector<double> cosines;
    EmbeddingVector image_embedding;
};

/// Per-class scores over the prompt set. Linear scoring divides each cosine
/// by the sum of all of them and errors out when |sum| < 1e-8.
ZeroShotResult zero_shot_scores(const Encoder& enc, const PromptSet& prompts, const Tensor& image,
                                Scoring scoring = Scoring::linear);

/// Gradient of sum_i grad_scores[i] * scores[i] w.r.t. the input pixels,
/// evaluated at the forward state `zs`.
Tensor zero_shot_scores_vjp(const Encoder& enc, const PromptSet& prompts, const Tensor& image,
                            const ZeroShotResult& zs, const std::vector<double>& grad_scores,
                            Scoring scoring = Scoring::linear);

/// Argmax over raw cosine similarities; ties resolve to the lowest index.
int zero_shot_classify(const Encoder& enc, const PromptSet& prompts, const Tensor& image);

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b);

/// Hashed character n-gram counts over the padded text, L2-normalized; the
/// text-tower featurizer.
std::vector<double> ngram_histogram(const std::string& text, int buckets, int order);

}  // namespace poisonlab::encoder
