#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "poisonlab/rng.hpp"

namespace poisonlab::nn {

/// NCHW float batch.
struct Batch {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> v;

    Batch() = default;
    Batch(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0f) {}

    size_t example_size() const { return static_cast<size_t>(c) * h * w; }
    float* example(int i) { return v.data() + static_cast<size_t>(i) * example_size(); }
    const float* example(int i) const { return v.data() + static_cast<size_t>(i) * example_size(); }
};

struct Param {
    std::vector<float> w;
    std::vector<float> g;
    std::vector<float> m;

    void resize(size_t size) {
        w.assign(size, 0.0f);
        g.assign(size, 0.0f);
        m.assign(size, 0.0f);
    }
};

/// infer() is stateless and safe to call concurrently on a shared model.
/// forward()/backward() are the single-owner training path; `training`
/// selects batch statistics vs running statistics in normalization layers.
class Layer {
public:
    virtual ~Layer() = default;
    virtual Batch infer(const Batch& x) const = 0;
    virtual Batch forward(const Batch& x, bool training) = 0;
    virtual Batch backward(const Batch& grad_out) = 0;
    virtual void params(std::vector<Param*>& out) {}
    /// Buffers persisted to checkpoints, in a fixed order: parameters plus
    /// normalization running statistics.
    virtual void state(std::vector<std::vector<float>*>& out);
};

class Conv2d final : public Layer {
public:
    Conv2d(int in_c, int out_c, int kernel, int stride, int pad, int groups, Rng& init_rng);

    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;
    void params(std::vector<Param*>& out) override;

private:
    Batch run(const Batch& x) const;
    bool use_direct_path(const Batch& x) const;

    int in_c_, out_c_, kernel_, stride_, pad_, groups_;
    Param weight_;  // [out_c][in_c/groups * k * k]
    Param bias_;    // [out_c]
    Batch cached_input_;
};

class Linear final : public Layer {
public:
    Linear(int in_features, int out_features, Rng& init_rng);

    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;
    void params(std::vector<Param*>& out) override;

private:
    Batch run(const Batch& x) const;

    int in_features_, out_features_;
    Param weight_;  // [out][in]
    Param bias_;    // [out]
    Batch cached_input_;
};

class ReLU final : public Layer {
public:
    explicit ReLU(float cap = 0.0f) : cap_(cap) {}  // cap > 0 => clipped (e.g. ReLU6)

    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;

private:
    float cap_;
    Batch cached_input_;
};

class MaxPool2 final : public Layer {
public:
    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;

private:
    Batch run(const Batch& x, std::vector<int>* argmax) const;

    std::vector<int> cached_argmax_;
    int in_h_ = 0, in_w_ = 0;
};

class GlobalAvgPool final : public Layer {
public:
    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;

private:
    int in_h_ = 0, in_w_ = 0;
};

class BatchNorm2d final : public Layer {
public:
    explicit BatchNorm2d(int channels);

    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;
    void params(std::vector<Param*>& out) override;
    void state(std::vector<std::vector<float>*>& out) override;

private:
    int channels_;
    Param gamma_, beta_;
    std::vector<float> running_mean_, running_var_;
    // backward caches
    Batch cached_xhat_;
    std::vector<float> cached_invstd_;
    bool cached_training_ = false;
};

class Sequential final : public Layer {
public:
    Sequential() = default;
    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;
    void params(std::vector<Param*>& out) override;
    void state(std::vector<std::vector<float>*>& out) override;

    size_t size() const { return layers_.size(); }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

/// y = main(x) + shortcut(x), optionally followed by ReLU. An empty shortcut
/// is the identity; relu_after=false gives a linear bottleneck add.
class Residual final : public Layer {
public:
    Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut,
             bool relu_after = true)
        : main_(std::move(main)), shortcut_(std::move(shortcut)), relu_after_(relu_after) {}

    Batch infer(const Batch& x) const override;
    Batch forward(const Batch& x, bool training) override;
    Batch backward(const Batch& grad_out) override;
    void params(std::vector<Param*>& out) override;
    void state(std::vector<std::vector<float>*>& out) override;

private:
    std::unique_ptr<Sequential> main_;
    std::unique_ptr<Sequential> shortcut_;  // may be null (identity)
    bool relu_after_;
    Batch cached_sum_;
};

struct SgdConfig {
    float lr = 0.1f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
};

void zero_grads(std::vector<Param*>& params);
void sgd_step(std::vector<Param*>& params, const SgdConfig& cfg);

/// Weighted-mean softmax cross-entropy over the batch; fills grad_logits with
/// the gradient of that mean. logits must be (n, classes, 1, 1).
double softmax_cross_entropy(const Batch& logits, const std::vector<int>& targets,
                             const std::vector<float>& weights, Batch* grad_logits);

}  // namespace poisonlab::nn
