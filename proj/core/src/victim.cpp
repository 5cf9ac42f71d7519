#include "poisonlab/victim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "poisonlab/hash.hpp"

namespace poisonlab::victim {

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'L', 'C', 'K', 'P', 'T', '0', '1'};
constexpr uint32_t kCheckpointVersion = 1;

std::unique_ptr<nn::Sequential> seq() { return std::make_unique<nn::Sequential>(); }

void add_conv_bn_relu(nn::Sequential& net, int in_c, int out_c, int kernel, int stride, int pad,
                      Rng& rng, float relu_cap = 0.0f) {
    net.add(std::make_unique<nn::Conv2d>(in_c, out_c, kernel, stride, pad, 1, rng));
    net.add(std::make_unique<nn::BatchNorm2d>(out_c));
    net.add(std::make_unique<nn::ReLU>(relu_cap));
}

std::unique_ptr<nn::Sequential> build_small_cnn(int in_c, int in_h, int in_w, int classes,
                                                Rng& rng) {
    auto net = seq();
    add_conv_bn_relu(*net, in_c, 8, 3, 1, 1, rng);
    net->add(std::make_unique<nn::MaxPool2>());
    add_conv_bn_relu(*net, 8, 16, 3, 1, 1, rng);
    net->add(std::make_unique<nn::MaxPool2>());
    add_conv_bn_relu(*net, 16, 32, 3, 1, 1, rng);
    net->add(std::make_unique<nn::MaxPool2>());
    net->add(std::make_unique<nn::Linear>(32 * (in_h / 8) * (in_w / 8), classes, rng));
    return net;
}

std::unique_ptr<nn::Sequential> build_vgg16(int in_c, int in_h, int in_w, int classes, Rng& rng) {
    auto net = seq();
    const int plan[] = {64, 64, -1, 128, 128, -1, 256, 256, 256, -1,
                        512, 512, 512, -1, 512, 512, 512, -1};
    int c = in_c, downsamples = 0;
    for (int entry : plan) {
        if (entry < 0) {
            net->add(std::make_unique<nn::MaxPool2>());
            ++downsamples;
        } else {
            add_conv_bn_relu(*net, c, entry, 3, 1, 1, rng);
            c = entry;
        }
    }
    const int fh = in_h >> downsamples, fw = in_w >> downsamples;
    net->add(std::make_unique<nn::Linear>(512 * std::max(1, fh) * std::max(1, fw), classes, rng));
    return net;
}

std::unique_ptr<nn::Sequential> basic_block(int in_c, int out_c, int stride, Rng& rng) {
    auto main = seq();
    main->add(std::make_unique<nn::Conv2d>(in_c, out_c, 3, stride, 1, 1, rng));
    main->add(std::make_unique<nn::BatchNorm2d>(out_c));
    main->add(std::make_unique<nn::ReLU>());
    main->add(std::make_unique<nn::Conv2d>(out_c, out_c, 3, 1, 1, 1, rng));
    main->add(std::make_unique<nn::BatchNorm2d>(out_c));
    std::unique_ptr<nn::Sequential> shortcut;
    if (stride != 1 || in_c != out_c) {
        shortcut = seq();
        shortcut->add(std::make_unique<nn::Conv2d>(in_c, out_c, 1, stride, 0, 1, rng));
        shortcut->add(std::make_unique<nn::BatchNorm2d>(out_c));
    }
    auto wrapper = seq();
    wrapper->add(std::make_unique<nn::Residual>(std::move(main), std::move(shortcut)));
    return wrapper;
}

std::unique_ptr<nn::Sequential> build_resnet18(int in_c, int, int, int classes, Rng& rng) {
    auto net = seq();
    add_conv_bn_relu(*net, in_c, 64, 3, 1, 1, rng);
    const int stage_channels[4] = {64, 128, 256, 512};
    int c = 64;
    for (int stage = 0; stage < 4; ++stage) {
        const int out_c = stage_channels[stage];
        const int stride = stage == 0 ? 1 : 2;
        net->add(basic_block(c, out_c, stride, rng));
        net->add(basic_block(out_c, out_c, 1, rng));
        c = out_c;
    }
    net->add(std::make_unique<nn::GlobalAvgPool>());
    net->add(std::make_unique<nn::Linear>(512, classes, rng));
    return net;
}

std::unique_ptr<nn::Sequential> inverted_residual(int in_c, int out_c, int stride, int expand,
                                                  Rng& rng) {
    const int hidden = in_c * expand;
    auto main = seq();
    if (expand != 1) {
        main->add(std::make_unique<nn::Conv2d>(in_c, hidden, 1, 1, 0, 1, rng));
        main->add(std::make_unique<nn::BatchNorm2d>(hidden));
        main->add(std::make_unique<nn::ReLU>(6.0f));
    }
    main->add(std::make_unique<nn::Conv2d>(hidden, hidden, 3, stride, 1, hidden, rng));
    main->add(std::make_unique<nn::BatchNorm2d>(hidden));
    main->add(std::make_unique<nn::ReLU>(6.0f));
    main->add(std::make_unique<nn::Conv2d>(hidden, out_c, 1, 1, 0, 1, rng));
    main->add(std::make_unique<nn::BatchNorm2d>(out_c));
    if (stride != 1 || in_c != out_c) return main;  // no shortcut
    auto wrapper = seq();
    wrapper->add(std::make_unique<nn::Residual>(std::move(main), nullptr,
                                                /*relu_after=*/false));
    return wrapper;
}

std::unique_ptr<nn::Sequential> build_mobilenet_v2(int in_c, int, int, int classes, Rng& rng) {
    auto net = seq();
    add_conv_bn_relu(*net, in_c, 32, 3, 1, 1, rng, 6.0f);
    struct Stage {
        int expand, out_c, repeat, stride;
    };
    // Strides of the first two stages set to 1 for 32x32 inputs.
    const Stage stages[] = {{1, 16, 1, 1},  {6, 24, 2, 1},  {6, 32, 3, 2}, {6, 64, 4, 2},
                            {6, 96, 3, 1},  {6, 160, 3, 2}, {6, 320, 1, 1}};
    int c = 32;
    for (const Stage& s : stages) {
        for (int i = 0; i < s.repeat; ++i) {
            const int stride = i == 0 ? s.stride : 1;
            net->add(inverted_residual(c, s.out_c, stride, s.expand, rng));
            c = s.out_c;
        }
    }
    net->add(std::make_unique<nn::Conv2d>(c, 1280, 1, 1, 0, 1, rng));
    net->add(std::make_unique<nn::BatchNorm2d>(1280));
    net->add(std::make_unique<nn::ReLU>(6.0f));
    net->add(std::make_unique<nn::GlobalAvgPool>());
    net->add(std::make_unique<nn::Linear>(1280, classes, rng));
    return net;
}

std::unique_ptr<nn::Sequential> build_arch(Arch arch, int classes, int c, int h, int w,
                                           uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x1217));
    switch (arch) {
        case Arch::small_cnn: return build_small_cnn(c, h, w, classes, rng);
        case Arch::vgg16: return build_vgg16(c, h, w, classes, rng);
        case Arch::resnet18: return build_resnet18(c, h, w, classes, rng);
        case Arch::mobilenet_v2: return build_mobilenet_v2(c, h, w, classes, rng);
    }
    throw std::invalid_argument("unknown architecture");
}

nn::Batch to_batch(const std::vector<const Tensor*>& images) {
    const Tensor& first = *images[0];
    nn::Batch batch(static_cast<int>(images.size()), first.c, first.h, first.w);
    for (size_t i = 0; i < images.size(); ++i) {
        if (!images[i]->same_shape(first))
            throw std::invalid_argument("batch: inconsistent image shapes");
        std::copy(images[i]->v.begin(), images[i]->v.end(), batch.example(static_cast<int>(i)));
    }
    return batch;
}

int argmax_lowest(const float* logits, int classes) {
    int best = 0;
    for (int i = 1; i < classes; ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

}  // namespace

std::string arch_name(Arch arch) {
    switch (arch) {
        case Arch::small_cnn: return "small_cnn";
        case Arch::vgg16: return "vgg16";
        case Arch::resnet18: return "resnet18";
        case Arch::mobilenet_v2: return "mobilenet_v2";
    }
    return "unknown";
}

Arch arch_from_name(const std::string& name) {
    if (name == "small_cnn") return Arch::small_cnn;
    if (name == "vgg16") return Arch::vgg16;
    if (name == "resnet18") return Arch::resnet18;
    if (name == "mobilenet_v2") return Arch::mobilenet_v2;
    throw std::invalid_argument("unknown architecture: " + name);
}

void VictimConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("victim config: epochs must be >= 1");
    if (lr <= 0.0f) throw std::invalid_argument("victim config: lr must be > 0");
    if (batch_size < 1) throw std::invalid_argument("victim config: batch_size must be >= 1");
}

bool is_trained(const TrainedModel& model) { return model.trained && model.net != nullptr; }

TrainedModel make_untrained(Arch arch, int class_count, int c, int h, int w, uint64_t seed) {
    TrainedModel model;
    model.arch = arch;
    model.class_count = class_count;
    model.in_c = c;
    model.in_h = h;
    model.in_w = w;
    model.net = build_arch(arch, class_count, c, h, w, seed);
    model.trained = false;
    return model;
}

TrainedModel train_victim(const data::Dataset& clean, const data::PoisonSet& poison,
                          const VictimConfig& cfg) {
    cfg.validate();
    if (clean.examples.empty()) throw std::invalid_argument("train_victim: empty clean dataset");
    const Tensor& first = clean.examples[0].image;
    for (const auto& entry : poison.entries)
        if (!entry.image.same_shape(first))
            throw std::invalid_argument("train_victim: poison image shape mismatch");

    // D ++ P, exactly N + P samples.
    const size_t n_clean = clean.examples.size();
    const size_t n_poison = poison.entries.size();
    const size_t total = n_clean + n_poison;
    std::vector<const Tensor*> images(total);
    std::vector<int> labels(total);
    std::vector<float> weights(total, 1.0f);
    for (size_t i = 0; i < n_clean; ++i) {
        images[i] = &clean.examples[i].image;
        labels[i] = clean.examples[i].label;
    }
    for (size_t i = 0; i < n_poison; ++i) {
        images[n_clean + i] = &poison.entries[i].image;
        labels[n_clean + i] = poison.entries[i].assigned_label;
        if (poison.entries[i].assigned_label < 0 ||
            poison.entries[i].assigned_label >= clean.class_count)
            throw std::invalid_argument("train_victim: poison label out of range");
    }
    if (cfg.eq1_weighting && n_poison > 0) {
        const float w_clean = static_cast<float>(total) / static_cast<float>(n_clean);
        const float w_poison = static_cast<float>(total) / static_cast<float>(n_poison);
        for (size_t i = 0; i < n_clean; ++i) weights[i] = w_clean;
        for (size_t i = 0; i < n_poison; ++i) weights[n_clean + i] = w_poison;
    }

    TrainedModel model = make_untrained(cfg.arch, clean.class_count, first.c, first.h, first.w,
                                        cfg.seed);
    std::vector<nn::Param*> params;
    model.net->params(params);

    nn::SgdConfig sgd{cfg.lr, cfg.momentum, cfg.weight_decay};
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (int drop : cfg.lr_drop_epochs)
            if (drop == epoch) sgd.lr *= 0.1f;
        Rng shuffle_rng(Rng::derive(cfg.seed, 0xe90c + static_cast<uint64_t>(epoch)));
        std::vector<size_t> order = shuffle_rng.permutation(total);

        double epoch_loss = 0.0;
        size_t correct = 0, seen = 0;
        for (size_t start = 0; start < total; start += cfg.batch_size) {
            const size_t end = std::min(total, start + cfg.batch_size);
            std::vector<const Tensor*> batch_images(end - start);
            std::vector<int> batch_labels(end - start);
            std::vector<float> batch_weights(end - start);
            for (size_t i = start; i < end; ++i) {
                batch_images[i - start] = images[order[i]];
                batch_labels[i - start] = labels[order[i]];
                batch_weights[i - start] = weights[order[i]];
            }
            nn::Batch input = to_batch(batch_images);
            nn::Batch logits = model.net->forward(input, true);
            nn::Batch grad;
            const double loss =
                nn::softmax_cross_entropy(logits, batch_labels, batch_weights, &grad);
            if (!std::isfinite(loss))
                throw std::runtime_error("train_victim: training diverged (non-finite loss) at epoch " +
                                         std::to_string(epoch));
            nn::zero_grads(params);
            model.net->backward(grad);
            nn::sgd_step(params, sgd);

            epoch_loss += loss * static_cast<double>(end - start);
            for (size_t i = 0; i < batch_labels.size(); ++i) {
                const float* z = logits.v.data() + i * static_cast<size_t>(clean.class_count);
                if (argmax_lowest(z, clean.class_count) == batch_labels[i]) ++correct;
            }
            seen += end - start;
        }
        model.log.push_back({epoch_loss / static_cast<double>(seen),
                             static_cast<double>(correct) / static_cast<double>(seen)});
    }
    model.trained = true;
    return model;
}

std::vector<int> predict(const TrainedModel& model, const std::vector<Tensor>& images,
                         int batch_size) {
    if (!model.net) throw std::invalid_argument("predict: model has no network");
    std::vector<int> out(images.size());
    for (size_t start = 0; start < images.size(); start += batch_size) {
        const size_t end = std::min(images.size(), start + batch_size);
        std::vector<const Tensor*> ptrs(end - start);
        for (size_t i = start; i < end; ++i) {
            if (images[i].c != model.in_c || images[i].h != model.in_h ||
                images[i].w != model.in_w)
                throw std::invalid_argument("predict: image shape " + images[i].shape_str() +
                                            " does not match model input");
            ptrs[i - start] = &images[i];
        }
        const nn::Batch logits = model.net->infer(to_batch(ptrs));
        for (size_t i = 0; i < ptrs.size(); ++i)
            out[start + i] = argmax_lowest(
                logits.v.data() + i * static_cast<size_t>(model.class_count),
                model.class_count);
    }
    return out;
}

int predict_one(const TrainedModel& model, const Tensor& image) {
    return predict(model, {image}, 1)[0];
}

void save_checkpoint(const TrainedModel& model, const std::string& path) {
    if (!model.net) throw std::invalid_argument("save_checkpoint: model has no network");
    std::vector<std::vector<float>*> buffers;
    model.net->state(buffers);
    uint64_t param_bytes = 0;
    for (const auto* buf : buffers) param_bytes += buf->size() * sizeof(float);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kCheckpointMagic, 8);
    const uint32_t header[6] = {kCheckpointVersion,
                                static_cast<uint32_t>(model.arch),
                                static_cast<uint32_t>(model.class_count),
                                static_cast<uint32_t>(model.in_c),
                                static_cast<uint32_t>(model.in_h),
                                static_cast<uint32_t>(model.in_w)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(&param_bytes), sizeof(param_bytes));
    for (const auto* buf : buffers)
        out.write(reinterpret_cast<const char*>(buf->data()), buf->size() * sizeof(float));
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

TrainedModel load_checkpoint(const std::string& path, std::optional<Arch> expected_arch) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t header[6];
    uint64_t param_bytes = 0;
    if (!in.read(reinterpret_cast<char*>(header), sizeof(header)) ||
        !in.read(reinterpret_cast<char*>(&param_bytes), sizeof(param_bytes)))
        throw std::runtime_error("checkpoint: truncated header in " + path);
    if (header[0] != kCheckpointVersion)
        throw std::runtime_error("checkpoint: version mismatch (file has " +
                                 std::to_string(header[0]) + ", expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    if (header[1] > 3) throw std::runtime_error("checkpoint: unknown arch id in " + path);
    const Arch arch = static_cast<Arch>(header[1]);
    if (expected_arch && *expected_arch != arch)
        throw std::runtime_error("checkpoint: arch mismatch (file has " + arch_name(arch) +
                                 ", expected " + arch_name(*expected_arch) + ")");

    TrainedModel model = make_untrained(arch, static_cast<int>(header[2]),
                                        static_cast<int>(header[3]), static_cast<int>(header[4]),
                                        static_cast<int>(header[5]), 0);
    std::vector<std::vector<float>*> buffers;
    model.net->state(buffers);
    uint64_t expected_bytes = 0;
    for (const auto* buf : buffers) expected_bytes += buf->size() * sizeof(float);
    if (expected_bytes != param_bytes)
        throw std::runtime_error("checkpoint: parameter byte length mismatch in " + path);
    for (auto* buf : buffers)
        if (!in.read(reinterpret_cast<char*>(buf->data()), buf->size() * sizeof(float)))
            throw std::runtime_error("checkpoint: truncated parameters in " + path);
    model.trained = true;
    return model;
}

VictimConfig desk_profile(uint64_t seed) {
    VictimConfig cfg;
    cfg.arch = Arch::small_cnn;
    cfg.epochs = 15;
    cfg.batch_size = 128;
    cfg.lr = 0.05f;
    cfg.momentum = 0.9f;
    cfg.weight_decay = 5e-4f;
    cfg.lr_drop_epochs = {12};
    cfg.seed = seed;
    return cfg;
}

VictimConfig paper_profile(Arch arch, const std::string& dataset_name, uint64_t seed) {
    float lr = 0.0f;
    if (dataset_name == "cifar10" || dataset_name == "cifar100") {
        if (arch == Arch::vgg16 || arch == Arch::resnet18)
            lr = 0.01f;
        else if (arch == Arch::mobilenet_v2)
            lr = 0.1f;
    } else if (dataset_name == "imagenet50") {
        if (arch == Arch::vgg16)
            lr = 0.01f;
        else if (arch == Arch::mobilenet_v2)
            lr = 0.05f;
    }
    if (lr == 0.0f)
        throw std::invalid_argument("paper profile: no declared learning rate for " +
                                    arch_name(arch) + " on `" + dataset_name + "`");
    VictimConfig cfg;
    cfg.arch = arch;
    cfg.epochs = 70;
    cfg.batch_size = 256;
    cfg.lr = lr;
    cfg.momentum = 0.9f;
    cfg.weight_decay = 5e-4f;
    cfg.lr_drop_epochs = {35, 55};
    cfg.seed = seed;
    return cfg;
}

InputGradSession::InputGradSession(const TrainedModel& model)
    : class_count_(model.class_count), in_c_(model.in_c), in_h_(model.in_h), in_w_(model.in_w) {
    if (!is_trained(model)) throw std::invalid_argument("input gradients need a trained model");
    net_ = build_arch(model.arch, model.class_count, model.in_c, model.in_h, model.in_w, 0);
    std::vector<std::vector<float>*> src, dst;
    model.net->state(src);
    net_->state(dst);
    for (size_t i = 0; i < src.size(); ++i) *dst[i] = *src[i];
}

InputGradSession::~InputGradSession() = default;

double InputGradSession::mean_ce(const std::vector<Tensor>& images, int label) {
    std::vector<const Tensor*> ptrs(images.size());
    for (size_t i = 0; i < images.size(); ++i) ptrs[i] = &images[i];
    const nn::Batch logits = net_->infer(to_batch(ptrs));
    std::vector<int> targets(images.size(), label);
    std::vector<float> ws(images.size(), 1.0f);
    return nn::softmax_cross_entropy(logits, targets, ws, nullptr);
}

std::pair<double, Tensor> InputGradSession::mean_ce_and_input_grad(
    const std::vector<Tensor>& images, int label) {
    std::vector<const Tensor*> ptrs(images.size());
    for (size_t i = 0; i < images.size(); ++i) ptrs[i] = &images[i];
    nn::Batch input = to_batch(ptrs);
    nn::Batch logits = net_->forward(input, false);
    std::vector<int> targets(images.size(), label);
    std::vector<float> ws(images.size(), 1.0f);
    nn::Batch grad_logits;
    const double loss = nn::softmax_cross_entropy(logits, targets, ws, &grad_logits);
    const nn::Batch grad_input = net_->backward(grad_logits);

    Tensor grad(in_c_, in_h_, in_w_);
    for (int ni = 0; ni < grad_input.n; ++ni) {
        const float* src = grad_input.example(ni);
        for (size_t i = 0; i < grad.v.size(); ++i) grad.v[i] += src[i];
    }
    // softmax_cross_entropy already divides by the batch size, so the summed
    // input gradients are exactly the gradient of the batch-mean loss.
    return {loss, grad};
}

}  // namespace poisonlab::victim
