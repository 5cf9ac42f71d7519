#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poisonlab/data.hpp"
#include "poisonlab/nn.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab::victim {

enum class Arch { small_cnn, vgg16, resnet18, mobilenet_v2 };

std::string arch_name(Arch arch);
Arch arch_from_name(const std::string& name);

struct VictimConfig {
    Arch arch = Arch::small_cnn;
    int epochs = 15;
    int batch_size = 128;
    float lr = 0.01f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    std::vector<int> lr_drop_epochs;  // 1-based; lr *= 0.1 entering each listed epoch
    uint64_t seed = 0;
    /// Weight per-sample losses 1/N (clean) and 1/P (poison) instead of the
    /// plain average over the concatenated set.
    bool eq1_weighting = false;

    void validate() const;
};

struct EpochStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainedModel {
    Arch arch = Arch::small_cnn;
    int class_count = 0;
    int in_c = 0, in_h = 0, in_w = 0;
    std::shared_ptr<nn::Sequential> net;
    std::vector<EpochStats> log;
    bool trained = false;
};

bool is_trained(const TrainedModel& model);

/// Fresh, untrained classifier (used for proxy baselines and tests).
TrainedModel make_untrained(Arch arch, int class_count, int c, int h, int w, uint64_t seed = 0);

/// Empirical-risk training with cross-entropy on clean ++ poison (always
/// exactly N + P samples, no deduplication), uniform per-epoch shuffling
/// under cfg.seed. Throws std::runtime_error naming the epoch on divergence.
TrainedModel train_victim(const data::Dataset& clean, const data::PoisonSet& poison,
                          const VictimConfig& cfg);

/// Argmax over logits, ties to the lowest index. Thread-safe on a shared model.
std::vector<int> predict(const TrainedModel& model, const std::vector<Tensor>& images,
                         int batch_size = 256);
int predict_one(const TrainedModel& model, const Tensor& image);

void save_checkpoint(const TrainedModel& model, const std::string& path);
TrainedModel load_checkpoint(const std::string& path,
                             std::optional<Arch> expected_arch = std::nullopt);

/// CI-scale profile: small_cnn, 15 epochs.
VictimConfig desk_profile(uint64_t seed);

/// Full-scale profile: SGD momentum 0.9, weight decay 5e-4, 70 epochs with
/// x0.1 drops at 35/55, per-(arch, dataset) learning rates. Undeclared
/// combinations are refused.
VictimConfig paper_profile(Arch arch, const std::string& dataset_name, uint64_t seed);

/// Input-gradient evaluation against a private clone of the model
/// (inference-mode normalization, parameters frozen).
class InputGradSession {
public:
    explicit InputGradSession(const TrainedModel& model);
    ~InputGradSession();

    double mean_ce(const std::vector<Tensor>& images, int label);
    /// Mean cross-entropy toward `label` and the gradient of that mean w.r.t.
    /// a perturbation shared by every image in the batch.
    std::pair<double, Tensor> mean_ce_and_input_grad(const std::vector<Tensor>& images,
                                                     int label);

private:
    std::unique_ptr<nn::Sequential> net_;
    int class_count_;
    int in_c_, in_h_, in_w_;
};

}  // namespace poisonlab::victim
