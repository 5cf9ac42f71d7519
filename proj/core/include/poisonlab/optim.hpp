#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "poisonlab/encoder.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab::data {
struct AccessibleSet;
struct Dataset;
}  // namespace poisonlab::data

namespace poisonlab::victim {
struct TrainedModel;
}  // namespace poisonlab::victim

namespace poisonlab::optim {

enum class NormKind { l_inf };
enum class NoiseInit { zeros, uniform_random };

struct PerturbationBudget {
    float epsilon = 8.0f / 255.0f;
    NormKind norm = NormKind::l_inf;
    float alpha = 2.0f / 255.0f;
    int steps = 50;
    NoiseInit init = NoiseInit::zeros;

    void validate() const;  // throws std::invalid_argument
};

enum class NoiseKind { cfe_per_sample, uap_universal, cfa_universal };

std::string noise_kind_name(NoiseKind kind);

struct NoiseMap {
    Tensor delta;
    PerturbationBudget budget;
    NoiseKind kind = NoiseKind::cfe_per_sample;
};

/// Clamp every component of delta to [-epsilon, +epsilon]. Idempotent; the
/// bound holds exactly, not within a tolerance.
void project_linf(Tensor& delta, float epsilon);

/// delta <- project(delta - alpha * sign(gradient)); sign(0) == 0.
/// Throws std::runtime_error on a non-finite gradient.
void pgd_step(Tensor& delta, const Tensor& gradient, const PerturbationBudget& budget);

struct PgdResult {
    Tensor delta;
    double objective = 0.0;          // best objective seen
    double initial_objective = 0.0;  // objective at the init candidate
    int best_step = 0;               // 0 == init (or the zero candidate)
};

/// Best-iterate projected sign-gradient descent over an arbitrary objective.
/// The zero perturbation is always evaluated as a candidate, so the returned
/// objective never exceeds objective(0). Objective evaluations that throw
/// std::domain_error are skipped; if every candidate is degenerate the error
/// propagates.
PgdResult pgd_minimize(int c, int h, int w, const PerturbationBudget& budget,
                       const std::function<double(const Tensor&)>& objective,
                       const std::function<Tensor(const Tensor&)>& gradient,
                       uint64_t init_seed = 0);

/// || zero_shot_scores(x + delta) - [1/C,...,1/C] ||^2
double cfe_loss(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                const Tensor& image, const Tensor& delta,
                encoder::Scoring scoring = encoder::Scoring::linear);

/// Per-sample erasing noise: T PGD steps on cfe_loss, best iterate returned.
NoiseMap erase_clean_features(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                              const Tensor& image, const PerturbationBudget& budget,
                              uint64_t seed = 0,
                              encoder::Scoring scoring = encoder::Scoring::linear);

enum class UapLoss {
    mse_scores,         // || scores - one_hot(k) ||^2
    softmax_cross_entropy,
};

/// Universal target-class perturbation over the accessible set. Each outer
/// step is one pass over a seeded shuffled batch schedule with the signed
/// batch-mean gradient applied per batch; `budget.steps` counts outer steps.
NoiseMap optimize_clip_uap(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                           const data::AccessibleSet& accessible, int target_label,
                           const PerturbationBudget& budget, int batch_size, uint64_t seed = 0,
                           UapLoss loss = UapLoss::mse_scores);

/// -cos(v_q, v_plus) / cos(v_q, v_minus); the denominator magnitude is
/// clamped to >= 1e-6 preserving sign. Throws on zero vectors.
double contrastive_loss(const encoder::EmbeddingVector& v_q,
                        const encoder::EmbeddingVector& v_plus,
                        const encoder::EmbeddingVector& v_minus);

/// Label-free universal trigger: maximizes similarity between poisoned pairs
/// against poisoned-clean similarity over seeded within-batch pairings.
NoiseMap optimize_clip_cfa(const encoder::Encoder& enc, const data::AccessibleSet& accessible,
                           const PerturbationBudget& budget, uint64_t pairing_seed,
                           int batch_size);

/// Full-access baseline: universal perturbation against a trained proxy
/// classifier, minimizing cross-entropy toward the target label over the
/// entire training set. Violates the constrained threat model by design.
NoiseMap optimize_proxy_uap(const victim::TrainedModel& proxy, const data::Dataset& full_train,
                            int target_label, const PerturbationBudget& budget,
                            int batch_size = 64, uint64_t seed = 0);

void save_noise_map(const NoiseMap& map, const std::string& path);
NoiseMap load_noise_map(const std::string& path);

}  // namespace poisonlab::optim
