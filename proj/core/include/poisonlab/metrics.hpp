#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poisonlab/data.hpp"
#include "poisonlab/tensor.hpp"
#include "poisonlab/triggers.hpp"
#include "poisonlab/victim.hpp"

namespace poisonlab::metrics {

/// Fraction of unmodified test images predicted correctly.
double benign_accuracy(const victim::TrainedModel& model, const data::Dataset& test);

/// Applies the trigger (no erasing noise at activation time) to every test
/// image whose label differs from k; returns the fraction predicted as k.
double attack_success_rate(const victim::TrainedModel& model, const data::Dataset& test,
                           const triggers::Trigger& trigger, int target_label);

/// 10*log10(255^2 / MSE) with pixels scaled to [0,255]; identical images
/// give +infinity.
double psnr_db(const Tensor& clean, const Tensor& poisoned);

/// Global (whole-image) structural similarity per channel, averaged.
/// Constants C1=(0.01*255)^2, C2=(0.03*255)^2, C3=C2/2 on the [0,255] scale.
double ssim(const Tensor& clean, const Tensor& poisoned);

struct StealthSummary {
    double psnr_mean_db = 0.0;  // mean over finite pairs
    int psnr_inf_count = 0;     // identical pairs, excluded from the mean
    double ssim_mean = 0.0;
    int pair_count = 0;
};

StealthSummary stealth_metrics(const std::vector<Tensor>& clean,
                               const std::vector<Tensor>& poisoned);

struct SeedMetrics {
    uint64_t seed = 0;
    double ba = 0.0;
    double asr = 0.0;
    StealthSummary stealth;
    int m = 0;        // test-set size
    int m_prime = 0;  // non-target-class test images
};

/// Aggregate over seeds plus the per-seed breakdown. JSON field names are
/// stable: ba, asr, psnr_mean_db, ssim_mean, m, m_prime, seeds.
struct MetricsReport {
    std::vector<SeedMetrics> seeds;

    double ba_mean() const;
    double asr_mean() const;
    double ba_std() const;   // sample stddev over seeds (0 when < 2 seeds)
    double asr_std() const;
    double psnr_mean_db() const;
    double ssim_mean() const;

    std::string to_json() const;
};

}  // namespace poisonlab::metrics
