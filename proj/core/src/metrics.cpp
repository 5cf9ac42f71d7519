#include "poisonlab/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace poisonlab::metrics {

double benign_accuracy(const victim::TrainedModel& model, const data::Dataset& test) {
    if (test.examples.empty()) throw std::invalid_argument("benign_accuracy: empty test set");
    std::vector<Tensor> images;
    images.reserve(test.examples.size());
    for (const auto& ex : test.examples) images.push_back(ex.image);
    const std::vector<int> preds = victim::predict(model, images);
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == test.examples[i].label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double attack_success_rate(const victim::TrainedModel& model, const data::Dataset& test,
                           const triggers::Trigger& trigger, int target_label) {
    std::vector<Tensor> triggered;
    for (const auto& ex : test.examples) {
        if (ex.label == target_label) continue;
        triggered.push_back(triggers::apply_trigger(ex.image, trigger));
    }
    if (triggered.empty())
        throw std::invalid_argument("attack_success_rate: no test examples outside class " +
                                    std::to_string(target_label));
    const std::vector<int> preds = victim::predict(model, triggered);
    size_t hits = 0;
    for (int p : preds)
        if (p == target_label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double psnr_db(const Tensor& clean, const Tensor& poisoned) {
    if (!clean.same_shape(poisoned))
        throw std::invalid_argument("psnr: shape mismatch (" + clean.shape_str() + " vs " +
                                    poisoned.shape_str() + ")");
    double mse = 0.0;
    for (size_t i = 0; i < clean.v.size(); ++i) {
        const double d = (static_cast<double>(clean.v[i]) - poisoned.v[i]) * 255.0;
        mse += d * d;
    }
    mse /= static_cast<double>(clean.v.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim(const Tensor& clean, const Tensor& poisoned) {
    if (!clean.same_shape(poisoned))
        throw std::invalid_argument("ssim: shape mismatch (" + clean.shape_str() + " vs " +
                                    poisoned.shape_str() + ")");
    constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    constexpr double c3 = c2 / 2.0;

    const size_t plane = static_cast<size_t>(clean.h) * clean.w;
    double total = 0.0;
    for (int ci = 0; ci < clean.c; ++ci) {
        const float* f = clean.v.data() + ci * plane;
        const float* g = poisoned.v.data() + ci * plane;
        double mu_f = 0.0, mu_g = 0.0;
        for (size_t i = 0; i < plane; ++i) {
            mu_f += f[i] * 255.0;
            mu_g += g[i] * 255.0;
        }
        mu_f /= static_cast<double>(plane);
        mu_g /= static_cast<double>(plane);
        double var_f = 0.0, var_g = 0.0, cov = 0.0;
        for (size_t i = 0; i < plane; ++i) {
            const double df = f[i] * 255.0 - mu_f;
            const double dg = g[i] * 255.0 - mu_g;
            var_f += df * df;
            var_g += dg * dg;
            cov += df * dg;
        }
        var_f /= static_cast<double>(plane);
        var_g /= static_cast<double>(plane);
        cov /= static_cast<double>(plane);
        const double sd_f = std::sqrt(var_f);
        const double sd_g = std::sqrt(var_g);

        const double luminance = (2.0 * mu_f * mu_g + c1) / (mu_f * mu_f + mu_g * mu_g + c1);
        const double contrast = (2.0 * sd_f * sd_g + c2) / (var_f + var_g + c2);
        const double structure = (cov + c3) / (sd_f * sd_g + c3);
        total += luminance * contrast * structure;
    }
    return total / static_cast<double>(clean.c);
}

StealthSummary stealth_metrics(const std::vector<Tensor>& clean,
                               const std::vector<Tensor>& poisoned) {
    if (clean.size() != poisoned.size())
        throw std::invalid_argument("stealth_metrics: pair count mismatch");
    if (clean.empty()) throw std::invalid_argument("stealth_metrics: empty pair list");
    StealthSummary s;
    s.pair_count = static_cast<int>(clean.size());
    double psnr_sum = 0.0;
    int psnr_finite = 0;
    double ssim_sum = 0.0;
    for (size_t i = 0; i < clean.size(); ++i) {
        const double p = psnr_db(clean[i], poisoned[i]);
        if (std::isinf(p)) {
            ++s.psnr_inf_count;
        } else {
            psnr_sum += p;
            ++psnr_finite;
        }
        ssim_sum += ssim(clean[i], poisoned[i]);
    }
    s.psnr_mean_db = psnr_finite > 0 ? psnr_sum / psnr_finite
                                     : std::numeric_limits<double>::infinity();
    s.ssim_mean = ssim_sum / static_cast<double>(clean.size());
    return s;
}

namespace {

double mean_of(const std::vector<SeedMetrics>& seeds, double (*get)(const SeedMetrics&)) {
    if (seeds.empty()) return 0.0;
    double total = 0.0;
    for (const auto& s : seeds) total += get(s);
    return total / static_cast<double>(seeds.size());
}

double std_of(const std::vector<SeedMetrics>& seeds, double (*get)(const SeedMetrics&)) {
    if (seeds.size() < 2) return 0.0;
    const double mean = mean_of(seeds, get);
    double total = 0.0;
    for (const auto& s : seeds) {
        const double d = get(s) - mean;
        total += d * d;
    }
    return std::sqrt(total / static_cast<double>(seeds.size() - 1));
}

nlohmann::json json_psnr(double psnr, int inf_count) {
    nlohmann::json j;
    if (std::isinf(psnr))
        j = "inf";
    else
        j = psnr;
    (void)inf_count;
    return j;
}

}  // namespace

double MetricsReport::ba_mean() const {
    return mean_of(seeds, [](const SeedMetrics& s) { return s.ba; });
}
double MetricsReport::asr_mean() const {
    return mean_of(seeds, [](const SeedMetrics& s) { return s.asr; });
}
double MetricsReport::ba_std() const {
    return std_of(seeds, [](const SeedMetrics& s) { return s.ba; });
}
double MetricsReport::asr_std() const {
    return std_of(seeds, [](const SeedMetrics& s) { return s.asr; });
}
double MetricsReport::psnr_mean_db() const {
    return mean_of(seeds, [](const SeedMetrics& s) { return s.stealth.psnr_mean_db; });
}
double MetricsReport::ssim_mean() const {
    return mean_of(seeds, [](const SeedMetrics& s) { return s.stealth.ssim_mean; });
}

std::string MetricsReport::to_json() const {
    nlohmann::json j;
    j["ba"] = ba_mean();
    j["asr"] = asr_mean();
    j["ba_std"] = ba_std();
    j["asr_std"] = asr_std();
    j["psnr_mean_db"] = json_psnr(psnr_mean_db(), 0);
    j["ssim_mean"] = ssim_mean();
    j["m"] = seeds.empty() ? 0 : seeds.front().m;
    j["m_prime"] = seeds.empty() ? 0 : seeds.front().m_prime;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : seeds) {
        nlohmann::json js;
        js["seed"] = s.seed;
        js["ba"] = s.ba;
        js["asr"] = s.asr;
        js["psnr_mean_db"] = json_psnr(s.stealth.psnr_mean_db, s.stealth.psnr_inf_count);
        js["psnr_inf_count"] = s.stealth.psnr_inf_count;
        js["ssim_mean"] = s.stealth.ssim_mean;
        js["m"] = s.m;
        js["m_prime"] = s.m_prime;
        arr.push_back(js);
    }
    j["seeds"] = arr;
    return j.dump(2);
}

}  // namespace poisonlab::metrics
