#include "poisonlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "poisonlab/data.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/victim.hpp"

namespace poisonlab::optim {

namespace {

constexpr char kNoiseMagic[8] = {'P', 'L', 'N', 'O', 'I', 'S', 'E', '1'};
constexpr double kContrastiveDenominatorFloor = 1e-6;

int effective_batch(int batch_size, size_t n) {
    if (batch_size <= 0) return static_cast<int>(n);
    return static_cast<int>(std::min<size_t>(batch_size, n));
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
    return out;
}

struct BestTracker {
    double best = 0.0;
    Tensor delta;
    int best_step = -1;
    bool has = false;

    void offer(double value, const Tensor& d, int step) {
        if (std::isfinite(value) && (!has || value < best)) {
            best = value;
            delta = d;
            best_step = step;
            has = true;
        }
    }
};

/// Split a shuffled index order into batches, folding a trailing singleton
/// into the previous batch so every batch has at least two members when the
/// set does.
std::vector<std::vector<size_t>> batch_schedule(const std::vector<size_t>& order, int batch) {
    std::vector<std::vector<size_t>> out;
    for (size_t i = 0; i < order.size(); i += batch) {
        const size_t end = std::min(order.size(), i + batch);
        out.emplace_back(order.begin() + i, order.begin() + end);
    }
    if (out.size() >= 2 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

}  // namespace

void PerturbationBudget::validate() const {
    if (epsilon < 0.0f || !std::isfinite(epsilon))
        throw std::invalid_argument("budget: epsilon must be >= 0");
    if (alpha < 0.0f || !std::isfinite(alpha))
        throw std::invalid_argument("budget: alpha must be >= 0");
    if (steps < 0) throw std::invalid_argument("budget: steps must be >= 0");
}

std::string noise_kind_name(NoiseKind kind) {
    switch (kind) {
        case NoiseKind::cfe_per_sample: return "cfe_per_sample";
        case NoiseKind::uap_universal: return "uap_universal";
        case NoiseKind::cfa_universal: return "cfa_universal";
    }
    return "unknown";
}

void project_linf(Tensor& delta, float epsilon) {
    for (float& x : delta.v) x = std::clamp(x, -epsilon, epsilon);
}

void pgd_step(Tensor& delta, const Tensor& gradient, const PerturbationBudget& budget) {
    if (!delta.same_shape(gradient))
        throw std::invalid_argument("pgd_step: delta/gradient shape mismatch (" +
                                    delta.shape_str() + " vs " + gradient.shape_str() + ")");
    if (!all_finite(gradient)) throw std::runtime_error("pgd_step: non-finite gradient");
    for (size_t i = 0; i < delta.v.size(); ++i) {
        const float g = gradient.v[i];
        const float s = (g > 0.0f) ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
        delta.v[i] -= budget.alpha * s;
    }
    project_linf(delta, budget.epsilon);
}

PgdResult pgd_minimize(int c, int h, int w, const PerturbationBudget& budget,
                       const std::function<double(const Tensor&)>& objective,
                       const std::function<Tensor(const Tensor&)>& gradient,
                       uint64_t init_seed) {
    budget.validate();
    Tensor delta(c, h, w);
    if (budget.init == NoiseInit::uniform_random && budget.epsilon > 0.0f) {
        Rng rng(Rng::derive(init_seed, 0xd17a));
        for (float& x : delta.v) x = rng.uniform_f(-budget.epsilon, budget.epsilon);
        project_linf(delta, budget.epsilon);
    }

    BestTracker best;
    bool any_degenerate = false;
    std::string degenerate_what;
    auto offer = [&](const Tensor& d, int step) {
        try {
            best.offer(objective(d), d, step);
        } catch (const std::domain_error& e) {
            any_degenerate = true;
            degenerate_what = e.what();
        }
    };

    offer(Tensor(c, h, w), 0);  // the zero perturbation is always a candidate
    if (budget.init == NoiseInit::uniform_random) offer(delta, 0);

    for (int t = 1; t <= budget.steps; ++t) {
        Tensor g;
        try {
            g = gradient(delta);
        } catch (const std::domain_error& e) {
            any_degenerate = true;
            degenerate_what = e.what();
            break;  // cannot continue the trajectory without a gradient
        }
        pgd_step(delta, g, budget);
        offer(delta, t);
    }

    if (!best.has) {
        if (any_degenerate)
            throw std::domain_error("pgd_minimize: every iterate degenerate: " + degenerate_what);
        throw std::runtime_error("pgd_minimize: no finite objective value");
    }
    PgdResult r;
    r.delta = std::move(best.delta);
    r.objective = best.best;
    r.best_step = best.best_step;
    // Initial objective is the zero/init candidate when it evaluated cleanly.
    try {
        r.initial_objective = objective(Tensor(c, h, w));
    } catch (const std::domain_error&) {
        r.initial_objective = r.objective;
    }
    return r;
}

double cfe_loss(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                const Tensor& image, const Tensor& delta, encoder::Scoring scoring) {
    if (!image.same_shape(delta))
        throw std::invalid_argument("cfe_loss: image/delta shape mismatch");
    const Tensor x = add(image, delta);
    const auto zs = zero_shot_scores(enc, prompts, x, scoring);
    const double target = 1.0 / static_cast<double>(zs.scores.size());
    double loss = 0.0;
    for (double s : zs.scores) {
        const double d = s - target;
        loss += d * d;
    }
    return loss;
}

namespace {

Tensor cfe_loss_gradient(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                         const Tensor& image, const Tensor& delta, encoder::Scoring scoring) {
    const Tensor x = add(image, delta);
    const auto zs = zero_shot_scores(enc, prompts, x, scoring);
    const double target = 1.0 / static_cast<double>(zs.scores.size());
    std::vector<double> grad_scores(zs.scores.size());
    for (size_t i = 0; i < zs.scores.size(); ++i) grad_scores[i] = 2.0 * (zs.scores[i] - target);
    return zero_shot_scores_vjp(enc, prompts, x, zs, grad_scores, scoring);
}

/// Per-image loss toward the target label plus the matching score gradient.
double uap_loss_and_grad(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                         const Tensor& x, int k, UapLoss loss_kind, Tensor* grad_out) {
    const encoder::Scoring scoring = loss_kind == UapLoss::softmax_cross_entropy
                                         ? encoder::Scoring::softmax
                                         : encoder::Scoring::linear;
    const auto zs = zero_shot_scores(enc, prompts, x, scoring);
    const size_t C = zs.scores.size();
    double loss = 0.0;
    std::vector<double> grad_scores(C, 0.0);
    if (loss_kind == UapLoss::mse_scores) {
        for (size_t i = 0; i < C; ++i) {
            const double target = (static_cast<int>(i) == k) ? 1.0 : 0.0;
            const double d = zs.scores[i] - target;
            loss += d * d;
            grad_scores[i] = 2.0 * d;
        }
    } else {
        const double sk = std::max(zs.scores[k], 1e-12);
        loss = -std::log(sk);
        grad_scores[k] = -1.0 / sk;
    }
    if (grad_out) *grad_out = zero_shot_scores_vjp(enc, prompts, x, zs, grad_scores, scoring);
    return loss;
}

}  // namespace

NoiseMap erase_clean_features(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                              const Tensor& image, const PerturbationBudget& budget,
                              uint64_t seed, encoder::Scoring scoring) {
    auto result = pgd_minimize(
        image.c, image.h, image.w, budget,
        [&](const Tensor& d) { return cfe_loss(enc, prompts, image, d, scoring); },
        [&](const Tensor& d) { return cfe_loss_gradient(enc, prompts, image, d, scoring); },
        seed);
    return NoiseMap{std::move(result.delta), budget, NoiseKind::cfe_per_sample};
}

NoiseMap optimize_clip_uap(const encoder::Encoder& enc, const encoder::PromptSet& prompts,
                           const data::AccessibleSet& accessible, int target_label,
                           const PerturbationBudget& budget, int batch_size, uint64_t seed,
                           UapLoss loss_kind) {
    budget.validate();
    const auto& examples = accessible.examples;
    if (examples.empty()) throw std::invalid_argument("optimize_clip_uap: empty accessible set");
    if (target_label < 0 || target_label >= prompts.class_count())
        throw std::invalid_argument("optimize_clip_uap: target label out of range");
    const Tensor& first = examples[0].image;

    auto set_objective = [&](const Tensor& delta) {
        double total = 0.0;
        for (const auto& ex : examples)
            total += uap_loss_and_grad(enc, prompts, add(ex.image, delta), target_label,
                                       loss_kind, nullptr);
        const double mean = total / static_cast<double>(examples.size());
        if (!std::isfinite(mean)) throw std::runtime_error("optimize_clip_uap: non-finite loss");
        return mean;
    };

    Tensor delta(first.c, first.h, first.w);
    if (budget.init == NoiseInit::uniform_random && budget.epsilon > 0.0f) {
        Rng rng(Rng::derive(seed, 0xd17a));
        for (float& x : delta.v) x = rng.uniform_f(-budget.epsilon, budget.epsilon);
    }

    BestTracker best;
    best.offer(set_objective(Tensor(first.c, first.h, first.w)), Tensor(first.c, first.h, first.w), 0);
    if (budget.init == NoiseInit::uniform_random) best.offer(set_objective(delta), delta, 0);

    Rng schedule_rng(Rng::derive(seed, 0x5c4e));
    const int batch = effective_batch(batch_size, examples.size());
    for (int t = 1; t <= budget.steps; ++t) {
        std::vector<size_t> order = schedule_rng.permutation(examples.size());
        for (size_t i = 0; i < order.size(); i += batch) {
            const size_t end = std::min(order.size(), i + batch);
            Tensor grad(first.c, first.h, first.w);
            for (size_t j = i; j < end; ++j) {
                Tensor g;
                uap_loss_and_grad(enc, prompts, add(examples[order[j]].image, delta),
                                  target_label, loss_kind, &g);
                for (size_t p = 0; p < grad.v.size(); ++p) grad.v[p] += g.v[p];
            }
            const float inv = 1.0f / static_cast<float>(end - i);
            for (float& g : grad.v) g *= inv;
            pgd_step(delta, grad, budget);
        }
        best.offer(set_objective(delta), delta, t);
    }
    return NoiseMap{std::move(best.delta), budget, NoiseKind::uap_universal};
}

namespace {

double clamp_denominator(double b) {
    if (b >= 0.0) return std::max(b, kContrastiveDenominatorFloor);
    return std::min(b, -kContrastiveDenominatorFloor);
}

struct ContrastiveGrads {
    double loss;
    std::vector<double> d_q;
    std::vector<double> d_plus;
};

double norm_of(const encoder::EmbeddingVector& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    return std::sqrt(n);
}

/// Loss and gradients w.r.t. the two delta-dependent embeddings. The clamped
/// denominator is treated as constant inside the clamp region.
ContrastiveGrads contrastive_loss_grads(const encoder::EmbeddingVector& q,
                                        const encoder::EmbeddingVector& p,
                                        const encoder::EmbeddingVector& m) {
    const double a = encoder::cosine_similarity(q, p);
    const double b = encoder::cosine_similarity(q, m);
    const double bc = clamp_denominator(b);
    const bool clamped = (bc != b);

    ContrastiveGrads out;
    out.loss = -a / bc;
    out.d_q.assign(q.size(), 0.0);
    out.d_plus.assign(p.size(), 0.0);

    const double dL_da = -1.0 / bc;
    const double dL_db = clamped ? 0.0 : a / (bc * bc);

    const double nq = norm_of(q), np = norm_of(p), nm = norm_of(m);
    const double inv_qp = 1.0 / (nq * np);
    const double inv_qm = 1.0 / (nq * nm);
    const double nq2 = nq * nq, np2 = np * np;
    for (size_t i = 0; i < q.size(); ++i) {
        const double da_dq = p[i] * inv_qp - a * q[i] / nq2;
        const double db_dq = m[i] * inv_qm - b * q[i] / nq2;
        out.d_q[i] = dL_da * da_dq + dL_db * db_dq;
        out.d_plus[i] = dL_da * (q[i] * inv_qp - a * p[i] / np2);
    }
    return out;
}

/// Gradient of one contrastive pair w.r.t. the shared perturbation: both the
/// query and the key views carry delta, so the two VJPs add.
Tensor contrastive_pair_delta_grad(const encoder::Encoder& enc, const Tensor& x_query,
                                   const Tensor& x_key,
                                   const encoder::EmbeddingVector& v_minus) {
    const encoder::EmbeddingVector v_q = enc.embed_image(x_query);
    const encoder::EmbeddingVector v_p = enc.embed_image(x_key);
    const ContrastiveGrads g = contrastive_loss_grads(v_q, v_p, v_minus);
    Tensor grad = enc.embed_image_vjp(x_query, g.d_q);
    const Tensor grad_key = enc.embed_image_vjp(x_key, g.d_plus);
    for (size_t i = 0; i < grad.v.size(); ++i) grad.v[i] += grad_key.v[i];
    return grad;
}

}  // namespace

double contrastive_loss(const encoder::EmbeddingVector& v_q,
                        const encoder::EmbeddingVector& v_plus,
                        const encoder::EmbeddingVector& v_minus) {
    const double a = encoder::cosine_similarity(v_q, v_plus);
    const double b = encoder::cosine_similarity(v_q, v_minus);
    return -a / clamp_denominator(b);
}

NoiseMap optimize_clip_cfa(const encoder::Encoder& enc, const data::AccessibleSet& accessible,
                           const PerturbationBudget& budget, uint64_t pairing_seed,
                           int batch_size) {
    budget.validate();
    const auto& examples = accessible.examples;
    if (examples.size() < 2)
        throw std::invalid_argument("optimize_clip_cfa: need at least 2 examples, got " +
                                    std::to_string(examples.size()));
    const Tensor& first = examples[0].image;

    // Clean embeddings (the negatives) do not depend on delta.
    std::vector<encoder::EmbeddingVector> clean(examples.size());
    for (size_t i = 0; i < examples.size(); ++i) clean[i] = enc.embed_image(examples[i].image);

    // Fixed evaluation pairing for best-iterate tracking.
    Rng eval_rng(Rng::derive(pairing_seed, 0xe7a1));
    const std::vector<size_t> eval_order = eval_rng.permutation(examples.size());

    auto set_objective = [&](const Tensor& delta) {
        std::vector<encoder::EmbeddingVector> poisoned(examples.size());
        for (size_t i = 0; i < examples.size(); ++i)
            poisoned[i] = enc.embed_image(add(examples[i].image, delta));
        double total = 0.0;
        for (size_t pos = 0; pos < eval_order.size(); ++pos) {
            const size_t i = eval_order[pos];
            const size_t j = eval_order[(pos + 1) % eval_order.size()];
            total += contrastive_loss(poisoned[i], poisoned[j], clean[i]);
        }
        const double mean = total / static_cast<double>(eval_order.size());
        if (!std::isfinite(mean)) throw std::runtime_error("optimize_clip_cfa: non-finite loss");
        return mean;
    };

    Tensor delta(first.c, first.h, first.w);
    if (budget.init == NoiseInit::uniform_random && budget.epsilon > 0.0f) {
        Rng rng(Rng::derive(pairing_seed, 0xd17a));
        for (float& x : delta.v) x = rng.uniform_f(-budget.epsilon, budget.epsilon);
    }

    BestTracker best;
    best.offer(set_objective(Tensor(first.c, first.h, first.w)), Tensor(first.c, first.h, first.w), 0);
    if (budget.init == NoiseInit::uniform_random) best.offer(set_objective(delta), delta, 0);

    Rng schedule_rng(Rng::derive(pairing_seed, 0x5c4e));
    const int batch = std::max(2, effective_batch(batch_size, examples.size()));
    for (int t = 1; t <= budget.steps; ++t) {
        const auto batches = batch_schedule(schedule_rng.permutation(examples.size()), batch);
        for (const auto& members : batches) {
            Tensor grad(first.c, first.h, first.w);
            for (size_t pos = 0; pos < members.size(); ++pos) {
                const size_t i = members[pos];
                const size_t j = members[(pos + 1) % members.size()];
                const Tensor xq = add(examples[i].image, delta);
                const Tensor xp = add(examples[j].image, delta);
                const Tensor g = contrastive_pair_delta_grad(enc, xq, xp, clean[i]);
                for (size_t p = 0; p < grad.v.size(); ++p) grad.v[p] += g.v[p];
            }
            const float inv = 1.0f / static_cast<float>(members.size());
            for (float& g : grad.v) g *= inv;
            pgd_step(delta, grad, budget);
        }
        best.offer(set_objective(delta), delta, t);
    }
    return NoiseMap{std::move(best.delta), budget, NoiseKind::cfa_universal};
}

NoiseMap optimize_proxy_uap(const victim::TrainedModel& proxy, const data::Dataset& full_train,
                            int target_label, const PerturbationBudget& budget, int batch_size,
                            uint64_t seed) {
    budget.validate();
    if (!victim::is_trained(proxy))
        throw std::invalid_argument("optimize_proxy_uap: proxy model is untrained");
    if (full_train.examples.empty())
        throw std::invalid_argument("optimize_proxy_uap: empty training set");
    const Tensor& first = full_train.examples[0].image;

    victim::InputGradSession session(proxy);
    const int batch = effective_batch(batch_size, full_train.examples.size());

    auto batch_views = [&](const std::vector<size_t>& idx, const Tensor& delta) {
        std::vector<Tensor> xs;
        xs.reserve(idx.size());
        for (size_t i : idx) xs.push_back(add(full_train.examples[i].image, delta));
        return xs;
    };

    auto set_objective = [&](const Tensor& delta) {
        double total = 0.0;
        size_t count = 0;
        std::vector<size_t> idx;
        for (size_t i = 0; i < full_train.examples.size(); ++i) {
            idx.push_back(i);
            if (idx.size() == static_cast<size_t>(batch) ||
                i + 1 == full_train.examples.size()) {
                total += session.mean_ce(batch_views(idx, delta), target_label) * idx.size();
                count += idx.size();
                idx.clear();
            }
        }
        const double mean = total / static_cast<double>(count);
        if (!std::isfinite(mean)) throw std::runtime_error("optimize_proxy_uap: non-finite loss");
        return mean;
    };

    Tensor delta(first.c, first.h, first.w);
    if (budget.init == NoiseInit::uniform_random && budget.epsilon > 0.0f) {
        Rng rng(Rng::derive(seed, 0xd17a));
        for (float& x : delta.v) x = rng.uniform_f(-budget.epsilon, budget.epsilon);
    }

    BestTracker best;
    best.offer(set_objective(Tensor(first.c, first.h, first.w)), Tensor(first.c, first.h, first.w), 0);
    if (budget.init == NoiseInit::uniform_random) best.offer(set_objective(delta), delta, 0);

    Rng schedule_rng(Rng::derive(seed, 0x5c4e));
    for (int t = 1; t <= budget.steps; ++t) {
        std::vector<size_t> order = schedule_rng.permutation(full_train.examples.size());
        for (size_t i = 0; i < order.size(); i += batch) {
            const size_t end = std::min(order.size(), i + batch);
            const std::vector<size_t> idx(order.begin() + i, order.begin() + end);
            auto [loss, grad] = session.mean_ce_and_input_grad(batch_views(idx, delta),
                                                               target_label);
            (void)loss;
            pgd_step(delta, grad, budget);
        }
        best.offer(set_objective(delta), delta, t);
    }
    return NoiseMap{std::move(best.delta), budget, NoiseKind::uap_universal};
}

void save_noise_map(const NoiseMap& map, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("noise map: cannot write " + path);
    out.write(kNoiseMagic, 8);
    const uint32_t kind = static_cast<uint32_t>(map.kind);
    out.write(reinterpret_cast<const char*>(&kind), 4);
    out.write(reinterpret_cast<const char*>(&map.budget.epsilon), 4);
    out.write(reinterpret_cast<const char*>(&map.budget.alpha), 4);
    const uint32_t steps = static_cast<uint32_t>(map.budget.steps);
    out.write(reinterpret_cast<const char*>(&steps), 4);
    const uint32_t dims[3] = {static_cast<uint32_t>(map.delta.c),
                              static_cast<uint32_t>(map.delta.h),
                              static_cast<uint32_t>(map.delta.w)};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    out.write(reinterpret_cast<const char*>(map.delta.v.data()),
              map.delta.v.size() * sizeof(float));
    if (!out) throw std::runtime_error("noise map: write failed: " + path);
}

NoiseMap load_noise_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("noise map: cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kNoiseMagic, 8) != 0)
        throw std::runtime_error("noise map: bad magic in " + path);
    uint32_t kind = 0, steps = 0, dims[3] = {0, 0, 0};
    NoiseMap map;
    if (!in.read(reinterpret_cast<char*>(&kind), 4) ||
        !in.read(reinterpret_cast<char*>(&map.budget.epsilon), 4) ||
        !in.read(reinterpret_cast<char*>(&map.budget.alpha), 4) ||
        !in.read(reinterpret_cast<char*>(&steps), 4) ||
        !in.read(reinterpret_cast<char*>(dims), sizeof(dims)))
        throw std::runtime_error("noise map: truncated header in " + path);
    if (kind > 2) throw std::runtime_error("noise map: unknown kind tag in " + path);
    map.kind = static_cast<NoiseKind>(kind);
    map.budget.steps = static_cast<int>(steps);
    map.delta = Tensor(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                       static_cast<int>(dims[2]));
    if (!in.read(reinterpret_cast<char*>(map.delta.v.data()), map.delta.v.size() * sizeof(float)))
        throw std::runtime_error("noise map: truncated payload in " + path);
    if (max_abs(map.delta) > map.budget.epsilon)
        throw std::runtime_error("noise map: payload violates its own budget in " + path);
    return map;
}

}  // namespace poisonlab::optim
