#include <benchmark/benchmark.h>

#include "poisonlab/encoder.hpp"
#include "poisonlab/fixture.hpp"
#include "poisonlab/metrics.hpp"
#include "poisonlab/nn.hpp"
#include "poisonlab/optim.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/tensor.hpp"

using namespace poisonlab;

namespace {

Tensor random_image(int c, int h, int w, uint64_t seed) {
    Rng rng(seed);
    Tensor t(c, h, w);
    for (float& v : t.v) v = rng.uniform_f(0.05f, 0.95f);
    return t;
}

void bm_encoder_embed(benchmark::State& state) {
    const auto enc = encoder::load_encoder("", "toy");
    const Tensor img = random_image(3, 32, 32, 1);
    for (auto _ : state) benchmark::DoNotOptimize(enc->embed_image(img));
}
BENCHMARK(bm_encoder_embed);

void bm_pgd_step(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    Tensor delta(3, side, side);
    const Tensor grad = random_image(3, side, side, 2);
    optim::PerturbationBudget budget;
    for (auto _ : state) {
        optim::pgd_step(delta, grad, budget);
        benchmark::DoNotOptimize(delta.v.data());
    }
}
BENCHMARK(bm_pgd_step)->Arg(32)->Arg(224);

void bm_erase_clean_features(benchmark::State& state) {
    const auto enc = encoder::load_encoder("", "toy");
    const auto prompts = encoder::build_prompts({"aqua", "brick", "coral", "dune"}, *enc);
    const Tensor img = random_image(3, 32, 32, 3);
    optim::PerturbationBudget budget;
    budget.steps = static_cast<int>(state.range(0));
    for (auto _ : state)
        benchmark::DoNotOptimize(optim::erase_clean_features(*enc, prompts, img, budget));
}
BENCHMARK(bm_erase_clean_features)->Arg(10)->Arg(50);

void bm_psnr_ssim(benchmark::State& state) {
    const Tensor a = random_image(3, 32, 32, 4);
    Tensor b = a;
    b.v[0] += 0.01f;
    for (auto _ : state) {
        benchmark::DoNotOptimize(metrics::psnr_db(a, b));
        benchmark::DoNotOptimize(metrics::ssim(a, b));
    }
}
BENCHMARK(bm_psnr_ssim);

void bm_small_cnn_epoch_batch(benchmark::State& state) {
    Rng rng(5);
    nn::Batch batch(static_cast<int>(state.range(0)), 3, 32, 32);
    for (float& v : batch.v) v = rng.uniform_f(0.0f, 1.0f);
    auto model = victim::make_untrained(victim::Arch::small_cnn, 10, 3, 32, 32, 1);
    std::vector<nn::Param*> params;
    model.net->params(params);
    std::vector<int> targets(batch.n, 1);
    std::vector<float> weights(batch.n, 1.0f);
    for (auto _ : state) {
        nn::Batch logits = model.net->forward(batch, true);
        nn::Batch grad;
        nn::softmax_cross_entropy(logits, targets, weights, &grad);
        nn::zero_grads(params);
        model.net->backward(grad);
        nn::sgd_step(params, {0.05f, 0.9f, 5e-4f});
    }
}
BENCHMARK(bm_small_cnn_epoch_batch)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
