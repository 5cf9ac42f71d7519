#pragma once

#include <cstdint>
#include <memory>

#include "poisonlab/data.hpp"
#include "poisonlab/encoder.hpp"

namespace poisonlab::data {

/// Procedural 10-class image fixture. Each class is a smooth low-frequency
/// color pattern; samples add per-sample brightness jitter, a small spatial
/// shift and pixel noise. The external pool uses a disjoint (higher) frequency
/// band and a different resolution, standing in for an out-of-domain source.
struct FixtureParams {
    int classes = 10;
    int train_per_class = 500;
    int test_per_class = 100;
    int external_count = 1000;
    int height = 32;
    int width = 32;
    int external_height = 48;
    int external_width = 48;
    uint64_t seed = 604613;
    float pattern_amplitude = 0.16f;
    float noise_sigma = 0.06f;
};

struct FixtureBundle {
    Dataset train;
    Dataset test;
    Dataset external_pool;
};

FixtureBundle make_desk_fixture(const FixtureParams& params = {});

/// Frozen encoder aligned with the fixture distribution, standing in for a
/// large pretrained multimodal model. The image tower projects onto centered
/// class-template directions (estimated from an auxiliary pool drawn from a
/// disjoint stream) plus seeded random directions; the text tower is solved
/// so each class prompt lands on its class's image-embedding direction.
std::shared_ptr<encoder::LinearEncoder> make_fixture_encoder(const FixtureParams& params,
                                                             int dim = 32,
                                                             int input_resolution = 16);

}  // namespace poisonlab::data
