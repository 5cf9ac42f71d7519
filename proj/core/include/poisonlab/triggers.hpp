#pragma once

#include <optional>
#include <string>
#include <utility>
#include <variant>

#include "poisonlab/optim.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab::triggers {

/// Solid patch stamped over a window. A missing position means bottom-right,
/// resolved against each image at apply time.
struct PatchTrigger {
    Tensor pixels;  // (c, p, p)
    std::optional<std::pair<int, int>> position;  // (row, col)
};

struct BlendTrigger {
    Tensor pattern;  // full image shape
    float lambda = 0.15f;
};

struct AdditiveTrigger {
    optim::NoiseMap noise;
};

struct Trigger {
    std::variant<PatchTrigger, BlendTrigger, AdditiveTrigger> value;
    std::string id;
};

/// Poison generator. Patch overwrites its window; Blend returns
/// lambda*pattern + (1-lambda)*x; Additive returns clamp_[0,1](x + delta).
/// The input image is never modified.
Tensor apply_trigger(const Tensor& image, const Trigger& trigger);

/// Where a patch lands on an (h, w) image; throws if it does not fit.
std::pair<int, int> resolve_patch_position(const PatchTrigger& patch, int h, int w);

/// Default: 2x2 all-white patch in the bottom-right corner.
Trigger make_badnets_trigger(int patch_side = 2,
                             std::optional<std::pair<int, int>> position = std::nullopt,
                             const std::optional<Tensor>& value_pattern = std::nullopt,
                             int channels = 3);

/// Loads the pattern image, channel-replicates grayscale and resizes to the
/// target shape. lambda defaults to 0.15 and must be in [0,1].
Trigger make_blended_trigger(const std::string& pattern_path, float lambda, int target_c,
                             int target_h, int target_w);

Trigger make_blended_trigger_from_pattern(Tensor pattern, float lambda);

Trigger make_additive_trigger(optim::NoiseMap noise, const std::string& method_name);

/// Seeded smooth noise texture used when no blend pattern file is supplied.
Tensor make_default_blend_pattern(int c, int h, int w, uint64_t seed = 2741);

/// Serialization: Additive -> <base>.noise; Patch/Blend -> <base>.png plus a
/// <base>.json sidecar carrying lambda/position and the trigger id.
void save_trigger(const Trigger& trigger, const std::string& base_path);
Trigger load_trigger(const std::string& base_path);

}  // namespace poisonlab::triggers
