#include "poisonlab/triggers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "poisonlab/hash.hpp"
#include "poisonlab/pngio.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab::triggers {

namespace {

std::string short_hash(const Tensor& t) { return hex16(content_hash(t)).substr(0, 8); }

}  // namespace

std::pair<int, int> resolve_patch_position(const PatchTrigger& patch, int h, int w) {
    const int p_h = patch.pixels.h;
    const int p_w = patch.pixels.w;
    int row, col;
    if (patch.position) {
        row = patch.position->first;
        col = patch.position->second;
    } else {
        row = h - p_h;
        col = w - p_w;
    }
    if (row < 0 || col < 0 || row + p_h > h || col + p_w > w)
        throw std::invalid_argument("patch trigger: " + std::to_string(p_h) + "x" +
                                    std::to_string(p_w) + " patch at (" + std::to_string(row) +
                                    "," + std::to_string(col) + ") does not fit a " +
                                    std::to_string(h) + "x" + std::to_string(w) + " image");
    return {row, col};
}

Tensor apply_trigger(const Tensor& image, const Trigger& trigger) {
    if (const auto* patch = std::get_if<PatchTrigger>(&trigger.value)) {
        if (patch->pixels.c != image.c)
            throw std::invalid_argument("patch trigger: channel mismatch");
        const auto [row, col] = resolve_patch_position(*patch, image.h, image.w);
        Tensor out = image;
        for (int ci = 0; ci < image.c; ++ci)
            for (int y = 0; y < patch->pixels.h; ++y)
                for (int x = 0; x < patch->pixels.w; ++x)
                    out.at(ci, row + y, col + x) = patch->pixels.at(ci, y, x);
        clamp01(out);
        return out;
    }
    if (const auto* blend = std::get_if<BlendTrigger>(&trigger.value)) {
        if (!blend->pattern.same_shape(image))
            throw std::invalid_argument("blend trigger: pattern shape " +
                                        blend->pattern.shape_str() + " != image shape " +
                                        image.shape_str());
        Tensor out = image;
        const float lambda = blend->lambda;
        for (size_t i = 0; i < out.v.size(); ++i)
            out.v[i] = lambda * blend->pattern.v[i] + (1.0f - lambda) * image.v[i];
        clamp01(out);
        return out;
    }
    const auto& additive = std::get<AdditiveTrigger>(trigger.value);
    if (!additive.noise.delta.same_shape(image))
        throw std::invalid_argument("additive trigger: noise shape " +
                                    additive.noise.delta.shape_str() + " != image shape " +
                                    image.shape_str());
    Tensor out = image;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += additive.noise.delta.v[i];
    clamp01(out);
    return out;
}

Trigger make_badnets_trigger(int patch_side, std::optional<std::pair<int, int>> position,
                             const std::optional<Tensor>& value_pattern, int channels) {
    if (patch_side < 1)
        throw std::invalid_argument("badnets trigger: patch side must be >= 1");
    if (position && (position->first < 0 || position->second < 0))
        throw std::invalid_argument("badnets trigger: negative patch position");
    PatchTrigger patch;
    if (value_pattern) {
        if (value_pattern->h != patch_side || value_pattern->w != patch_side)
            throw std::invalid_argument("badnets trigger: value pattern does not match patch side");
        patch.pixels = *value_pattern;
    } else {
        patch.pixels = Tensor::full(channels, patch_side, patch_side, 1.0f);
    }
    validate_image(patch.pixels, "badnets trigger pattern");
    patch.position = position;
    char id[64];
    std::snprintf(id, sizeof(id), "badnets-p%d-%s", patch_side,
                  short_hash(patch.pixels).c_str());
    return Trigger{std::move(patch), id};
}

Trigger make_blended_trigger_from_pattern(Tensor pattern, float lambda) {
    if (!(lambda >= 0.0f && lambda <= 1.0f))
        throw std::invalid_argument("blended trigger: lambda must be in [0,1], got " +
                                    std::to_string(lambda));
    validate_image(pattern, "blend pattern");
    char id[64];
    std::snprintf(id, sizeof(id), "blended-l%.3f-%s", lambda, short_hash(pattern).c_str());
    return Trigger{BlendTrigger{std::move(pattern), lambda}, id};
}

Trigger make_blended_trigger(const std::string& pattern_path, float lambda, int target_c,
                             int target_h, int target_w) {
    Tensor pattern = read_png(pattern_path);  // always RGB
    if (target_c == 1) {
        // Average down to a single channel.
        Tensor gray(1, pattern.h, pattern.w);
        for (int y = 0; y < pattern.h; ++y)
            for (int x = 0; x < pattern.w; ++x)
                gray.at(0, y, x) =
                    (pattern.at(0, y, x) + pattern.at(1, y, x) + pattern.at(2, y, x)) / 3.0f;
        pattern = std::move(gray);
    } else if (target_c != 3) {
        throw std::invalid_argument("blended trigger: unsupported target channel count " +
                                    std::to_string(target_c));
    }
    pattern = bilinear_resize(pattern, target_h, target_w);
    clamp01(pattern);
    return make_blended_trigger_from_pattern(std::move(pattern), lambda);
}

Trigger make_additive_trigger(optim::NoiseMap noise, const std::string& method_name) {
    char id[96];
    std::snprintf(id, sizeof(id), "%s-e%.6f-t%d-%s", method_name.c_str(), noise.budget.epsilon,
                  noise.budget.steps, short_hash(noise.delta).c_str());
    return Trigger{AdditiveTrigger{std::move(noise)}, id};
}

Tensor make_default_blend_pattern(int c, int h, int w, uint64_t seed) {
    // Smooth mid-gray texture, the benign-image stand-in: seeded coarse noise
    // upsampled to full size and compressed around 0.5. Snapped to the 8-bit
    // grid so PNG serialization round-trips exactly.
    Rng rng(seed);
    const int gh = std::max(2, h / 8), gw = std::max(2, w / 8);
    Tensor coarse(c, gh, gw);
    for (float& v : coarse.v) v = rng.uniform_f(0.25f, 0.75f);
    Tensor pattern = bilinear_resize(coarse, h, w);
    clamp01(pattern);
    for (float& v : pattern.v)
        v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
    return pattern;
}

void save_trigger(const Trigger& trigger, const std::string& base_path) {
    if (const auto* additive = std::get_if<AdditiveTrigger>(&trigger.value)) {
        optim::save_noise_map(additive->noise, base_path + ".noise");
        nlohmann::json meta{{"type", "additive"}, {"id", trigger.id}};
        std::ofstream out(base_path + ".json");
        out << meta.dump(2) << "\n";
        if (!out) throw std::runtime_error("trigger: cannot write " + base_path + ".json");
        return;
    }
    nlohmann::json meta;
    if (const auto* patch = std::get_if<PatchTrigger>(&trigger.value)) {
        write_png(patch->pixels, base_path + ".png");
        meta["type"] = "patch";
        meta["channels"] = patch->pixels.c;
        if (patch->position) {
            meta["row"] = patch->position->first;
            meta["col"] = patch->position->second;
        }
    } else {
        const auto& blend = std::get<BlendTrigger>(trigger.value);
        write_png(blend.pattern, base_path + ".png");
        meta["type"] = "blend";
        meta["channels"] = blend.pattern.c;
        meta["lambda"] = blend.lambda;
    }
    meta["id"] = trigger.id;
    std::ofstream out(base_path + ".json");
    out << meta.dump(2) << "\n";
    if (!out) throw std::runtime_error("trigger: cannot write " + base_path + ".json");
}

Trigger load_trigger(const std::string& base_path) {
    std::ifstream in(base_path + ".json");
    if (!in) throw std::runtime_error("trigger: cannot open " + base_path + ".json");
    nlohmann::json meta = nlohmann::json::parse(in);
    const std::string type = meta.at("type").get<std::string>();
    Trigger trigger;
    trigger.id = meta.at("id").get<std::string>();
    // read_png always yields RGB; collapse back when the trigger was single-channel.
    auto with_channels = [&](Tensor t) {
        if (meta.value("channels", 3) == 1) {
            Tensor gray(1, t.h, t.w);
            for (int y = 0; y < t.h; ++y)
                for (int x = 0; x < t.w; ++x) gray.at(0, y, x) = t.at(0, y, x);
            return gray;
        }
        return t;
    };
    if (type == "additive") {
        trigger.value = AdditiveTrigger{optim::load_noise_map(base_path + ".noise")};
    } else if (type == "patch") {
        PatchTrigger patch;
        patch.pixels = with_channels(read_png(base_path + ".png"));
        if (meta.contains("row"))
            patch.position = std::make_pair(meta.at("row").get<int>(), meta.at("col").get<int>());
        trigger.value = std::move(patch);
    } else if (type == "blend") {
        BlendTrigger blend;
        blend.pattern = with_channels(read_png(base_path + ".png"));
        blend.lambda = meta.at("lambda").get<float>();
        trigger.value = std::move(blend);
    } else {
        throw std::runtime_error("trigger: unknown type `" + type + "` in " + base_path + ".json");
    }
    return trigger;
}

}  // namespace poisonlab::triggers
