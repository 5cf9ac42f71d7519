#include "poisonlab/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "poisonlab/hash.hpp"
#include "poisonlab/plot.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/triggers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace poisonlab::experiments {

namespace {

std::string profile_name(Profile p) { return p == Profile::desk ? "desk" : "paper"; }
Profile profile_from_name(const std::string& s) {
    if (s == "desk") return Profile::desk;
    if (s == "paper") return Profile::paper;
    throw std::runtime_error("unknown profile: " + s);
}

std::string kind_name(DatasetKind k) {
    switch (k) {
        case DatasetKind::fixture: return "fixture";
        case DatasetKind::class_dirs: return "dirs";
        case DatasetKind::packed: return "packed";
    }
    return "fixture";
}
DatasetKind kind_from_name(const std::string& s) {
    if (s == "fixture") return DatasetKind::fixture;
    if (s == "dirs") return DatasetKind::class_dirs;
    if (s == "packed") return DatasetKind::packed;
    throw std::runtime_error("unknown dataset kind: " + s);
}

std::string scoring_name(encoder::Scoring s) {
    return s == encoder::Scoring::linear ? "linear" : "softmax";
}
encoder::Scoring scoring_from_name(const std::string& s) {
    if (s == "linear") return encoder::Scoring::linear;
    if (s == "softmax") return encoder::Scoring::softmax;
    throw std::runtime_error("unknown scoring: " + s);
}

std::string init_name(optim::NoiseInit i) {
    return i == optim::NoiseInit::zeros ? "zeros" : "uniform";
}
optim::NoiseInit init_from_name(const std::string& s) {
    if (s == "zeros") return optim::NoiseInit::zeros;
    if (s == "uniform") return optim::NoiseInit::uniform_random;
    throw std::runtime_error("unknown noise init: " + s);
}

const std::vector<std::string> kMethods = {"badnets", "blended", "uap", "clip-uap", "clip-cfa"};

std::string join_u64(const std::vector<uint64_t>& xs) {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(xs[i]);
    }
    return out;
}

std::string join_int(const std::vector<int>& xs) {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(xs[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset bundle cache

struct DatasetBundle {
    data::Dataset train, test, external_pool;
    bool has_external = false;
    uint64_t train_hash = 0;
};

std::shared_ptr<const DatasetBundle> load_bundle(const DatasetSpec& spec) {
    static std::mutex mu;
    static std::map<std::string, std::shared_ptr<const DatasetBundle>> cache;

    std::string key = kind_name(spec.kind) + "|" + spec.name + "|" + spec.train_path + "|" +
                      spec.test_path + "|" + spec.external_path + "|" +
                      spec.class_names_path.value_or("") + "|" +
                      std::to_string(spec.fixture.seed) + "|" +
                      std::to_string(spec.fixture.train_per_class) + "|" +
                      std::to_string(spec.fixture.test_per_class) + "|" +
                      std::to_string(spec.fixture.external_count) + "|" +
                      format_double(spec.fixture.pattern_amplitude) + "|" +
                      format_double(spec.fixture.noise_sigma);
    {
        std::lock_guard<std::mutex> lock(mu);
        const auto it = cache.find(key);
        if (it != cache.end()) return it->second;
    }
    auto bundle = std::make_shared<DatasetBundle>();
    if (spec.kind == DatasetKind::fixture) {
        data::FixtureBundle fx = data::make_desk_fixture(spec.fixture);
        bundle->train = std::move(fx.train);
        bundle->test = std::move(fx.test);
        bundle->external_pool = std::move(fx.external_pool);
        bundle->has_external = true;
    } else {
        data::FormatSpec fmt;
        fmt.layout = spec.kind == DatasetKind::class_dirs ? data::DatasetLayout::class_dirs
                                                          : data::DatasetLayout::packed;
        fmt.class_names_path = spec.class_names_path;
        fmt.split = data::Split::train;
        bundle->train = data::load_dataset(spec.train_path, fmt);
        fmt.split = data::Split::test;
        bundle->test = data::load_dataset(spec.test_path, fmt);
        if (!spec.external_path.empty()) {
            fmt.split = data::Split::external_pool;
            bundle->external_pool = data::load_dataset(spec.external_path, fmt);
            bundle->has_external = true;
        }
    }
    bundle->train_hash = data::dataset_content_hash(bundle->train);
    std::lock_guard<std::mutex> lock(mu);
    cache[key] = bundle;
    return bundle;
}

// ---------------------------------------------------------------------------
// Atomic-ish file cache helpers (write to temp, rename into place)

std::mutex g_cache_io_mutex;

bool cache_exists(const fs::path& p) {
    std::lock_guard<std::mutex> lock(g_cache_io_mutex);
    return fs::exists(p);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing / serialization

ExperimentConfig ExperimentConfig::from_flat(const FlatConfig& flat) {
    ExperimentConfig cfg;
    cfg.profile = profile_from_name(get_str(flat, "profile", "desk"));

    cfg.dataset.kind = kind_from_name(get_str(flat, "dataset.kind", "fixture"));
    cfg.dataset.name = get_str(flat, "dataset.name", "fixture");
    cfg.dataset.train_path = get_str(flat, "dataset.train", "");
    cfg.dataset.test_path = get_str(flat, "dataset.test", "");
    cfg.dataset.external_path = get_str(flat, "dataset.external", "");
    cfg.dataset.class_names_path = get_opt(flat, "dataset.classes");
    cfg.dataset.fixture.seed = static_cast<uint64_t>(get_int(flat, "fixture.seed", 604613));
    cfg.dataset.fixture.train_per_class =
        static_cast<int>(get_int(flat, "fixture.train_per_class", 500));
    cfg.dataset.fixture.test_per_class =
        static_cast<int>(get_int(flat, "fixture.test_per_class", 100));
    cfg.dataset.fixture.external_count =
        static_cast<int>(get_int(flat, "fixture.external_count", 1000));
    cfg.dataset.fixture.pattern_amplitude =
        static_cast<float>(get_double(flat, "fixture.amplitude", 0.16));
    cfg.dataset.fixture.noise_sigma =
        static_cast<float>(get_double(flat, "fixture.noise_sigma", 0.06));

    cfg.scenario.poison_count = static_cast<int>(get_int(flat, "scenario.p", 100));
    const std::string classes = get_str(flat, "scenario.classes", "all");
    if (classes == "all") {
        cfg.scenario.class_subset.reset();
    } else {
        std::vector<int> subset;
        for (const std::string& tok : split_list(classes)) subset.push_back(std::stoi(tok));
        std::sort(subset.begin(), subset.end());
        subset.erase(std::unique(subset.begin(), subset.end()), subset.end());
        cfg.scenario.class_subset = subset;
    }
    cfg.scenario.domain_rate = get_double(flat, "scenario.domain_rate", 1.0);
    cfg.scenario.target_label = static_cast<int>(get_int(flat, "scenario.target", 0));

    cfg.trigger.method = get_str(flat, "trigger.method", "badnets");
    cfg.trigger.patch_size = static_cast<int>(get_int(flat, "trigger.patch_size", 2));
    const std::string pos = get_str(flat, "trigger.position", "");
    if (!pos.empty()) {
        const auto parts = split_list(pos);
        if (parts.size() != 2)
            throw std::runtime_error("trigger.position: expected `row,col`, got `" + pos + "`");
        cfg.trigger.patch_position = std::make_pair(std::stoi(parts[0]), std::stoi(parts[1]));
    }
    cfg.trigger.blend_lambda = static_cast<float>(get_double(flat, "trigger.lambda", 0.15));
    cfg.trigger.blend_pattern_path = get_str(flat, "trigger.pattern", "");
    cfg.trigger.proxy_checkpoint = get_str(flat, "trigger.proxy", "");
    cfg.trigger.batch_size = static_cast<int>(get_int(flat, "trigger.batch_size", 32));

    cfg.budget.epsilon = static_cast<float>(get_double(flat, "budget.epsilon", 8.0 / 255.0));
    cfg.budget.alpha = static_cast<float>(get_double(flat, "budget.alpha", 2.0 / 255.0));
    cfg.budget.steps = static_cast<int>(get_int(flat, "budget.steps", 50));
    cfg.budget.init = init_from_name(get_str(flat, "budget.init", "zeros"));

    cfg.cfe = get_bool(flat, "cfe.enabled", false);

    cfg.encoder_spec.adapter = get_str(flat, "encoder.adapter", "toy");
    cfg.encoder_spec.toy_seed = static_cast<uint64_t>(get_int(flat, "encoder.seed", 7));
    cfg.encoder_spec.toy_dim = static_cast<int>(get_int(flat, "encoder.dim", 64));
    cfg.encoder_spec.toy_resolution = static_cast<int>(get_int(flat, "encoder.resolution", 16));
    cfg.encoder_spec.scoring = scoring_from_name(get_str(flat, "encoder.scoring", "linear"));

    const std::string arch = get_str(flat, "victim.arch",
                                     cfg.profile == Profile::desk ? "small_cnn" : "vgg16");
    if (cfg.profile == Profile::desk)
        cfg.victim_cfg = victim::desk_profile(0);
    else
        cfg.victim_cfg = victim::paper_profile(victim::arch_from_name(arch), cfg.dataset.name, 0);
    cfg.victim_cfg.arch = victim::arch_from_name(arch);
    cfg.victim_cfg.epochs =
        static_cast<int>(get_int(flat, "victim.epochs", cfg.victim_cfg.epochs));
    cfg.victim_cfg.batch_size =
        static_cast<int>(get_int(flat, "victim.batch_size", cfg.victim_cfg.batch_size));
    cfg.victim_cfg.lr = static_cast<float>(get_double(flat, "victim.lr", cfg.victim_cfg.lr));
    cfg.victim_cfg.momentum =
        static_cast<float>(get_double(flat, "victim.momentum", cfg.victim_cfg.momentum));
    cfg.victim_cfg.weight_decay =
        static_cast<float>(get_double(flat, "victim.weight_decay", cfg.victim_cfg.weight_decay));
    const auto drops = get_opt(flat, "victim.lr_drops");
    if (drops) {
        cfg.victim_cfg.lr_drop_epochs.clear();
        for (const std::string& tok : split_list(*drops))
            cfg.victim_cfg.lr_drop_epochs.push_back(std::stoi(tok));
    }
    cfg.victim_cfg.eq1_weighting = get_bool(flat, "victim.eq1_weighting", false);

    const auto seeds = get_opt(flat, "seeds");
    if (seeds) {
        cfg.seeds.clear();
        for (const std::string& tok : split_list(*seeds))
            cfg.seeds.push_back(static_cast<uint64_t>(std::stoull(tok)));
    }
    cfg.output_dir = get_str(flat, "output_dir", "out");
    cfg.validate();
    return cfg;
}

FlatConfig ExperimentConfig::to_flat() const {
    FlatConfig f;
    f["profile"] = profile_name(profile);
    f["dataset.kind"] = kind_name(dataset.kind);
    f["dataset.name"] = dataset.name;
    if (!dataset.train_path.empty()) f["dataset.train"] = dataset.train_path;
    if (!dataset.test_path.empty()) f["dataset.test"] = dataset.test_path;
    if (!dataset.external_path.empty()) f["dataset.external"] = dataset.external_path;
    if (dataset.class_names_path) f["dataset.classes"] = *dataset.class_names_path;
    if (dataset.kind == DatasetKind::fixture) {
        f["fixture.seed"] = std::to_string(dataset.fixture.seed);
        f["fixture.train_per_class"] = std::to_string(dataset.fixture.train_per_class);
        f["fixture.test_per_class"] = std::to_string(dataset.fixture.test_per_class);
        f["fixture.external_count"] = std::to_string(dataset.fixture.external_count);
        f["fixture.amplitude"] = format_double(dataset.fixture.pattern_amplitude);
        f["fixture.noise_sigma"] = format_double(dataset.fixture.noise_sigma);
    }
    f["scenario.p"] = std::to_string(scenario.poison_count);
    f["scenario.classes"] = scenario.class_subset ? join_int(*scenario.class_subset) : "all";
    f["scenario.domain_rate"] = format_double(scenario.domain_rate);
    f["scenario.target"] = std::to_string(scenario.target_label);
    f["trigger.method"] = trigger.method;
    f["trigger.patch_size"] = std::to_string(trigger.patch_size);
    if (trigger.patch_position)
        f["trigger.position"] = std::to_string(trigger.patch_position->first) + "," +
                                std::to_string(trigger.patch_position->second);
    f["trigger.lambda"] = format_double(trigger.blend_lambda);
    if (!trigger.blend_pattern_path.empty()) f["trigger.pattern"] = trigger.blend_pattern_path;
    if (!trigger.proxy_checkpoint.empty()) f["trigger.proxy"] = trigger.proxy_checkpoint;
    f["trigger.batch_size"] = std::to_string(trigger.batch_size);
    f["budget.epsilon"] = format_double(budget.epsilon);
    f["budget.alpha"] = format_double(budget.alpha);
    f["budget.steps"] = std::to_string(budget.steps);
    f["budget.init"] = init_name(budget.init);
    f["cfe.enabled"] = cfe ? "true" : "false";
    f["encoder.adapter"] = encoder_spec.adapter;
    f["encoder.seed"] = std::to_string(encoder_spec.toy_seed);
    f["encoder.dim"] = std::to_string(encoder_spec.toy_dim);
    f["encoder.resolution"] = std::to_string(encoder_spec.toy_resolution);
    f["encoder.scoring"] = scoring_name(encoder_spec.scoring);
    f["victim.arch"] = victim::arch_name(victim_cfg.arch);
    f["victim.epochs"] = std::to_string(victim_cfg.epochs);
    f["victim.batch_size"] = std::to_string(victim_cfg.batch_size);
    f["victim.lr"] = format_double(victim_cfg.lr);
    f["victim.momentum"] = format_double(victim_cfg.momentum);
    f["victim.weight_decay"] = format_double(victim_cfg.weight_decay);
    f["victim.lr_drops"] = join_int(victim_cfg.lr_drop_epochs);
    f["victim.eq1_weighting"] = victim_cfg.eq1_weighting ? "true" : "false";
    f["seeds"] = join_u64(seeds);
    // output_dir is a location, not an experiment parameter: kept out so the
    // hash survives relocation.
    return f;
}

std::string ExperimentConfig::hash() const { return config_hash(to_flat()); }

void ExperimentConfig::validate() const {
    if (std::find(kMethods.begin(), kMethods.end(), trigger.method) == kMethods.end())
        throw std::runtime_error("unknown trigger method: " + trigger.method);
    if (scenario.poison_count <= 0)
        throw std::runtime_error("scenario.p must be positive");
    if (seeds.empty()) throw std::runtime_error("seeds must be nonempty");
    budget.validate();
    victim_cfg.validate();
    if (dataset.kind != DatasetKind::fixture) {
        for (const std::string& p : {dataset.train_path, dataset.test_path})
            if (p.empty() || !fs::exists(p))
                throw std::runtime_error("dataset path missing or nonexistent: `" + p + "`");
        if (!dataset.external_path.empty() && !fs::exists(dataset.external_path))
            throw std::runtime_error("external dataset path nonexistent: " +
                                     dataset.external_path);
    }
    if (!trigger.blend_pattern_path.empty() && !fs::exists(trigger.blend_pattern_path))
        throw std::runtime_error("blend pattern path nonexistent: " + trigger.blend_pattern_path);
    if (!trigger.proxy_checkpoint.empty() && !fs::exists(trigger.proxy_checkpoint))
        throw std::runtime_error("proxy checkpoint nonexistent: " + trigger.proxy_checkpoint);
}

// ---------------------------------------------------------------------------
// Report serialization

namespace {

json seed_metrics_to_json(const metrics::SeedMetrics& m) {
    json j;
    j["seed"] = m.seed;
    j["ba"] = m.ba;
    j["asr"] = m.asr;
    if (std::isinf(m.stealth.psnr_mean_db))
        j["psnr_mean_db"] = "inf";
    else
        j["psnr_mean_db"] = m.stealth.psnr_mean_db;
    j["psnr_inf_count"] = m.stealth.psnr_inf_count;
    j["ssim_mean"] = m.stealth.ssim_mean;
    j["pair_count"] = m.stealth.pair_count;
    j["m"] = m.m;
    j["m_prime"] = m.m_prime;
    return j;
}

metrics::SeedMetrics seed_metrics_from_json(const json& j) {
    metrics::SeedMetrics m;
    m.seed = j.at("seed").get<uint64_t>();
    m.ba = j.at("ba").get<double>();
    m.asr = j.at("asr").get<double>();
    if (j.at("psnr_mean_db").is_string())
        m.stealth.psnr_mean_db = std::numeric_limits<double>::infinity();
    else
        m.stealth.psnr_mean_db = j.at("psnr_mean_db").get<double>();
    m.stealth.psnr_inf_count = j.at("psnr_inf_count").get<int>();
    m.stealth.ssim_mean = j.at("ssim_mean").get<double>();
    m.stealth.pair_count = j.at("pair_count").get<int>();
    m.m = j.at("m").get<int>();
    m.m_prime = j.at("m_prime").get<int>();
    return m;
}

}  // namespace

metrics::MetricsReport ExperimentReport::aggregate() const {
    metrics::MetricsReport agg;
    for (const auto& s : seeds)
        if (s.ok) agg.seeds.push_back(s.metrics);
    return agg;
}

std::string ExperimentReport::to_json() const {
    json j;
    j["schema_version"] = schema_version;
    j["config"] = json::object();
    for (const auto& [k, v] : config) j["config"][k] = v;
    j["config_hash"] = config_hash;
    j["grid_axis"] = grid_axis ? json(*grid_axis) : json(nullptr);
    j["grid_value"] = grid_value ? json(*grid_value) : json(nullptr);

    const metrics::MetricsReport agg = aggregate();
    json ja;
    ja["ba"] = agg.ba_mean();
    ja["asr"] = agg.asr_mean();
    ja["ba_std"] = agg.ba_std();
    ja["asr_std"] = agg.asr_std();
    ja["psnr_mean_db"] = std::isinf(agg.psnr_mean_db()) ? json("inf") : json(agg.psnr_mean_db());
    ja["ssim_mean"] = agg.ssim_mean();
    j["aggregate"] = ja;

    json runs = json::array();
    for (const auto& s : seeds) {
        json js;
        js["seed"] = s.seed;
        js["ok"] = s.ok;
        if (s.ok) {
            js["metrics"] = seed_metrics_to_json(s.metrics);
        } else {
            js["error"] = s.error;
            js["metrics"] = nullptr;
        }
        js["trigger"] = s.trigger_path;
        js["dir"] = s.dir;
        runs.push_back(js);
    }
    j["runs"] = runs;
    return j.dump(2) + "\n";
}

ExperimentReport ExperimentReport::from_json(const std::string& text) {
    const json j = json::parse(text);
    ExperimentReport r;
    r.schema_version = j.at("schema_version").get<int>();
    for (const auto& [k, v] : j.at("config").items()) r.config[k] = v.get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    if (!j.at("grid_axis").is_null()) r.grid_axis = j.at("grid_axis").get<std::string>();
    if (!j.at("grid_value").is_null()) r.grid_value = j.at("grid_value").get<double>();
    for (const auto& js : j.at("runs")) {
        SeedOutcome s;
        s.seed = js.at("seed").get<uint64_t>();
        s.ok = js.at("ok").get<bool>();
        if (s.ok)
            s.metrics = seed_metrics_from_json(js.at("metrics"));
        else
            s.error = js.at("error").get<std::string>();
        s.trigger_path = js.at("trigger").get<std::string>();
        s.dir = js.at("dir").get<std::string>();
        r.seeds.push_back(std::move(s));
    }
    return r;
}

void ExperimentReport::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("report: cannot write " + path);
    out << to_json();
}

ExperimentReport ExperimentReport::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("report: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Trigger synthesis and caches

namespace {

struct RunContext {
    const ExperimentConfig* cfg = nullptr;
    std::shared_ptr<const DatasetBundle> bundle;
    encoder::EncoderHandle enc;         // null until needed
    std::shared_ptr<encoder::PromptSet> prompts;
    fs::path out_root;
};

bool needs_encoder(const ExperimentConfig& cfg) {
    return cfg.cfe || cfg.trigger.method == "clip-uap" || cfg.trigger.method == "clip-cfa";
}

encoder::EncoderHandle make_encoder(const ExperimentConfig& cfg) {
    const EncoderSpec& spec = cfg.encoder_spec;
    if (spec.adapter == "toy") {
        encoder::ToyEncoderOptions toy;
        toy.seed = spec.toy_seed;
        toy.params.dim = spec.toy_dim;
        toy.params.input_resolution = spec.toy_resolution;
        return encoder::load_encoder("", "toy", toy);
    }
    if (spec.adapter == "fixture") {
        if (cfg.dataset.kind != DatasetKind::fixture)
            throw std::runtime_error(
                "encoder.adapter=fixture requires dataset.kind=fixture");
        return data::make_fixture_encoder(cfg.dataset.fixture, spec.toy_dim,
                                          spec.toy_resolution);
    }
    return encoder::load_encoder(spec.adapter, "linear");
}

std::string budget_key(const optim::PerturbationBudget& b) {
    return format_double(b.epsilon) + "/" + format_double(b.alpha) + "/" +
           std::to_string(b.steps) + "/" + init_name(b.init);
}

/// Synthesize the configured trigger for one seed, reusing the on-disk cache.
/// Content-dependent methods key on the accessible-set hash; fixed-pattern
/// methods share one artifact across seeds.
triggers::Trigger obtain_trigger(const RunContext& ctx, const data::AccessibleSet& accessible,
                                 uint64_t run_seed, std::string* rel_path, bool* cache_hit) {
    const ExperimentConfig& cfg = *ctx.cfg;
    const Tensor& shape = ctx.bundle->train.examples[0].image;
    const int k = cfg.scenario.target_label;

    uint64_t key = fnv1a64("trigger");
    key = fnv1a64(cfg.trigger.method, key);
    key = fnv1a64(budget_key(cfg.budget), key);

    std::function<triggers::Trigger()> synthesize;
    if (cfg.trigger.method == "badnets") {
        key = fnv1a64("p" + std::to_string(cfg.trigger.patch_size), key);
        if (cfg.trigger.patch_position) {
            key = fnv1a64(std::to_string(cfg.trigger.patch_position->first) + "," +
                              std::to_string(cfg.trigger.patch_position->second),
                          key);
        }
        synthesize = [&] {
            return triggers::make_badnets_trigger(cfg.trigger.patch_size,
                                                  cfg.trigger.patch_position, std::nullopt,
                                                  shape.c);
        };
    } else if (cfg.trigger.method == "blended") {
        key = fnv1a64("l" + format_double(cfg.trigger.blend_lambda), key);
        key = fnv1a64(cfg.trigger.blend_pattern_path, key);
        synthesize = [&] {
            if (!cfg.trigger.blend_pattern_path.empty())
                return triggers::make_blended_trigger(cfg.trigger.blend_pattern_path,
                                                      cfg.trigger.blend_lambda, shape.c, shape.h,
                                                      shape.w);
            return triggers::make_blended_trigger_from_pattern(
                triggers::make_default_blend_pattern(shape.c, shape.h, shape.w),
                cfg.trigger.blend_lambda);
        };
    } else if (cfg.trigger.method == "uap") {
        // Full-access baseline: one universal perturbation per proxy + dataset.
        key = fnv1a64("proxy:" + cfg.trigger.proxy_checkpoint, key);
        key = fnv1a64(&ctx.bundle->train_hash, sizeof(uint64_t), key);
        key = fnv1a64(std::to_string(k) + ":" + std::to_string(cfg.trigger.batch_size), key);
        synthesize = [&, k] {
            victim::TrainedModel proxy;
            if (!cfg.trigger.proxy_checkpoint.empty()) {
                proxy = victim::load_checkpoint(cfg.trigger.proxy_checkpoint);
            } else {
                // Train a clean proxy on the full training set (cached).
                victim::VictimConfig proxy_cfg = cfg.victim_cfg;
                proxy_cfg.seed = Rng::derive(cfg.dataset.fixture.seed, 0xf00d);
                uint64_t pkey = fnv1a64("proxy");
                pkey = fnv1a64(&ctx.bundle->train_hash, sizeof(uint64_t), pkey);
                pkey = fnv1a64(canonical_config([&] {
                                   FlatConfig pf;
                                   pf["arch"] = victim::arch_name(proxy_cfg.arch);
                                   pf["epochs"] = std::to_string(proxy_cfg.epochs);
                                   pf["lr"] = format_double(proxy_cfg.lr);
                                   pf["seed"] = std::to_string(proxy_cfg.seed);
                                   return pf;
                               }()),
                               pkey);
                const fs::path proxy_path =
                    ctx.out_root / "cache" / "victims" / (hex16(pkey) + ".ckpt");
                if (cache_exists(proxy_path)) {
                    proxy = victim::load_checkpoint(proxy_path.string());
                } else {
                    proxy = victim::train_victim(ctx.bundle->train, data::PoisonSet{}, proxy_cfg);
                    const fs::path tmp = proxy_path.string() + ".tmp" + std::to_string(run_seed);
                    victim::save_checkpoint(proxy, tmp.string());
                    std::lock_guard<std::mutex> lock(g_cache_io_mutex);
                    fs::rename(tmp, proxy_path);
                }
            }
            optim::NoiseMap noise = optim::optimize_proxy_uap(
                proxy, ctx.bundle->train, k, cfg.budget, cfg.trigger.batch_size, 0);
            return triggers::make_additive_trigger(std::move(noise), "uap");
        };
    } else {
        const uint64_t acc_hash = data::accessible_content_hash(accessible);
        const uint64_t opt_seed = Rng::derive(run_seed, 0x709c);
        key = fnv1a64(&acc_hash, sizeof(acc_hash), key);
        key = fnv1a64(ctx.enc->id(), key);
        key = fnv1a64(std::to_string(cfg.trigger.batch_size), key);
        key = fnv1a64(&opt_seed, sizeof(opt_seed), key);
        if (cfg.trigger.method == "clip-uap") {
            key = fnv1a64("k" + std::to_string(k) + scoring_name(cfg.encoder_spec.scoring), key);
            synthesize = [&, k, opt_seed] {
                optim::NoiseMap noise = optim::optimize_clip_uap(
                    *ctx.enc, *ctx.prompts, accessible, k, cfg.budget, cfg.trigger.batch_size,
                    opt_seed,
                    cfg.encoder_spec.scoring == encoder::Scoring::softmax
                        ? optim::UapLoss::softmax_cross_entropy
                        : optim::UapLoss::mse_scores);
                return triggers::make_additive_trigger(std::move(noise), "clip-uap");
            };
        } else {
            synthesize = [&, opt_seed] {
                optim::NoiseMap noise = optim::optimize_clip_cfa(
                    *ctx.enc, accessible, cfg.budget, opt_seed, cfg.trigger.batch_size);
                return triggers::make_additive_trigger(std::move(noise), "clip-cfa");
            };
        }
    }

    const std::string rel = "cache/triggers/" + hex16(key);
    const fs::path base = ctx.out_root / rel;
    *rel_path = rel;
    if (cache_exists(fs::path(base.string() + ".json"))) {
        *cache_hit = true;
        return triggers::load_trigger(base.string());
    }
    *cache_hit = false;
    triggers::Trigger trigger = synthesize();
    {
        // Write under a temp stem, then rename both files into place.
        const std::string tmp_stem = base.string() + ".tmp" + std::to_string(run_seed);
        triggers::save_trigger(trigger, tmp_stem);
        std::lock_guard<std::mutex> lock(g_cache_io_mutex);
        for (const char* ext : {".png", ".noise", ".json"}) {
            const fs::path from = tmp_stem + ext;
            if (fs::exists(from)) fs::rename(from, base.string() + ext);
        }
    }
    return trigger;
}

data::Dataset images_as_dataset(const std::vector<Tensor>& images, const std::vector<int>& labels,
                                int class_count, const std::vector<std::string>& class_names,
                                data::Split split) {
    data::Dataset ds;
    ds.class_count = class_count;
    ds.class_names = class_names;
    ds.split = split;
    for (size_t i = 0; i < images.size(); ++i) {
        data::LabeledExample ex;
        ex.image = images[i];
        ex.label = labels[i];
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%06zu", i);
        ex.source_id = buf;
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

SeedOutcome run_seed(const RunContext& ctx, uint64_t seed, const std::string& hash) {
    const ExperimentConfig& cfg = *ctx.cfg;
    SeedOutcome outcome;
    outcome.seed = seed;
    const std::string rel_dir = hash + "/seed-" + std::to_string(seed);
    outcome.dir = rel_dir;
    const fs::path seed_dir = ctx.out_root / rel_dir;
    fs::create_directories(seed_dir);

    data::ScenarioSpec scenario = cfg.scenario;
    scenario.seed = Rng::derive(seed, 0x5eed);
    const data::Dataset* external = ctx.bundle->has_external ? &ctx.bundle->external_pool : nullptr;
    data::AccessibleSet accessible =
        data::sample_accessible_set(ctx.bundle->train, external, scenario);

    triggers::Trigger trigger =
        obtain_trigger(ctx, accessible, seed, &outcome.trigger_path, &outcome.trigger_cache_hit);

    std::optional<std::vector<Tensor>> cfe_noise;
    if (cfg.cfe) {
        cfe_noise.emplace();
        cfe_noise->reserve(accessible.examples.size());
        for (size_t i = 0; i < accessible.examples.size(); ++i) {
            optim::NoiseMap noise = optim::erase_clean_features(
                *ctx.enc, *ctx.prompts, accessible.examples[i].image, cfg.budget,
                Rng::derive(seed, 0xcfe0 + i), cfg.encoder_spec.scoring);
            cfe_noise->push_back(std::move(noise.delta));
        }
    }

    data::PoisonSet poison = data::assemble_poison_set(
        accessible, trigger, cfe_noise ? &*cfe_noise : nullptr, cfg.scenario.target_label);
    data::write_manifest(poison, (seed_dir / "manifest.csv").string());

    // Persist base and poisoned images for the metrics-recomputation path.
    {
        std::vector<Tensor> base_images, poison_images;
        std::vector<int> base_labels, poison_labels;
        for (const auto& ex : accessible.examples) {
            base_images.push_back(ex.image);
            base_labels.push_back(std::max(ex.label, 0));
        }
        for (const auto& e : poison.entries) {
            poison_images.push_back(e.image);
            poison_labels.push_back(e.assigned_label);
        }
        data::save_packed(images_as_dataset(base_images, base_labels,
                                            ctx.bundle->train.class_count,
                                            ctx.bundle->train.class_names, data::Split::train),
                          (seed_dir / "base.packed").string());
        data::save_packed(images_as_dataset(poison_images, poison_labels,
                                            ctx.bundle->train.class_count,
                                            ctx.bundle->train.class_names, data::Split::train),
                          (seed_dir / "poison.packed").string());
    }

    // Victim: cache by (clean data, poison content, training config).
    victim::VictimConfig vcfg = cfg.victim_cfg;
    vcfg.seed = seed;
    uint64_t vkey = fnv1a64("victim");
    vkey = fnv1a64(&ctx.bundle->train_hash, sizeof(uint64_t), vkey);
    for (const auto& e : poison.entries) {
        vkey = content_hash(e.image, vkey);
        vkey = fnv1a64(&e.assigned_label, sizeof(e.assigned_label), vkey);
    }
    {
        FlatConfig vf;
        vf["arch"] = victim::arch_name(vcfg.arch);
        vf["epochs"] = std::to_string(vcfg.epochs);
        vf["batch"] = std::to_string(vcfg.batch_size);
        vf["lr"] = format_double(vcfg.lr);
        vf["momentum"] = format_double(vcfg.momentum);
        vf["wd"] = format_double(vcfg.weight_decay);
        vf["drops"] = join_int(vcfg.lr_drop_epochs);
        vf["eq1"] = vcfg.eq1_weighting ? "1" : "0";
        vf["seed"] = std::to_string(vcfg.seed);
        vkey = fnv1a64(canonical_config(vf), vkey);
    }
    const fs::path victim_cache = ctx.out_root / "cache" / "victims" / (hex16(vkey) + ".ckpt");
    victim::TrainedModel model;
    if (cache_exists(victim_cache)) {
        outcome.victim_cache_hit = true;
        model = victim::load_checkpoint(victim_cache.string(), vcfg.arch);
    } else {
        model = victim::train_victim(ctx.bundle->train, poison, vcfg);
        const fs::path tmp = victim_cache.string() + ".tmp" + std::to_string(seed);
        victim::save_checkpoint(model, tmp.string());
        std::lock_guard<std::mutex> lock(g_cache_io_mutex);
        if (!fs::exists(victim_cache)) fs::rename(tmp, victim_cache);
        else fs::remove(tmp);
    }
    victim::save_checkpoint(model, (seed_dir / "victim.ckpt").string());

    // Metrics.
    metrics::SeedMetrics sm;
    sm.seed = seed;
    sm.ba = metrics::benign_accuracy(model, ctx.bundle->test);
    sm.asr = metrics::attack_success_rate(model, ctx.bundle->test, trigger,
                                          cfg.scenario.target_label);
    {
        std::vector<Tensor> base_images, poison_images;
        for (const auto& ex : accessible.examples) base_images.push_back(ex.image);
        for (const auto& e : poison.entries) poison_images.push_back(e.image);
        sm.stealth = metrics::stealth_metrics(base_images, poison_images);
    }
    sm.m = static_cast<int>(ctx.bundle->test.examples.size());
    int non_target = 0;
    for (const auto& ex : ctx.bundle->test.examples)
        if (ex.label != cfg.scenario.target_label) ++non_target;
    sm.m_prime = non_target;
    outcome.metrics = sm;

    json artifacts;
    artifacts["trigger"] = outcome.trigger_path;
    artifacts["seed"] = seed;
    std::ofstream(seed_dir / "artifacts.json") << artifacts.dump(2) << "\n";

    outcome.ok = true;
    return outcome;
}

metrics::SeedMetrics recompute_seed_metrics(const RunContext& ctx, uint64_t seed,
                                            const fs::path& seed_dir,
                                            const std::string& trigger_rel) {
    const ExperimentConfig& cfg = *ctx.cfg;
    const triggers::Trigger trigger =
        triggers::load_trigger((ctx.out_root / trigger_rel).string());
    const victim::TrainedModel model =
        victim::load_checkpoint((seed_dir / "victim.ckpt").string(), cfg.victim_cfg.arch);

    data::FormatSpec fmt;
    fmt.layout = data::DatasetLayout::packed;
    const data::Dataset base = data::load_dataset((seed_dir / "base.packed").string(), fmt);
    const data::Dataset poison = data::load_dataset((seed_dir / "poison.packed").string(), fmt);

    metrics::SeedMetrics sm;
    sm.seed = seed;
    sm.ba = metrics::benign_accuracy(model, ctx.bundle->test);
    sm.asr = metrics::attack_success_rate(model, ctx.bundle->test, trigger,
                                          cfg.scenario.target_label);
    std::vector<Tensor> base_images, poison_images;
    for (const auto& ex : base.examples) base_images.push_back(ex.image);
    for (const auto& ex : poison.examples) poison_images.push_back(ex.image);
    sm.stealth = metrics::stealth_metrics(base_images, poison_images);
    sm.m = static_cast<int>(ctx.bundle->test.examples.size());
    int non_target = 0;
    for (const auto& ex : ctx.bundle->test.examples)
        if (ex.label != cfg.scenario.target_label) ++non_target;
    sm.m_prime = non_target;
    return sm;
}

RunContext make_context(const ExperimentConfig& cfg) {
    RunContext ctx;
    ctx.cfg = &cfg;
    ctx.bundle = load_bundle(cfg.dataset);
    ctx.out_root = cfg.output_dir;
    if (needs_encoder(cfg)) {
        ctx.enc = make_encoder(cfg);
        ctx.prompts = std::make_shared<encoder::PromptSet>(
            encoder::build_prompts(ctx.bundle->train.class_names, *ctx.enc));
    }
    return ctx;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    RunContext ctx = make_context(cfg);
    const std::string hash = cfg.hash();
    fs::create_directories(ctx.out_root / hash);
    fs::create_directories(ctx.out_root / "cache" / "triggers");
    fs::create_directories(ctx.out_root / "cache" / "victims");
    {
        std::ofstream out(ctx.out_root / hash / "config.flat");
        out << canonical_config(cfg.to_flat());
    }

    ExperimentReport report;
    report.config = cfg.to_flat();
    report.config_hash = hash;
    report.seeds.resize(cfg.seeds.size());

    const size_t workers =
        std::min<size_t>(cfg.seeds.size(),
                         std::max(1u, std::thread::hardware_concurrency()));
    std::atomic<size_t> next{0};
    auto work = [&]() {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= cfg.seeds.size()) break;
            try {
                report.seeds[i] = run_seed(ctx, cfg.seeds[i], hash);
            } catch (const std::exception& e) {
                SeedOutcome bad;
                bad.seed = cfg.seeds[i];
                bad.ok = false;
                bad.error = e.what();
                bad.dir = hash + "/seed-" + std::to_string(cfg.seeds[i]);
                report.seeds[i] = std::move(bad);
            }
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (size_t i = 0; i < workers; ++i) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    report.save((ctx.out_root / hash / "report.json").string());
    return report;
}

GridAxis grid_axis_from_name(const std::string& name) {
    if (name == "poison_rate") return GridAxis::poison_rate;
    if (name == "class_count") return GridAxis::class_count;
    if (name == "domain_rate") return GridAxis::domain_rate;
    if (name == "epsilon") return GridAxis::epsilon;
    throw std::runtime_error("unknown grid axis: " + name);
}

std::string grid_axis_name(GridAxis axis) {
    switch (axis) {
        case GridAxis::poison_rate: return "poison_rate";
        case GridAxis::class_count: return "class_count";
        case GridAxis::domain_rate: return "domain_rate";
        case GridAxis::epsilon: return "epsilon";
    }
    return "unknown";
}

std::vector<ExperimentReport> run_grid(const ExperimentConfig& base, GridAxis axis,
                                       const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("run_grid: empty value list");
    base.validate();
    const auto bundle = load_bundle(base.dataset);
    const size_t train_size = bundle->train.examples.size();

    std::vector<ExperimentReport> reports;
    for (double value : values) {
        ExperimentConfig cfg = base;
        switch (axis) {
            case GridAxis::poison_rate: {
                if (value <= 0.0 || value >= 1.0)
                    throw std::invalid_argument("run_grid: poison_rate must be in (0,1)");
                cfg.scenario.poison_count =
                    std::max(1, static_cast<int>(std::lround(value * train_size)));
                break;
            }
            case GridAxis::class_count: {
                if (!base.scenario.class_subset)
                    throw std::invalid_argument(
                        "run_grid: class_count axis needs a class-constrained base scenario");
                const int count = static_cast<int>(std::lround(value));
                if (count < 1 || count > bundle->train.class_count)
                    throw std::invalid_argument("run_grid: class_count out of range");
                std::vector<int> subset(count);
                for (int i = 0; i < count; ++i) subset[i] = i;
                cfg.scenario.class_subset = subset;
                break;
            }
            case GridAxis::domain_rate: {
                if (value < 0.0 || value > 1.0)
                    throw std::invalid_argument("run_grid: domain_rate must be in [0,1]");
                cfg.scenario.domain_rate = value;
                break;
            }
            case GridAxis::epsilon: {
                if (value < 0.0) throw std::invalid_argument("run_grid: epsilon must be >= 0");
                cfg.budget.epsilon = static_cast<float>(value);
                break;
            }
        }
        ExperimentReport report = run_experiment(cfg);
        report.grid_axis = grid_axis_name(axis);
        report.grid_value = value;
        report.save((fs::path(cfg.output_dir) / report.config_hash / "report.json").string());
        reports.push_back(std::move(report));
    }
    return reports;
}

std::vector<std::string> emit_plots(const std::vector<ExperimentReport>& reports,
                                    const std::string& out_dir) {
    if (reports.empty()) throw std::invalid_argument("emit_plots: no reports");
    fs::create_directories(out_dir);

    std::string axis;
    for (const auto& r : reports) {
        if (!r.grid_axis) continue;
        if (axis.empty())
            axis = *r.grid_axis;
        else if (axis != *r.grid_axis)
            throw std::invalid_argument("emit_plots: reports mix grid axes");
    }

    struct Point {
        double x, asr_mean, asr_std, ba_mean;
    };
    std::map<std::string, std::vector<Point>> series_map;  // label -> points
    double fallback_x = 0.0;
    for (const auto& r : reports) {
        const std::string method = get_str(r.config, "trigger.method", "?");
        const bool cfe = get_str(r.config, "cfe.enabled", "false") == "true";
        const std::string label = method + (cfe ? "+cfe" : "");
        const metrics::MetricsReport agg = r.aggregate();
        Point p;
        p.x = r.grid_value ? *r.grid_value : fallback_x;
        p.asr_mean = agg.asr_mean();
        p.asr_std = agg.asr_std();
        p.ba_mean = agg.ba_mean();
        series_map[label].push_back(p);
        fallback_x += 1.0;
    }
    for (auto& [label, pts] : series_map)
        std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x; });

    const std::string stem = axis.empty() ? "asr_summary" : ("asr_vs_" + axis);
    const std::string csv_path = (fs::path(out_dir) / (stem + ".csv")).string();
    const std::string png_path = (fs::path(out_dir) / (stem + ".png")).string();

    {
        std::ofstream csv(csv_path);
        if (!csv) throw std::runtime_error("emit_plots: cannot write " + csv_path);
        csv << "axis,value,series,asr_mean,asr_std,ba_mean\n";
        char buf[160];
        for (const auto& [label, pts] : series_map) {
            for (const Point& p : pts) {
                std::snprintf(buf, sizeof(buf), "%s,%.6f,%s,%.6f,%.6f,%.6f\n",
                              axis.empty() ? "none" : axis.c_str(), p.x, label.c_str(),
                              p.asr_mean, p.asr_std, p.ba_mean);
                csv << buf;
            }
        }
    }

    std::vector<plot::Series> chart;
    bool multi_point = false;
    for (const auto& [label, pts] : series_map) {
        plot::Series s;
        s.label = label;
        for (const Point& p : pts) {
            s.x.push_back(p.x);
            s.y.push_back(p.asr_mean);
            s.yerr.push_back(p.asr_std);
        }
        if (s.x.size() > 1) multi_point = true;
        chart.push_back(std::move(s));
    }
    if (multi_point)
        plot::render_line_chart("mean ASR", axis.empty() ? "report" : axis, "ASR", chart,
                                png_path);
    else
        plot::render_bar_chart("mean ASR", "ASR", chart, png_path);
    return {png_path, csv_path};
}

ExperimentReport recompute_report(const std::string& output_dir,
                                  const std::string& config_hash) {
    const fs::path root = output_dir;
    const fs::path exp_dir = root / config_hash;
    ExperimentConfig cfg =
        ExperimentConfig::from_flat(load_flat_config((exp_dir / "config.flat").string()));
    cfg.output_dir = output_dir;
    RunContext ctx = make_context(cfg);

    // Preserve grid annotations when present.
    ExperimentReport previous = ExperimentReport::load((exp_dir / "report.json").string());

    ExperimentReport report;
    report.config = cfg.to_flat();
    report.config_hash = config_hash;
    report.grid_axis = previous.grid_axis;
    report.grid_value = previous.grid_value;
    for (uint64_t seed : cfg.seeds) {
        SeedOutcome outcome;
        outcome.seed = seed;
        outcome.dir = config_hash + "/seed-" + std::to_string(seed);
        const fs::path seed_dir = root / outcome.dir;
        try {
            std::ifstream in(seed_dir / "artifacts.json");
            if (!in) throw std::runtime_error("artifacts.json missing");
            const json artifacts = json::parse(in);
            outcome.trigger_path = artifacts.at("trigger").get<std::string>();
            outcome.metrics =
                recompute_seed_metrics(ctx, seed, seed_dir, outcome.trigger_path);
            outcome.ok = true;
        } catch (const std::exception& e) {
            outcome.ok = false;
            outcome.error = e.what();
        }
        report.seeds.push_back(std::move(outcome));
    }
    return report;
}

std::vector<ExperimentReport> load_reports(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().filename() == "report.json")
            paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
    std::vector<ExperimentReport> reports;
    for (const std::string& p : paths) reports.push_back(ExperimentReport::load(p));
    return reports;
}

}  // namespace poisonlab::experiments
