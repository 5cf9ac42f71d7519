#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poisonlab/config.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/encoder.hpp"
#include "poisonlab/fixture.hpp"
#include "poisonlab/metrics.hpp"
#include "poisonlab/optim.hpp"
#include "poisonlab/victim.hpp"

namespace poisonlab::experiments {

enum class Profile { desk, paper };
enum class DatasetKind { fixture, class_dirs, packed };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::fixture;
    std::string name = "fixture";
    std::string train_path, test_path, external_path;
    std::optional<std::string> class_names_path;
    data::FixtureParams fixture;
};

struct TriggerSpec {
    std::string method = "badnets";  // badnets|blended|uap|clip-uap|clip-cfa
    int patch_size = 2;
    std::optional<std::pair<int, int>> patch_position;
    float blend_lambda = 0.15f;
    std::string blend_pattern_path;  // empty: built-in texture
    std::string proxy_checkpoint;    // for method=uap; empty: train one
    int batch_size = 32;
};

struct EncoderSpec {
    std::string adapter = "toy";  // "toy" or a weights-bundle path
    uint64_t toy_seed = 7;
    int toy_dim = 64;
    int toy_resolution = 16;
    encoder::Scoring scoring = encoder::Scoring::linear;
};

struct ExperimentConfig {
    Profile profile = Profile::desk;
    DatasetSpec dataset;
    data::ScenarioSpec scenario;  // per-run seed is derived from each run seed
    TriggerSpec trigger;
    optim::PerturbationBudget budget;
    bool cfe = false;
    EncoderSpec encoder_spec;
    victim::VictimConfig victim_cfg;
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    std::string output_dir = "out";

    static ExperimentConfig from_flat(const FlatConfig& flat);
    /// Every effective key, canonical values; the config hash is over this.
    FlatConfig to_flat() const;
    std::string hash() const;
    void validate() const;
};

struct SeedOutcome {
    uint64_t seed = 0;
    bool ok = false;
    std::string error;
    metrics::SeedMetrics metrics;
    bool trigger_cache_hit = false;   // not serialized
    bool victim_cache_hit = false;    // not serialized
    std::string trigger_path;         // relative to output_dir
    std::string dir;                  // relative to output_dir
};

struct ExperimentReport {
    int schema_version = 1;
    FlatConfig config;
    std::string config_hash;
    std::optional<std::string> grid_axis;
    std::optional<double> grid_value;
    std::vector<SeedOutcome> seeds;

    metrics::MetricsReport aggregate() const;  // over successful seeds
    std::string to_json() const;
    static ExperimentReport from_json(const std::string& text);
    void save(const std::string& path) const;
    static ExperimentReport load(const std::string& path);
};

/// Per seed: sample the poison base, synthesize (or reuse) the trigger,
/// optionally erase clean features, assemble and persist the poison set,
/// train the victim and measure. Failed seeds are recorded and do not abort
/// the others. Artifacts land under output_dir/<config-hash>/<seed>/.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

enum class GridAxis { poison_rate, class_count, domain_rate, epsilon };

GridAxis grid_axis_from_name(const std::string& name);
std::string grid_axis_name(GridAxis axis);

/// One experiment per value, shared seeds, ordered like `values`.
std::vector<ExperimentReport> run_grid(const ExperimentConfig& base, GridAxis axis,
                                       const std::vector<double>& values);

/// Line chart (bar chart for single-point grids) of mean ASR +- stddev per
/// (trigger, cfe) series, plus a CSV of the plotted values. Returns the
/// written file paths.
std::vector<std::string> emit_plots(const std::vector<ExperimentReport>& reports,
                                    const std::string& out_dir);

/// Rebuilds a report bit-identically from persisted artifacts (checkpoint,
/// poison set, trigger) without retraining.
ExperimentReport recompute_report(const std::string& output_dir, const std::string& config_hash);

/// Reports under dir (report.json files, recursive), sorted by path.
std::vector<ExperimentReport> load_reports(const std::string& dir);

}  // namespace poisonlab::experiments
