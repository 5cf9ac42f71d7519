#pragma once

#include <optional>
#include <string>
#include <vector>

#include "poisonlab/tensor.hpp"
#include "poisonlab/triggers.hpp"

namespace poisonlab::data {

enum class DomainTag { in_domain, external };
enum class Split { train, test, external_pool };

struct LabeledExample {
    Tensor image;
    int label = 0;
    std::string source_id;
    DomainTag domain_tag = DomainTag::in_domain;
};

struct Dataset {
    std::vector<LabeledExample> examples;
    int class_count = 0;
    std::vector<std::string> class_names;
    Split split = Split::train;

    /// Throws std::runtime_error unless labels, names, shapes and pixel
    /// ranges all hold.
    void validate() const;
};

/// Attacker constraint: how many samples (P), which classes (Y'), and what
/// fraction of the poison base comes from the victim's own training
/// distribution. domain_rate 0 is the fully out-of-domain extreme.
struct ScenarioSpec {
    int poison_count = 0;                            // P
    std::optional<std::vector<int>> class_subset;    // Y'; absent = all classes
    double domain_rate = 1.0;
    int target_label = 0;                            // k
    uint64_t seed = 0;
};

struct AccessibleSet {
    std::vector<LabeledExample> examples;
    ScenarioSpec provenance;
};

struct PoisonEntry {
    Tensor image;
    int assigned_label = 0;
    std::string source_id;
    int original_label = 0;  // -1 for out-of-domain sources
};

struct PoisonSet {
    std::vector<PoisonEntry> entries;
    std::string trigger_id;
    bool cfe_applied = false;
};

enum class DatasetLayout {
    class_dirs,  // one subdirectory of PNGs per class
    packed,      // single binary file, header + float32 pixels + u32 labels
};

struct FormatSpec {
    DatasetLayout layout = DatasetLayout::class_dirs;
    std::optional<std::string> class_names_path;  // one name per line
    Split split = Split::train;
};

/// One class name per line, UTF-8; order defines class indices.
std::vector<std::string> read_class_names(const std::string& path);

Dataset load_dataset(const std::string& path, const FormatSpec& format);
void save_packed(const Dataset& dataset, const std::string& path);

uint64_t dataset_content_hash(const Dataset& dataset);
uint64_t accessible_content_hash(const AccessibleSet& accessible);

/// Draws the P-sample poison base. Number-constrained draws uniformly
/// without replacement; a class subset restricts the in-domain pool;
/// round(P * domain_rate) examples come from train and the remainder from
/// the external pool (resized to the train resolution and tagged external).
/// Deterministic under spec.seed.
AccessibleSet sample_accessible_set(const Dataset& train, const Dataset* external,
                                    const ScenarioSpec& spec);

/// Per example: x_e = clamp(x + delta_cfe) when noise is present, then the
/// trigger is applied and the result clamped to [0,1]. Every entry gets the
/// target label k; the original label is kept for the manifest.
PoisonSet assemble_poison_set(const AccessibleSet& base, const triggers::Trigger& trigger,
                              const std::vector<Tensor>* cfe_noise, int target_label);

/// CSV: index,source_id,original_label,assigned_label,trigger_id,cfe_applied
void write_manifest(const PoisonSet& poison, const std::string& csv_path);

}  // namespace poisonlab::data
