#include "poisonlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "poisonlab/hash.hpp"
#include "poisonlab/pngio.hpp"
#include "poisonlab/rng.hpp"

namespace fs = std::filesystem;

namespace poisonlab::data {

namespace {

constexpr char kPackedMagic[8] = {'P', 'L', 'P', 'A', 'C', 'K', '0', '1'};

std::string padded_index(size_t i, size_t total) {
    size_t digits = 1, n = total > 0 ? total - 1 : 0;
    while (n >= 10) {
        n /= 10;
        ++digits;
    }
    std::string s = std::to_string(i);
    return std::string(digits > s.size() ? digits - s.size() : 0, '0') + s;
}

}  // namespace

void Dataset::validate() const {
    if (class_count <= 0) throw std::runtime_error("dataset: class_count must be positive");
    if (static_cast<int>(class_names.size()) != class_count)
        throw std::runtime_error("dataset: class_names length != class_count");
    std::set<std::string> ids;
    const Tensor* shape = nullptr;
    for (const auto& ex : examples) {
        if (ex.label < 0 || ex.label >= class_count)
            throw std::runtime_error("dataset: label " + std::to_string(ex.label) +
                                     " out of range for C=" + std::to_string(class_count) +
                                     " (source " + ex.source_id + ")");
        if (!ids.insert(ex.source_id).second)
            throw std::runtime_error("dataset: duplicate source_id " + ex.source_id);
        if (shape == nullptr)
            shape = &ex.image;
        else if (!shape->same_shape(ex.image))
            throw std::runtime_error("dataset: inconsistent image shapes (" + shape->shape_str() +
                                     " vs " + ex.image.shape_str() + ")");
        validate_image(ex.image, "dataset example " + ex.source_id);
    }
}

std::vector<std::string> read_class_names(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open class names file: " + path);
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) names.push_back(line);
    }
    if (names.empty()) throw std::runtime_error("class names file is empty: " + path);
    return names;
}

namespace {

Dataset load_class_dirs(const std::string& path, const FormatSpec& format) {
    if (!fs::is_directory(path))
        throw std::runtime_error("dataset path is not a directory: " + path);
    std::vector<std::string> class_dirs;
    for (const auto& entry : fs::directory_iterator(path))
        if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw std::runtime_error("no examples found in " + path);

    Dataset ds;
    ds.split = format.split;
    ds.class_names = format.class_names_path ? read_class_names(*format.class_names_path)
                                             : class_dirs;
    ds.class_count = static_cast<int>(ds.class_names.size());
    if (format.class_names_path && ds.class_names.size() != class_dirs.size())
        throw std::runtime_error("class names file lists " +
                                 std::to_string(ds.class_names.size()) + " classes but " + path +
                                 " has " + std::to_string(class_dirs.size()) + " directories");

    for (size_t label = 0; label < class_dirs.size(); ++label) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(fs::path(path) / class_dirs[label]))
            if (entry.is_regular_file() && entry.path().extension() == ".png")
                files.push_back(entry.path().filename().string());
        std::sort(files.begin(), files.end());
        for (const std::string& file : files) {
            LabeledExample ex;
            ex.image = read_png((fs::path(path) / class_dirs[label] / file).string());
            ex.label = static_cast<int>(label);
            ex.source_id = class_dirs[label] + "/" + file;
            ds.examples.push_back(std::move(ex));
        }
    }
    if (ds.examples.empty()) throw std::runtime_error("no examples found in " + path);
    std::sort(ds.examples.begin(), ds.examples.end(),
              [](const LabeledExample& a, const LabeledExample& b) {
                  return a.source_id < b.source_id;
              });
    ds.validate();
    return ds;
}

Dataset load_packed(const std::string& path, const FormatSpec& format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open packed dataset: " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kPackedMagic, 8) != 0)
        throw std::runtime_error("packed dataset: bad magic in " + path);
    uint32_t header[4];  // count, c, h, w
    if (!in.read(reinterpret_cast<char*>(header), sizeof(header)))
        throw std::runtime_error("packed dataset: truncated header in " + path);
    const uint32_t count = header[0];
    const int c = static_cast<int>(header[1]);
    const int h = static_cast<int>(header[2]);
    const int w = static_cast<int>(header[3]);
    if (count == 0) throw std::runtime_error("no examples found in " + path);
    if (c <= 0 || h <= 0 || w <= 0)
        throw std::runtime_error("packed dataset: invalid shape in " + path);

    Dataset ds;
    ds.split = format.split;
    ds.examples.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        Tensor img(c, h, w);
        if (!in.read(reinterpret_cast<char*>(img.v.data()), img.v.size() * sizeof(float)))
            throw std::runtime_error("packed dataset: truncated pixel data in " + path);
        ds.examples[i].image = std::move(img);
        ds.examples[i].source_id = padded_index(i, count);
    }
    std::vector<uint32_t> labels(count);
    if (!in.read(reinterpret_cast<char*>(labels.data()), labels.size() * sizeof(uint32_t)))
        throw std::runtime_error("packed dataset: truncated labels in " + path);
    uint32_t max_label = 0;
    for (uint32_t i = 0; i < count; ++i) {
        ds.examples[i].label = static_cast<int>(labels[i]);
        max_label = std::max(max_label, labels[i]);
    }
    if (format.class_names_path) {
        ds.class_names = read_class_names(*format.class_names_path);
    } else {
        for (uint32_t i = 0; i <= max_label; ++i) ds.class_names.push_back(std::to_string(i));
    }
    ds.class_count = static_cast<int>(ds.class_names.size());
    ds.validate();
    return ds;
}

}  // namespace

Dataset load_dataset(const std::string& path, const FormatSpec& format) {
    if (!fs::exists(path)) throw std::runtime_error("dataset path does not exist: " + path);
    switch (format.layout) {
        case DatasetLayout::class_dirs: return load_class_dirs(path, format);
        case DatasetLayout::packed: return load_packed(path, format);
    }
    throw std::runtime_error("unknown dataset layout");
}

void save_packed(const Dataset& dataset, const std::string& path) {
    if (dataset.examples.empty())
        throw std::runtime_error("save_packed: refusing to write an empty dataset");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_packed: cannot write " + path);
    out.write(kPackedMagic, 8);
    const Tensor& first = dataset.examples[0].image;
    const uint32_t header[4] = {static_cast<uint32_t>(dataset.examples.size()),
                                static_cast<uint32_t>(first.c), static_cast<uint32_t>(first.h),
                                static_cast<uint32_t>(first.w)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    for (const auto& ex : dataset.examples)
        out.write(reinterpret_cast<const char*>(ex.image.v.data()),
                  ex.image.v.size() * sizeof(float));
    for (const auto& ex : dataset.examples) {
        const uint32_t label = static_cast<uint32_t>(ex.label);
        out.write(reinterpret_cast<const char*>(&label), sizeof(label));
    }
    if (!out) throw std::runtime_error("save_packed: write failed: " + path);
}

uint64_t dataset_content_hash(const Dataset& dataset) {
    uint64_t h = fnv1a64("dataset");
    for (const auto& ex : dataset.examples) {
        h = content_hash(ex.image, h);
        h = fnv1a64(&ex.label, sizeof(ex.label), h);
        h = fnv1a64(ex.source_id, h);
    }
    return h;
}

uint64_t accessible_content_hash(const AccessibleSet& accessible) {
    uint64_t h = fnv1a64("accessible");
    for (const auto& ex : accessible.examples) {
        h = content_hash(ex.image, h);
        h = fnv1a64(&ex.label, sizeof(ex.label), h);
        h = fnv1a64(ex.source_id, h);
        const int tag = static_cast<int>(ex.domain_tag);
        h = fnv1a64(&tag, sizeof(tag), h);
    }
    return h;
}

namespace {

/// Draw `n` members without replacement from an index pool, preserving
/// determinism: partial Fisher-Yates over the source_id-ordered pool.
std::vector<size_t> draw_without_replacement(std::vector<size_t> pool, size_t n, Rng& rng) {
    if (n > pool.size())
        throw std::runtime_error("sample_accessible_set: insufficient pool (need " +
                                 std::to_string(n) + ", have " + std::to_string(pool.size()) +
                                 ")");
    for (size_t i = 0; i < n; ++i) {
        const size_t j = i + rng.index(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
    return pool;
}

}  // namespace

AccessibleSet sample_accessible_set(const Dataset& train, const Dataset* external,
                                    const ScenarioSpec& spec) {
    if (spec.poison_count <= 0)
        throw std::runtime_error("sample_accessible_set: poison_count must be positive");
    if (spec.domain_rate < 0.0 || spec.domain_rate > 1.0)
        throw std::runtime_error("sample_accessible_set: domain_rate must be in [0,1]");
    if (spec.class_subset) {
        if (spec.class_subset->empty())
            throw std::runtime_error("sample_accessible_set: class subset is empty");
        for (int cls : *spec.class_subset)
            if (cls < 0 || cls >= train.class_count)
                throw std::runtime_error("sample_accessible_set: class " + std::to_string(cls) +
                                         " out of range");
    }

    const auto n_in = static_cast<size_t>(
        std::lround(spec.domain_rate * static_cast<double>(spec.poison_count)));
    const size_t n_ext = static_cast<size_t>(spec.poison_count) - n_in;
    if (n_ext > 0 && external == nullptr)
        throw std::runtime_error(
            "sample_accessible_set: domain_rate < 1 requires an external pool");

    // In-domain pool honors the class constraint; the external pool is
    // class-agnostic (its labels live in a different label space).
    std::vector<size_t> train_pool;
    for (size_t i = 0; i < train.examples.size(); ++i) {
        if (spec.class_subset &&
            std::find(spec.class_subset->begin(), spec.class_subset->end(),
                      train.examples[i].label) == spec.class_subset->end())
            continue;
        train_pool.push_back(i);
    }

    Rng rng(spec.seed);
    AccessibleSet out;
    out.provenance = spec;
    out.examples.reserve(spec.poison_count);

    for (size_t i : draw_without_replacement(std::move(train_pool), n_in, rng)) {
        LabeledExample ex = train.examples[i];
        ex.domain_tag = DomainTag::in_domain;
        out.examples.push_back(std::move(ex));
    }
    if (n_ext > 0) {
        std::vector<size_t> ext_pool(external->examples.size());
        for (size_t i = 0; i < ext_pool.size(); ++i) ext_pool[i] = i;
        const Tensor& shape = train.examples.empty() ? external->examples[0].image
                                                     : train.examples[0].image;
        for (size_t i : draw_without_replacement(std::move(ext_pool), n_ext, rng)) {
            LabeledExample ex = external->examples[i];
            ex.image = bilinear_resize(ex.image, shape.h, shape.w);
            clamp01(ex.image);
            ex.domain_tag = DomainTag::external;
            ex.source_id = "ext/" + ex.source_id;
            out.examples.push_back(std::move(ex));
        }
    }
    return out;
}

PoisonSet assemble_poison_set(const AccessibleSet& base, const triggers::Trigger& trigger,
                              const std::vector<Tensor>* cfe_noise, int target_label) {
    if (cfe_noise && cfe_noise->size() != base.examples.size())
        throw std::runtime_error("assemble_poison_set: noise/base length mismatch (" +
                                 std::to_string(cfe_noise->size()) + " vs " +
                                 std::to_string(base.examples.size()) + ")");
    PoisonSet out;
    out.trigger_id = trigger.id;
    out.cfe_applied = cfe_noise != nullptr;
    out.entries.reserve(base.examples.size());
    for (size_t i = 0; i < base.examples.size(); ++i) {
        const LabeledExample& ex = base.examples[i];
        Tensor x = ex.image;
        if (cfe_noise) {
            const Tensor& delta = (*cfe_noise)[i];
            if (!delta.same_shape(x))
                throw std::runtime_error("assemble_poison_set: noise shape mismatch at index " +
                                         std::to_string(i));
            for (size_t p = 0; p < x.v.size(); ++p) x.v[p] += delta.v[p];
            clamp01(x);
        }
        Tensor poisoned = triggers::apply_trigger(x, trigger);
        clamp01(poisoned);
        PoisonEntry entry;
        entry.image = std::move(poisoned);
        entry.assigned_label = target_label;
        entry.source_id = ex.source_id;
        entry.original_label = ex.domain_tag == DomainTag::external ? -1 : ex.label;
        out.entries.push_back(std::move(entry));
    }
    return out;
}

void write_manifest(const PoisonSet& poison, const std::string& csv_path) {
    std::ofstream out(csv_path);
    if (!out) throw std::runtime_error("manifest: cannot write " + csv_path);
    out << "index,source_id,original_label,assigned_label,trigger_id,cfe_applied\n";
    for (size_t i = 0; i < poison.entries.size(); ++i) {
        const PoisonEntry& e = poison.entries[i];
        out << i << ',' << e.source_id << ',' << e.original_label << ',' << e.assigned_label
            << ',' << poison.trigger_id << ',' << (poison.cfe_applied ? "true" : "false") << '\n';
    }
    if (!out) throw std::runtime_error("manifest: write failed: " + csv_path);
}

}  // namespace poisonlab::data
