#ifndef MPUNET_PIPELINE_DATASET_HPP
#define MPUNET_PIPELINE_DATASET_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpunet/core/error.hpp"
#include "mpunet/core/rng.hpp"
#include "mpunet/phantom.hpp"
#include "mpunet/preprocess.hpp"
#include "mpunet/volume_io.hpp"

namespace mpunet {

inline constexpr const char* dataset_manifest_name = "dataset.json";

struct SubjectEntry {
    std::string id;
    std::string image; // relative to the dataset directory
    std::string label;
    std::vector<std::uint64_t> class_counts;
};

struct DatasetManifest {
    int num_classes = 0; // K, foreground classes
    std::vector<SubjectEntry> subjects;
};

struct Subject {
    std::string id;
    IntensityVolume image; // robust-scaled
    LabelVolume label;
};

inline std::vector<std::uint64_t> count_classes(const LabelVolume& lab)
{
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(lab.num_classes) + 1, 0);
    for (auto v : lab.data) {
        if (v >= counts.size()) counts.resize(v + 1, 0);
        ++counts[v];
    }
    return counts;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m)
{
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& s : m.subjects)
        subjects.push_back({{"id", s.id}, {"image", s.image}, {"label", s.label}, {"class_counts", s.class_counts}});
    return {{"format", "mpunet-dataset"}, {"num_classes", m.num_classes}, {"subjects", subjects}};
}

inline DatasetManifest read_dataset_manifest(const std::filesystem::path& dir)
{
    const auto path = dir / dataset_manifest_name;
    if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory '" + dir.string() + "' does not exist");
    std::ifstream in(path);
    if (!in) throw DataError("dataset manifest '" + path.string() + "' not found");
    try {
        const auto j = nlohmann::json::parse(in);
        DatasetManifest m;
        m.num_classes = j.at("num_classes").get<int>();
        for (const auto& s : j.at("subjects")) {
            SubjectEntry e;
            e.id = s.at("id").get<std::string>();
            e.image = s.at("image").get<std::string>();
            if (!s.contains("label") || s.at("label").get<std::string>().empty())
                throw DataError("subject '" + e.id + "' has no label volume");
            e.label = s.at("label").get<std::string>();
            if (s.contains("class_counts")) e.class_counts = s.at("class_counts").get<std::vector<std::uint64_t>>();
            m.subjects.push_back(std::move(e));
        }
        return m;
    }
    catch (const nlohmann::json::exception& e) {
        throw DataError("malformed dataset manifest '" + path.string() + "': " + e.what());
    }
}

/// Writes `n` phantom subjects (variations of `base`) plus the manifest.
inline DatasetManifest write_phantom_dataset(const std::filesystem::path& dir, const PhantomSpec& base, int n)
{
    if (n < 1) throw UsageError("phantom dataset needs at least one subject");
    base.validate();
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.num_classes = base.num_classes;
    for (int i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "sub%03d", i);
        const auto [img, lab] = make_phantom(phantom_variation(base, static_cast<std::uint64_t>(i)));
        SubjectEntry e{id, std::string(id) + "_img.mvh", std::string(id) + "_lab.mvh", count_classes(lab)};
        save_volume(img, dir / e.image);
        save_volume(lab, dir / e.label);
        m.subjects.push_back(std::move(e));
    }
    std::ofstream out(dir / dataset_manifest_name);
    if (!out) throw DataError("cannot write dataset manifest in '" + dir.string() + "'");
    out << manifest_to_json(m).dump(2) << '\n';
    return m;
}

/// Loads and robust-scales the listed subjects.
inline std::vector<Subject> load_subjects(const std::filesystem::path& dir, const DatasetManifest& m,
                                          const std::vector<std::string>& ids)
{
    std::vector<Subject> out;
    for (const auto& id : ids) {
        const auto it = std::find_if(m.subjects.begin(), m.subjects.end(), [&](const auto& s) { return s.id == id; });
        if (it == m.subjects.end()) throw DataError("subject '" + id + "' is not in the dataset");
        Subject s{id, robust_scale(load_intensity(dir / it->image)), load_labels(dir / it->label)};
        require_same_shape(s.image.geom, s.label.geom, ("subject " + id).c_str());
        if (s.label.num_classes > m.num_classes)
            throw DataError("subject '" + id + "' declares more classes than the dataset");
        s.label.num_classes = m.num_classes;
        out.push_back(std::move(s));
    }
    return out;
}

struct Fold {
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> test;
};

using FoldSplit = std::vector<Fold>;

/// Seeded shuffle cut into `folds` chunks (the first n % folds get one
/// extra); fold f tests chunk f, validates on chunk f+1 and trains on the rest.
inline FoldSplit make_folds(const std::vector<std::string>& ids, std::uint64_t seed, int folds = 5)
{
    if (folds < 2) throw UsageError("at least two folds are required");
    if (static_cast<int>(ids.size()) < folds)
        throw DataError("need at least " + std::to_string(folds) + " subjects for " + std::to_string(folds) +
                        "-fold cross-validation, got " + std::to_string(ids.size()));
    std::vector<std::string> order = ids;
    Rng rng(derive_seed(seed, 0x666f6c6473ull));
    shuffle(order, rng);
    std::vector<std::vector<std::string>> chunks(folds);
    const std::size_t base = order.size() / folds, extra = order.size() % folds;
    std::size_t pos = 0;
    for (int c = 0; c < folds; ++c) {
        const std::size_t len = base + (static_cast<std::size_t>(c) < extra ? 1 : 0);
        chunks[c].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
    }
    FoldSplit split(folds);
    for (int f = 0; f < folds; ++f) {
        const int v = (f + 1) % folds;
        split[f].test = chunks[f];
        split[f].validation = chunks[v];
        for (int c = 0; c < folds; ++c)
            if (c != f && c != v) split[f].train.insert(split[f].train.end(), chunks[c].begin(), chunks[c].end());
    }
    return split;
}

inline nlohmann::json folds_to_json(const FoldSplit& s)
{
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t f = 0; f < s.size(); ++f)
        out.push_back({{"fold", f}, {"train", s[f].train}, {"validation", s[f].validation}, {"test", s[f].test}});
    return out;
}

} // namespace mpunet

#endif // MPUNET_PIPELINE_DATASET_HPP
