#pragma once

/// @file dataset_io.hpp
/// On-disk datasets: `<root>/images/<id>.png` (8-bit RGB),
/// `<root>/labels/<id>.png` (8-bit index map, 255 = ignore) and a
/// `<root>/meta.json` manifest.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iapc/common.hpp"
#include "iapc/data_synth.hpp"
#include "iapc/image_io.hpp"

namespace iapc {

struct DatasetMeta {
    int num_classes = 0;
    int height = 0;
    int width = 0;
    int count = 0;
    std::uint64_t seed = 0;
    std::string domain;  // "source", "target", ...
    DomainShiftSpec shift;
};

inline nlohmann::json to_json(const DomainShiftSpec& s) {
    return {{"hue_shift", s.hue_shift},         {"brightness_scale", s.brightness_scale},
            {"contrast_scale", s.contrast_scale}, {"noise_std", s.noise_std},
            {"texture_freq_scale", s.texture_freq_scale}, {"seed", s.seed}};
}

inline DomainShiftSpec shift_from_json(const nlohmann::json& j) {
    DomainShiftSpec s;
    s.hue_shift = j.value("hue_shift", 0.0);
    s.brightness_scale = j.value("brightness_scale", 1.0);
    s.contrast_scale = j.value("contrast_scale", 1.0);
    s.noise_std = j.value("noise_std", 0.0);
    s.texture_freq_scale = j.value("texture_freq_scale", 1.0);
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
}

inline nlohmann::json to_json(const DatasetMeta& m) {
    return {{"format", "iapc-dataset/1"}, {"num_classes", m.num_classes}, {"height", m.height},
            {"width", m.width},           {"count", m.count},             {"seed", m.seed},
            {"domain", m.domain},         {"shift", to_json(m.shift)}};
}

inline DatasetMeta meta_from_json(const nlohmann::json& j) {
    DatasetMeta m;
    m.num_classes = j.at("num_classes").get<int>();
    m.height = j.value("height", 0);
    m.width = j.value("width", 0);
    m.count = j.value("count", 0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.domain = j.value("domain", std::string{});
    if (j.contains("shift")) m.shift = shift_from_json(j.at("shift"));
    return m;
}

inline std::optional<DatasetMeta> read_meta(const std::filesystem::path& root) {
    const auto path = root / "meta.json";
    if (!std::filesystem::exists(path)) return std::nullopt;
    std::ifstream in(path);
    try {
        return meta_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("malformed " + path.string() + ": " + e.what());
    }
}

inline void write_meta(const std::filesystem::path& root, const DatasetMeta& meta) {
    std::ofstream out(root / "meta.json");
    out << to_json(meta).dump(2) << '\n';
    if (!out) throw Error("cannot write " + (root / "meta.json").string());
}

/// Writes images (and labels when present) plus the manifest.
inline void save_dataset(const std::filesystem::path& root, const Dataset& data, const DatasetMeta& meta) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    const bool labeled = std::any_of(data.begin(), data.end(), [](const auto& s) { return s.has_label(); });
    if (labeled) fs::create_directories(root / "labels");
    for (const auto& s : data) {
        io::write_image(root / "images" / (s.id + ".png"), s.image);
        if (s.has_label()) io::write_labels(root / "labels" / (s.id + ".png"), s.label);
    }
    write_meta(root, meta);
}

enum class LoadMode {
    /// Images and labels; every image must have a label.
    Labeled,
    /// Images only. The labels directory is never opened.
    ImagesOnly,
};

namespace dataset_detail {

inline std::vector<std::string> png_basenames(const std::filesystem::path& dir) {
    std::vector<std::string> names;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            names.push_back(entry.path().stem().string());
        }
    }
    std::sort(names.begin(), names.end());
    return names;
}

}  // namespace dataset_detail

/// Loads `root`, sorted by basename. When num_classes is absent it is read
/// from meta.json; label values must be < C or the ignore sentinel.
inline Dataset load_dataset(const std::filesystem::path& root, LoadMode mode = LoadMode::Labeled,
                            std::optional<int> num_classes = std::nullopt) {
    namespace fs = std::filesystem;
    const fs::path images = root / "images";
    if (!fs::is_directory(images)) {
        throw LoadError("dataset " + root.string() + " has no images/ directory");
    }
    const auto names = dataset_detail::png_basenames(images);

    Dataset out;
    out.reserve(names.size());
    if (mode == LoadMode::ImagesOnly) {
        for (const auto& name : names) {
            out.push_back(ImageSample{io::read_image(images / (name + ".png")), {}, name});
        }
        return out;
    }

    const fs::path labels = root / "labels";
    if (!fs::is_directory(labels)) {
        throw LoadError("dataset " + root.string() + " has no labels/ directory");
    }
    if (!num_classes) {
        const auto meta = read_meta(root);
        if (!meta) throw LoadError("dataset " + root.string() + ": class count unknown (no meta.json)");
        num_classes = meta->num_classes;
    }
    const auto label_names = dataset_detail::png_basenames(labels);
    const std::set<std::string> label_set(label_names.begin(), label_names.end());
    const std::set<std::string> image_set(names.begin(), names.end());
    for (const auto& name : names) {
        if (!label_set.count(name)) throw LoadError("image '" + name + "' has no matching label file");
    }
    for (const auto& name : label_names) {
        if (!image_set.count(name)) throw LoadError("label '" + name + "' has no matching image file");
    }
    for (const auto& name : names) {
        ImageSample s{io::read_image(images / (name + ".png")), io::read_labels(labels / (name + ".png")), name};
        if (!s.label.same_grid(s.image)) {
            throw ValidationError("sample '" + name + "': image and label sizes differ");
        }
        for (auto v : s.label.values()) {
            if (v != kIgnoreLabel && v >= *num_classes) {
                throw ValidationError("sample '" + name + "': label value " + std::to_string(v) +
                                      " is neither a class index below " + std::to_string(*num_classes) +
                                      " nor the ignore value 255");
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Hash over the dataset's image (and optionally label) bytes in sorted order.
inline std::uint64_t hash_dataset_dir(const std::filesystem::path& root, bool include_labels = true) {
    namespace fs = std::filesystem;
    Fnv1a h;
    auto feed_dir = [&](const fs::path& dir) {
        if (!fs::is_directory(dir)) return;
        for (const auto& name : dataset_detail::png_basenames(dir)) {
            std::ifstream in(dir / (name + ".png"), std::ios::binary);
            std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            h.update(name);
            h.update(bytes);
        }
    };
    feed_dir(root / "images");
    if (include_labels) feed_dir(root / "labels");
    return h.digest();
}

inline std::uint64_t hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Fnv1a h;
    h.update(bytes);
    return h.digest();
}

}  // namespace iapc
