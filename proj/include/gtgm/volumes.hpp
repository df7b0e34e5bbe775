#pragma once

// Volume data model, deterministic synthetic datasets, patch sampling,
// two-view augmentation, slice extraction and the raw+json file pair format.

#include "gtgm/rng.hpp"
#include "gtgm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace gtgm::volumes {

enum class Modality { ct_like, mri_like, em_like };
enum class StructureKind { ellipsoid_lesion, tubular_vessel, dense_cells, none };
enum class ContrastSign { hyper, hypo };
enum class LabelKind { semantic, instance };

const char* to_string(Modality m) noexcept;
const char* to_string(StructureKind k) noexcept;
const char* to_string(ContrastSign c) noexcept;
const char* to_string(LabelKind k) noexcept;
Modality parse_modality(const std::string& s);
StructureKind parse_structure(const std::string& s);
ContrastSign parse_contrast(const std::string& s);
LabelKind parse_label_kind(const std::string& s);

constexpr std::size_t kMinVolumeDim = 8;

struct AttributeRecord {
    StructureKind structure_kind = StructureKind::none;
    std::uint32_t count = 0;
    double mean_radius_voxels = 0.0;
    ContrastSign contrast_sign = ContrastSign::hyper;
    double noise_level = 0.0;

    void validate() const;
    bool operator==(const AttributeRecord&) const = default;
};

struct Spacing {
    double z = 1.0;
    double y = 1.0;
    double x = 1.0;
    bool operator==(const Spacing&) const = default;
};

struct Volume {
    std::string id;
    Dims3 dims;
    Spacing spacing;
    Modality modality = Modality::ct_like;
    std::string dataset_name;
    std::vector<float> voxels;
    AttributeRecord attributes;

    float at(std::size_t z, std::size_t y, std::size_t x) const noexcept { return voxels[dims.index(z, y, x)]; }
    void validate() const;
};

struct LabelVolume {
    Dims3 dims;
    std::vector<std::uint32_t> labels;
    LabelKind kind = LabelKind::instance;
    // Declared class set for semantic labelings; unused for instances.
    std::vector<std::uint32_t> classes;

    std::uint32_t at(std::size_t z, std::size_t y, std::size_t x) const noexcept { return labels[dims.index(z, y, x)]; }
    void validate() const;
};

struct Patch {
    std::string source_id;
    Dims3 origin;
    Dims3 dims;
    std::vector<float> voxels;

    bool operator==(const Patch&) const = default;
};

struct AugmentationSpec {
    bool flip_z = false;
    bool flip_y = false;
    bool flip_x = false;
    double jitter_lo = 1.0;
    double jitter_hi = 1.0;
    double noise_sigma = 0.0;
    std::size_t crop_jitter = 0;
    std::uint64_t rng_seed = 0;

    static AugmentationSpec identity() { return {}; }
    void validate() const;
};

struct CountRange {
    std::uint32_t lo = 1;
    std::uint32_t hi = 1;
};

struct SynthSpec {
    std::size_t n_volumes = 1;
    Dims3 dims{32, 32, 32};
    std::vector<std::pair<Modality, double>> modality_mix{
        {Modality::ct_like, 1.0}, {Modality::mri_like, 1.0}, {Modality::em_like, 1.0}};
    std::vector<std::pair<StructureKind, double>> structure_mix{
        {StructureKind::ellipsoid_lesion, 1.0}, {StructureKind::tubular_vessel, 1.0}, {StructureKind::none, 0.5}};
    std::uint64_t seed = 0;
    CountRange lesion_count{1, 3};
    CountRange vessel_count{1, 3};
    CountRange cell_count{8, 8};
    std::string id_prefix = "vol";

    void validate() const;
    nlohmann::json to_json() const;
    static SynthSpec from_json(const nlohmann::json& j);
};

// Dataset names used for each synthetic modality; the name doubles as a style key.
const std::vector<std::string>& dataset_names(Modality m);

struct Dataset {
    std::vector<Volume> volumes;
    std::vector<LabelVolume> labels;
};

// Volume i is generated from seed + i alone, so any subset can be regenerated independently.
std::pair<Volume, LabelVolume> synth_volume(const SynthSpec& spec, std::size_t index);
Dataset synth_dataset(const SynthSpec& spec);

Patch sample_patch(const Volume& v, Dims3 dims, Rng& rng);
Patch crop(const Volume& v, Dims3 origin, Dims3 dims);
Patch whole_volume_patch(const Volume& v);

// Two views drawn from independent streams of spec.rng_seed. Each enabled flip
// fires with probability 1/2 per view; decisions depend on the seed only, so
// re-applying the same spec to a view undoes its flips.
std::pair<Patch, Patch> augment_views(const Patch& p, const AugmentationSpec& spec);
Patch augment_view(const Patch& p, const AugmentationSpec& spec, std::uint64_t stream);

struct Slice {
    std::size_t index = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> pixels;
};

Slice extract_slice(const Volume& v, std::size_t z);
Slice sample_slice(const Volume& v, Rng& rng);

// <dir>/<id>.raw, <dir>/<id>.json and optionally <dir>/<id>.labels.raw.
void write_volume(const Volume& v, const std::filesystem::path& dir, const LabelVolume* labels = nullptr);
// Accepts the .json sidecar or the .raw payload path.
Volume read_volume(const std::filesystem::path& path);
std::optional<LabelVolume> read_labels(const std::filesystem::path& path);

// Directory with volume file pairs plus dataset.json listing ids in order.
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

} // namespace gtgm::volumes
