#include "gtgm/volumes.hpp"

#include "gtgm/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>

namespace gtgm::volumes {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Modality m) noexcept {
    switch (m) {
    case Modality::ct_like: return "ct-like";
    case Modality::mri_like: return "mri-like";
    case Modality::em_like: return "em-like";
    }
    return "unknown";
}

const char* to_string(StructureKind k) noexcept {
    switch (k) {
    case StructureKind::ellipsoid_lesion: return "ellipsoid-lesion";
    case StructureKind::tubular_vessel: return "tubular-vessel";
    case StructureKind::dense_cells: return "dense-cells";
    case StructureKind::none: return "none";
    }
    return "unknown";
}

const char* to_string(ContrastSign c) noexcept { return c == ContrastSign::hyper ? "hyper" : "hypo"; }

const char* to_string(LabelKind k) noexcept { return k == LabelKind::semantic ? "semantic" : "instance"; }

Modality parse_modality(const std::string& s) {
    if (s == "ct-like" || s == "ct") return Modality::ct_like;
    if (s == "mri-like" || s == "mri") return Modality::mri_like;
    if (s == "em-like" || s == "em") return Modality::em_like;
    fail(ErrorKind::config, "unknown modality '" + s + "'");
}

StructureKind parse_structure(const std::string& s) {
    if (s == "ellipsoid-lesion") return StructureKind::ellipsoid_lesion;
    if (s == "tubular-vessel") return StructureKind::tubular_vessel;
    if (s == "dense-cells") return StructureKind::dense_cells;
    if (s == "none") return StructureKind::none;
    fail(ErrorKind::config, "unknown structure kind '" + s + "'");
}

ContrastSign parse_contrast(const std::string& s) {
    if (s == "hyper") return ContrastSign::hyper;
    if (s == "hypo") return ContrastSign::hypo;
    fail(ErrorKind::config, "unknown contrast sign '" + s + "'");
}

LabelKind parse_label_kind(const std::string& s) {
    if (s == "semantic") return LabelKind::semantic;
    if (s == "instance") return LabelKind::instance;
    fail(ErrorKind::config, "unknown label kind '" + s + "'");
}

void AttributeRecord::validate() const {
    require((count == 0) == (structure_kind == StructureKind::none), ErrorKind::config,
            "attribute count must be zero exactly when structure kind is none");
    require(noise_level >= 0.0 && noise_level <= 1.0, ErrorKind::config, "noise level must lie in [0,1]");
}

void Volume::validate() const {
    require(dims.z >= kMinVolumeDim && dims.y >= kMinVolumeDim && dims.x >= kMinVolumeDim, ErrorKind::dimension,
            "volume " + id + " dims " + dims.str() + " below the minimum of 8 per axis");
    require(voxels.size() == dims.count(), ErrorKind::dimension,
            "volume " + id + " holds " + std::to_string(voxels.size()) + " voxels, dims imply " + std::to_string(dims.count()));
    require(spacing.z > 0 && spacing.y > 0 && spacing.x > 0, ErrorKind::config, "volume " + id + " has non-positive spacing");
    attributes.validate();
}

void LabelVolume::validate() const {
    require(labels.size() == dims.count(), ErrorKind::dimension, "label volume length does not match dims");
    if (kind == LabelKind::semantic) {
        require(!classes.empty(), ErrorKind::config, "semantic label volume needs a declared class set");
        const std::set<std::uint32_t> allowed(classes.begin(), classes.end());
        for (auto l : labels) {
            require(allowed.count(l) > 0, ErrorKind::config, "label " + std::to_string(l) + " outside the declared class set");
        }
    }
}

void AugmentationSpec::validate() const {
    require(jitter_lo > 0.0 && jitter_lo <= jitter_hi, ErrorKind::config, "intensity jitter range needs 0 < lo <= hi");
    require(noise_sigma >= 0.0, ErrorKind::config, "noise sigma must be non-negative");
}

void SynthSpec::validate() const {
    require(n_volumes >= 1, ErrorKind::config, "n_volumes must be at least 1");
    require(dims.z >= kMinVolumeDim && dims.y >= kMinVolumeDim && dims.x >= kMinVolumeDim, ErrorKind::config,
            "synthetic dims " + dims.str() + " must be at least 8 per axis");
    auto positive_mass = [](const auto& mix) {
        double s = 0.0;
        for (const auto& [k, w] : mix) {
            if (w < 0.0) return false;
            s += w;
        }
        return s > 0.0;
    };
    require(!modality_mix.empty() && positive_mass(modality_mix), ErrorKind::config, "modality mix is empty");
    require(!structure_mix.empty() && positive_mass(structure_mix), ErrorKind::config, "structure mix is empty");
    for (const auto* r : {&lesion_count, &vessel_count, &cell_count}) {
        require(r->lo >= 1 && r->lo <= r->hi, ErrorKind::config, "structure count range needs 1 <= lo <= hi");
    }
}

json SynthSpec::to_json() const {
    json j;
    j["n_volumes"] = n_volumes;
    j["dims"] = {dims.z, dims.y, dims.x};
    // Mixes are ordered pair lists; order decides which draw maps to which entry.
    json mm = json::array();
    for (const auto& [m, w] : modality_mix) mm.push_back({to_string(m), w});
    json sm = json::array();
    for (const auto& [k, w] : structure_mix) sm.push_back({to_string(k), w});
    j["modality_mix"] = mm;
    j["structure_mix"] = sm;
    j["seed"] = seed;
    j["lesion_count"] = {lesion_count.lo, lesion_count.hi};
    j["vessel_count"] = {vessel_count.lo, vessel_count.hi};
    j["cell_count"] = {cell_count.lo, cell_count.hi};
    j["id_prefix"] = id_prefix;
    return j;
}

SynthSpec SynthSpec::from_json(const json& j) {
    SynthSpec s;
    s.n_volumes = j.at("n_volumes").get<std::size_t>();
    const auto d = j.at("dims");
    s.dims = {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(), d.at(2).get<std::size_t>()};
    s.modality_mix.clear();
    for (const auto& e : j.at("modality_mix")) s.modality_mix.emplace_back(parse_modality(e.at(0).get<std::string>()), e.at(1).get<double>());
    s.structure_mix.clear();
    for (const auto& e : j.at("structure_mix")) s.structure_mix.emplace_back(parse_structure(e.at(0).get<std::string>()), e.at(1).get<double>());
    s.seed = j.at("seed").get<std::uint64_t>();
    auto range = [&](const char* key, CountRange& r) {
        if (j.contains(key)) r = {j[key].at(0).get<std::uint32_t>(), j[key].at(1).get<std::uint32_t>()};
    };
    range("lesion_count", s.lesion_count);
    range("vessel_count", s.vessel_count);
    range("cell_count", s.cell_count);
    if (j.contains("id_prefix")) s.id_prefix = j["id_prefix"].get<std::string>();
    return s;
}

const std::vector<std::string>& dataset_names(Modality m) {
    static const std::vector<std::string> ct{"liverct", "pancreasct", "lungct"};
    static const std::vector<std::string> mri{"brainmri", "heartmri", "prostatemri"};
    static const std::vector<std::string> em{"cremia", "cremib", "cremic"};
    switch (m) {
    case Modality::ct_like: return ct;
    case Modality::mri_like: return mri;
    case Modality::em_like: return em;
    }
    return ct;
}

namespace {

template <class T>
T pick_weighted(const std::vector<std::pair<T, double>>& mix, Rng& rng) {
    double total = 0.0;
    for (const auto& [k, w] : mix) total += w;
    double u = rng.uniform() * total;
    for (const auto& [k, w] : mix) {
        if (u < w) return k;
        u -= w;
    }
    return mix.back().first;
}

struct Canvas {
    Dims3 dims;
    std::vector<double> intensity;
    std::vector<std::uint32_t> labels;
};

void paint_background(Canvas& c, Modality m, std::size_t style, Rng& rng) {
    const Dims3 d = c.dims;
    const double offset = 0.04 * static_cast<double>(style);
    if (m == Modality::ct_like) {
        // Piecewise-constant slabs along one axis.
        const auto axis = rng.below(3);
        const std::size_t extent = axis == 0 ? d.z : (axis == 1 ? d.y : d.x);
        const auto n_slabs = static_cast<std::size_t>(rng.range(2, 3));
        std::vector<std::size_t> cuts;
        for (std::size_t s = 1; s < n_slabs; ++s) cuts.push_back(static_cast<std::size_t>(rng.range(2, static_cast<std::int64_t>(extent) - 3)));
        std::sort(cuts.begin(), cuts.end());
        std::vector<double> levels(n_slabs);
        for (double& l : levels) l = 0.15 + offset + rng.uniform(-0.04, 0.04);
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t x = 0; x < d.x; ++x) {
                    const std::size_t pos = axis == 0 ? z : (axis == 1 ? y : x);
                    const auto slab = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), pos) - cuts.begin());
                    c.intensity[d.index(z, y, x)] = levels[slab];
                }
    } else {
        // Smooth linear ramp along a random direction.
        double gz = rng.normal(), gy = rng.normal(), gx = rng.normal();
        const double n = std::sqrt(gz * gz + gy * gy + gx * gx) + 1e-12;
        gz /= n;
        gy /= n;
        gx /= n;
        const double base = (m == Modality::mri_like ? 0.4 : 0.75) + offset;
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t x = 0; x < d.x; ++x) {
                    const double pz = static_cast<double>(z) / static_cast<double>(d.z) - 0.5;
                    const double py = static_cast<double>(y) / static_cast<double>(d.y) - 0.5;
                    const double px = static_cast<double>(x) / static_cast<double>(d.x) - 0.5;
                    c.intensity[d.index(z, y, x)] = base + 0.15 * (gz * pz + gy * py + gx * px);
                }
    }
}

double structure_delta(ContrastSign sign, Modality m) {
    if (m == Modality::em_like) return sign == ContrastSign::hyper ? 0.3 : -0.4;
    return sign == ContrastSign::hyper ? 0.45 : -0.3;
}

struct Disc {
    double cy, cx, r;
};

// Rejection placement of discs in the xy plane with a clearance of `gap` voxels.
bool place_discs(std::vector<Disc>& discs, const std::vector<double>& radii, const std::vector<double>& margins, Dims3 d,
                 double gap, Rng& rng) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        discs.clear();
        bool ok = true;
        for (std::size_t i = 0; i < radii.size() && ok; ++i) {
            const double reach = radii[i] + margins[i];
            const double lo_y = reach, hi_y = static_cast<double>(d.y) - 1.0 - reach;
            const double lo_x = reach, hi_x = static_cast<double>(d.x) - 1.0 - reach;
            if (hi_y < lo_y || hi_x < lo_x) return false;
            bool placed = false;
            for (int t = 0; t < 256 && !placed; ++t) {
                const Disc cand{rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x), radii[i]};
                placed = std::all_of(discs.begin(), discs.end(), [&](const Disc& o) {
                    const std::size_t j = static_cast<std::size_t>(&o - discs.data());
                    const double dy = o.cy - cand.cy, dx = o.cx - cand.cx;
                    return std::sqrt(dy * dy + dx * dx) >= cand.r + margins[i] + o.r + margins[j] + gap;
                });
                if (placed) discs.push_back(cand);
            }
            ok = placed;
        }
        if (ok) return true;
    }
    return false;
}

// Shrinks radii (down to one voxel) and margins until placement succeeds.
// On success radii and margins hold the values actually used.
bool place_shrinking(std::vector<Disc>& discs, std::vector<double>& radii, std::vector<double>& margins, Dims3 d, Rng& rng) {
    const std::vector<double> r0 = radii, m0 = margins;
    for (double f = 1.0; f > 0.3; f -= 0.15) {
        for (std::size_t i = 0; i < radii.size(); ++i) {
            radii[i] = std::max(1.1, r0[i] * f);
            margins[i] = m0[i] * f;
        }
        // 1.5 still exceeds the sqrt(2) in-plane reach of 26-connectivity.
        const double gap = f < 0.6 ? 1.5 : 2.0;
        if (place_discs(discs, radii, margins, d, gap, rng)) return true;
    }
    return false;
}

double paint_lesions(Canvas& c, std::uint32_t count, double delta, Rng& rng) {
    const Dims3 d = c.dims;
    const double base = static_cast<double>(std::min(d.y, d.x));
    std::vector<double> radii(count), margins(count, 0.0), rz(count), cz(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        radii[i] = std::max(1.5, base * rng.uniform(0.13, 0.19));
        // Long enough along z that every axial slice cuts every lesion.
        rz[i] = static_cast<double>(d.z) * rng.uniform(1.1, 1.3);
        cz[i] = rng.uniform(0.45, 0.55) * static_cast<double>(d.z - 1);
    }
    std::vector<Disc> discs;
    require(place_shrinking(discs, radii, margins, d, rng), ErrorKind::config,
            "cannot place " + std::to_string(count) + " separated lesions in dims " + d.str());
    for (std::uint32_t i = 0; i < count; ++i) {
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t x = 0; x < d.x; ++x) {
                    const double nz = (static_cast<double>(z) - cz[i]) / rz[i];
                    const double ny = (static_cast<double>(y) - discs[i].cy) / radii[i];
                    const double nx = (static_cast<double>(x) - discs[i].cx) / radii[i];
                    if (nz * nz + ny * ny + nx * nx <= 1.0) {
                        c.labels[d.index(z, y, x)] = i + 1;
                        c.intensity[d.index(z, y, x)] += delta;
                    }
                }
        // The nearest voxel to the centre always belongs to the lesion.
        const auto z0 = static_cast<std::size_t>(std::lround(cz[i]));
        const auto y0 = static_cast<std::size_t>(std::lround(discs[i].cy));
        const auto x0 = static_cast<std::size_t>(std::lround(discs[i].cx));
        if (c.labels[d.index(z0, y0, x0)] != i + 1) {
            c.labels[d.index(z0, y0, x0)] = i + 1;
            c.intensity[d.index(z0, y0, x0)] += delta;
        }
    }
    double mean = 0.0;
    for (double r : radii) mean += r;
    return mean / static_cast<double>(count);
}

double paint_vessels(Canvas& c, std::uint32_t count, double delta, Rng& rng) {
    const Dims3 d = c.dims;
    const double base = static_cast<double>(std::min(d.y, d.x));
    std::vector<double> radii(count), amps(count), phase(count), freq(count), margins(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        radii[i] = std::max(1.1, base * rng.uniform(0.06, 0.09));
        amps[i] = base * rng.uniform(0.0, 0.06);
        phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        freq[i] = rng.uniform(0.5, 1.0);
        margins[i] = amps[i];
    }
    std::vector<Disc> discs;
    require(place_shrinking(discs, radii, margins, d, rng), ErrorKind::config,
            "cannot place " + std::to_string(count) + " separated vessels in dims " + d.str());
    amps = margins;
    for (std::uint32_t i = 0; i < count; ++i) {
        for (std::size_t z = 0; z < d.z; ++z) {
            const double t = 2.0 * std::numbers::pi * freq[i] * static_cast<double>(z) / static_cast<double>(d.z) + phase[i];
            const double cy = discs[i].cy + amps[i] * std::sin(t);
            const double cx = discs[i].cx + amps[i] * std::cos(t);
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t x = 0; x < d.x; ++x) {
                    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                    if (dy * dy + dx * dx <= radii[i] * radii[i]) {
                        c.labels[d.index(z, y, x)] = i + 1;
                        c.intensity[d.index(z, y, x)] += delta;
                    }
                }
        }
    }
    double mean = 0.0;
    for (double r : radii) mean += r;
    return mean / static_cast<double>(count);
}

double paint_cells(Canvas& c, std::uint32_t count, double delta, Modality m, Rng& rng) {
    const Dims3 d = c.dims;
    std::vector<std::array<std::size_t, 3>> seeds;
    std::set<std::size_t> used;
    while (seeds.size() < count) {
        const std::array<std::size_t, 3> s{rng.below(d.z), rng.below(d.y), rng.below(d.x)};
        if (used.insert(d.index(s[0], s[1], s[2])).second) seeds.push_back(s);
    }
    for (std::size_t z = 0; z < d.z; ++z)
        for (std::size_t y = 0; y < d.y; ++y)
            for (std::size_t x = 0; x < d.x; ++x) {
                std::size_t best = 0;
                double best_d = INFINITY;
                for (std::size_t i = 0; i < seeds.size(); ++i) {
                    const double dz = static_cast<double>(z) - static_cast<double>(seeds[i][0]);
                    const double dy = static_cast<double>(y) - static_cast<double>(seeds[i][1]);
                    const double dx = static_cast<double>(x) - static_cast<double>(seeds[i][2]);
                    const double dist = dz * dz + dy * dy + dx * dx;
                    if (dist < best_d) {
                        best_d = dist;
                        best = i;
                    }
                }
                c.labels[d.index(z, y, x)] = static_cast<std::uint32_t>(best + 1);
            }
    // Per-cell interior shade for EM texture.
    if (m == Modality::em_like) {
        std::vector<double> shade(count);
        for (double& s : shade) s = rng.uniform(-0.1, 0.1);
        for (std::size_t i = 0; i < c.labels.size(); ++i) c.intensity[i] += shade[c.labels[i] - 1];
    }
    // Membranes: voxels with a 6-neighbour in another cell.
    for (std::size_t z = 0; z < d.z; ++z)
        for (std::size_t y = 0; y < d.y; ++y)
            for (std::size_t x = 0; x < d.x; ++x) {
                const auto l = c.labels[d.index(z, y, x)];
                const bool boundary = (z + 1 < d.z && c.labels[d.index(z + 1, y, x)] != l) ||
                                      (y + 1 < d.y && c.labels[d.index(z, y + 1, x)] != l) ||
                                      (x + 1 < d.x && c.labels[d.index(z, y, x + 1)] != l);
                if (boundary) c.intensity[d.index(z, y, x)] += delta;
            }
    const double cell_volume = static_cast<double>(d.count()) / static_cast<double>(count);
    return std::cbrt(3.0 * cell_volume / (4.0 * std::numbers::pi));
}

} // namespace

std::pair<Volume, LabelVolume> synth_volume(const SynthSpec& spec, std::size_t index) {
    spec.validate();
    Rng rng(spec.seed + index);

    Volume v;
    char id[32];
    std::snprintf(id, sizeof(id), "%04zu", index);
    v.id = spec.id_prefix + id;
    v.dims = spec.dims;
    v.modality = pick_weighted(spec.modality_mix, rng);
    const auto& names = dataset_names(v.modality);
    const auto style = static_cast<std::size_t>(rng.below(names.size()));
    v.dataset_name = names[style];

    AttributeRecord& a = v.attributes;
    a.structure_kind = v.modality == Modality::em_like ? StructureKind::dense_cells : pick_weighted(spec.structure_mix, rng);
    a.contrast_sign = v.modality == Modality::ct_like ? ContrastSign::hyper : ContrastSign::hypo;
    a.noise_level = rng.uniform();

    Canvas c{spec.dims, std::vector<double>(spec.dims.count(), 0.0), std::vector<std::uint32_t>(spec.dims.count(), 0)};
    paint_background(c, v.modality, style, rng);
    const double delta = structure_delta(a.contrast_sign, v.modality);
    auto draw_count = [&](const CountRange& r) { return static_cast<std::uint32_t>(rng.range(r.lo, r.hi)); };
    switch (a.structure_kind) {
    case StructureKind::ellipsoid_lesion:
        a.count = draw_count(spec.lesion_count);
        a.mean_radius_voxels = paint_lesions(c, a.count, delta, rng);
        break;
    case StructureKind::tubular_vessel:
        a.count = draw_count(spec.vessel_count);
        a.mean_radius_voxels = paint_vessels(c, a.count, delta, rng);
        break;
    case StructureKind::dense_cells:
        a.count = draw_count(spec.cell_count);
        a.mean_radius_voxels = paint_cells(c, a.count, delta, v.modality, rng);
        break;
    case StructureKind::none:
        a.count = 0;
        break;
    }

    const double sigma = 0.06 * a.noise_level;
    v.voxels.resize(c.intensity.size());
    for (std::size_t i = 0; i < c.intensity.size(); ++i) {
        v.voxels[i] = static_cast<float>(c.intensity[i] + sigma * rng.normal());
    }

    LabelVolume l;
    l.dims = spec.dims;
    l.labels = std::move(c.labels);
    l.kind = LabelKind::instance;
    v.validate();
    return {std::move(v), std::move(l)};
}

Dataset synth_dataset(const SynthSpec& spec) {
    spec.validate();
    Dataset d;
    d.volumes.reserve(spec.n_volumes);
    d.labels.reserve(spec.n_volumes);
    for (std::size_t i = 0; i < spec.n_volumes; ++i) {
        auto [v, l] = synth_volume(spec, i);
        d.volumes.push_back(std::move(v));
        d.labels.push_back(std::move(l));
    }
    return d;
}

Patch crop(const Volume& v, Dims3 origin, Dims3 dims) {
    require(origin.z + dims.z <= v.dims.z && origin.y + dims.y <= v.dims.y && origin.x + dims.x <= v.dims.x,
            ErrorKind::dimension, "crop " + dims.str() + " at " + origin.str() + " exceeds volume dims " + v.dims.str());
    Patch p{v.id, origin, dims, std::vector<float>(dims.count())};
    for (std::size_t z = 0; z < dims.z; ++z)
        for (std::size_t y = 0; y < dims.y; ++y) {
            const float* src = &v.voxels[v.dims.index(origin.z + z, origin.y + y, origin.x)];
            std::copy(src, src + dims.x, &p.voxels[dims.index(z, y, 0)]);
        }
    return p;
}

Patch whole_volume_patch(const Volume& v) { return {v.id, {0, 0, 0}, v.dims, v.voxels}; }

Patch sample_patch(const Volume& v, Dims3 dims, Rng& rng) {
    require(dims.z >= 1 && dims.y >= 1 && dims.x >= 1, ErrorKind::dimension, "patch dims must be positive");
    require(dims.z <= v.dims.z && dims.y <= v.dims.y && dims.x <= v.dims.x, ErrorKind::dimension,
            "patch " + dims.str() + " larger than volume " + v.dims.str());
    const Dims3 origin{static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(v.dims.z - dims.z))),
                       static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(v.dims.y - dims.y))),
                       static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(v.dims.x - dims.x)))};
    return crop(v, origin, dims);
}

Patch augment_view(const Patch& p, const AugmentationSpec& spec, std::uint64_t stream) {
    spec.validate();
    Rng rng(splitmix64(spec.rng_seed ^ splitmix64(stream)));
    const Dims3 d = p.dims;
    // Every draw happens unconditionally so each decision has a fixed stream position.
    const auto j = static_cast<std::int64_t>(spec.crop_jitter);
    const std::int64_t sz = rng.range(-j, j), sy = rng.range(-j, j), sx = rng.range(-j, j);
    const bool fz = rng.bernoulli(0.5) && spec.flip_z;
    const bool fy = rng.bernoulli(0.5) && spec.flip_y;
    const bool fx = rng.bernoulli(0.5) && spec.flip_x;
    const double scale = rng.uniform(spec.jitter_lo, spec.jitter_hi);

    Patch out = p;
    if (sz != 0 || sy != 0 || sx != 0) {
        // Translation with edge replication.
        auto clampi = [](std::int64_t v, std::size_t n) {
            return static_cast<std::size_t>(std::clamp<std::int64_t>(v, 0, static_cast<std::int64_t>(n) - 1));
        };
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t x = 0; x < d.x; ++x) {
                    out.voxels[d.index(z, y, x)] = p.voxels[d.index(clampi(static_cast<std::int64_t>(z) + sz, d.z),
                                                                    clampi(static_cast<std::int64_t>(y) + sy, d.y),
                                                                    clampi(static_cast<std::int64_t>(x) + sx, d.x))];
                }
    }
    if (fz || fy || fx) {
        const std::vector<float> src = out.voxels;
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t x = 0; x < d.x; ++x) {
                    out.voxels[d.index(z, y, x)] =
                        src[d.index(fz ? d.z - 1 - z : z, fy ? d.y - 1 - y : y, fx ? d.x - 1 - x : x)];
                }
    }
    if (spec.jitter_lo != 1.0 || spec.jitter_hi != 1.0) {
        for (float& v : out.voxels) v = static_cast<float>(static_cast<double>(v) * scale);
    }
    if (spec.noise_sigma > 0.0) {
        for (float& v : out.voxels) v = static_cast<float>(static_cast<double>(v) + spec.noise_sigma * rng.normal());
    }
    return out;
}

std::pair<Patch, Patch> augment_views(const Patch& p, const AugmentationSpec& spec) {
    return {augment_view(p, spec, 1), augment_view(p, spec, 2)};
}

Slice extract_slice(const Volume& v, std::size_t z) {
    require(z < v.dims.z, ErrorKind::dimension, "slice index out of range");
    Slice s{z, v.dims.y, v.dims.x, {}};
    const auto begin = v.voxels.begin() + static_cast<std::ptrdiff_t>(v.dims.index(z, 0, 0));
    s.pixels.assign(begin, begin + static_cast<std::ptrdiff_t>(v.dims.y * v.dims.x));
    return s;
}

Slice sample_slice(const Volume& v, Rng& rng) {
    require(v.dims.z >= 1, ErrorKind::dimension, "volume has no slices");
    return extract_slice(v, static_cast<std::size_t>(rng.below(v.dims.z)));
}

// ---- file format ----

namespace {

json dims_json(Dims3 d) { return json::array({d.z, d.y, d.x}); }

Dims3 parse_dims(const json& j) {
    require(j.is_array() && j.size() == 3, ErrorKind::format, "dims must be a 3-element array");
    return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), ErrorKind::io, "short write to " + path.string());
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::format, "missing file " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
    return v;
}

fs::path sidecar_for(const fs::path& path) {
    std::string s = path.string();
    for (const char* ext : {".labels.raw", ".raw", ".json"}) {
        const std::string e(ext);
        if (s.size() > e.size() && s.compare(s.size() - e.size(), e.size(), e) == 0) {
            return s.substr(0, s.size() - e.size()) + ".json";
        }
    }
    return s + ".json";
}

} // namespace

void write_volume(const Volume& v, const fs::path& dir, const LabelVolume* labels) {
    // Only the payload consistency is enforced here; small hand-built volumes stay writable.
    require(v.voxels.size() == v.dims.count(), ErrorKind::dimension, "volume " + v.id + " voxel count does not match dims");
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create directory " + dir.string() + ": " + ec.message());

    std::string payload;
    payload.reserve(v.voxels.size() * 4);
    for (float f : v.voxels) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(payload, bits);
    }
    write_bytes(dir / (v.id + ".raw"), payload);

    json meta;
    meta["format"] = "gtgm-volume";
    meta["version"] = 1;
    meta["id"] = v.id;
    meta["dims"] = dims_json(v.dims);
    meta["spacing"] = {v.spacing.z, v.spacing.y, v.spacing.x};
    meta["modality"] = to_string(v.modality);
    meta["dataset_name"] = v.dataset_name;
    meta["dtype"] = "float32-le";
    meta["attributes"] = {{"structure_kind", to_string(v.attributes.structure_kind)},
                          {"count", v.attributes.count},
                          {"mean_radius_voxels", v.attributes.mean_radius_voxels},
                          {"contrast_sign", to_string(v.attributes.contrast_sign)},
                          {"noise_level", v.attributes.noise_level}};
    if (labels != nullptr) {
        require(labels->dims == v.dims, ErrorKind::dimension, "label dims do not match volume " + v.id);
        std::string lp;
        lp.reserve(labels->labels.size() * 4);
        for (auto l : labels->labels) put_u32(lp, l);
        write_bytes(dir / (v.id + ".labels.raw"), lp);
        meta["label_path"] = v.id + ".labels.raw";
        meta["label_kind"] = to_string(labels->kind);
        if (!labels->classes.empty()) meta["label_classes"] = labels->classes;
    } else {
        meta["label_path"] = nullptr;
    }
    write_bytes(dir / (v.id + ".json"), meta.dump(2) + "\n");
}

Volume read_volume(const fs::path& path) {
    const fs::path sidecar = sidecar_for(path);
    require(fs::exists(sidecar), ErrorKind::format, "missing sidecar " + sidecar.string());
    json meta;
    try {
        meta = json::parse(read_bytes(sidecar));
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "unparseable sidecar " + sidecar.string() + ": " + e.what());
    }
    Volume v;
    try {
        v.id = meta.at("id").get<std::string>();
        v.dims = parse_dims(meta.at("dims"));
        const auto& sp = meta.at("spacing");
        v.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
        v.modality = parse_modality(meta.at("modality").get<std::string>());
        v.dataset_name = meta.at("dataset_name").get<std::string>();
        const auto& a = meta.at("attributes");
        v.attributes.structure_kind = parse_structure(a.at("structure_kind").get<std::string>());
        v.attributes.count = a.at("count").get<std::uint32_t>();
        v.attributes.mean_radius_voxels = a.at("mean_radius_voxels").get<double>();
        v.attributes.contrast_sign = parse_contrast(a.at("contrast_sign").get<std::string>());
        v.attributes.noise_level = a.at("noise_level").get<double>();
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "malformed sidecar " + sidecar.string() + ": " + e.what());
    }
    const fs::path raw = sidecar.parent_path() / (v.id + ".raw");
    const std::string payload = read_bytes(raw);
    const std::size_t expected = v.dims.count() * 4;
    require(payload.size() == expected, ErrorKind::format,
            raw.string() + ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(payload.size()));
    v.voxels.resize(v.dims.count());
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        const std::uint32_t bits = get_u32(payload, 4 * i);
        std::memcpy(&v.voxels[i], &bits, 4);
    }
    return v;
}

std::optional<LabelVolume> read_labels(const fs::path& path) {
    const fs::path sidecar = sidecar_for(path);
    require(fs::exists(sidecar), ErrorKind::format, "missing sidecar " + sidecar.string());
    const json meta = json::parse(read_bytes(sidecar));
    if (!meta.contains("label_path") || meta["label_path"].is_null()) return std::nullopt;
    LabelVolume l;
    l.dims = parse_dims(meta.at("dims"));
    l.kind = parse_label_kind(meta.value("label_kind", std::string("instance")));
    if (meta.contains("label_classes")) l.classes = meta["label_classes"].get<std::vector<std::uint32_t>>();
    const fs::path raw = sidecar.parent_path() / meta["label_path"].get<std::string>();
    const std::string payload = read_bytes(raw);
    const std::size_t expected = l.dims.count() * 4;
    require(payload.size() == expected, ErrorKind::format,
            raw.string() + ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(payload.size()));
    l.labels.resize(l.dims.count());
    for (std::size_t i = 0; i < l.labels.size(); ++i) l.labels[i] = get_u32(payload, 4 * i);
    return l;
}

void write_dataset(const Dataset& d, const fs::path& dir) {
    require(d.labels.empty() || d.labels.size() == d.volumes.size(), ErrorKind::dimension,
            "dataset has a label count different from its volume count");
    json index;
    index["format"] = "gtgm-dataset";
    index["volumes"] = json::array();
    for (std::size_t i = 0; i < d.volumes.size(); ++i) {
        write_volume(d.volumes[i], dir, d.labels.empty() ? nullptr : &d.labels[i]);
        index["volumes"].push_back(d.volumes[i].id);
    }
    write_bytes(dir / "dataset.json", index.dump(2) + "\n");
}

Dataset read_dataset(const fs::path& dir) {
    const fs::path index_path = dir / "dataset.json";
    require(fs::exists(index_path), ErrorKind::io, "no dataset.json in " + dir.string());
    const json index = json::parse(read_bytes(index_path));
    Dataset d;
    bool all_labeled = true;
    std::vector<std::optional<LabelVolume>> labels;
    for (const auto& id : index.at("volumes")) {
        const fs::path p = dir / (id.get<std::string>() + ".json");
        d.volumes.push_back(read_volume(p));
        labels.push_back(read_labels(p));
        all_labeled = all_labeled && labels.back().has_value();
    }
    if (all_labeled) {
        for (auto& l : labels) d.labels.push_back(std::move(*l));
    }
    return d;
}

} // namespace gtgm::volumes
