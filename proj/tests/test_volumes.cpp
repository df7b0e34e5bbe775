#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gtgm/error.hpp"
#include "gtgm/volumes.hpp"
#include "test_support.hpp"

#include <fstream>
#include <map>
#include <queue>
#include <set>

using namespace gtgm;
using namespace gtgm::volumes;

namespace {

// Plain BFS over the foreground mask, 26-connected, independent of the library.
std::size_t count_components(const LabelVolume& l) {
    const Dims3 d = l.dims;
    std::vector<char> seen(d.count(), 0);
    std::size_t n = 0;
    for (std::size_t start = 0; start < d.count(); ++start) {
        if (l.labels[start] == 0 || seen[start]) continue;
        ++n;
        std::queue<std::size_t> q;
        q.push(start);
        seen[start] = 1;
        while (!q.empty()) {
            const std::size_t i = q.front();
            q.pop();
            const long z = static_cast<long>(i / (d.y * d.x));
            const long y = static_cast<long>((i / d.x) % d.y);
            const long x = static_cast<long>(i % d.x);
            for (long dz = -1; dz <= 1; ++dz)
                for (long dy = -1; dy <= 1; ++dy)
                    for (long dx = -1; dx <= 1; ++dx) {
                        const long nz = z + dz, ny = y + dy, nx = x + dx;
                        if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<long>(d.z) || ny >= static_cast<long>(d.y) ||
                            nx >= static_cast<long>(d.x))
                            continue;
                        const std::size_t j = d.index(static_cast<std::size_t>(nz), static_cast<std::size_t>(ny), static_cast<std::size_t>(nx));
                        if (l.labels[j] != 0 && !seen[j]) {
                            seen[j] = 1;
                            q.push(j);
                        }
                    }
        }
    }
    return n;
}

std::set<std::uint32_t> instance_ids(const LabelVolume& l) {
    std::set<std::uint32_t> ids;
    for (auto v : l.labels)
        if (v != 0) ids.insert(v);
    return ids;
}

SynthSpec single(StructureKind k, Dims3 dims = {16, 16, 16}, std::uint64_t seed = 7) {
    SynthSpec s;
    s.n_volumes = 1;
    s.dims = dims;
    s.seed = seed;
    s.modality_mix = {{Modality::ct_like, 1.0}};
    s.structure_mix = {{k, 1.0}};
    return s;
}

template <class F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::config;
}

} // namespace

TEST_CASE("empty structure yields all background") {
    const auto d = synth_dataset(single(StructureKind::none));
    REQUIRE(d.volumes.size() == 1);
    CHECK(d.volumes[0].attributes.count == 0);
    CHECK(instance_ids(d.labels[0]).empty());
}

TEST_CASE("two lesions give two instance ids and two connected components") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto spec = single(StructureKind::ellipsoid_lesion, {16, 16, 16}, seed);
        spec.lesion_count = {2, 2};
        const auto d = synth_dataset(spec);
        CHECK(d.volumes[0].attributes.count == 2);
        CHECK(instance_ids(d.labels[0]).size() == 2);
        CHECK(count_components(d.labels[0]) == 2);
    }
}

TEST_CASE("synthesis is deterministic and per-index reproducible") {
    SynthSpec spec;
    spec.n_volumes = 6;
    spec.dims = {16, 16, 16};
    spec.seed = 99;
    const auto a = synth_dataset(spec);
    const auto b = synth_dataset(spec);
    for (std::size_t i = 0; i < a.volumes.size(); ++i) {
        CHECK(a.volumes[i].voxels == b.volumes[i].voxels);
        CHECK(a.labels[i].labels == b.labels[i].labels);
        const auto [v, l] = synth_volume(spec, i);
        CHECK(v.voxels == a.volumes[i].voxels);
    }
    // A shifted base seed reproduces the shifted subsequence.
    spec.seed = 100;
    const auto c = synth_dataset(spec);
    CHECK(c.volumes[0].voxels == a.volumes[1].voxels);
}

TEST_CASE("label consistency over many generated volumes") {
    SynthSpec spec;
    spec.n_volumes = 60;
    spec.dims = {16, 16, 16};
    spec.seed = 3;
    const auto d = synth_dataset(spec);
    std::set<Modality> modalities;
    for (std::size_t i = 0; i < d.volumes.size(); ++i) {
        const auto& a = d.volumes[i].attributes;
        modalities.insert(d.volumes[i].modality);
        CHECK(instance_ids(d.labels[i]).size() == a.count);
        CHECK((a.count == 0) == (a.structure_kind == StructureKind::none));
        if (a.structure_kind == StructureKind::ellipsoid_lesion || a.structure_kind == StructureKind::tubular_vessel) {
            CHECK(count_components(d.labels[i]) == a.count);
        }
        if (d.volumes[i].modality == Modality::em_like) CHECK(a.structure_kind == StructureKind::dense_cells);
        CHECK(a.contrast_sign == (d.volumes[i].modality == Modality::ct_like ? ContrastSign::hyper : ContrastSign::hypo));
    }
    CHECK(modalities.size() == 3);
}

TEST_CASE("lesion contrast follows the declared sign") {
    auto spec = single(StructureKind::ellipsoid_lesion, {24, 24, 24}, 11);
    const auto d = synth_dataset(spec);
    double fg = 0, bg = 0;
    std::size_t nf = 0, nb = 0;
    for (std::size_t i = 0; i < d.labels[0].labels.size(); ++i) {
        if (d.labels[0].labels[i]) {
            fg += d.volumes[0].voxels[i];
            ++nf;
        } else {
            bg += d.volumes[0].voxels[i];
            ++nb;
        }
    }
    CHECK(fg / static_cast<double>(nf) > bg / static_cast<double>(nb) + 0.2);
}

TEST_CASE("synth spec errors") {
    auto s = single(StructureKind::none);
    s.dims = {4, 16, 16};
    CHECK(kind_of([&] { synth_dataset(s); }) == ErrorKind::config);
    s = single(StructureKind::none);
    s.structure_mix.clear();
    CHECK(kind_of([&] { synth_dataset(s); }) == ErrorKind::config);
    s = single(StructureKind::none);
    s.modality_mix = {{Modality::ct_like, 0.0}};
    CHECK(kind_of([&] { synth_dataset(s); }) == ErrorKind::config);
    s = single(StructureKind::none);
    s.n_volumes = 0;
    CHECK(kind_of([&] { synth_dataset(s); }) == ErrorKind::config);
}

TEST_CASE("synth spec json round trip") {
    SynthSpec s;
    s.n_volumes = 5;
    s.seed = 42;
    s.lesion_count = {2, 2};
    const auto back = SynthSpec::from_json(s.to_json());
    CHECK(back.to_json() == s.to_json());
    CHECK(synth_dataset(back).volumes[3].voxels == synth_dataset(s).volumes[3].voxels);
}

TEST_CASE("full-volume patch is an exact copy") {
    const auto d = synth_dataset(single(StructureKind::ellipsoid_lesion));
    Rng rng(1);
    const auto p = sample_patch(d.volumes[0], d.volumes[0].dims, rng);
    CHECK(p.origin == Dims3{0, 0, 0});
    CHECK(p.voxels == d.volumes[0].voxels);
}

TEST_CASE("patch origins stay within bounds and cover the valid range") {
    const auto d = synth_dataset(single(StructureKind::none));
    Rng rng(5);
    std::set<std::size_t> seen_z;
    for (int i = 0; i < 2000; ++i) {
        const auto p = sample_patch(d.volumes[0], {8, 8, 8}, rng);
        CHECK(p.origin.z <= 8);
        CHECK(p.origin.y <= 8);
        CHECK(p.origin.x <= 8);
        seen_z.insert(p.origin.z);
    }
    CHECK(seen_z.size() == 9);
    Rng a(77), b(77);
    CHECK(sample_patch(d.volumes[0], {8, 8, 8}, a).origin == sample_patch(d.volumes[0], {8, 8, 8}, b).origin);
}

TEST_CASE("patch voxels match direct indexing under fuzzing") {
    Rng fuzz(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        Volume v;
        v.id = "f";
        v.dims = {static_cast<std::size_t>(fuzz.range(8, 14)), static_cast<std::size_t>(fuzz.range(8, 14)),
                  static_cast<std::size_t>(fuzz.range(8, 14))};
        v.voxels.resize(v.dims.count());
        for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i);
        const Dims3 pd{static_cast<std::size_t>(fuzz.range(1, static_cast<std::int64_t>(v.dims.z))),
                       static_cast<std::size_t>(fuzz.range(1, static_cast<std::int64_t>(v.dims.y))),
                       static_cast<std::size_t>(fuzz.range(1, static_cast<std::int64_t>(v.dims.x)))};
        const auto p = sample_patch(v, pd, fuzz);
        REQUIRE(p.origin.z + pd.z <= v.dims.z);
        REQUIRE(p.origin.y + pd.y <= v.dims.y);
        REQUIRE(p.origin.x + pd.x <= v.dims.x);
        const std::size_t z = fuzz.below(pd.z), y = fuzz.below(pd.y), x = fuzz.below(pd.x);
        CHECK(p.voxels[pd.index(z, y, x)] == v.at(p.origin.z + z, p.origin.y + y, p.origin.x + x));
    }
}

TEST_CASE("oversized patch is a dimension error") {
    const auto d = synth_dataset(single(StructureKind::none));
    Rng rng(1);
    CHECK(kind_of([&] { sample_patch(d.volumes[0], {17, 8, 8}, rng); }) == ErrorKind::dimension);
}

TEST_CASE("identity augmentation is bit exact") {
    const auto d = synth_dataset(single(StructureKind::ellipsoid_lesion));
    const auto p = whole_volume_patch(d.volumes[0]);
    for (std::uint64_t seed : {0ull, 1ull, 12345ull}) {
        auto spec = AugmentationSpec::identity();
        spec.rng_seed = seed;
        const auto [a, b] = augment_views(p, spec);
        CHECK(a == p);
        CHECK(b == p);
    }
}

TEST_CASE("flip augmentation is an involution") {
    const auto d = synth_dataset(single(StructureKind::ellipsoid_lesion));
    const auto p = whole_volume_patch(d.volumes[0]);
    int flipped = 0;
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
        AugmentationSpec spec;
        spec.flip_z = true;
        spec.rng_seed = seed;
        const auto [a, b] = augment_views(p, spec);
        const auto [aa, ab] = augment_views(a, spec);
        const auto [ba, bb] = augment_views(b, spec);
        CHECK(aa == p);
        CHECK(bb == p);
        if (a != p) {
            ++flipped;
            // Oracle: mirror along z by direct indexing.
            const Dims3 dd = p.dims;
            bool mirror = true;
            for (std::size_t z = 0; z < dd.z; ++z)
                for (std::size_t y = 0; y < dd.y; ++y)
                    for (std::size_t x = 0; x < dd.x; ++x)
                        mirror = mirror && a.voxels[dd.index(z, y, x)] == p.voxels[dd.index(dd.z - 1 - z, y, x)];
            CHECK(mirror);
        }
    }
    CHECK(flipped > 0);
    CHECK(flipped < 16);
}

TEST_CASE("intensity jitter is a single multiplicative factor per view") {
    const auto d = synth_dataset(single(StructureKind::ellipsoid_lesion));
    const auto p = whole_volume_patch(d.volumes[0]);
    AugmentationSpec spec;
    spec.jitter_lo = 0.9;
    spec.jitter_hi = 1.1;
    spec.rng_seed = 31;
    const auto [a, b] = augment_views(p, spec);
    for (const Patch* v : {&a, &b}) {
        double c = 0.0;
        for (std::size_t i = 0; i < p.voxels.size(); ++i) {
            if (std::abs(p.voxels[i]) < 1e-3f) continue;
            const double ratio = static_cast<double>(v->voxels[i]) / static_cast<double>(p.voxels[i]);
            if (c == 0.0) c = ratio;
            CHECK(ratio == doctest::Approx(c).epsilon(1e-6));
        }
        CHECK(c >= 0.9 - 1e-6);
        CHECK(c <= 1.1 + 1e-6);
    }
    CHECK(a != b);
}

TEST_CASE("noise and crop jitter produce distinct views deterministically") {
    const auto d = synth_dataset(single(StructureKind::ellipsoid_lesion));
    const auto p = whole_volume_patch(d.volumes[0]);
    AugmentationSpec spec;
    spec.noise_sigma = 0.05;
    spec.crop_jitter = 2;
    spec.rng_seed = 8;
    const auto [a, b] = augment_views(p, spec);
    const auto [a2, b2] = augment_views(p, spec);
    CHECK(a == a2);
    CHECK(b == b2);
    CHECK(a != b);
    CHECK(a.dims == p.dims);
    spec.jitter_lo = 0.0;
    CHECK(kind_of([&] { augment_views(p, spec); }) == ErrorKind::config);
}

TEST_CASE("slices index the z plane") {
    const auto d = synth_dataset(single(StructureKind::tubular_vessel));
    const auto& v = d.volumes[0];
    Rng rng(4);
    std::set<std::size_t> seen;
    for (int i = 0; i < 400; ++i) {
        const auto s = sample_slice(v, rng);
        REQUIRE(s.index < v.dims.z);
        seen.insert(s.index);
        REQUIRE(s.pixels.size() == v.dims.y * v.dims.x);
        for (std::size_t y = 0; y < v.dims.y; ++y)
            for (std::size_t x = 0; x < v.dims.x; ++x) CHECK(s.pixels[y * v.dims.x + x] == v.at(s.index, y, x));
    }
    CHECK(seen.size() == v.dims.z);
    Rng a(9), b(9);
    CHECK(sample_slice(v, a).index == sample_slice(v, b).index);

    Volume thin;
    thin.dims = {1, 4, 4};
    thin.voxels.assign(16, 1.0f);
    for (int i = 0; i < 10; ++i) CHECK(sample_slice(thin, rng).index == 0);
}

TEST_CASE("volume file round trip is bit exact") {
    const auto dir = test_support::temp_dir("volumes_io");
    SynthSpec spec;
    spec.n_volumes = 4;
    spec.dims = {12, 10, 9};
    const auto d = synth_dataset(spec);
    write_dataset(d, dir);
    const auto back = read_dataset(dir);
    REQUIRE(back.volumes.size() == 4);
    REQUIRE(back.labels.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& a = d.volumes[i];
        const auto& b = back.volumes[i];
        CHECK(a.id == b.id);
        CHECK(a.dims == b.dims);
        CHECK(a.spacing == b.spacing);
        CHECK(a.modality == b.modality);
        CHECK(a.dataset_name == b.dataset_name);
        CHECK(a.attributes == b.attributes);
        CHECK(std::memcmp(a.voxels.data(), b.voxels.data(), a.voxels.size() * 4) == 0);
        CHECK(d.labels[i].labels == back.labels[i].labels);
    }
    // The .raw path is accepted too.
    CHECK(read_volume(dir / (d.volumes[0].id + ".raw")).voxels == d.volumes[0].voxels);
}

TEST_CASE("byte count and sidecar errors") {
    const auto dir = test_support::temp_dir("volumes_bytes");
    Volume v;
    v.id = "tiny";
    v.dims = {2, 2, 2};
    v.voxels = {1, 2, 3, 4, 5, 6, 7, 8};
    write_volume(v, dir);
    CHECK(read_volume(dir / "tiny.json").voxels == v.voxels);

    // Seven floats on disk.
    {
        std::ofstream out(dir / "tiny.raw", std::ios::binary | std::ios::trunc);
        const std::vector<float> seven(7, 1.0f);
        out.write(reinterpret_cast<const char*>(seven.data()), 28);
    }
    try {
        read_volume(dir / "tiny.json");
        FAIL("truncated payload accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::format);
        const std::string msg = e.what();
        CHECK(msg.find("expected 32 bytes") != std::string::npos);
        CHECK(msg.find("got 28") != std::string::npos);
    }

    std::filesystem::remove(dir / "tiny.json");
    CHECK(kind_of([&] { read_volume(dir / "tiny.raw"); }) == ErrorKind::format);
}

TEST_CASE("label consistency across sizes") {
    for (std::size_t n : {8u, 24u, 32u}) {
        SynthSpec spec;
        spec.n_volumes = n == 32 ? 12 : 30;
        spec.dims = {n, n, n};
        spec.seed = 1000 + n;
        const auto d = synth_dataset(spec);
        for (std::size_t i = 0; i < d.volumes.size(); ++i) {
            const auto& a = d.volumes[i].attributes;
            CHECK(instance_ids(d.labels[i]).size() == a.count);
            if (a.structure_kind == StructureKind::ellipsoid_lesion || a.structure_kind == StructureKind::tubular_vessel) {
                CHECK(count_components(d.labels[i]) == a.count);
            }
        }
    }
}

TEST_CASE("every axial slice cuts every lesion and vessel") {
    SynthSpec spec;
    spec.n_volumes = 40;
    spec.dims = {24, 24, 24};
    spec.seed = 555;
    spec.modality_mix = {{Modality::ct_like, 1.0}, {Modality::mri_like, 1.0}};
    spec.structure_mix = {{StructureKind::ellipsoid_lesion, 1.0}, {StructureKind::tubular_vessel, 1.0}};
    const auto d = synth_dataset(spec);
    for (std::size_t i = 0; i < d.volumes.size(); ++i) {
        const auto& l = d.labels[i];
        for (std::size_t z = 0; z < l.dims.z; ++z) {
            std::set<std::uint32_t> present;
            for (std::size_t y = 0; y < l.dims.y; ++y)
                for (std::size_t x = 0; x < l.dims.x; ++x)
                    if (l.at(z, y, x)) present.insert(l.at(z, y, x));
            CHECK(present.size() == d.volumes[i].attributes.count);
        }
    }
}
