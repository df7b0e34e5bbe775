#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gtgm/error.hpp"
#include "gtgm/trainer.hpp"
#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace gtgm;
using namespace gtgm::trainer;

namespace {

volumes::Dataset small_corpus(std::size_t n, std::uint64_t seed = 5) {
    volumes::SynthSpec spec;
    spec.n_volumes = n;
    spec.dims = {16, 16, 16};
    spec.seed = seed;
    spec.cell_count = {4, 4};
    spec.structure_mix.push_back({volumes::StructureKind::dense_cells, 0.5});
    return volumes::synth_dataset(spec);
}

std::vector<captioner::ImageTextPair> template_pairs(const volumes::Dataset& d) {
    std::vector<captioner::Caption> caps;
    for (const auto& v : d.volumes) caps.push_back(captioner::template_caption(v));
    return captioner::build_pairs(d.volumes, caps);
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.batch = 4;
    c.iterations = 6;
    c.seed = 9;
    c.patch = {8, 8, 8};
    c.encoder.channels = {2, 3, 6};
    c.text_width = 8;
    c.embed_dim = 5;
    c.projector_hidden = 7;
    return c;
}

FinetuneConfig tiny_finetune() {
    FinetuneConfig c;
    c.iterations = 4;
    c.label_fraction = 0.5;
    c.patch = {8, 8, 8};
    c.encoder.channels = {2, 3, 6};
    c.decoder.channels = {2, 2, 3};
    return c;
}

bool has_kind(const std::function<void()>& f, ErrorKind kind) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind() == kind;
    }
    return false;
}

} // namespace

TEST_CASE("pretrain config round trip, hashing and validation") {
    const auto c = tiny_config();
    const auto back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());

    auto longer = c;
    longer.iterations = 100;
    longer.checkpoint_interval = 10;
    CHECK(longer.hash() == c.hash());
    auto other = c;
    other.seed = 10;
    CHECK(other.hash() != c.hash());

    auto j = c.to_json();
    j["learning_rate"] = 1.0;
    j["epochs"] = 3;
    try {
        TrainConfig::from_json(j);
        FAIL("unknown keys accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
        CHECK(std::string(e.what()).find("epochs") != std::string::npos);
        CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
    }
    auto nested = c.to_json();
    nested["weights"]["tau"] = 0.1;
    CHECK(has_kind([&] { TrainConfig::from_json(nested); }, ErrorKind::config));

    auto none = c;
    none.terms = {false, false, false};
    CHECK(has_kind([&] { none.validate(); }, ErrorKind::config));
    auto cap_only = c;
    cap_only.terms = {true, false, true};
    CHECK(has_kind([&] { cap_only.validate(); }, ErrorKind::config));
    auto single = c;
    single.batch = 1;
    CHECK(has_kind([&] { single.validate(); }, ErrorKind::config));
    single.terms = {true, true, false};
    CHECK_NOTHROW(single.validate());
    auto odd = c;
    odd.patch = {8, 8, 12};
    CHECK(has_kind([&] { odd.validate(); }, ErrorKind::dimension));
}

TEST_CASE("pretraining is deterministic and resumes bit-exactly") {
    const auto data = small_corpus(6);
    const auto pairs = template_pairs(data);
    const auto cfg = tiny_config();

    const auto a = pretrain(data.volumes, pairs, cfg);
    const auto b = pretrain(data.volumes, pairs, cfg);
    REQUIRE(a.curve.size() == cfg.iterations);
    CHECK(a.curve == b.curve);
    CHECK(encode_checkpoint(a.final_checkpoint) == encode_checkpoint(b.final_checkpoint));
    CHECK(loss_csv(a.curve) == loss_csv(b.curve));
    for (const auto& r : a.curve) {
        CHECK(std::isfinite(r.total));
        CHECK(r.grad_norm > 0.0);
        CHECK(r.total == doctest::Approx(cfg.weights.lambda_vlp * r.vlp + cfg.weights.lambda_vr * r.vr).epsilon(1e-12));
    }

    auto half_cfg = cfg;
    half_cfg.iterations = 3;
    Pretrainer first(half_cfg, data.volumes, pairs);
    first.run();
    const auto mid = decode_checkpoint(encode_checkpoint(first.checkpoint()));
    CHECK(mid.metadata.at("iteration").get<std::size_t>() == 3);

    // Resuming under the full-length config continues the same stream.
    auto resumed_ckpt = mid;
    resumed_ckpt.metadata["config"] = cfg.to_json();
    Pretrainer second(resumed_ckpt, data.volumes, pairs);
    CHECK(second.iteration() == 3);
    second.run();
    std::vector<LossRow> joined = first.curve();
    joined.insert(joined.end(), second.curve().begin(), second.curve().end());
    CHECK(joined == a.curve);
    CHECK(encode_checkpoint(second.checkpoint()) == encode_checkpoint(a.final_checkpoint));

    auto other_pairs = pairs;
    other_pairs[0].caption = captioner::template_caption(data.volumes[1]);
    CHECK(has_kind([&] { Pretrainer t(resumed_ckpt, data.volumes, other_pairs); }, ErrorKind::config));

    auto tampered = mid;
    tampered.metadata["config_hash"] = "0000000000000000";
    CHECK(has_kind([&] { Pretrainer t(tampered, data.volumes, pairs); }, ErrorKind::format));
}

TEST_CASE("checkpoints fire at intervals and the text encoder stays frozen") {
    const auto data = small_corpus(6);
    const auto pairs = template_pairs(data);
    auto cfg = tiny_config();
    cfg.checkpoint_interval = 2;
    const auto dir = test_support::temp_dir("pretrain_ckpts");
    const auto r = pretrain(data.volumes, pairs, cfg, dir);
    REQUIRE(r.written.size() == 3);
    CHECK(r.written.back().filename() == "ckpt_6.bin");
    const auto last = read_checkpoint(r.written.back());
    CHECK(encode_checkpoint(last) == encode_checkpoint(r.final_checkpoint));

    Pretrainer t(cfg, data.volumes, pairs);
    for (auto* p : t.model().trainable()) CHECK(p->name.rfind("text_encoder", 0) != 0);
    const std::vector<std::vector<std::uint32_t>> probe{pairs[0].caption.token_ids, pairs[1].caption.token_ids};
    const auto before = t.model().text_encoder.encode_batch(probe);
    const auto text_block = t.model().text_encoder.as_block();
    t.run();
    CHECK(t.model().text_encoder.encode_batch(probe).values() == before.values());
    CHECK(t.model().text_encoder.as_block().value == text_block.value);

    const auto enc = encoder_from_checkpoint(r.final_checkpoint);
    const auto patch = volumes::crop(data.volumes[0], {0, 0, 0}, {8, 8, 8});
    CHECK(enc.forward(encoders::patch_to_map(patch)).output ==
          t.model().encoder.forward(encoders::patch_to_map(patch)).output);
}

TEST_CASE("term switches change what the step optimizes") {
    const auto data = small_corpus(6);
    const auto pairs = template_pairs(data);
    for (const auto& terms : ablation_terms()) {
        auto cfg = tiny_config();
        cfg.iterations = 2;
        cfg.terms = terms;
        const auto r = pretrain(data.volumes, pairs, cfg);
        for (const auto& row : r.curve) {
            if (!terms.vlp) CHECK(row.vlp == 0.0);
            if (!terms.vr) CHECK(row.vr == 0.0);
            CHECK(row.total == doctest::Approx(cfg.weights.lambda_vlp * row.vlp + cfg.weights.lambda_vr * row.vr).epsilon(1e-12));
        }
    }
    CHECK(ablation_terms().size() == 4);
    CHECK(ablation_terms()[0].label() == "vr");
    CHECK(ablation_terms()[3].label() == "cap+vlp+vr");

    // Captions and dataset-name texts differ, so the curves do too.
    auto with_cap = tiny_config();
    with_cap.terms = {true, true, false};
    auto without = with_cap;
    without.terms.cap = false;
    CHECK(pretrain(data.volumes, pairs, with_cap).curve != pretrain(data.volumes, pairs, without).curve);

    auto raw = tiny_config();
    raw.vlp_image = VlpImageSource::raw_patch;
    CHECK(std::isfinite(pretrain(data.volumes, pairs, raw).curve.back().total));
}

TEST_CASE("pretraining input errors") {
    const auto data = small_corpus(3);
    auto pairs = template_pairs(data);
    auto cfg = tiny_config();
    CHECK(has_kind([&] { Pretrainer t(cfg, data.volumes, pairs); }, ErrorKind::config));
    cfg.batch = 2;
    auto bad = pairs;
    bad[1].volume_id = "elsewhere";
    CHECK(has_kind([&] { Pretrainer t(cfg, data.volumes, bad); }, ErrorKind::linkage));
    cfg.patch = {32, 32, 32};
    CHECK(has_kind([&] { Pretrainer t(cfg, data.volumes, pairs); }, ErrorKind::dimension));
}

TEST_CASE("segmentation loss oracles and gradient") {
    Rng rng(3);
    const Dims3 d{2, 3, 2};
    std::vector<FeatureMap> logits;
    std::vector<volumes::LabelVolume> targets(2);
    for (std::size_t b = 0; b < 2; ++b) {
        FeatureMap m(3, d);
        for (double& v : m.data) v = rng.normal();
        logits.push_back(m);
        targets[b].dims = d;
        targets[b].labels.resize(d.count());
        for (auto& l : targets[b].labels) l = static_cast<std::uint32_t>(rng.below(3));
    }
    const std::vector<const volumes::LabelVolume*> tp{&targets[0], &targets[1]};
    const auto loss = seg_loss(logits, tp, 1.0);
    CHECK(loss.total == doctest::Approx(loss.dice + loss.ce).epsilon(1e-14));

    for (std::size_t b = 0; b < 2; ++b) {
        auto& x = logits[b].data;
        const auto numeric = test_support::numeric_gradient(x, [&] { return seg_loss(logits, tp, 1.0).total; }, 1e-5);
        CHECK(test_support::relative_error(loss.grad[b].data, numeric) < 1e-7);
    }

    // Uniform logits: CE is ln C for every voxel.
    std::vector<FeatureMap> flat{FeatureMap(3, d), FeatureMap(3, d)};
    CHECK(seg_loss(flat, tp, 1.0).ce == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    // Confident correct logits drive both parts to zero.
    std::vector<FeatureMap> sure{FeatureMap(3, d), FeatureMap(3, d)};
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < d.count(); ++i) sure[b].data[targets[b].labels[i] * d.count() + i] = 60.0;
    const auto perfect = seg_loss(sure, tp, 0.0);
    CHECK(perfect.ce < 1e-20);
    CHECK(perfect.dice < 1e-12);

    std::vector<FeatureMap> wrong{FeatureMap(4, d), FeatureMap(3, d)};
    CHECK(has_kind([&] { seg_loss(wrong, tp, 1.0); }, ErrorKind::dimension));
}

TEST_CASE("splits are nested, disjoint and sized by the fraction") {
    FinetuneConfig c;
    c.heldout_fraction = 0.0;
    c.label_fraction = 1.0;
    auto s = make_split(10, c);
    CHECK(s.train.size() == 10);
    CHECK(s.heldout.empty());

    c.heldout_fraction = 0.2;
    c.label_fraction = 0.1;
    s = make_split(100, c);
    CHECK(s.heldout.size() == 20);
    CHECK(s.train.size() == 8);
    std::set<std::size_t> held(s.heldout.begin(), s.heldout.end());
    for (auto i : s.train) CHECK(held.count(i) == 0);

    auto wider = c;
    wider.label_fraction = 0.5;
    const auto w = make_split(100, wider);
    CHECK(w.heldout == s.heldout);
    CHECK(std::equal(s.train.begin(), s.train.end(), w.train.begin()));

    auto reseeded = c;
    reseeded.seed = 77;
    const auto r = make_split(100, reseeded);
    CHECK(r.heldout == s.heldout);
    CHECK(r.train != s.train);

    c.label_fraction = 0.01;
    CHECK(make_split(20, c).train.size() == 1);
    c.label_fraction = 0.0;
    CHECK(has_kind([&] { make_split(20, c); }, ErrorKind::config));
}

TEST_CASE("semantic targets mark membranes for dense cells") {
    volumes::Volume v;
    v.id = "cells";
    v.dims = {1, 2, 4};
    v.attributes.structure_kind = volumes::StructureKind::dense_cells;
    volumes::LabelVolume l;
    l.dims = v.dims;
    l.kind = volumes::LabelKind::instance;
    l.labels = {1, 1, 2, 2, 1, 1, 2, 2};
    CHECK(semantic_target(v, l).labels == std::vector<std::uint32_t>{0, 1, 0, 0, 0, 1, 0, 0});
    v.attributes.structure_kind = volumes::StructureKind::ellipsoid_lesion;
    l.labels = {0, 3, 0, 0, 0, 0, 5, 0};
    CHECK(semantic_target(v, l).labels == std::vector<std::uint32_t>{0, 1, 0, 0, 0, 0, 1, 0});
}

TEST_CASE("finetuning, prediction and the sweep harness") {
    const auto data = small_corpus(8);
    const auto pairs = template_pairs(data);
    auto cfg = tiny_config();
    cfg.iterations = 2;
    cfg.checkpoint_interval = 1;
    std::vector<Checkpoint> ckpts;
    Pretrainer t(cfg, data.volumes, pairs);
    t.run([&](const Checkpoint& c) { ckpts.push_back(c); });
    REQUIRE(ckpts.size() == 2);

    const auto ft = tiny_finetune();
    const auto a = finetune(&ckpts[1], data, ft);
    const auto b = finetune(&ckpts[1], data, ft);
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.mean_dice == b.mean_dice);
    CHECK(a.mean_dice >= 0.0);
    CHECK(a.mean_dice <= 1.0);
    CHECK(a.labeled == make_split(8, ft).train.size());
    CHECK(eval_csv(a.rows).rfind("run_seed,metric,value\n", 0) == 0);
    const auto random_init = finetune(nullptr, data, ft);
    CHECK(random_init.loss_curve != a.loss_curve);

    const auto& v = data.volumes[make_split(8, ft).heldout.at(0)];
    const auto pred = predict(a.checkpoint, v);
    CHECK(pred.dims == v.dims);

    const auto rows = sweep(ckpts, data, ft, {1, 2});
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].iteration == 1);
    CHECK(rows[3].iteration == 2);
    CHECK(rows[0].per_seed.size() == 2);
    const auto same = sweep({ckpts[1], ckpts[1]}, data, ft, {4});
    CHECK(same[0].mean == same[3].mean);
    CHECK(same[0].stddev == 0.0);

    auto other_cfg = cfg;
    other_cfg.seed = 123;
    const auto foreign = pretrain(data.volumes, pairs, other_cfg).final_checkpoint;
    try {
        sweep({ckpts[0], foreign}, data, ft, {1});
        FAIL("mixed sweep accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
        CHECK(std::string(e.what()).find(other_cfg.hash()) != std::string::npos);
    }
}

TEST_CASE("finetune config validation") {
    auto j = tiny_finetune().to_json();
    CHECK(FinetuneConfig::from_json(j).to_json() == j);
    j["lr"] = 0.1;
    CHECK(has_kind([&] { FinetuneConfig::from_json(j); }, ErrorKind::config));
    auto c = tiny_finetune();
    c.label_fraction = 1.5;
    CHECK(has_kind([&] { c.validate(); }, ErrorKind::config));
}

TEST_CASE("loss endpoints average the head and tail windows") {
    std::vector<LossRow> curve;
    for (std::size_t i = 0; i < 10; ++i) curve.push_back({i + 1, static_cast<double>(10 - i), 0, 0, 0});
    const auto [head, tail] = loss_endpoints(curve, 3);
    CHECK(head == doctest::Approx(9.0));
    CHECK(tail == doctest::Approx(2.0));
    CHECK(loss_endpoints(curve, 50).first == doctest::Approx(5.5));
}
