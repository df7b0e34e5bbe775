// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [criterion numbers...]; no arguments runs all eight.

#include "gtgm/captioner.hpp"
#include "gtgm/error.hpp"
#include "gtgm/gradcheck.hpp"
#include "gtgm/metrics.hpp"
#include "gtgm/objectives.hpp"
#include "gtgm/params.hpp"
#include "gtgm/rng.hpp"
#include "gtgm/trainer.hpp"
#include "gtgm/volumes.hpp"

#include "metric_oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace gtgm;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

objectives::EmbeddingBatch batch(const Matrix& m, objectives::Side side) {
    return {m, side};
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = rng.normal();
    return m;
}

Outcome gradient_suite() {
    const auto suites = gradcheck::parse_suites({"all"});
    const auto report = gradcheck::run(suites, 2024);
    std::set<std::string> ops;
    std::string worst;
    for (const auto& op : report.ops) {
        ops.insert(op.op);
        worst += fmt(" %s=%.1e", op.op.c_str(), op.max_relative_error);
    }
    const std::set<std::string> expected{"vr_loss", "vlp_loss", "total_loss", "lm_loss", "projector", "encoder_decoder_seg_loss"};
    const bool pass = report.passed() && report.instances() >= 200 && report.seconds < 60.0 && ops == expected;
    return {pass, fmt("%zu instances in %.1fs;", report.instances(), report.seconds) + worst};
}

Outcome loss_oracles() {
    using objectives::Side;
    const Matrix eye = Matrix::from_rows({{1, 0}, {0, 1}});
    const objectives::LossWeights w;
    const double same = objectives::vr_loss(batch(eye, Side::image_view1), batch(eye, Side::image_view2), w).total;
    const double neg =
        objectives::vr_loss(batch(eye, Side::image_view1), batch(-1.0 * eye, Side::image_view2), w).total;
    const Matrix one_v = Matrix::from_rows({{0.4, -1.0, 2.5}});
    const Matrix one_t = Matrix::from_rows({{-3.0, 0.1, 0.7}});
    const double k1 = objectives::vlp_loss(batch(one_v, Side::image_vlp), batch(one_t, Side::text), 0.07).total;
    const double k2 = objectives::vlp_loss(batch(eye, Side::image_vlp), batch(eye, Side::text), 1.0).total;
    const double k2_ref = std::log1p(std::exp(-1.0));
    const bool pass = std::abs(same - w.lambda_offdiag) < 1e-12 && std::abs(neg - (4.0 + w.lambda_offdiag)) < 1e-12 &&
                      k1 == 0.0 && std::abs(k2 - k2_ref) < 1e-12;
    return {pass, fmt("vr=%.15g vr_neg=%.15g vlp_k1=%g vlp_k2_err=%.1e", same, neg, k1, std::abs(k2 - k2_ref))};
}

// Centered, mutually orthogonal columns of equal norm: the normalized cross-correlation of the
// matrix with any per-feature positive affine image of itself is the identity.
Matrix decorrelated(Rng& rng, std::size_t k, std::size_t d) {
    Matrix m = random_matrix(rng, k, d);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < k; ++i) mean += m(i, j) / static_cast<double>(k);
        for (std::size_t i = 0; i < k; ++i) m(i, j) -= mean;
        for (std::size_t p = 0; p < j; ++p) {
            double dot = 0.0;
            for (std::size_t i = 0; i < k; ++i) dot += m(i, j) * m(i, p);
            for (std::size_t i = 0; i < k; ++i) m(i, j) -= dot * m(i, p);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < k; ++i) norm += m(i, j) * m(i, j);
        for (std::size_t i = 0; i < k; ++i) m(i, j) /= std::sqrt(norm);
    }
    return m;
}

Outcome objective_invariances() {
    using objectives::Side;
    Rng rng(4242);
    const objectives::LossWeights w;
    std::size_t perm_bad = 0, affine_bad = 0, iff_bad = 0;
    const std::size_t trials = 200;
    for (std::size_t t = 0; t < trials; ++t) {
        const auto k = static_cast<std::size_t>(rng.range(2, 10));
        const auto d = static_cast<std::size_t>(rng.range(2, 8));
        const Matrix v = random_matrix(rng, k, d), x = random_matrix(rng, k, d);
        std::vector<std::size_t> perm(k);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(perm);
        Matrix pv(k, d), px(k, d);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                pv(i, j) = v(perm[i], j);
                px(i, j) = x(perm[i], j);
            }
        const double sigma = rng.uniform(0.05, 1.0);
        const double base = objectives::vlp_loss(batch(v, Side::image_vlp), batch(x, Side::text), sigma).total;
        const double permuted = objectives::vlp_loss(batch(pv, Side::image_vlp), batch(px, Side::text), sigma).total;
        if (std::abs(base - permuted) > 1e-10 * std::max(1.0, std::abs(base))) ++perm_bad;

        Matrix av = v, ax = x;
        for (std::size_t j = 0; j < d; ++j) {
            const double s1 = rng.uniform(0.1, 5.0), o1 = rng.uniform(-3.0, 3.0);
            const double s2 = rng.uniform(0.1, 5.0), o2 = rng.uniform(-3.0, 3.0);
            for (std::size_t i = 0; i < k; ++i) {
                av(i, j) = s1 * v(i, j) + o1;
                ax(i, j) = s2 * x(i, j) + o2;
            }
        }
        const double vr = objectives::vr_loss(batch(v, Side::image_view1), batch(x, Side::image_view2), w).total;
        const double vr_affine = objectives::vr_loss(batch(av, Side::image_view1), batch(ax, Side::image_view2), w).total;
        if (std::abs(vr - vr_affine) > 1e-9 * std::max(1.0, vr)) ++affine_bad;

        // Random views: C differs from I, so the loss must be positive.
        const Matrix c = matmul_tn(objectives::batch_normalize(v), objectives::batch_normalize(x));
        double off_identity = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) off_identity = std::max(off_identity, std::abs(c(i, j) - (i == j ? 1.0 : 0.0)));
        if (off_identity > 1e-6 && !(vr > 0.0)) ++iff_bad;

        // Constructed views with C = I: the loss vanishes.
        const auto dk = static_cast<std::size_t>(rng.range(2, 6));
        const auto kk = dk + 1 + static_cast<std::size_t>(rng.range(0, 6));
        const Matrix q = decorrelated(rng, kk, dk);
        Matrix q2 = q;
        for (std::size_t j = 0; j < dk; ++j) {
            const double s = rng.uniform(0.1, 5.0), o = rng.uniform(-3.0, 3.0);
            for (std::size_t i = 0; i < kk; ++i) q2(i, j) = s * q(i, j) + o;
        }
        if (objectives::vr_loss(batch(q, Side::image_view1), batch(q2, Side::image_view2), w).total > 1e-12) ++iff_bad;
    }
    return {perm_bad == 0 && affine_bad == 0 && iff_bad == 0,
            fmt("%zu instances per property; violations: permutation %zu, affine %zu, zero-iff-identity %zu", trials,
                perm_bad, affine_bad, iff_bad)};
}

volumes::LabelVolume semantic_of(Dims3 d, const std::vector<std::uint32_t>& l) {
    volumes::LabelVolume v;
    v.dims = d;
    v.labels = l;
    v.kind = volumes::LabelKind::semantic;
    v.classes = {0, 1, 2};
    return v;
}

Dims3 shape_of(std::size_t n) {
    switch (n) {
    case 1: return {1, 1, 1};
    case 2: return {1, 1, 2};
    case 4: return {1, 2, 2};
    default: return {2, 2, 2};
    }
}

double dice_oracle(const std::vector<std::uint32_t>& p, const std::vector<std::uint32_t>& g) {
    double sum = 0.0;
    for (std::uint32_t c : {1u, 2u}) {
        double inter = 0, np = 0, ng = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            inter += p[i] == c && g[i] == c;
            np += p[i] == c;
            ng += g[i] == c;
        }
        sum += np + ng == 0 ? 1.0 : 2.0 * inter / (np + ng);
    }
    return sum / 2.0;
}

Outcome metric_oracles_check() {
    std::size_t cases = 0, count_bad = 0, entropy_bad = 0, dice_bad = 0, identity_bad = 0;
    auto compare = [&](const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b, bool ex) {
        ++cases;
        const auto t = metrics::contingency(a, b, ex);
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> cells;
        std::uint64_t n = 0;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!ex || a[i] != 0) {
                ++cells[{a[i], b[i]}];
                ++n;
            }
        if (t.n != n || t.cells.size() != cells.size() ||
            !std::equal(cells.begin(), cells.end(), t.cells.begin()))
            ++count_bad;
        if (t.n >= 2 && metrics::arand(t) != metric_oracles::arand_error(metric_oracles::enumerate_pairs(a, b, ex))) ++count_bad;
        if (t.n >= 1) {
            const auto e = metric_oracles::entropies(a, b, ex);
            const auto v = metrics::voi(t);
            if (std::abs(v.split - std::max(0.0, e.h_ab - e.h_b)) >= 1e-12 ||
                std::abs(v.merge - std::max(0.0, e.h_ab - e.h_a)) >= 1e-12)
                ++entropy_bad;
        }
    };
    for (std::size_t n : {1u, 2u, 4u}) {
        const auto all = metric_oracles::all_labelings(n, 3);
        for (const auto& a : all)
            for (const auto& b : all) {
                for (bool ex : {false, true}) compare(a, b, ex);
                if (metrics::dice(semantic_of(shape_of(n), b), semantic_of(shape_of(n), a), {0, 1, 2}).mean != dice_oracle(b, a))
                    ++dice_bad;
            }
    }
    const auto all8 = metric_oracles::all_labelings(8, 3);
    // VOI and ARAND ignore the names of b's labels, so b ranges over labelings up to renaming.
    const auto b8 = metric_oracles::canonical_labelings(8, 3);
    for (const auto& a : all8)
        for (const auto& b : b8) compare(a, b, true);
    for (const auto& a : metric_oracles::canonical_labelings(8, 3))
        for (const auto& b : b8) compare(a, b, false);
    // Dice depends on names, so every (pred, gt) pair at 2x2x2.
    for (const auto& a : all8) {
        const auto gt = semantic_of(shape_of(8), a);
        for (const auto& b : all8) {
            const auto pred = semantic_of(shape_of(8), b);
            if (std::abs(metrics::dice(pred, gt, {0, 1, 2}).mean - dice_oracle(b, a)) > 0.0) ++dice_bad;
        }
    }
    for (const auto& a : all8) {
        const auto t = metrics::contingency(a, a, false);
        const auto v = semantic_of(shape_of(8), a);
        if (metrics::voi(t).total != 0.0 || metrics::arand(t) != 0.0 || metrics::dice(v, v, {0, 1, 2}).mean != 1.0) ++identity_bad;
    }
    return {count_bad + entropy_bad + dice_bad + identity_bad == 0,
            fmt("%zu table cases and %zu dice pairs; mismatches: counts %zu, entropies %zu, dice %zu, identities %zu", cases,
                all8.size() * all8.size(), count_bad, entropy_bad, dice_bad, identity_bad)};
}

volumes::Dataset corpus(std::size_t n, std::size_t side, std::uint64_t seed) {
    volumes::SynthSpec spec;
    spec.n_volumes = n;
    spec.dims = {side, side, side};
    spec.seed = seed;
    return volumes::synth_dataset(spec);
}

std::vector<captioner::ImageTextPair> template_pairs(const volumes::Dataset& data) {
    std::vector<captioner::Caption> caps;
    for (const auto& v : data.volumes) caps.push_back(captioner::template_caption(v));
    return captioner::build_pairs(data.volumes, caps);
}

// Shared pretraining setup for the directional and ablation runs; 16^3 patches keep a single core in budget.
trainer::TrainConfig desk_pretrain_config(std::size_t iterations) {
    trainer::TrainConfig c;
    c.iterations = iterations;
    c.patch = {16, 16, 16};
    c.seed = 1;
    return c;
}

Outcome pretraining_benefit() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = corpus(200, 32, 1);
    const auto pcfg = desk_pretrain_config(300);
    const auto pre = trainer::pretrain(data.volumes, template_pairs(data), pcfg);
    trainer::FinetuneConfig fc;
    fc.label_fraction = 0.1;
    fc.encoder = pcfg.encoder;
    double sum_pre = 0.0, sum_rand = 0.0;
    int wins = 0;
    std::string per_seed;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        fc.seed = seed;
        const double a = trainer::finetune(&pre.final_checkpoint, data, fc).mean_dice;
        const double b = trainer::finetune(nullptr, data, fc).mean_dice;
        sum_pre += a;
        sum_rand += b;
        wins += a > b;
        per_seed += fmt(" seed%llu %.4f/%.4f", static_cast<unsigned long long>(seed), a, b);
    }
    const double elapsed = seconds_since(t0);
    const bool pass = sum_pre >= sum_rand && wins >= 2 && elapsed < 1800.0;
    return {pass, fmt("pretrained %.4f vs random %.4f, %d/3 wins, %.0fs;", sum_pre / 3.0, sum_rand / 3.0, wins, elapsed) +
                      per_seed};
}

Outcome ablation_shape() {
    const auto data = corpus(200, 32, 1);
    std::vector<captioner::Caption> caps;
    for (const auto& v : data.volumes) caps.push_back(captioner::template_caption(v));
    const auto rows = trainer::ablate(data, caps, desk_pretrain_config(500), trainer::FinetuneConfig{});
    bool pass = rows.size() == 4;
    std::string detail;
    for (const auto& r : rows) {
        pass = pass && r.converged && r.final_loss <= 0.5 * r.initial_loss;
        detail += fmt(" %s %.3f->%.3f dice %.3f;", r.terms.label().c_str(), r.initial_loss, r.final_loss, r.mean_dice);
    }
    return {pass, fmt("%zu configurations:", rows.size()) + detail};
}

Outcome reproducibility() {
    const auto data = corpus(24, 16, 7);
    const auto pairs = template_pairs(data);
    auto cfg = desk_pretrain_config(20);
    cfg.patch = {8, 8, 8};
    cfg.seed = 11;
    const auto a = trainer::pretrain(data.volumes, pairs, cfg);
    const auto b = trainer::pretrain(data.volumes, pairs, cfg);
    const bool rerun = encode_checkpoint(a.final_checkpoint) == encode_checkpoint(b.final_checkpoint) &&
                       trainer::loss_csv(a.curve) == trainer::loss_csv(b.curve);

    auto half = cfg;
    half.iterations = 10;
    trainer::Pretrainer first(half, data.volumes, pairs);
    first.run();
    const auto path = std::filesystem::temp_directory_path() / "gtgm_acceptance_resume.bin";
    write_checkpoint(path, first.checkpoint());
    auto mid = read_checkpoint(path);
    std::filesystem::remove(path);
    mid.metadata["config"] = cfg.to_json();
    trainer::Pretrainer second(mid, data.volumes, pairs);
    second.run();
    auto joined = first.curve();
    joined.insert(joined.end(), second.curve().begin(), second.curve().end());
    const bool resume = encode_checkpoint(second.checkpoint()) == encode_checkpoint(a.final_checkpoint) &&
                        trainer::loss_csv(joined) == trainer::loss_csv(a.curve);
    return {rerun && resume, fmt("rerun identical: %s; resume at 10 equals 20 uninterrupted: %s", rerun ? "yes" : "no",
                                 resume ? "yes" : "no")};
}

Outcome caption_pipeline() {
    // Filter: template captions plus sampled model captions, several per volume, scanned afterwards.
    const auto data = corpus(60, 16, 31);
    captioner::CaptionLM sampler(captioner::Vocabulary::standard().size(), captioner::CaptionLMConfig{}, 5);
    std::vector<captioner::Caption> raw;
    for (const auto& v : data.volumes)
        for (std::uint64_t s = 0; s < 4; ++s) {
            raw.push_back(captioner::template_caption(v));
            raw.push_back(captioner::lm_caption(sampler, v, s));
        }
    const auto& patterns = captioner::default_stop_patterns();
    const auto kept = captioner::filter_captions(raw, patterns);
    std::set<std::pair<std::string, std::string>> seen;
    std::size_t dupes = 0, matches = 0;
    for (const auto& c : kept) {
        dupes += !seen.insert({c.volume_id, c.text}).second;
        for (const auto& p : patterns) matches += std::regex_search(c.text, std::regex(p));
    }
    std::size_t raw_matches = 0;
    for (const auto& c : raw)
        for (const auto& p : patterns) raw_matches += std::regex_search(c.text, std::regex(p));

    // Language model: default model and training settings, 2000 training volumes at 24^3, 200 held out.
    const auto train = corpus(2000, 24, 100000);
    const auto held = corpus(200, 24, 900000);
    std::vector<const volumes::Volume*> tr, he;
    for (const auto& v : train.volumes) tr.push_back(&v);
    for (const auto& v : held.volumes) he.push_back(&v);
    captioner::LmTrainConfig lcfg;
    lcfg.seed = 1;
    captioner::CaptionLM lm(captioner::Vocabulary::standard().size(), captioner::CaptionLMConfig{}, 1);
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = captioner::train_caption_lm(lm, tr, he, lcfg);
    const double lm_seconds = seconds_since(t0);

    // Uniform output: a zero output layer.
    captioner::CaptionLM flat(captioner::Vocabulary::standard().size(), captioner::CaptionLMConfig{}, 3);
    for (double& v : flat.out_w.value) v = 0.0;
    for (double& v : flat.out_b.value) v = 0.0;
    const auto target = captioner::lm_target(held.volumes[0]);
    const double v = static_cast<double>(flat.vocab_size());
    const std::vector<double> feature(flat.config().feature, 0.3);
    const double uniform_err =
        std::abs(captioner::lm_loss_value(flat, feature, target) - static_cast<double>(target.size()) * std::log(v));

    const bool pass = dupes == 0 && matches == 0 && raw_matches > 0 && report.accuracy >= 0.95 && report.steps <= 2000 &&
                      uniform_err < 1e-12;
    return {pass, fmt("filter kept %zu of %zu, duplicates %zu, pattern matches %zu (before %zu); held-out greedy accuracy "
                      "%.4f after %zu steps (%.0fs); uniform loss error %.1e",
                      kept.size(), raw.size(), dupes, matches, raw_matches, report.accuracy, report.steps, lm_seconds,
                      uniform_err)};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite},
        {"loss oracles", loss_oracles},
        {"objective invariances", objective_invariances},
        {"metric oracles", metric_oracles_check},
        {"directional pretraining benefit", pretraining_benefit},
        {"ablation shape", ablation_shape},
        {"reproducibility", reproducibility},
        {"caption pipeline", caption_pipeline},
    };
    std::set<std::size_t> chosen;
    for (int i = 1; i < argc; ++i) {
        const long k = std::strtol(argv[i], nullptr, 10);
        if (k < 1 || k > static_cast<long>(criteria.size())) {
            std::fprintf(stderr, "unknown criterion '%s'\n", argv[i]);
            return 1;
        }
        chosen.insert(static_cast<std::size_t>(k));
    }
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!chosen.empty() && !chosen.count(i + 1)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %zu (%s): %s [%.1fs] %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL",
                    seconds_since(t0), o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
