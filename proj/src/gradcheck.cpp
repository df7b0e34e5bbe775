#include "gtgm/gradcheck.hpp"

#include "gtgm/captioner.hpp"
#include "gtgm/encoders.hpp"
#include "gtgm/error.hpp"
#include "gtgm/objectives.hpp"
#include "gtgm/rng.hpp"
#include "gtgm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace gtgm::gradcheck {

const char* to_string(Suite s) noexcept {
    switch (s) {
    case Suite::objectives: return "objectives";
    case Suite::captioner: return "captioner";
    case Suite::encoders: return "encoders";
    }
    return "?";
}

std::vector<Suite> parse_suites(const std::vector<std::string>& names) {
    require(!names.empty(), ErrorKind::config, "no gradcheck suite selected");
    std::vector<Suite> out;
    const auto add = [&](Suite s) {
        if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    };
    for (const auto& n : names) {
        if (n == "all") {
            add(Suite::objectives);
            add(Suite::captioner);
            add(Suite::encoders);
        } else if (n == "objectives") {
            add(Suite::objectives);
        } else if (n == "captioner") {
            add(Suite::captioner);
        } else if (n == "encoders") {
            add(Suite::encoders);
        } else {
            fail(ErrorKind::config, "unknown gradcheck suite '" + n + "' (objectives, captioner, encoders, all)");
        }
    }
    return out;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), ErrorKind::dimension, "gradient sizes differ");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), kRelativeFloor});
}

std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f, double step) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + step;
        const double fp = f();
        x[i] = saved - step;
        const double fm = f();
        x[i] = saved;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

std::size_t numeric_gradient_masked(std::vector<double>& x, std::vector<double>& analytic, std::vector<double>& numeric,
                                    const std::function<std::pair<double, std::vector<char>>()>& f, double step) {
    numeric.assign(x.size(), 0.0);
    const auto base = f().second;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + step;
        const auto [fp, gp] = f();
        x[i] = saved - step;
        const auto [fm, gm] = f();
        x[i] = saved;
        if (gp != base || gm != base) {
            analytic[i] = 0.0;
            ++skipped;
            continue;
        }
        numeric[i] = (fp - fm) / (2.0 * step);
    }
    return skipped;
}

bool Report::passed() const noexcept {
    return std::all_of(ops.begin(), ops.end(), [](const OpReport& o) { return o.passed(); });
}

std::size_t Report::instances() const noexcept {
    std::size_t n = 0;
    for (const auto& o : ops) n += o.instances;
    return n;
}

nlohmann::json Report::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["passed"] = passed();
    j["instances"] = instances();
    j["seconds"] = seconds;
    j["ops"] = nlohmann::json::array();
    for (const auto& o : ops) {
        j["ops"].push_back({{"suite", to_string(o.suite)},
                            {"op", o.op},
                            {"instances", o.instances},
                            {"max_relative_error", o.max_relative_error},
                            {"tolerance", o.tolerance},
                            {"skipped_coordinates", o.skipped_coordinates},
                            {"passed", o.passed()}});
    }
    return j;
}

std::string Report::csv() const {
    std::ostringstream out;
    out << std::setprecision(6);
    out << "suite,op,instances,max_relative_error,tolerance,passed\n";
    for (const auto& o : ops)
        out << to_string(o.suite) << ',' << o.op << ',' << o.instances << ',' << o.max_relative_error << ',' << o.tolerance << ','
            << (o.passed() ? 1 : 0) << '\n';
    return out.str();
}

namespace {

constexpr double kStep = 1e-5;
constexpr double kMaskedStep = 1e-6;
constexpr double kTolerance = 1e-5;
constexpr double kDeepTolerance = 1e-4;

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = rng.normal();
    return m;
}

objectives::LossWeights random_weights(Rng& rng) {
    objectives::LossWeights w;
    w.lambda_vlp = rng.uniform(0.1, 2.0);
    w.lambda_vr = rng.uniform(0.005, 1.0);
    w.lambda_offdiag = rng.uniform(0.0, 0.5);
    w.sigma1 = rng.uniform(0.07, 1.5);
    return w;
}

void check_objectives(Rng& rng, std::size_t n, std::vector<OpReport>& out) {
    using objectives::EmbeddingBatch;
    using objectives::Side;
    OpReport vlp{Suite::objectives, "vlp_loss", 0, 0.0, kTolerance, 0};
    OpReport vr{Suite::objectives, "vr_loss", 0, 0.0, kTolerance, 0};
    OpReport total{Suite::objectives, "total_loss", 0, 0.0, kTolerance, 0};
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(rng.range(2, 8));
        const auto d = static_cast<std::size_t>(rng.range(3, 12));
        const auto w = random_weights(rng);
        EmbeddingBatch a{random_matrix(rng, k, d), Side::image_view1};
        EmbeddingBatch b{random_matrix(rng, k, d), Side::image_view2};
        EmbeddingBatch t{random_matrix(rng, k, d), Side::text};
        EmbeddingBatch va{a.values, Side::image_vlp};

        const auto r_vlp = objectives::vlp_loss(va, t, w.sigma1);
        const auto f_vlp = [&] { return objectives::vlp_loss(va, t, w.sigma1).total; };
        vlp.max_relative_error = std::max(
            {vlp.max_relative_error,
             relative_error(r_vlp.gradient(Side::image_vlp).values(), numeric_gradient(va.values.values(), f_vlp, kStep)),
             relative_error(r_vlp.gradient(Side::text).values(), numeric_gradient(t.values.values(), f_vlp, kStep))});
        ++vlp.instances;

        const auto r_vr = objectives::vr_loss(a, b, w);
        const auto f_vr = [&] { return objectives::vr_loss(a, b, w).total; };
        vr.max_relative_error = std::max(
            {vr.max_relative_error,
             relative_error(r_vr.gradient(Side::image_view1).values(), numeric_gradient(a.values.values(), f_vr, kStep)),
             relative_error(r_vr.gradient(Side::image_view2).values(), numeric_gradient(b.values.values(), f_vr, kStep))});
        ++vr.instances;

        // The image side of the vlp term is view 1 itself, so both terms meet in one gradient.
        const auto r_tot = objectives::total_loss(&a, &t, &a, &b, w);
        const auto f_tot = [&] { return objectives::total_loss(&a, &t, &a, &b, w).total; };
        total.max_relative_error = std::max(
            {total.max_relative_error,
             relative_error(r_tot.gradient(Side::image_view1).values(), numeric_gradient(a.values.values(), f_tot, kStep)),
             relative_error(r_tot.gradient(Side::image_view2).values(), numeric_gradient(b.values.values(), f_tot, kStep)),
             relative_error(r_tot.gradient(Side::text).values(), numeric_gradient(t.values.values(), f_tot, kStep))});
        ++total.instances;
    }
    out.push_back(vlp);
    out.push_back(vr);
    out.push_back(total);
}

void check_captioner(Rng& rng, std::size_t n, std::vector<OpReport>& out) {
    OpReport lm{Suite::captioner, "lm_loss", 0, 0.0, kTolerance, 0};
    for (std::size_t i = 0; i < n; ++i) {
        captioner::CaptionLMConfig cfg;
        cfg.feature = static_cast<std::size_t>(rng.range(3, 8));
        cfg.projector_hidden = static_cast<std::size_t>(rng.range(2, 6));
        cfg.embed = static_cast<std::size_t>(rng.range(2, 5));
        cfg.hidden = static_cast<std::size_t>(rng.range(2, 5));
        const auto vocab = static_cast<std::size_t>(rng.range(4, 10));
        captioner::CaptionLM model(vocab, cfg, rng.next_u64());
        std::vector<double> feature(cfg.feature);
        for (double& v : feature) v = rng.normal();
        std::vector<captioner::TokenId> target(static_cast<std::size_t>(rng.range(1, 6)));
        for (auto& t : target) t = static_cast<captioner::TokenId>(rng.range(2, static_cast<std::int64_t>(vocab) - 1));
        target.back() = captioner::kEos;

        zero_grads(model.params());
        captioner::lm_loss(model, feature, target);
        std::vector<double> analytic, numeric;
        for (auto* p : model.params()) {
            const auto g = numeric_gradient(p->value, [&] { return captioner::lm_loss_value(model, feature, target); }, kStep);
            analytic.insert(analytic.end(), p->grad.begin(), p->grad.end());
            numeric.insert(numeric.end(), g.begin(), g.end());
        }
        lm.max_relative_error = std::max(lm.max_relative_error, relative_error(analytic, numeric));
        ++lm.instances;
    }
    out.push_back(lm);
}

std::vector<char> gates(const std::vector<FeatureMap>& maps) {
    std::vector<char> g;
    for (const auto& m : maps)
        for (double v : m.data) g.push_back(v > 0.0);
    return g;
}

void check_encoders(Rng& rng, std::size_t n, std::vector<OpReport>& out) {
    OpReport proj{Suite::encoders, "projector", 0, 0.0, kTolerance, 0};
    OpReport deep{Suite::encoders, "encoder_decoder_seg_loss", 0, 0.0, kDeepTolerance, 0};
    for (std::size_t i = 0; i < n; ++i) {
        // Projector under a quadratic readout.
        {
            const auto in = static_cast<std::size_t>(rng.range(2, 10));
            const auto hidden = static_cast<std::size_t>(rng.range(2, 8));
            const auto width = static_cast<std::size_t>(rng.range(2, 6));
            const auto k = static_cast<std::size_t>(rng.range(1, 6));
            encoders::Projector p("proj", in, hidden, width, rng.next_u64());
            Matrix x = random_matrix(rng, k, in);
            const Matrix r = random_matrix(rng, k, width);
            const auto f = [&] {
                const auto t = p.forward(x);
                double s = 0.0;
                for (std::size_t j = 0; j < t.output.size(); ++j)
                    s += r.values()[j] * t.output.values()[j] + 0.5 * t.output.values()[j] * t.output.values()[j];
                std::vector<char> g;
                for (double v : t.pre.values()) g.push_back(v > 0.0);
                return std::make_pair(s, g);
            };
            zero_grads(p.params());
            const auto t = p.forward(x);
            Matrix g = r;
            for (std::size_t j = 0; j < g.size(); ++j) g.values()[j] += t.output.values()[j];
            auto gx = p.backward(t, g, true).values();
            std::vector<double> analytic, numeric, num;
            for (auto* b : p.params()) {
                auto a = b->grad;
                proj.skipped_coordinates += numeric_gradient_masked(b->value, a, num, f, kMaskedStep);
                analytic.insert(analytic.end(), a.begin(), a.end());
                numeric.insert(numeric.end(), num.begin(), num.end());
            }
            proj.skipped_coordinates += numeric_gradient_masked(x.values(), gx, num, f, kMaskedStep);
            analytic.insert(analytic.end(), gx.begin(), gx.end());
            numeric.insert(numeric.end(), num.begin(), num.end());
            proj.max_relative_error = std::max(proj.max_relative_error, relative_error(analytic, numeric));
            ++proj.instances;
        }
        // Encoder, decoder and the segmentation loss on an 8^3 patch.
        {
            encoders::ImageEncoderConfig ecfg;
            ecfg.channels = {static_cast<std::size_t>(rng.range(1, 2)), static_cast<std::size_t>(rng.range(1, 3)),
                             static_cast<std::size_t>(rng.range(2, 3))};
            encoders::SegDecoderConfig dcfg;
            dcfg.channels = {static_cast<std::size_t>(rng.range(1, 2)), static_cast<std::size_t>(rng.range(1, 2)),
                             static_cast<std::size_t>(rng.range(1, 2))};
            dcfg.classes = static_cast<std::size_t>(rng.range(2, 3));
            encoders::ImageEncoder enc(ecfg, rng.next_u64());
            encoders::SegDecoder dec(ecfg, dcfg, rng.next_u64());
            const Dims3 d{8, 8, 8};
            FeatureMap x(1, d);
            for (double& v : x.data) v = rng.normal();
            volumes::LabelVolume target;
            target.dims = d;
            target.labels.resize(d.count());
            for (auto& l : target.labels) l = static_cast<std::uint32_t>(rng.below(dcfg.classes));
            const double smooth = rng.uniform(0.0, 1.0);
            const std::vector<const volumes::LabelVolume*> tp{&target};
            const auto f = [&] {
                const auto t = enc.forward(x);
                const auto dt = dec.forward(t);
                auto g = gates(t.pre);
                const auto g2 = gates(dt.pre);
                g.insert(g.end(), g2.begin(), g2.end());
                return std::make_pair(trainer::seg_loss({dt.logits}, tp, smooth).total, g);
            };
            ParamRefs all = enc.params();
            for (auto* p : dec.params()) all.push_back(p);
            zero_grads(all);
            const auto t = enc.forward(x);
            const auto dt = dec.forward(t);
            const auto loss = trainer::seg_loss({dt.logits}, tp, smooth);
            const auto dg = dec.backward(t, dt, loss.grad[0]);
            auto gx = enc.backward(t, {}, dg.skips, &dg.bottleneck, true).data;
            std::vector<double> analytic, numeric, num;
            for (auto* p : all) {
                auto a = p->grad;
                deep.skipped_coordinates += numeric_gradient_masked(p->value, a, num, f, kMaskedStep);
                analytic.insert(analytic.end(), a.begin(), a.end());
                numeric.insert(numeric.end(), num.begin(), num.end());
            }
            deep.skipped_coordinates += numeric_gradient_masked(x.data, gx, num, f, kMaskedStep);
            analytic.insert(analytic.end(), gx.begin(), gx.end());
            numeric.insert(numeric.end(), num.begin(), num.end());
            deep.max_relative_error = std::max(deep.max_relative_error, relative_error(analytic, numeric));
            ++deep.instances;
        }
    }
    out.push_back(proj);
    out.push_back(deep);
}

} // namespace

Report run(const std::vector<Suite>& suites, std::uint64_t seed, std::size_t instances_per_op) {
    require(!suites.empty(), ErrorKind::config, "no gradcheck suite selected");
    require(instances_per_op >= 1, ErrorKind::config, "gradcheck needs at least one instance per operation");
    const auto start = std::chrono::steady_clock::now();
    Report r;
    r.seed = seed;
    for (auto s : suites) {
        Rng rng(splitmix64(seed ^ (0x9c0000ull + static_cast<std::uint64_t>(s))));
        switch (s) {
        case Suite::objectives: check_objectives(rng, instances_per_op, r.ops); break;
        case Suite::captioner: check_captioner(rng, instances_per_op, r.ops); break;
        case Suite::encoders: check_encoders(rng, instances_per_op, r.ops); break;
        }
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

} // namespace gtgm::gradcheck
