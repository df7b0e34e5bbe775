#include "gtgm/captioner.hpp"

#include "gtgm/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <regex>
#include <set>
#include <sstream>

namespace gtgm::captioner {

using volumes::ContrastSign;
using volumes::Modality;
using volumes::StructureKind;
using volumes::Volume;

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    tokens_ = {"<bos>", "<eos>", "<unk>"};
    for (const auto& w : words) tokens_.push_back(w);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        require(index_.emplace(tokens_[i], static_cast<TokenId>(i)).second, ErrorKind::vocabulary,
                "duplicate vocabulary token '" + tokens_[i] + "'");
    }
}

const Vocabulary& Vocabulary::standard() {
    static const Vocabulary v = [] {
        std::vector<std::string> words;
        for (auto m : {Modality::ct_like, Modality::mri_like, Modality::em_like})
            for (const auto& n : volumes::dataset_names(m)) words.push_back(n);
        for (const char* w : {"ct", "mri", "em", "scan", "shows", "with", "no", "focal", "finding", "count", "hyperdense",
                              "hypodense", "hyperintense", "hypointense", "bright", "dark", "lesions", "vessels", "cells"})
            words.emplace_back(w);
        for (std::uint32_t n = 0; n <= 12; ++n) words.push_back(count_word(n));
        words.emplace_back("many");
        return Vocabulary(words);
    }();
    return v;
}

TokenId Vocabulary::id(const std::string& word) const {
    const auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    require(id < tokens_.size(), ErrorKind::vocabulary,
            "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(tokens_.size()));
    return tokens_[id];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : tokenize(text)) ids.push_back(id(w));
    return ids;
}

std::string Vocabulary::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (auto t : ids) {
        if (!out.empty()) out.push_back(' ');
        out += token(t);
    }
    return out;
}

const char* to_string(CaptionSource s) noexcept { return s == CaptionSource::lm ? "lm" : "template"; }

nlohmann::json Caption::to_json() const {
    return {{"volume_id", volume_id}, {"text", text}, {"token_ids", token_ids}, {"source", to_string(source)},
            {"dataset_name", dataset_name}};
}

Caption Caption::from_json(const nlohmann::json& j) {
    Caption c;
    try {
        c.volume_id = j.at("volume_id").get<std::string>();
        c.text = j.at("text").get<std::string>();
        c.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
        const auto src = j.at("source").get<std::string>();
        require(src == "lm" || src == "template", ErrorKind::format, "unknown caption source '" + src + "'");
        c.source = src == "lm" ? CaptionSource::lm : CaptionSource::template_path;
        c.dataset_name = j.at("dataset_name").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("malformed caption record: ") + e.what());
    }
    return c;
}

// ---- template path ----

std::string count_word(std::uint32_t n) {
    static const char* words[] = {"zero", "one", "two",   "three", "four",   "five",  "six",
                                  "seven", "eight", "nine", "ten",  "eleven", "twelve"};
    return n <= 12 ? words[n] : "many";
}

const char* modality_word(Modality m) noexcept {
    switch (m) {
    case Modality::ct_like: return "ct";
    case Modality::mri_like: return "mri";
    case Modality::em_like: return "em";
    }
    return "ct";
}

const char* contrast_word(Modality m, ContrastSign c) noexcept {
    const bool hyper = c == ContrastSign::hyper;
    switch (m) {
    case Modality::ct_like: return hyper ? "hyperdense" : "hypodense";
    case Modality::mri_like: return hyper ? "hyperintense" : "hypointense";
    case Modality::em_like: return hyper ? "bright" : "dark";
    }
    return "hyperdense";
}

const char* structure_word(StructureKind k) noexcept {
    switch (k) {
    case StructureKind::ellipsoid_lesion: return "lesions";
    case StructureKind::tubular_vessel: return "vessels";
    case StructureKind::dense_cells: return "cells";
    case StructureKind::none: return "";
    }
    return "";
}

std::string template_body(Modality m, const volumes::AttributeRecord& a) {
    std::string s = std::string(modality_word(m)) + " scan ";
    if (a.structure_kind == StructureKind::none) return s + "with no focal finding";
    return s + "shows " + contrast_word(m, a.contrast_sign) + " " + structure_word(a.structure_kind) + " with count " +
           count_word(a.count);
}

Caption template_caption(const Volume& v, const Vocabulary& vocab) {
    Caption c;
    c.volume_id = v.id;
    c.dataset_name = v.dataset_name;
    c.source = CaptionSource::template_path;
    c.text = v.dataset_name + " " + template_body(v.modality, v.attributes);
    c.token_ids = vocab.encode(c.text);
    return c;
}

std::vector<TokenId> lm_target(const Volume& v, const Vocabulary& vocab) {
    auto ids = vocab.encode(template_body(v.modality, v.attributes));
    ids.push_back(kEos);
    return ids;
}

std::vector<double> slice_feature(const volumes::Slice& s, std::size_t grid) {
    require(s.rows >= grid && s.cols >= grid, ErrorKind::dimension,
            "slice " + std::to_string(s.rows) + "x" + std::to_string(s.cols) + " smaller than the feature grid");
    std::vector<double> f(grid * grid, 0.0);
    for (std::size_t gy = 0; gy < grid; ++gy) {
        const std::size_t y0 = gy * s.rows / grid, y1 = (gy + 1) * s.rows / grid;
        for (std::size_t gx = 0; gx < grid; ++gx) {
            const std::size_t x0 = gx * s.cols / grid, x1 = (gx + 1) * s.cols / grid;
            double sum = 0.0;
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) sum += s.pixels[y * s.cols + x];
            f[gy * grid + gx] = sum / static_cast<double>((y1 - y0) * (x1 - x0));
        }
    }
    return f;
}

// ---- language model ----

nlohmann::json CaptionLMConfig::to_json() const {
    return {{"feature", feature}, {"projector_hidden", projector_hidden}, {"embed", embed}, {"hidden", hidden}};
}

CaptionLMConfig CaptionLMConfig::from_json(const nlohmann::json& j) {
    CaptionLMConfig c;
    c.feature = j.value("feature", c.feature);
    c.projector_hidden = j.value("projector_hidden", c.projector_hidden);
    c.embed = j.value("embed", c.embed);
    c.hidden = j.value("hidden", c.hidden);
    return c;
}

CaptionLM::CaptionLM(std::size_t vocab_size, CaptionLMConfig cfg, std::uint64_t seed) : vocab_(vocab_size), cfg_(cfg) {
    require(vocab_size >= 3, ErrorKind::vocabulary, "vocabulary must hold the reserved tokens");
    require(cfg.feature >= 1 && cfg.projector_hidden >= 1 && cfg.embed >= 1 && cfg.hidden >= 1, ErrorKind::config,
            "language model widths must be positive");
    const std::size_t F = cfg.feature, P = cfg.projector_hidden, E = cfg.embed, H = cfg.hidden, V = vocab_size;
    proj1_w = ParamBlock("lm.proj1.weight", {P, F});
    proj1_b = ParamBlock("lm.proj1.bias", {P});
    proj2_w = ParamBlock("lm.proj2.weight", {H, P});
    proj2_b = ParamBlock("lm.proj2.bias", {H});
    embedding = ParamBlock("lm.embedding", {V, E});
    wz = ParamBlock("lm.gru.wz", {H, E});
    wr = ParamBlock("lm.gru.wr", {H, E});
    wn = ParamBlock("lm.gru.wn", {H, E});
    uz = ParamBlock("lm.gru.uz", {H, H});
    ur = ParamBlock("lm.gru.ur", {H, H});
    un = ParamBlock("lm.gru.un", {H, H});
    bz = ParamBlock("lm.gru.bz", {H});
    br = ParamBlock("lm.gru.br", {H});
    bn = ParamBlock("lm.gru.bn", {H});
    out_w = ParamBlock("lm.out.weight", {V, H});
    out_b = ParamBlock("lm.out.bias", {V});
    input_shift = ParamBlock("lm.input.shift", {F});
    input_scale = ParamBlock("lm.input.scale", {F});
    std::fill(input_scale.value.begin(), input_scale.value.end(), 1.0);
    Rng rng(seed);
    // Glorot-style scale for the saturating units.
    auto init = [&](ParamBlock& p, std::size_t fan_in) {
        const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
        for (double& v : p.value) v = rng.uniform(-bound, bound);
    };
    init(proj1_w, F);
    init(proj2_w, P);
    for (double& v : embedding.value) v = rng.normal() * 0.5;
    for (auto* p : {&wz, &wr, &wn}) init(*p, E);
    for (auto* p : {&uz, &ur, &un}) init(*p, H);
    init(out_w, H);
}

ParamRefs CaptionLM::buffers() { return {&input_shift, &input_scale}; }

std::vector<double> CaptionLM::standardize(const std::vector<double>& feature) const {
    require(feature.size() == cfg_.feature, ErrorKind::dimension,
            "image feature width " + std::to_string(feature.size()) + ", model expects " + std::to_string(cfg_.feature));
    std::vector<double> x(feature.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (feature[i] - input_shift.value[i]) * input_scale.value[i];
    return x;
}

void CaptionLM::fit_input(const std::vector<std::vector<double>>& features) {
    require(!features.empty(), ErrorKind::degeneracy, "input statistics need at least one feature");
    const std::size_t F = cfg_.feature;
    const double n = static_cast<double>(features.size());
    for (std::size_t i = 0; i < F; ++i) {
        double mean = 0.0, sq = 0.0;
        for (const auto& f : features) {
            require(f.size() == F, ErrorKind::dimension, "feature width mismatch while fitting input statistics");
            mean += f[i];
        }
        mean /= n;
        for (const auto& f : features) sq += (f[i] - mean) * (f[i] - mean);
        input_shift.value[i] = mean;
        input_scale.value[i] = 1.0 / std::max(std::sqrt(sq / n), 1e-3);
    }
}

ParamRefs CaptionLM::params() {
    return {&proj1_w, &proj1_b, &proj2_w, &proj2_b, &embedding, &wz, &wr, &wn, &uz, &ur, &un, &bz, &br, &bn, &out_w, &out_b};
}

namespace {

// y = W x + b for a row-major [rows, cols] block.
std::vector<double> affine(const ParamBlock& w, const ParamBlock* b, const double* x, std::size_t cols) {
    const std::size_t rows = w.shape[0];
    std::vector<double> y(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = b != nullptr ? b->value[r] : 0.0;
        const double* wr = &w.value[r * cols];
        for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
        y[r] = s;
    }
    return y;
}

void add_affine(std::vector<double>& y, const ParamBlock& w, const double* x, std::size_t cols) {
    for (std::size_t r = 0; r < y.size(); ++r) {
        double s = 0.0;
        const double* wr = &w.value[r * cols];
        for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
        y[r] += s;
    }
}

// grad_w += g x^T ; returns nothing.
void outer_acc(ParamBlock& w, const std::vector<double>& g, const double* x, std::size_t cols) {
    for (std::size_t r = 0; r < g.size(); ++r) {
        if (g[r] == 0.0) continue;
        double* gw = &w.grad[r * cols];
        for (std::size_t c = 0; c < cols; ++c) gw[c] += g[r] * x[c];
    }
}

// out += W^T g
void transpose_acc(std::vector<double>& out, const ParamBlock& w, const std::vector<double>& g) {
    const std::size_t cols = out.size();
    for (std::size_t r = 0; r < g.size(); ++r) {
        if (g[r] == 0.0) continue;
        const double* wr = &w.value[r * cols];
        for (std::size_t c = 0; c < cols; ++c) out[c] += wr[c] * g[r];
    }
}

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

std::vector<double> softmax(const std::vector<double>& logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

double log_sum_exp(const std::vector<double>& logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double v : logits) s += std::exp(v - mx);
    return mx + std::log(s);
}

struct StepCache {
    TokenId input;
    std::vector<double> h_prev, z, r, rh, n, h;
};

void check_token(const CaptionLM& m, TokenId t) {
    require(t < m.vocab_size(), ErrorKind::vocabulary,
            "token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(m.vocab_size()));
}

StepCache gru_step(const CaptionLM& m, const std::vector<double>& h, TokenId input) {
    check_token(m, input);
    const std::size_t E = m.config().embed, H = m.config().hidden;
    const double* e = &m.embedding.value[static_cast<std::size_t>(input) * E];
    StepCache c;
    c.input = input;
    c.h_prev = h;
    c.z = affine(m.wz, &m.bz, e, E);
    add_affine(c.z, m.uz, h.data(), H);
    c.r = affine(m.wr, &m.br, e, E);
    add_affine(c.r, m.ur, h.data(), H);
    for (std::size_t i = 0; i < H; ++i) {
        c.z[i] = sigmoid(c.z[i]);
        c.r[i] = sigmoid(c.r[i]);
    }
    c.rh.resize(H);
    for (std::size_t i = 0; i < H; ++i) c.rh[i] = c.r[i] * h[i];
    c.n = affine(m.wn, &m.bn, e, E);
    add_affine(c.n, m.un, c.rh.data(), H);
    c.h.resize(H);
    for (std::size_t i = 0; i < H; ++i) {
        c.n[i] = std::tanh(c.n[i]);
        c.h[i] = (1.0 - c.z[i]) * c.n[i] + c.z[i] * h[i];
    }
    return c;
}

} // namespace

std::vector<double> CaptionLM::initial_state(const std::vector<double>& feature) const {
    const auto x = standardize(feature);
    auto q = affine(proj1_w, &proj1_b, x.data(), cfg_.feature);
    for (double& v : q) v = std::tanh(v);
    auto h = affine(proj2_w, &proj2_b, q.data(), cfg_.projector_hidden);
    for (double& v : h) v = std::tanh(v);
    return h;
}

std::vector<double> CaptionLM::logits(const std::vector<double>& h) const { return affine(out_w, &out_b, h.data(), cfg_.hidden); }

std::vector<double> CaptionLM::step(std::vector<double>& h, TokenId input) const {
    h = gru_step(*this, h, input).h;
    return softmax(logits(h));
}

double lm_loss_value(const CaptionLM& model, const std::vector<double>& feature, const std::vector<TokenId>& target) {
    require(!target.empty(), ErrorKind::config, "language model target is empty");
    for (auto t : target) check_token(model, t);
    auto h = model.initial_state(feature);
    double loss = 0.0;
    TokenId input = kBos;
    for (auto t : target) {
        h = gru_step(model, h, input).h;
        const auto lg = model.logits(h);
        loss += log_sum_exp(lg) - lg[t];
        input = t;
    }
    return loss;
}

double lm_loss(CaptionLM& m, const std::vector<double>& feature, const std::vector<TokenId>& target, bool accumulate) {
    if (!accumulate) return lm_loss_value(m, feature, target);
    require(!target.empty(), ErrorKind::config, "language model target is empty");
    for (auto t : target) check_token(m, t);
    const auto x = m.standardize(feature);
    const std::size_t F = m.config().feature, P = m.config().projector_hidden, E = m.config().embed, H = m.config().hidden;

    // Forward with caches.
    auto q = affine(m.proj1_w, &m.proj1_b, x.data(), F);
    for (double& v : q) v = std::tanh(v);
    auto h0 = affine(m.proj2_w, &m.proj2_b, q.data(), P);
    for (double& v : h0) v = std::tanh(v);

    std::vector<StepCache> steps;
    std::vector<std::vector<double>> probs;
    double loss = 0.0;
    std::vector<double> h = h0;
    TokenId input = kBos;
    for (auto t : target) {
        steps.push_back(gru_step(m, h, input));
        h = steps.back().h;
        const auto lg = m.logits(h);
        loss += log_sum_exp(lg) - lg[t];
        probs.push_back(softmax(lg));
        input = t;
    }

    // Backward through time.
    std::vector<double> dh_next(H, 0.0);
    for (std::size_t i = steps.size(); i-- > 0;) {
        const auto& c = steps[i];
        std::vector<double> dlogits = probs[i];
        dlogits[target[i]] -= 1.0;
        outer_acc(m.out_w, dlogits, c.h.data(), H);
        for (std::size_t v = 0; v < dlogits.size(); ++v) m.out_b.grad[v] += dlogits[v];
        std::vector<double> dh = dh_next;
        transpose_acc(dh, m.out_w, dlogits);

        std::vector<double> dan(H), daz(H), dar(H), dh_prev(H), drh(H, 0.0);
        for (std::size_t k = 0; k < H; ++k) {
            const double dn = dh[k] * (1.0 - c.z[k]);
            const double dz = dh[k] * (c.h_prev[k] - c.n[k]);
            dh_prev[k] = dh[k] * c.z[k];
            dan[k] = dn * (1.0 - c.n[k] * c.n[k]);
            daz[k] = dz * c.z[k] * (1.0 - c.z[k]);
        }
        const double* e = &m.embedding.value[static_cast<std::size_t>(c.input) * E];
        outer_acc(m.wn, dan, e, E);
        outer_acc(m.un, dan, c.rh.data(), H);
        for (std::size_t k = 0; k < H; ++k) m.bn.grad[k] += dan[k];
        transpose_acc(drh, m.un, dan);
        for (std::size_t k = 0; k < H; ++k) {
            dar[k] = drh[k] * c.h_prev[k] * c.r[k] * (1.0 - c.r[k]);
            dh_prev[k] += drh[k] * c.r[k];
        }
        outer_acc(m.wz, daz, e, E);
        outer_acc(m.uz, daz, c.h_prev.data(), H);
        outer_acc(m.wr, dar, e, E);
        outer_acc(m.ur, dar, c.h_prev.data(), H);
        for (std::size_t k = 0; k < H; ++k) {
            m.bz.grad[k] += daz[k];
            m.br.grad[k] += dar[k];
        }
        transpose_acc(dh_prev, m.uz, daz);
        transpose_acc(dh_prev, m.ur, dar);

        std::vector<double> de(E, 0.0);
        transpose_acc(de, m.wn, dan);
        transpose_acc(de, m.wz, daz);
        transpose_acc(de, m.wr, dar);
        double* ge = &m.embedding.grad[static_cast<std::size_t>(c.input) * E];
        for (std::size_t k = 0; k < E; ++k) ge[k] += de[k];
        dh_next = std::move(dh_prev);
    }

    // Initial-state projector.
    std::vector<double> da2(H);
    for (std::size_t k = 0; k < H; ++k) da2[k] = dh_next[k] * (1.0 - h0[k] * h0[k]);
    outer_acc(m.proj2_w, da2, q.data(), P);
    for (std::size_t k = 0; k < H; ++k) m.proj2_b.grad[k] += da2[k];
    std::vector<double> dq(P, 0.0);
    transpose_acc(dq, m.proj2_w, da2);
    std::vector<double> da1(P);
    for (std::size_t k = 0; k < P; ++k) da1[k] = dq[k] * (1.0 - q[k] * q[k]);
    outer_acc(m.proj1_w, da1, x.data(), F);
    for (std::size_t k = 0; k < P; ++k) m.proj1_b.grad[k] += da1[k];
    return loss;
}

std::vector<TokenId> lm_generate(const CaptionLM& model, const std::vector<double>& feature, std::size_t max_len, DecodeMode mode,
                                 std::uint64_t seed) {
    require(max_len >= 1, ErrorKind::config, "max_len must be at least 1");
    Rng rng(seed);
    auto h = model.initial_state(feature);
    std::vector<TokenId> out;
    TokenId input = kBos;
    while (out.size() < max_len) {
        const auto p = model.step(h, input);
        TokenId next = 0;
        if (mode == DecodeMode::greedy) {
            // max_element returns the first maximum, i.e. the lowest index on ties.
            next = static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
        } else {
            const double u = rng.uniform();
            double acc = 0.0;
            next = static_cast<TokenId>(p.size() - 1);
            for (std::size_t i = 0; i < p.size(); ++i) {
                acc += p[i];
                if (u < acc) {
                    next = static_cast<TokenId>(i);
                    break;
                }
            }
        }
        if (next == kEos) break;
        out.push_back(next);
        input = next;
    }
    return out;
}

double greedy_token_accuracy(const CaptionLM& model, const std::vector<const Volume*>& vols, std::uint64_t slice_seed,
                             const Vocabulary& vocab) {
    Rng rng(slice_seed);
    std::size_t correct = 0, total = 0;
    for (const auto* v : vols) {
        const auto target = lm_target(*v, vocab);
        const auto feature = slice_feature(volumes::sample_slice(*v, rng));
        auto decoded = lm_generate(model, feature, target.size() + 4);
        decoded.push_back(kEos);
        for (std::size_t i = 0; i < target.size(); ++i) correct += i < decoded.size() && decoded[i] == target[i];
        total += target.size();
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

nlohmann::json LmTrainConfig::to_json() const {
    return {{"max_steps", max_steps}, {"batch", batch},           {"eval_every", eval_every},
            {"accuracy_threshold", accuracy_threshold}, {"clip_norm", clip_norm}, {"adamw", adamw.to_json()},
            {"augment", augment}, {"early_stop", early_stop}, {"seed", seed}};
}

nlohmann::json LmTrainReport::to_json() const {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [s, a] : accuracy_curve) curve.push_back({{"step", s}, {"accuracy", a}});
    return {{"accuracy", accuracy}, {"steps", steps}, {"reached_threshold", reached_threshold}, {"accuracy_curve", curve}};
}

namespace {

// One of the eight symmetries of the square grid; captions are invariant to them.
std::vector<double> dihedral(const std::vector<double>& f, std::size_t grid, std::uint64_t k) {
    std::vector<double> out(f.size());
    for (std::size_t y = 0; y < grid; ++y)
        for (std::size_t x = 0; x < grid; ++x) {
            std::size_t sy = (k & 1) ? grid - 1 - y : y;
            std::size_t sx = (k & 2) ? grid - 1 - x : x;
            if (k & 4) std::swap(sy, sx);
            out[y * grid + x] = f[sy * grid + sx];
        }
    return out;
}

} // namespace

LmTrainReport train_caption_lm(CaptionLM& model, const std::vector<const Volume*>& train, const std::vector<const Volume*>& heldout,
                               const LmTrainConfig& cfg, const Vocabulary& vocab) {
    require(!train.empty(), ErrorKind::config, "caption model needs training volumes");
    require(cfg.batch >= 1 && cfg.eval_every >= 1, ErrorKind::config, "batch and eval interval must be positive");
    const auto params = model.params();
    optim::AdamW opt(cfg.adamw, params);
    Rng rng(cfg.seed);
    const std::uint64_t eval_seed = splitmix64(cfg.seed ^ 0x5eed5eedull);
    std::vector<std::vector<TokenId>> targets;
    for (const auto* v : train) targets.push_back(lm_target(*v, vocab));
    {
        Rng stats_rng(splitmix64(cfg.seed ^ 0x57a75ull));
        std::vector<std::vector<double>> features;
        for (std::size_t k = 0; k < 4; ++k)
            for (const auto* v : train) features.push_back(slice_feature(volumes::sample_slice(*v, stats_rng)));
        model.fit_input(features);
    }

    LmTrainReport report;
    auto evaluate = [&](std::size_t step) {
        report.accuracy = heldout.empty() ? 0.0 : greedy_token_accuracy(model, heldout, eval_seed, vocab);
        report.accuracy_curve.emplace_back(step, report.accuracy);
        report.reached_threshold = report.accuracy >= cfg.accuracy_threshold;
        return report.reached_threshold;
    };
    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        zero_grads(params);
        double loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const std::size_t i = static_cast<std::size_t>(rng.below(train.size()));
            auto feature = slice_feature(volumes::sample_slice(*train[i], rng));
            if (cfg.augment) feature = dihedral(feature, kFeatureGrid, rng.below(8));
            loss += lm_loss(model, feature, targets[i]);
        }
        const double inv = 1.0 / static_cast<double>(cfg.batch);
        for (auto* p : params)
            for (double& g : p->grad) g *= inv;
        const double norm = grad_norm(params);
        if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
            for (auto* p : params)
                for (double& g : p->grad) g *= cfg.clip_norm / norm;
        }
        // Cosine decay to a tenth of the base rate.
        const double progress = static_cast<double>(step - 1) / static_cast<double>(cfg.max_steps);
        opt.set_lr(cfg.adamw.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress))));
        opt.step(params);
        report.loss_curve.push_back(loss * inv);
        report.steps = step;
        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            if (evaluate(step) && cfg.early_stop) break;
        }
    }
    return report;
}

Caption lm_caption(const CaptionLM& model, const Volume& v, std::uint64_t slice_seed, const Vocabulary& vocab) {
    Rng rng(slice_seed);
    const auto feature = slice_feature(volumes::sample_slice(v, rng));
    const auto body = lm_generate(model, feature, 24);
    Caption c;
    c.volume_id = v.id;
    c.dataset_name = v.dataset_name;
    c.source = CaptionSource::lm;
    c.text = v.dataset_name;
    if (!body.empty()) c.text += " " + vocab.decode(body);
    c.token_ids = vocab.encode(c.text);
    return c;
}

// ---- filtering and pairing ----

const std::vector<std::string>& default_stop_patterns() {
    // Boilerplate shared by nearly every caption.
    static const std::vector<std::string> p{R"(\bscan (shows|with)\b)"};
    return p;
}

namespace {

std::string normalize_ws(const std::string& s) {
    std::string out;
    for (const auto& w : tokenize(s)) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

} // namespace

std::vector<Caption> filter_captions(const std::vector<Caption>& captions, const std::vector<std::string>& stop_patterns,
                                     const Vocabulary& vocab) {
    std::vector<std::regex> res;
    for (std::size_t i = 0; i < stop_patterns.size(); ++i) {
        try {
            res.emplace_back(stop_patterns[i], std::regex::ECMAScript | std::regex::icase);
        } catch (const std::regex_error& e) {
            fail(ErrorKind::config, "stop pattern " + std::to_string(i) + " ('" + stop_patterns[i] + "') does not compile: " + e.what());
        }
    }
    std::vector<Caption> out;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& c : captions) {
        std::string body = normalize_ws(c.text);
        const std::string prefix = normalize_ws(c.dataset_name);
        if (!prefix.empty() && (body == prefix || body.rfind(prefix + " ", 0) == 0)) body = body.substr(prefix.size());
        // Deleting one match can expose another, so repeat to a fixed point.
        for (bool changed = true; changed;) {
            changed = false;
            for (const auto& re : res) {
                std::string next = normalize_ws(std::regex_replace(body, re, " "));
                if (next != normalize_ws(body)) changed = true;
                body = std::move(next);
            }
        }
        body = normalize_ws(body);
        Caption f = c;
        f.text = prefix.empty() ? body : (body.empty() ? prefix : prefix + " " + body);
        f.token_ids = vocab.encode(f.text);
        if (seen.emplace(f.volume_id, f.text).second) out.push_back(std::move(f));
    }
    return out;
}

std::vector<ImageTextPair> build_pairs(const std::vector<Volume>& vols, const std::vector<Caption>& captions) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < vols.size(); ++i) index.emplace(vols[i].id, i);
    std::vector<const Caption*> first(vols.size(), nullptr);
    for (const auto& c : captions) {
        const auto it = index.find(c.volume_id);
        require(it != index.end(), ErrorKind::linkage, "caption refers to unknown volume '" + c.volume_id + "'");
        if (first[it->second] == nullptr) first[it->second] = &c;
    }
    std::vector<ImageTextPair> pairs;
    for (std::size_t i = 0; i < vols.size(); ++i) {
        require(first[i] != nullptr, ErrorKind::linkage, "volume '" + vols[i].id + "' has no caption");
        pairs.push_back({i, vols[i].id, *first[i]});
    }
    return pairs;
}

void write_captions(const std::filesystem::path& path, const std::vector<Caption>& captions) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot open " + path.string() + " for writing");
    for (const auto& c : captions) out << c.to_json().dump() << '\n';
    require(out.good(), ErrorKind::io, "short write to " + path.string());
}

std::vector<Caption> read_captions(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open caption file " + path.string());
    std::vector<Caption> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (normalize_ws(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::format, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(Caption::from_json(j));
    }
    return out;
}

std::vector<std::string> read_stop_patterns(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open stop-pattern file " + path.string());
    std::vector<std::string> out;
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            std::regex(line, std::regex::ECMAScript | std::regex::icase);
        } catch (const std::regex_error& e) {
            fail(ErrorKind::config, path.string() + " line " + std::to_string(number) + ": pattern '" + line +
                                        "' does not compile: " + e.what());
        }
        out.push_back(line);
    }
    return out;
}

Checkpoint lm_checkpoint(CaptionLM& model, const nlohmann::json& metadata) {
    Checkpoint c;
    c.metadata = metadata;
    c.metadata["kind"] = "caption-lm";
    c.metadata["vocab_size"] = model.vocab_size();
    c.metadata["lm_config"] = model.config().to_json();
    append_blocks(c, model.params());
    append_blocks(c, model.buffers());
    return c;
}

CaptionLM lm_from_checkpoint(const Checkpoint& c) {
    require(c.metadata.value("kind", std::string()) == "caption-lm", ErrorKind::format, "checkpoint is not a caption model");
    CaptionLM m(c.metadata.at("vocab_size").get<std::size_t>(), CaptionLMConfig::from_json(c.metadata.at("lm_config")), 0);
    load_blocks(c, m.params());
    load_blocks(c, m.buffers());
    return m;
}

} // namespace gtgm::captioner
