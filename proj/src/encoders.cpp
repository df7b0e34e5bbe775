#include "gtgm/encoders.hpp"

#include "gtgm/error.hpp"
#include "gtgm/layers.hpp"
#include "gtgm/rng.hpp"

#include <cmath>

namespace gtgm::encoders {

FeatureMap patch_to_map(const volumes::Patch& p) {
    FeatureMap m(1, p.dims);
    std::copy(p.voxels.begin(), p.voxels.end(), m.data.begin());
    return m;
}

// ---- image encoder ----

void ImageEncoderConfig::validate() const {
    require(in_channels >= 1, ErrorKind::config, "image encoder needs at least one input channel");
    require(!channels.empty(), ErrorKind::config, "image encoder needs at least one stage");
    for (auto c : channels) require(c >= 1, ErrorKind::config, "image encoder stage widths must be positive");
}

nlohmann::json ImageEncoderConfig::to_json() const {
    return {{"in_channels", in_channels}, {"channels", channels}, {"bias", bias}};
}

ImageEncoderConfig ImageEncoderConfig::from_json(const nlohmann::json& j) {
    ImageEncoderConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    if (j.contains("channels")) c.channels = j["channels"].get<std::vector<std::size_t>>();
    c.bias = j.value("bias", c.bias);
    c.validate();
    return c;
}

ImageEncoder::ImageEncoder(ImageEncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    std::size_t in = cfg_.in_channels;
    for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
        const std::size_t out = cfg_.channels[s];
        ParamBlock w("image_encoder.stage" + std::to_string(s) + ".weight", {out, in, 3, 3, 3});
        init_uniform_fan_in(w, in * 27, rng);
        weights_.push_back(std::move(w));
        if (cfg_.bias) biases_.emplace_back("image_encoder.stage" + std::to_string(s) + ".bias", std::vector<std::size_t>{out});
        in = out;
    }
}

void ImageEncoder::check_dims(Dims3 d) const {
    const std::size_t f = downsample_factor();
    require(d.z > 0 && d.y > 0 && d.x > 0 && d.z % f == 0 && d.y % f == 0 && d.x % f == 0, ErrorKind::dimension,
            "patch dims " + d.str() + " must be multiples of " + std::to_string(f) + " for a " + std::to_string(stages()) +
                "-stage encoder");
}

ImageEncoder::Trace ImageEncoder::forward(const FeatureMap& x) const {
    require(x.channels == cfg_.in_channels, ErrorKind::dimension,
            "encoder expects " + std::to_string(cfg_.in_channels) + " input channels, got " + std::to_string(x.channels));
    check_dims(x.dims);
    Trace t;
    const FeatureMap* cur = &x;
    for (std::size_t s = 0; s < stages(); ++s) {
        t.stage_input.push_back(*cur);
        const std::span<const double> bias = cfg_.bias ? std::span<const double>(biases_[s].value) : std::span<const double>();
        t.pre.push_back(layers::conv3d(*cur, weights_[s].value, bias, cfg_.channels[s], 3));
        t.skips.push_back(layers::relu(t.pre.back()));
        t.pooled.push_back(layers::avgpool2(t.skips.back()));
        cur = &t.pooled.back();
    }
    t.output = layers::global_average(t.pooled.back());
    return t;
}

std::vector<double> ImageEncoder::encode(const volumes::Patch& p) const { return forward(patch_to_map(p)).output; }

FeatureMap ImageEncoder::backward(const Trace& t, std::span<const double> grad_output, const std::vector<FeatureMap>& grad_skips,
                                  const FeatureMap* grad_bottleneck, bool want_input) {
    const std::size_t S = stages();
    require(grad_skips.empty() || grad_skips.size() == S, ErrorKind::dimension, "skip gradient count does not match stages");
    FeatureMap g_pooled(t.pooled.back().channels, t.pooled.back().dims);
    if (!grad_output.empty()) {
        require(grad_output.size() == output_width(), ErrorKind::dimension, "encoder output gradient width mismatch");
        g_pooled = layers::global_average_backward(grad_output, t.pooled.back().dims);
    }
    if (grad_bottleneck != nullptr) {
        require(grad_bottleneck->data.size() == g_pooled.data.size(), ErrorKind::dimension, "bottleneck gradient shape mismatch");
        for (std::size_t i = 0; i < g_pooled.data.size(); ++i) g_pooled.data[i] += grad_bottleneck->data[i];
    }
    FeatureMap g_in;
    for (std::size_t s = S; s-- > 0;) {
        FeatureMap g_skip = layers::avgpool2_backward(g_pooled, t.skips[s].dims);
        if (!grad_skips.empty() && grad_skips[s].channels > 0) {
            require(grad_skips[s].data.size() == g_skip.data.size(), ErrorKind::dimension, "skip gradient shape mismatch");
            for (std::size_t i = 0; i < g_skip.data.size(); ++i) g_skip.data[i] += grad_skips[s].data[i];
        }
        const FeatureMap g_pre = layers::relu_backward(t.pre[s], g_skip);
        const std::span<double> gb = cfg_.bias ? std::span<double>(biases_[s].grad) : std::span<double>();
        const bool need = s > 0 || want_input;
        g_in = layers::conv3d_backward(t.stage_input[s], g_pre, weights_[s].value, weights_[s].grad, gb, 3, need);
        if (s > 0) g_pooled = std::move(g_in);
    }
    return want_input ? g_in : FeatureMap{};
}

ParamRefs ImageEncoder::params() {
    ParamRefs out;
    for (std::size_t s = 0; s < weights_.size(); ++s) {
        out.push_back(&weights_[s]);
        if (cfg_.bias) out.push_back(&biases_[s]);
    }
    return out;
}

// ---- text encoder ----

TextEncoder::TextEncoder(std::size_t width, std::uint64_t seed) : width_(width), seed_(seed) {
    require(width >= 1, ErrorKind::config, "text encoder width must be positive");
}

std::vector<double> TextEncoder::token_vector(std::uint32_t token) const {
    Rng rng(splitmix64(seed_ ^ splitmix64(static_cast<std::uint64_t>(token) + 1)));
    std::vector<double> v(width_);
    for (double& x : v) x = rng.normal();
    return v;
}

std::vector<double> TextEncoder::encode(std::span<const std::uint32_t> tokens) const {
    std::vector<double> sum(width_, 0.0);
    if (tokens.empty()) return sum;
    // Accumulate in sorted order so the result depends on the multiset only, bit for bit.
    std::vector<std::uint32_t> sorted(tokens.begin(), tokens.end());
    std::sort(sorted.begin(), sorted.end());
    for (auto t : sorted) {
        const auto v = token_vector(t);
        for (std::size_t i = 0; i < width_; ++i) sum[i] += v[i];
    }
    double n = 0.0;
    for (double x : sum) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0)
        for (double& x : sum) x /= n;
    return sum;
}

Matrix TextEncoder::encode_batch(const std::vector<std::vector<std::uint32_t>>& captions) const {
    Matrix m(captions.size(), width_);
    for (std::size_t r = 0; r < captions.size(); ++r) {
        const auto v = encode(captions[r]);
        std::copy(v.begin(), v.end(), m.row(r).begin());
    }
    return m;
}

ParamBlock TextEncoder::as_block() const {
    ParamBlock b("text_encoder.config", {3});
    b.value = {static_cast<double>(seed_ & 0xffffffffu), static_cast<double>(seed_ >> 32), static_cast<double>(width_)};
    b.grad.clear();
    return b;
}

TextEncoder TextEncoder::from_block(const ParamBlock& b) {
    require(b.value.size() == 3, ErrorKind::format, "text encoder block must hold 3 values");
    const auto lo = static_cast<std::uint64_t>(b.value[0]);
    const auto hi = static_cast<std::uint64_t>(b.value[1]);
    return TextEncoder(static_cast<std::size_t>(b.value[2]), lo | (hi << 32));
}

// ---- projector ----

Projector::Projector(std::string name, std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed)
    : name_(std::move(name)), in_(in), hidden_(hidden), out_(out), w1_(name_ + ".fc1.weight", {hidden, in}),
      b1_(name_ + ".fc1.bias", {hidden}), w2_(name_ + ".fc2.weight", {out, hidden}), b2_(name_ + ".fc2.bias", {out}) {
    require(in >= 1 && hidden >= 1 && out >= 1, ErrorKind::config, "projector widths must be positive");
    Rng rng(seed);
    init_uniform_fan_in(w1_, in, rng);
    init_uniform_fan_in(w2_, hidden, rng);
}

Projector Projector::identity(std::string name, std::size_t width) {
    Projector p(std::move(name), width, width, width, 0);
    std::fill(p.w1_.value.begin(), p.w1_.value.end(), 0.0);
    std::fill(p.w2_.value.begin(), p.w2_.value.end(), 0.0);
    for (std::size_t i = 0; i < width; ++i) {
        p.w1_.value[i * width + i] = 1.0;
        p.w2_.value[i * width + i] = 1.0;
    }
    return p;
}

Projector::Trace Projector::forward(const Matrix& x) const {
    require(x.cols() == in_, ErrorKind::dimension,
            name_ + " expects width " + std::to_string(in_) + ", got " + std::to_string(x.cols()));
    Trace t;
    t.input = x;
    t.pre = matmul_nt(x, Matrix(hidden_, in_, w1_.value));
    for (std::size_t r = 0; r < t.pre.rows(); ++r)
        for (std::size_t c = 0; c < hidden_; ++c) t.pre(r, c) += b1_.value[c];
    t.hidden = t.pre;
    for (double& v : t.hidden.values()) v = v > 0.0 ? v : 0.0;
    t.output = matmul_nt(t.hidden, Matrix(out_, hidden_, w2_.value));
    for (std::size_t r = 0; r < t.output.rows(); ++r)
        for (std::size_t c = 0; c < out_; ++c) t.output(r, c) += b2_.value[c];
    return t;
}

Matrix Projector::project(const Matrix& x) const { return forward(x).output; }

std::vector<double> Projector::project(std::span<const double> x) const {
    const Matrix m(1, x.size(), std::vector<double>(x.begin(), x.end()));
    return project(m).values();
}

Matrix Projector::backward(const Trace& t, const Matrix& grad_out, bool want_input) {
    require(grad_out.rows() == t.output.rows() && grad_out.cols() == out_, ErrorKind::dimension,
            name_ + " output gradient shape mismatch");
    // dW2 = G^T H, db2 = colsum G
    const Matrix gw2 = matmul_tn(grad_out, t.hidden);
    for (std::size_t i = 0; i < gw2.size(); ++i) w2_.grad[i] += gw2.values()[i];
    for (std::size_t r = 0; r < grad_out.rows(); ++r)
        for (std::size_t c = 0; c < out_; ++c) b2_.grad[c] += grad_out(r, c);
    Matrix gh = matmul(grad_out, Matrix(out_, hidden_, w2_.value));
    for (std::size_t i = 0; i < gh.size(); ++i)
        if (!(t.pre.values()[i] > 0.0)) gh.values()[i] = 0.0;
    const Matrix gw1 = matmul_tn(gh, t.input);
    for (std::size_t i = 0; i < gw1.size(); ++i) w1_.grad[i] += gw1.values()[i];
    for (std::size_t r = 0; r < gh.rows(); ++r)
        for (std::size_t c = 0; c < hidden_; ++c) b1_.grad[c] += gh(r, c);
    if (!want_input) return {};
    return matmul(gh, Matrix(hidden_, in_, w1_.value));
}

ParamRefs Projector::params() { return {&w1_, &b1_, &w2_, &b2_}; }

// ---- segmentation decoder ----

void SegDecoderConfig::validate(const ImageEncoderConfig& enc) const {
    require(channels.size() == enc.channels.size(), ErrorKind::config,
            "decoder needs one width per encoder stage (" + std::to_string(enc.channels.size()) + ")");
    for (auto c : channels) require(c >= 1, ErrorKind::config, "decoder widths must be positive");
    require(classes >= 1, ErrorKind::config, "decoder needs at least one class");
}

nlohmann::json SegDecoderConfig::to_json() const { return {{"channels", channels}, {"classes", classes}}; }

SegDecoderConfig SegDecoderConfig::from_json(const nlohmann::json& j) {
    SegDecoderConfig c;
    if (j.contains("channels")) c.channels = j["channels"].get<std::vector<std::size_t>>();
    c.classes = j.value("classes", c.classes);
    return c;
}

SegDecoder::SegDecoder(const ImageEncoderConfig& enc, SegDecoderConfig cfg, std::uint64_t seed)
    : enc_(enc), cfg_(std::move(cfg)), head_w_("decoder.head.weight", {cfg_.classes, cfg_.channels.front(), 1, 1, 1}),
      head_b_("decoder.head.bias", {cfg_.classes}) {
    cfg_.validate(enc_);
    Rng rng(seed);
    const std::size_t S = enc_.channels.size();
    weights_.resize(S);
    biases_.resize(S);
    // Level s consumes upsample(level s+1 output, or the bottleneck) concatenated with skip s.
    for (std::size_t s = S; s-- > 0;) {
        const std::size_t below = s + 1 < S ? cfg_.channels[s + 1] : enc_.channels.back();
        const std::size_t in = below + enc_.channels[s];
        weights_[s] = ParamBlock("decoder.level" + std::to_string(s) + ".weight", {cfg_.channels[s], in, 3, 3, 3});
        init_uniform_fan_in(weights_[s], in * 27, rng);
        biases_[s] = ParamBlock("decoder.level" + std::to_string(s) + ".bias", {cfg_.channels[s]});
    }
    init_uniform_fan_in(head_w_, cfg_.channels.front(), rng);
}

SegDecoder::Trace SegDecoder::forward(const ImageEncoder::Trace& pyr) const {
    const std::size_t S = enc_.channels.size();
    require(pyr.skips.size() == S && pyr.pooled.size() == S, ErrorKind::dimension,
            "feature pyramid has " + std::to_string(pyr.skips.size()) + " levels, decoder expects " + std::to_string(S));
    Trace t;
    t.cat.resize(S);
    t.pre.resize(S);
    t.act.resize(S);
    const FeatureMap* below = &pyr.bottleneck();
    for (std::size_t s = S; s-- > 0;) {
        const FeatureMap up = layers::upsample2(*below);
        require(up.dims == pyr.skips[s].dims && pyr.skips[s].channels == enc_.channels[s], ErrorKind::dimension,
                "feature pyramid level " + std::to_string(s) + " does not match the decoder");
        t.cat[s] = layers::concat(up, pyr.skips[s]);
        t.pre[s] = layers::conv3d(t.cat[s], weights_[s].value, biases_[s].value, cfg_.channels[s], 3);
        t.act[s] = layers::relu(t.pre[s]);
        below = &t.act[s];
    }
    t.logits = layers::conv3d(t.act[0], head_w_.value, head_b_.value, cfg_.classes, 1);
    return t;
}

FeatureMap SegDecoder::decode(const ImageEncoder::Trace& pyr) const { return forward(pyr).logits; }

SegDecoder::Grads SegDecoder::backward(const ImageEncoder::Trace& pyr, const Trace& t, const FeatureMap& grad_logits) {
    const std::size_t S = enc_.channels.size();
    Grads g;
    g.skips.resize(S);
    FeatureMap g_act = layers::conv3d_backward(t.act[0], grad_logits, head_w_.value, head_w_.grad, head_b_.grad, 1, true);
    for (std::size_t s = 0; s < S; ++s) {
        const FeatureMap g_pre = layers::relu_backward(t.pre[s], g_act);
        const FeatureMap g_cat = layers::conv3d_backward(t.cat[s], g_pre, weights_[s].value, weights_[s].grad, biases_[s].grad, 3, true);
        const std::size_t up_channels = g_cat.channels - pyr.skips[s].channels;
        auto [g_up, g_skip] = layers::split(g_cat, up_channels);
        g.skips[s] = std::move(g_skip);
        g_act = layers::upsample2_backward(g_up);
    }
    g.bottleneck = std::move(g_act);
    return g;
}

ParamRefs SegDecoder::params() {
    ParamRefs out;
    for (std::size_t s = 0; s < weights_.size(); ++s) {
        out.push_back(&weights_[s]);
        out.push_back(&biases_[s]);
    }
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
}

} // namespace gtgm::encoders
