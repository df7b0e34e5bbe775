#pragma once

// Trainable 3D image encoder, frozen hashed text encoder, two-layer projectors
// and a U-Net style segmentation decoder sharing the encoder's skip features.

#include "gtgm/params.hpp"
#include "gtgm/tensor.hpp"
#include "gtgm/volumes.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace gtgm::encoders {

FeatureMap patch_to_map(const volumes::Patch& p);

struct ImageEncoderConfig {
    std::size_t in_channels = 1;
    // One stage per entry: conv3 + ReLU + 2x average pool. Output width is channels.back().
    std::vector<std::size_t> channels{4, 8, 64};
    bool bias = true;

    void validate() const;
    nlohmann::json to_json() const;
    static ImageEncoderConfig from_json(const nlohmann::json& j);
};

class ImageEncoder {
public:
    struct Trace {
        std::vector<FeatureMap> stage_input;
        std::vector<FeatureMap> pre;    // conv output before ReLU
        std::vector<FeatureMap> skips;  // after ReLU, before pooling
        std::vector<FeatureMap> pooled;
        std::vector<double> output;

        const FeatureMap& bottleneck() const { return pooled.back(); }
    };

    explicit ImageEncoder(ImageEncoderConfig cfg = {}, std::uint64_t seed = 0);

    const ImageEncoderConfig& config() const noexcept { return cfg_; }
    std::size_t output_width() const noexcept { return cfg_.channels.back(); }
    std::size_t stages() const noexcept { return cfg_.channels.size(); }
    std::size_t downsample_factor() const noexcept { return std::size_t{1} << stages(); }
    // Dimension error naming the required multiple.
    void check_dims(Dims3 d) const;

    Trace forward(const FeatureMap& x) const;
    std::vector<double> encode(const volumes::Patch& p) const;

    // Accumulates parameter gradients from any combination of output,
    // skip and bottleneck gradients (empty spans/maps are skipped).
    FeatureMap backward(const Trace& t, std::span<const double> grad_output, const std::vector<FeatureMap>& grad_skips = {},
                        const FeatureMap* grad_bottleneck = nullptr, bool want_input = false);

    ParamRefs params();
    std::vector<ParamBlock>& weights() noexcept { return weights_; }
    std::vector<ParamBlock>& biases() noexcept { return biases_; }

private:
    ImageEncoderConfig cfg_;
    std::vector<ParamBlock> weights_;
    std::vector<ParamBlock> biases_;
};

// Frozen bag-of-hashed-tokens embedder; holds no trainable state.
class TextEncoder {
public:
    static constexpr std::uint64_t kDefaultSeed = 0x9e3779b97f4a7c15ull;

    explicit TextEncoder(std::size_t width = 64, std::uint64_t seed = kDefaultSeed);

    std::size_t width() const noexcept { return width_; }
    std::uint64_t seed() const noexcept { return seed_; }

    // Unit norm for non-empty input; the zero vector for an empty token list.
    std::vector<double> encode(std::span<const std::uint32_t> tokens) const;
    Matrix encode_batch(const std::vector<std::vector<std::uint32_t>>& captions) const;
    std::vector<double> token_vector(std::uint32_t token) const;

    // Checkpoint block "text_encoder.config": [seed low 32 bits, seed high 32 bits, width].
    ParamBlock as_block() const;
    static TextEncoder from_block(const ParamBlock& b);

private:
    std::size_t width_;
    std::uint64_t seed_;
};

// y = W2 relu(W1 x + b1) + b2, applied row-wise.
class Projector {
public:
    struct Trace {
        Matrix input;
        Matrix pre;
        Matrix hidden;
        Matrix output;
    };

    Projector(std::string name, std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed);
    // W1 = W2 = identity, zero biases: output = relu(input).
    static Projector identity(std::string name, std::size_t width);

    std::size_t in_width() const noexcept { return in_; }
    std::size_t out_width() const noexcept { return out_; }

    Trace forward(const Matrix& x) const;
    Matrix project(const Matrix& x) const;
    std::vector<double> project(std::span<const double> x) const;
    Matrix backward(const Trace& t, const Matrix& grad_out, bool want_input);

    ParamRefs params();

private:
    std::string name_;
    std::size_t in_, hidden_, out_;
    ParamBlock w1_, b1_, w2_, b2_;
};

struct SegDecoderConfig {
    // Per encoder stage, finest first.
    std::vector<std::size_t> channels{8, 8, 16};
    std::size_t classes = 2;

    void validate(const ImageEncoderConfig& enc) const;
    nlohmann::json to_json() const;
    static SegDecoderConfig from_json(const nlohmann::json& j);
};

class SegDecoder {
public:
    struct Trace {
        std::vector<FeatureMap> cat;  // concat(upsampled, skip) per level
        std::vector<FeatureMap> pre;
        std::vector<FeatureMap> act;
        FeatureMap logits;
    };
    struct Grads {
        std::vector<FeatureMap> skips;
        FeatureMap bottleneck;
    };

    SegDecoder(const ImageEncoderConfig& enc, SegDecoderConfig cfg, std::uint64_t seed);

    const SegDecoderConfig& config() const noexcept { return cfg_; }
    std::size_t classes() const noexcept { return cfg_.classes; }

    Trace forward(const ImageEncoder::Trace& pyramid) const;
    FeatureMap decode(const ImageEncoder::Trace& pyramid) const;
    Grads backward(const ImageEncoder::Trace& pyramid, const Trace& t, const FeatureMap& grad_logits);

    ParamRefs params();

private:
    ImageEncoderConfig enc_;
    SegDecoderConfig cfg_;
    std::vector<ParamBlock> weights_;
    std::vector<ParamBlock> biases_;
    ParamBlock head_w_, head_b_;
};

} // namespace gtgm::encoders
