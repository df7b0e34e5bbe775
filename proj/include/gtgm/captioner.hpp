#pragma once

// Captions for volumes: a template synthesizer, a small image-conditioned
// recurrent language model with exact gradients, caption filtering and
// image-text pairing.

#include "gtgm/optim.hpp"
#include "gtgm/params.hpp"
#include "gtgm/rng.hpp"
#include "gtgm/volumes.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace gtgm::captioner {

using TokenId = std::uint32_t;

constexpr TokenId kBos = 0;
constexpr TokenId kEos = 1;
constexpr TokenId kUnk = 2;

std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
public:
    // Reserved tokens are prepended; `words` must not repeat or contain them.
    explicit Vocabulary(const std::vector<std::string>& words);
    // Closed vocabulary covering every template caption.
    static const Vocabulary& standard();

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    // Out-of-vocabulary words map to UNK.
    TokenId id(const std::string& word) const;
    // Vocabulary error for ids outside [0, V).
    const std::string& token(TokenId id) const;
    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

private:
    std::vector<std::string> tokens_;
    std::map<std::string, TokenId> index_;
};

enum class CaptionSource { template_path, lm };
const char* to_string(CaptionSource s) noexcept;

struct Caption {
    std::string volume_id;
    std::string text;
    std::vector<TokenId> token_ids;  // ids of the full text, dataset prefix included
    CaptionSource source = CaptionSource::template_path;
    std::string dataset_name;

    nlohmann::json to_json() const;
    static Caption from_json(const nlohmann::json& j);
    bool operator==(const Caption&) const = default;
};

// "<modality> scan shows <contrast> <structure> with count <n>" or
// "<modality> scan with no focal finding"; no dataset prefix.
std::string template_body(volumes::Modality m, const volumes::AttributeRecord& a);
Caption template_caption(const volumes::Volume& v, const Vocabulary& vocab = Vocabulary::standard());
std::string count_word(std::uint32_t n);
const char* modality_word(volumes::Modality m) noexcept;
const char* contrast_word(volumes::Modality m, volumes::ContrastSign c) noexcept;
const char* structure_word(volumes::StructureKind k) noexcept;

// Body tokens followed by EOS: what the language model is trained to emit.
std::vector<TokenId> lm_target(const volumes::Volume& v, const Vocabulary& vocab = Vocabulary::standard());

// Mean over a grid x grid partition of the slice (row-major cells).
constexpr std::size_t kFeatureGrid = 8;
std::vector<double> slice_feature(const volumes::Slice& s, std::size_t grid = kFeatureGrid);

struct CaptionLMConfig {
    std::size_t feature = kFeatureGrid * kFeatureGrid;
    std::size_t projector_hidden = 128;
    std::size_t embed = 16;
    std::size_t hidden = 64;

    nlohmann::json to_json() const;
    static CaptionLMConfig from_json(const nlohmann::json& j);
};

// h0 = tanh(P2 tanh(P1 x + p1) + p2) with x the standardized feature; gated recurrent cell over token
// embeddings; P(t_i | image, t_<i) = softmax(W_o h_i + b_o).
class CaptionLM {
public:
    CaptionLM(std::size_t vocab_size, CaptionLMConfig cfg, std::uint64_t seed);

    std::size_t vocab_size() const noexcept { return vocab_; }
    const CaptionLMConfig& config() const noexcept { return cfg_; }

    std::vector<double> initial_state(const std::vector<double>& feature) const;
    // Consumes `input`, updates h and returns the next-token distribution.
    std::vector<double> step(std::vector<double>& h, TokenId input) const;
    std::vector<double> logits(const std::vector<double>& h) const;

    // Per-dimension (f - shift) * scale; identity until fit_input is called.
    std::vector<double> standardize(const std::vector<double>& feature) const;
    void fit_input(const std::vector<std::vector<double>>& features);

    // Trainable parameters.
    ParamRefs params();
    // Fixed input statistics, saved with the checkpoint but never optimized.
    ParamRefs buffers();

    ParamBlock input_shift, input_scale;
    ParamBlock proj1_w, proj1_b, proj2_w, proj2_b;
    ParamBlock embedding;
    ParamBlock wz, wr, wn, uz, ur, un, bz, br, bn;
    ParamBlock out_w, out_b;

private:
    std::size_t vocab_;
    CaptionLMConfig cfg_;
};

// Teacher-forced negative log-likelihood, summed over target positions.
// Accumulates parameter gradients when `accumulate` is set.
double lm_loss(CaptionLM& model, const std::vector<double>& feature, const std::vector<TokenId>& target, bool accumulate = true);
double lm_loss_value(const CaptionLM& model, const std::vector<double>& feature, const std::vector<TokenId>& target);

enum class DecodeMode { greedy, sampled };

// Content tokens only; stops at EOS (not included) or after max_len tokens.
std::vector<TokenId> lm_generate(const CaptionLM& model, const std::vector<double>& feature, std::size_t max_len,
                                 DecodeMode mode = DecodeMode::greedy, std::uint64_t seed = 0);

// Fraction of target positions (body + EOS) matched by free-running greedy decoding.
double greedy_token_accuracy(const CaptionLM& model, const std::vector<const volumes::Volume*>& volumes, std::uint64_t slice_seed,
                             const Vocabulary& vocab = Vocabulary::standard());

struct LmTrainConfig {
    std::size_t max_steps = 2000;
    std::size_t batch = 64;
    std::size_t eval_every = 100;
    double accuracy_threshold = 0.95;
    // Stop at the first evaluation reaching the threshold; otherwise run max_steps.
    bool early_stop = false;
    double clip_norm = 5.0;
    // Random flips and transposes of the feature grid during training.
    bool augment = true;
    optim::AdamWConfig adamw{5e-3, 0.0};
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
};

struct LmTrainReport {
    double accuracy = 0.0;
    std::size_t steps = 0;
    bool reached_threshold = false;
    std::vector<std::pair<std::size_t, double>> accuracy_curve;
    std::vector<double> loss_curve;

    nlohmann::json to_json() const;
};

// Teacher-forced training on random slices with held-out greedy evaluation
// every eval_every steps and at the end. Input statistics are fitted first.
LmTrainReport train_caption_lm(CaptionLM& model, const std::vector<const volumes::Volume*>& train,
                               const std::vector<const volumes::Volume*>& heldout, const LmTrainConfig& cfg,
                               const Vocabulary& vocab = Vocabulary::standard());

// Caption from greedy decoding of one sampled slice, dataset prefix prepended.
Caption lm_caption(const CaptionLM& model, const volumes::Volume& v, std::uint64_t slice_seed,
                   const Vocabulary& vocab = Vocabulary::standard());

const std::vector<std::string>& default_stop_patterns();

// Per caption: strip the dataset prefix, delete every pattern match until none
// remain, normalize whitespace, re-prepend the prefix and re-tokenize. Exact
// duplicates of (volume_id, text) are dropped, keeping the first.
std::vector<Caption> filter_captions(const std::vector<Caption>& captions, const std::vector<std::string>& stop_patterns,
                                     const Vocabulary& vocab = Vocabulary::standard());

struct ImageTextPair {
    std::size_t volume_index = 0;
    std::string volume_id;
    Caption caption;
};

// One pair per volume in volume order, using each volume's first caption.
std::vector<ImageTextPair> build_pairs(const std::vector<volumes::Volume>& volumes, const std::vector<Caption>& captions);

void write_captions(const std::filesystem::path& path, const std::vector<Caption>& captions);
std::vector<Caption> read_captions(const std::filesystem::path& path);
// One regex per non-empty line; a pattern that does not compile is a config error naming its line.
std::vector<std::string> read_stop_patterns(const std::filesystem::path& path);

// Checkpoint round trip of the language model.
Checkpoint lm_checkpoint(CaptionLM& model, const nlohmann::json& metadata);
CaptionLM lm_from_checkpoint(const Checkpoint& c);

} // namespace gtgm::captioner
