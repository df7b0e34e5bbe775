#pragma once

// Pretraining with the image-text and cross-view objectives, segmentation
// finetuning, checkpoint resume, and the sweep and ablation harnesses.

#include "gtgm/captioner.hpp"
#include "gtgm/encoders.hpp"
#include "gtgm/metrics.hpp"
#include "gtgm/objectives.hpp"
#include "gtgm/optim.hpp"
#include "gtgm/params.hpp"
#include "gtgm/rng.hpp"
#include "gtgm/volumes.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace gtgm::trainer {

// Config error listing every key of `j` outside `known`.
void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known, const std::string& context);

// FNV-1a of the compact dump; nlohmann objects are key-sorted, so equal configs hash equally.
std::string config_hash(const nlohmann::json& canonical);

nlohmann::json dims_to_json(Dims3 d);
Dims3 dims_from_json(const nlohmann::json& j);

nlohmann::json augmentation_to_json(const volumes::AugmentationSpec& a);
volumes::AugmentationSpec augmentation_from_json(const nlohmann::json& j);

// cap: captions as text (otherwise the dataset name alone); vlp and vr: loss terms.
struct TermSet {
    bool cap = true;
    bool vlp = true;
    bool vr = true;

    std::string label() const;
    bool operator==(const TermSet&) const = default;
};

enum class VlpImageSource { view1, raw_patch };

struct TrainConfig {
    std::size_t batch = 8;
    std::size_t iterations = 2000;
    std::uint64_t seed = 0;
    objectives::LossWeights weights;
    TermSet terms;
    std::size_t checkpoint_interval = 0;  // 0: final checkpoint only
    Dims3 patch{32, 32, 32};
    volumes::AugmentationSpec augmentation = default_augmentation();
    encoders::ImageEncoderConfig encoder;
    std::size_t text_width = 64;
    std::size_t embed_dim = 32;
    std::size_t projector_hidden = 64;
    optim::AdamWConfig adamw{1e-3, 5e-2};
    VlpImageSource vlp_image = VlpImageSource::view1;

    static volumes::AugmentationSpec default_augmentation();
    void validate() const;
    nlohmann::json to_json() const;
    // Unknown keys are config errors; missing keys take defaults.
    static TrainConfig from_json(const nlohmann::json& j);
    // Hash of the config without iterations and checkpoint_interval, so
    // checkpoints taken along one run, or runs differing only in length, agree.
    std::string hash() const;
};

struct PretrainModel {
    encoders::ImageEncoder encoder;
    encoders::Projector image_projector;
    encoders::Projector text_projector;
    encoders::TextEncoder text_encoder;

    explicit PretrainModel(const TrainConfig& cfg);
    // Text encoder excluded: it is frozen.
    ParamRefs trainable();
};

struct LossRow {
    std::size_t step = 0;
    double total = 0.0;
    double vlp = 0.0;
    double vr = 0.0;
    double grad_norm = 0.0;

    bool operator==(const LossRow&) const = default;
};

// step,total,term_vlp,term_vr,grad_norm with round-trip precision.
std::string loss_csv(const std::vector<LossRow>& rows);

class Pretrainer {
public:
    // pairs index into vols; the corpus must hold at least batch pairs.
    Pretrainer(TrainConfig cfg, const std::vector<volumes::Volume>& vols, std::vector<captioner::ImageTextPair> pairs);
    // Resume: restores parameters, optimizer moments, iteration and generator state.
    Pretrainer(const Checkpoint& c, const std::vector<volumes::Volume>& vols, std::vector<captioner::ImageTextPair> pairs);
    // The optimizer holds pointers into the model.
    Pretrainer(const Pretrainer&) = delete;
    Pretrainer& operator=(const Pretrainer&) = delete;

    LossRow step();
    // Runs until `iterations` total steps; on_checkpoint fires at every interval and at the end.
    void run(const std::function<void(const Checkpoint&)>& on_checkpoint = {});

    Checkpoint checkpoint();
    const TrainConfig& config() const noexcept { return cfg_; }
    std::size_t iteration() const noexcept { return iteration_; }
    const std::vector<LossRow>& curve() const noexcept { return curve_; }
    PretrainModel& model() noexcept { return model_; }

private:
    TrainConfig cfg_;
    const std::vector<volumes::Volume>* vols_;
    std::vector<captioner::ImageTextPair> pairs_;
    std::vector<std::vector<std::uint32_t>> texts_;
    PretrainModel model_;
    ParamRefs params_;
    optim::AdamW opt_;
    Rng rng_;
    std::size_t iteration_ = 0;
    std::vector<LossRow> curve_;
};

// Pretrain with checkpoints written to `out_dir` (ckpt_<iteration>.bin) when non-empty.
struct PretrainResult {
    Checkpoint final_checkpoint;
    std::vector<LossRow> curve;
    std::vector<std::filesystem::path> written;
};
PretrainResult pretrain(const std::vector<volumes::Volume>& vols, const std::vector<captioner::ImageTextPair>& pairs,
                        const TrainConfig& cfg, const std::filesystem::path& out_dir = {});

// Image encoder stored in a pretraining checkpoint.
encoders::ImageEncoder encoder_from_checkpoint(const Checkpoint& c);
TrainConfig config_from_checkpoint(const Checkpoint& c);

// ---- segmentation finetuning ----

struct FinetuneConfig {
    double label_fraction = 0.1;
    double heldout_fraction = 0.2;
    std::uint64_t split_seed = 0;  // fixes the train/held-out split across run seeds
    std::uint64_t seed = 0;        // label subset, decoder init, patch sampling
    std::size_t iterations = 300;
    std::size_t batch = 2;
    Dims3 patch{16, 16, 16};
    optim::AdamWConfig adamw{2e-3, 1e-4};
    encoders::SegDecoderConfig decoder;
    // Used only for random-init runs; pretrained runs take the checkpoint's encoder.
    encoders::ImageEncoderConfig encoder;
    double dice_smooth = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static FinetuneConfig from_json(const nlohmann::json& j);
};

// Foreground mask: any nonzero instance label, except dense cells where
// the membrane (a voxel with a 6-neighbour in another cell) is foreground.
volumes::LabelVolume semantic_target(const volumes::Volume& v, const volumes::LabelVolume& labels);

// Equal-weight soft Dice over foreground classes plus mean voxel cross-entropy,
// with the gradient with respect to the logits.
struct SegLoss {
    double total = 0.0;
    double dice = 0.0;
    double ce = 0.0;
    std::vector<FeatureMap> grad;
};
SegLoss seg_loss(const std::vector<FeatureMap>& logits, const std::vector<const volumes::LabelVolume*>& targets, double smooth);

struct Split {
    std::vector<std::size_t> train;    // labeled prefix after the fraction cut
    std::vector<std::size_t> heldout;
};
// Held-out set from split_seed; labeled subset is floor(fraction * |train|)
// (at least 1) taken as the prefix of a seed-shuffled training list.
Split make_split(std::size_t n, const FinetuneConfig& cfg);

struct EvalRow {
    std::uint64_t run_seed = 0;
    std::string metric;
    double value = 0.0;
};
std::string eval_csv(const std::vector<EvalRow>& rows);

struct FinetuneResult {
    Checkpoint checkpoint;
    std::vector<double> loss_curve;
    double mean_dice = 0.0;  // over held-out volumes whose target has foreground
    double mean_voi = 0.0;
    double mean_arand = 0.0;
    std::size_t labeled = 0;
    std::vector<EvalRow> rows;
};

// `pretrained` null: random encoder init from cfg.encoder.
FinetuneResult finetune(const Checkpoint* pretrained, const volumes::Dataset& data, const FinetuneConfig& cfg);

// Whole-volume prediction with a finetuned checkpoint.
volumes::LabelVolume predict(const Checkpoint& finetuned, const volumes::Volume& v);

// ---- harnesses ----

struct SweepRow {
    std::size_t iteration = 0;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_seed;
};
// Finetunes from each checkpoint with every seed; checkpoints must share a config hash.
std::vector<SweepRow> sweep(const std::vector<Checkpoint>& ckpts, const volumes::Dataset& data, const FinetuneConfig& cfg,
                            const std::vector<std::uint64_t>& seeds);
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct AblationRow {
    TermSet terms;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    bool converged = false;  // final <= 0.5 * initial
    double mean_dice = 0.0;  // over held-out volumes whose target has foreground
};
// Standard rows: VR only, VLP only, Cap+VLP, Cap+VLP+VR.
std::vector<TermSet> ablation_terms();
std::vector<AblationRow> ablate(const volumes::Dataset& data, const std::vector<captioner::Caption>& captions,
                                const TrainConfig& base, const FinetuneConfig& ft);
std::string ablation_csv(const std::vector<AblationRow>& rows);

// Head/tail averages used for convergence: mean of the first and last `window` totals.
std::pair<double, double> loss_endpoints(const std::vector<LossRow>& curve, std::size_t window);

} // namespace gtgm::trainer
