#include "gtgm/trainer.hpp"

#include "gtgm/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace gtgm::trainer {

using captioner::ImageTextPair;
using encoders::ImageEncoder;
using encoders::SegDecoder;
using volumes::LabelKind;
using volumes::LabelVolume;
using volumes::Volume;

void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known, const std::string& context) {
    require(j.is_object(), ErrorKind::config, context + " must be a JSON object");
    std::vector<std::string> unknown;
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), std::string_view(key)) == known.end()) unknown.push_back(key);
    }
    if (unknown.empty()) return;
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    fail(ErrorKind::config, "unknown " + context + " keys: " + list);
}

std::string config_hash(const nlohmann::json& canonical) { return hex64(fnv1a64(canonical.dump())); }

nlohmann::json dims_to_json(Dims3 d) { return {d.z, d.y, d.x}; }

Dims3 dims_from_json(const nlohmann::json& j) {
    if (j.is_number_unsigned()) {
        const auto n = j.get<std::size_t>();
        return {n, n, n};
    }
    require(j.is_array() && j.size() == 3, ErrorKind::config, "dims must be a number or [z, y, x]");
    return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

nlohmann::json augmentation_to_json(const volumes::AugmentationSpec& a) {
    return {{"flip_z", a.flip_z},       {"flip_y", a.flip_y},           {"flip_x", a.flip_x},
            {"jitter_lo", a.jitter_lo}, {"jitter_hi", a.jitter_hi},     {"noise_sigma", a.noise_sigma},
            {"crop_jitter", a.crop_jitter}};
}

volumes::AugmentationSpec augmentation_from_json(const nlohmann::json& j) {
    check_keys(j, {"flip_z", "flip_y", "flip_x", "jitter_lo", "jitter_hi", "noise_sigma", "crop_jitter"}, "augmentation");
    volumes::AugmentationSpec a = TrainConfig::default_augmentation();
    a.flip_z = j.value("flip_z", a.flip_z);
    a.flip_y = j.value("flip_y", a.flip_y);
    a.flip_x = j.value("flip_x", a.flip_x);
    a.jitter_lo = j.value("jitter_lo", a.jitter_lo);
    a.jitter_hi = j.value("jitter_hi", a.jitter_hi);
    a.noise_sigma = j.value("noise_sigma", a.noise_sigma);
    a.crop_jitter = j.value("crop_jitter", a.crop_jitter);
    a.validate();
    return a;
}

std::string TermSet::label() const {
    std::string s;
    if (cap) s += "cap";
    if (vlp) s += s.empty() ? "vlp" : "+vlp";
    if (vr) s += s.empty() ? "vr" : "+vr";
    return s.empty() ? "none" : s;
}

namespace {

nlohmann::json weights_to_json(const objectives::LossWeights& w) {
    return {{"lambda_vlp", w.lambda_vlp}, {"lambda_vr", w.lambda_vr}, {"lambda_offdiag", w.lambda_offdiag}, {"sigma1", w.sigma1}};
}

objectives::LossWeights weights_from_json(const nlohmann::json& j) {
    check_keys(j, {"lambda_vlp", "lambda_vr", "lambda_offdiag", "sigma1"}, "loss weight");
    objectives::LossWeights w;
    w.lambda_vlp = j.value("lambda_vlp", w.lambda_vlp);
    w.lambda_vr = j.value("lambda_vr", w.lambda_vr);
    w.lambda_offdiag = j.value("lambda_offdiag", w.lambda_offdiag);
    w.sigma1 = j.value("sigma1", w.sigma1);
    return w;
}

optim::AdamWConfig adamw_from_json(const nlohmann::json& j, optim::AdamWConfig base) {
    check_keys(j, {"lr", "weight_decay", "beta1", "beta2", "eps"}, "adamw");
    base.lr = j.value("lr", base.lr);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    base.beta1 = j.value("beta1", base.beta1);
    base.beta2 = j.value("beta2", base.beta2);
    base.eps = j.value("eps", base.eps);
    base.validate();
    return base;
}

encoders::ImageEncoderConfig encoder_from_json(const nlohmann::json& j) {
    check_keys(j, {"in_channels", "channels", "bias"}, "encoder");
    return encoders::ImageEncoderConfig::from_json(j);
}

encoders::SegDecoderConfig decoder_from_json(const nlohmann::json& j) {
    check_keys(j, {"channels", "classes"}, "decoder");
    return encoders::SegDecoderConfig::from_json(j);
}

} // namespace

volumes::AugmentationSpec TrainConfig::default_augmentation() {
    volumes::AugmentationSpec a;
    a.flip_z = a.flip_y = a.flip_x = true;
    a.jitter_lo = 0.9;
    a.jitter_hi = 1.1;
    a.noise_sigma = 0.02;
    a.crop_jitter = 2;
    return a;
}

void TrainConfig::validate() const {
    require(terms.vlp || terms.vr, ErrorKind::config, "at least one loss term (vlp or vr) must be enabled");
    require(!terms.cap || terms.vlp, ErrorKind::config, "the caption term only applies together with vlp");
    require(batch >= 1, ErrorKind::config, "batch size must be at least 1");
    require(!terms.vr || batch >= 2, ErrorKind::config, "the vr term needs batch size K >= 2");
    require(iterations >= 1, ErrorKind::config, "iterations must be at least 1");
    require(text_width >= 1 && embed_dim >= 1 && projector_hidden >= 1, ErrorKind::config, "widths must be positive");
    weights.validate();
    augmentation.validate();
    encoder.validate();
    adamw.validate();
    const std::size_t f = std::size_t{1} << encoder.channels.size();
    require(patch.z % f == 0 && patch.y % f == 0 && patch.x % f == 0 && patch.count() > 0, ErrorKind::dimension,
            "patch " + patch.str() + " must be a positive multiple of " + std::to_string(f) + " per axis");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"batch", batch},
            {"iterations", iterations},
            {"seed", seed},
            {"weights", weights_to_json(weights)},
            {"terms", {{"cap", terms.cap}, {"vlp", terms.vlp}, {"vr", terms.vr}}},
            {"checkpoint_interval", checkpoint_interval},
            {"patch", dims_to_json(patch)},
            {"augmentation", augmentation_to_json(augmentation)},
            {"encoder", encoder.to_json()},
            {"text_width", text_width},
            {"embed_dim", embed_dim},
            {"projector_hidden", projector_hidden},
            {"adamw", adamw.to_json()},
            {"vlp_image", vlp_image == VlpImageSource::view1 ? "view1" : "raw_patch"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    check_keys(j,
               {"batch", "iterations", "seed", "weights", "terms", "checkpoint_interval", "patch", "augmentation", "encoder",
                "text_width", "embed_dim", "projector_hidden", "adamw", "vlp_image"},
               "pretrain config");
    TrainConfig c;
    try {
        c.batch = j.value("batch", c.batch);
        c.iterations = j.value("iterations", c.iterations);
        c.seed = j.value("seed", c.seed);
        if (j.contains("weights")) c.weights = weights_from_json(j["weights"]);
        if (j.contains("terms")) {
            check_keys(j["terms"], {"cap", "vlp", "vr"}, "terms");
            c.terms.cap = j["terms"].value("cap", c.terms.cap);
            c.terms.vlp = j["terms"].value("vlp", c.terms.vlp);
            c.terms.vr = j["terms"].value("vr", c.terms.vr);
        }
        c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
        if (j.contains("patch")) c.patch = dims_from_json(j["patch"]);
        if (j.contains("augmentation")) c.augmentation = augmentation_from_json(j["augmentation"]);
        if (j.contains("encoder")) c.encoder = encoder_from_json(j["encoder"]);
        c.text_width = j.value("text_width", c.text_width);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.projector_hidden = j.value("projector_hidden", c.projector_hidden);
        if (j.contains("adamw")) c.adamw = adamw_from_json(j["adamw"], c.adamw);
        if (j.contains("vlp_image")) {
            const auto s = j["vlp_image"].get<std::string>();
            require(s == "view1" || s == "raw_patch", ErrorKind::config, "vlp_image must be view1 or raw_patch");
            c.vlp_image = s == "view1" ? VlpImageSource::view1 : VlpImageSource::raw_patch;
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::config, std::string("malformed pretrain config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string TrainConfig::hash() const {
    auto j = to_json();
    j.erase("iterations");
    j.erase("checkpoint_interval");
    return config_hash(j);
}

PretrainModel::PretrainModel(const TrainConfig& cfg)
    : encoder(cfg.encoder, splitmix64(cfg.seed ^ 0x1)),
      image_projector("image_projector", cfg.encoder.channels.back(), cfg.projector_hidden, cfg.embed_dim,
                      splitmix64(cfg.seed ^ 0x2)),
      text_projector("text_projector", cfg.text_width, cfg.projector_hidden, cfg.embed_dim, splitmix64(cfg.seed ^ 0x3)),
      text_encoder(cfg.text_width) {}

ParamRefs PretrainModel::trainable() {
    ParamRefs out = encoder.params();
    for (auto* p : image_projector.params()) out.push_back(p);
    for (auto* p : text_projector.params()) out.push_back(p);
    return out;
}

std::string loss_csv(const std::vector<LossRow>& rows) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "step,total,term_vlp,term_vr,grad_norm\n";
    for (const auto& r : rows) out << r.step << ',' << r.total << ',' << r.vlp << ',' << r.vr << ',' << r.grad_norm << '\n';
    return out.str();
}

namespace {

std::vector<std::vector<std::uint32_t>> pair_texts(const std::vector<Volume>& vols, const std::vector<ImageTextPair>& pairs,
                                                   bool use_captions) {
    std::vector<std::vector<std::uint32_t>> texts;
    for (const auto& p : pairs) {
        require(p.volume_index < vols.size(), ErrorKind::linkage,
                "pair for '" + p.volume_id + "' points past the end of the volume list");
        require(vols[p.volume_index].id == p.volume_id, ErrorKind::linkage,
                "pair id '" + p.volume_id + "' does not match volume '" + vols[p.volume_index].id + "'");
        if (use_captions) {
            texts.push_back(p.caption.token_ids);
        } else {
            texts.push_back(captioner::Vocabulary::standard().encode(vols[p.volume_index].dataset_name));
        }
    }
    return texts;
}

// Volume ids and text tokens of every pair, so a resume can check it sees the same corpus.
std::string corpus_hash(const std::vector<ImageTextPair>& pairs, const std::vector<std::vector<std::uint32_t>>& texts) {
    std::uint64_t h = fnv1a64("");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        h = fnv1a64(pairs[i].volume_id, h);
        for (auto t : texts[i]) h = fnv1a64(std::to_string(t) + ",", h);
        h = fnv1a64(";", h);
    }
    return hex64(h);
}

Matrix rows_of(const Matrix& m, std::size_t first, std::size_t count) {
    Matrix out(count, m.cols());
    for (std::size_t r = 0; r < count; ++r)
        std::copy(m.row(first + r).begin(), m.row(first + r).end(), out.row(r).begin());
    return out;
}

void add_rows(Matrix& dst, std::size_t first, const Matrix& src) {
    for (std::size_t r = 0; r < src.rows(); ++r)
        for (std::size_t c = 0; c < src.cols(); ++c) dst(first + r, c) += src(r, c);
}

} // namespace

Pretrainer::Pretrainer(TrainConfig cfg, const std::vector<Volume>& vols, std::vector<ImageTextPair> pairs)
    : cfg_((cfg.validate(), std::move(cfg))), vols_(&vols), pairs_(std::move(pairs)),
      texts_(pair_texts(vols, pairs_, cfg_.terms.cap)), model_(cfg_), params_(model_.trainable()), opt_(cfg_.adamw, params_),
      rng_(splitmix64(cfg_.seed ^ 0x7a11)) {
    require(pairs_.size() >= cfg_.batch, ErrorKind::config,
            "corpus of " + std::to_string(pairs_.size()) + " pairs is smaller than batch size " + std::to_string(cfg_.batch));
    for (const auto& v : vols) {
        require(v.dims.z >= cfg_.patch.z && v.dims.y >= cfg_.patch.y && v.dims.x >= cfg_.patch.x, ErrorKind::dimension,
                "volume '" + v.id + "' " + v.dims.str() + " is smaller than patch " + cfg_.patch.str());
    }
}

Pretrainer::Pretrainer(const Checkpoint& c, const std::vector<Volume>& vols, std::vector<ImageTextPair> pairs)
    : Pretrainer(config_from_checkpoint(c), vols, std::move(pairs)) {
    require(c.metadata.value("config_hash", std::string()) == cfg_.hash(), ErrorKind::format,
            "checkpoint config hash does not match its stored config");
    require(c.metadata.value("corpus_hash", std::string()) == corpus_hash(pairs_, texts_), ErrorKind::config,
            "resume corpus differs from the one the checkpoint was trained on (volumes or captions changed)");
    load_blocks(c, params_);
    const auto text = encoders::TextEncoder::from_block(c.at("text_encoder.config"));
    require(text.seed() == model_.text_encoder.seed() && text.width() == model_.text_encoder.width(), ErrorKind::format,
            "checkpoint text encoder differs from the configured one");
    opt_.load(c);
    rng_.restore(c.metadata.at("rng_state").get<std::string>());
    iteration_ = c.metadata.at("iteration").get<std::size_t>();
}

LossRow Pretrainer::step() {
    const std::size_t K = cfg_.batch;
    const bool vlp = cfg_.terms.vlp, vr = cfg_.terms.vr;
    const bool raw = vlp && cfg_.vlp_image == VlpImageSource::raw_patch;
    const bool need_view1 = vr || (vlp && !raw);

    // Batch assembly: every random draw comes from rng_ in a fixed order.
    std::vector<std::size_t> order(pairs_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < K; ++i) {
        const auto j = i + static_cast<std::size_t>(rng_.below(order.size() - i));
        std::swap(order[i], order[j]);
    }
    std::vector<volumes::Patch> inputs;
    std::vector<std::vector<std::uint32_t>> texts;
    std::vector<volumes::Patch> view1, view2, raws;
    for (std::size_t b = 0; b < K; ++b) {
        const auto& pair = pairs_[order[b]];
        const auto patch = volumes::sample_patch((*vols_)[pair.volume_index], cfg_.patch, rng_);
        auto aug = cfg_.augmentation;
        aug.rng_seed = rng_.next_u64();
        auto [a, bview] = volumes::augment_views(patch, aug);
        view1.push_back(std::move(a));
        view2.push_back(std::move(bview));
        raws.push_back(patch);
        texts.push_back(texts_[order[b]]);
    }
    std::size_t off_v1 = 0, off_v2 = 0, off_raw = 0;
    if (need_view1) {
        off_v1 = inputs.size();
        inputs.insert(inputs.end(), view1.begin(), view1.end());
    }
    if (vr) {
        off_v2 = inputs.size();
        inputs.insert(inputs.end(), view2.begin(), view2.end());
    }
    if (raw) {
        off_raw = inputs.size();
        inputs.insert(inputs.end(), raws.begin(), raws.end());
    }

    // Forward.
    zero_grads(params_);
    std::vector<ImageEncoder::Trace> traces;
    Matrix feats(inputs.size(), model_.encoder.output_width());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        traces.push_back(model_.encoder.forward(encoders::patch_to_map(inputs[i])));
        std::copy(traces.back().output.begin(), traces.back().output.end(), feats.row(i).begin());
    }
    const auto img_trace = model_.image_projector.forward(feats);

    using objectives::EmbeddingBatch;
    using objectives::Side;
    EmbeddingBatch v1{need_view1 ? rows_of(img_trace.output, off_v1, K) : Matrix(), Side::image_view1};
    EmbeddingBatch v2{vr ? rows_of(img_trace.output, off_v2, K) : Matrix(), Side::image_view2};
    EmbeddingBatch vhat = raw ? EmbeddingBatch{rows_of(img_trace.output, off_raw, K), Side::image_vlp} : v1;
    encoders::Projector::Trace text_trace;
    EmbeddingBatch that{Matrix(), Side::text};
    if (vlp) {
        text_trace = model_.text_projector.forward(model_.text_encoder.encode_batch(texts));
        that.values = text_trace.output;
    }
    const auto report = objectives::total_loss(vlp ? &vhat : nullptr, vlp ? &that : nullptr, vr ? &v1 : nullptr,
                                               vr ? &v2 : nullptr, cfg_.weights, {vlp, vr});

    // Backward.
    Matrix grad_img(inputs.size(), img_trace.output.cols());
    const auto grad_of = [&](Side s) -> const Matrix* {
        const auto it = report.gradients.find(objectives::side_name(s));
        return it == report.gradients.end() ? nullptr : &it->second;
    };
    if (const auto* g = grad_of(Side::image_view1)) add_rows(grad_img, off_v1, *g);
    if (const auto* g = grad_of(Side::image_view2)) add_rows(grad_img, off_v2, *g);
    if (const auto* g = grad_of(Side::image_vlp)) add_rows(grad_img, off_raw, *g);
    if (const auto* g = grad_of(Side::text)) model_.text_projector.backward(text_trace, *g, false);
    const Matrix grad_feats = model_.image_projector.backward(img_trace, grad_img, true);
    for (std::size_t i = 0; i < inputs.size(); ++i) model_.encoder.backward(traces[i], grad_feats.row(i));

    LossRow row;
    row.grad_norm = grad_norm(params_);
    opt_.step(params_);
    ++iteration_;
    row.step = iteration_;
    row.total = report.total;
    row.vlp = report.terms.contains("vlp") ? report.terms.at("vlp") : 0.0;
    row.vr = report.terms.contains("vr") ? report.terms.at("vr") : 0.0;
    curve_.push_back(row);
    return row;
}

void Pretrainer::run(const std::function<void(const Checkpoint&)>& on_checkpoint) {
    while (iteration_ < cfg_.iterations) {
        step();
        const bool at_interval = cfg_.checkpoint_interval > 0 && iteration_ % cfg_.checkpoint_interval == 0;
        if (on_checkpoint && (at_interval || iteration_ == cfg_.iterations)) on_checkpoint(checkpoint());
    }
}

Checkpoint Pretrainer::checkpoint() {
    Checkpoint c;
    c.metadata["kind"] = "pretrain";
    c.metadata["iteration"] = iteration_;
    c.metadata["config"] = cfg_.to_json();
    c.metadata["config_hash"] = cfg_.hash();
    c.metadata["rng_state"] = rng_.state();
    c.metadata["corpus_hash"] = corpus_hash(pairs_, texts_);
    append_blocks(c, params_);
    c.blocks.push_back(model_.text_encoder.as_block());
    opt_.save(c);
    return c;
}

PretrainResult pretrain(const std::vector<Volume>& vols, const std::vector<ImageTextPair>& pairs, const TrainConfig& cfg,
                        const std::filesystem::path& out_dir) {
    Pretrainer t(cfg, vols, pairs);
    PretrainResult r;
    t.run([&](const Checkpoint& c) {
        if (!out_dir.empty()) {
            const auto path = out_dir / ("ckpt_" + std::to_string(c.metadata.at("iteration").get<std::size_t>()) + ".bin");
            write_checkpoint(path, c);
            r.written.push_back(path);
        }
        r.final_checkpoint = c;
    });
    r.curve = t.curve();
    return r;
}

TrainConfig config_from_checkpoint(const Checkpoint& c) {
    require(c.metadata.value("kind", std::string()) == "pretrain", ErrorKind::format, "checkpoint is not a pretraining checkpoint");
    require(c.metadata.contains("config"), ErrorKind::format, "checkpoint has no stored config");
    return TrainConfig::from_json(c.metadata.at("config"));
}

ImageEncoder encoder_from_checkpoint(const Checkpoint& c) {
    const auto cfg = config_from_checkpoint(c);
    ImageEncoder enc(cfg.encoder, 0);
    load_blocks(c, enc.params());
    return enc;
}

// ---- segmentation finetuning ----

void FinetuneConfig::validate() const {
    require(label_fraction > 0.0 && label_fraction <= 1.0, ErrorKind::config, "label_fraction must lie in (0, 1]");
    require(heldout_fraction >= 0.0 && heldout_fraction < 1.0, ErrorKind::config, "heldout_fraction must lie in [0, 1)");
    require(iterations >= 1 && batch >= 1, ErrorKind::config, "iterations and batch must be positive");
    require(dice_smooth >= 0.0, ErrorKind::config, "dice_smooth must be non-negative");
    require(decoder.classes >= 2, ErrorKind::config, "finetuning needs background and foreground classes");
    adamw.validate();
    encoder.validate();
}

nlohmann::json FinetuneConfig::to_json() const {
    return {{"label_fraction", label_fraction},
            {"heldout_fraction", heldout_fraction},
            {"split_seed", split_seed},
            {"seed", seed},
            {"iterations", iterations},
            {"batch", batch},
            {"patch", dims_to_json(patch)},
            {"adamw", adamw.to_json()},
            {"decoder", decoder.to_json()},
            {"encoder", encoder.to_json()},
            {"dice_smooth", dice_smooth}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
    check_keys(j,
               {"label_fraction", "heldout_fraction", "split_seed", "seed", "iterations", "batch", "patch", "adamw", "decoder",
                "encoder", "dice_smooth"},
               "finetune config");
    FinetuneConfig c;
    try {
        c.label_fraction = j.value("label_fraction", c.label_fraction);
        c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
        c.split_seed = j.value("split_seed", c.split_seed);
        c.seed = j.value("seed", c.seed);
        c.iterations = j.value("iterations", c.iterations);
        c.batch = j.value("batch", c.batch);
        if (j.contains("patch")) c.patch = dims_from_json(j["patch"]);
        if (j.contains("adamw")) c.adamw = adamw_from_json(j["adamw"], c.adamw);
        if (j.contains("decoder")) c.decoder = decoder_from_json(j["decoder"]);
        if (j.contains("encoder")) c.encoder = encoder_from_json(j["encoder"]);
        c.dice_smooth = j.value("dice_smooth", c.dice_smooth);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::config, std::string("malformed finetune config: ") + e.what());
    }
    c.validate();
    return c;
}

LabelVolume semantic_target(const Volume& v, const LabelVolume& labels) {
    require(labels.dims == v.dims && labels.labels.size() == v.dims.count(), ErrorKind::dimension,
            "labels of '" + v.id + "' do not match the volume dims");
    const Dims3 d = labels.dims;
    LabelVolume out;
    out.dims = d;
    out.kind = LabelKind::semantic;
    out.classes = {0, 1};
    out.labels.assign(d.count(), 0);
    const bool cells = v.attributes.structure_kind == volumes::StructureKind::dense_cells;
    for (std::size_t z = 0; z < d.z; ++z)
        for (std::size_t y = 0; y < d.y; ++y)
            for (std::size_t x = 0; x < d.x; ++x) {
                const std::size_t i = d.index(z, y, x);
                const auto l = labels.labels[i];
                if (!cells) {
                    out.labels[i] = l != 0 ? 1 : 0;
                    continue;
                }
                const bool boundary = (z + 1 < d.z && labels.labels[d.index(z + 1, y, x)] != l) ||
                                      (y + 1 < d.y && labels.labels[d.index(z, y + 1, x)] != l) ||
                                      (x + 1 < d.x && labels.labels[d.index(z, y, x + 1)] != l);
                out.labels[i] = boundary ? 1 : 0;
            }
    return out;
}

SegLoss seg_loss(const std::vector<FeatureMap>& logits, const std::vector<const LabelVolume*>& targets, double smooth) {
    require(!logits.empty() && logits.size() == targets.size(), ErrorKind::dimension, "logit and target counts differ");
    const std::size_t C = logits.front().channels;
    require(C >= 1, ErrorKind::dimension, "logits need at least one channel");
    std::size_t n_vox = 0;
    for (std::size_t b = 0; b < logits.size(); ++b) {
        require(logits[b].channels == C && logits[b].dims == targets[b]->dims, ErrorKind::dimension,
                "logits " + logits[b].dims.str() + " do not match target " + targets[b]->dims.str());
        n_vox += logits[b].plane();
    }
    const double N = static_cast<double>(n_vox);

    // Softmax probabilities.
    std::vector<FeatureMap> probs = logits;
    for (auto& p : probs) {
        const std::size_t P = p.plane();
        for (std::size_t i = 0; i < P; ++i) {
            double mx = -INFINITY;
            for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, p.data[c * P + i]);
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                p.data[c * P + i] = std::exp(p.data[c * P + i] - mx);
                s += p.data[c * P + i];
            }
            for (std::size_t c = 0; c < C; ++c) p.data[c * P + i] /= s;
        }
    }

    SegLoss out;
    std::vector<double> inter(C, 0.0), sum_p(C, 0.0), sum_g(C, 0.0);
    for (std::size_t b = 0; b < logits.size(); ++b) {
        const std::size_t P = probs[b].plane();
        for (std::size_t i = 0; i < P; ++i) {
            const auto y = targets[b]->labels[i];
            require(y < C, ErrorKind::dimension, "target class " + std::to_string(y) + " outside " + std::to_string(C) + " logits");
            out.ce -= std::log(std::max(probs[b].data[y * P + i], 1e-300)) / N;
            for (std::size_t c = 1; c < C; ++c) {
                const double p = probs[b].data[c * P + i];
                sum_p[c] += p;
                if (y == c) {
                    inter[c] += p;
                    sum_g[c] += 1.0;
                }
            }
        }
    }
    const std::size_t fg = C - 1;
    std::vector<double> dice_c(C, 0.0);
    if (fg > 0) {
        double mean = 0.0;
        for (std::size_t c = 1; c < C; ++c) {
            dice_c[c] = (2.0 * inter[c] + smooth) / (sum_p[c] + sum_g[c] + smooth);
            mean += dice_c[c];
        }
        out.dice = 1.0 - mean / static_cast<double>(fg);
    }
    out.total = out.dice + out.ce;

    // dL/dz_k = p_k (dL/dp_k - sum_c p_c dL/dp_c) for the Dice part; (p - onehot) / N for CE.
    out.grad.reserve(logits.size());
    for (std::size_t b = 0; b < logits.size(); ++b) {
        const std::size_t P = probs[b].plane();
        FeatureMap g(C, probs[b].dims);
        std::vector<double> dp(C);
        for (std::size_t i = 0; i < P; ++i) {
            const auto y = targets[b]->labels[i];
            dp[0] = 0.0;
            double dot = 0.0;
            for (std::size_t c = 1; c < C; ++c) {
                const double den = sum_p[c] + sum_g[c] + smooth;
                const double gy = y == c ? 1.0 : 0.0;
                dp[c] = -(2.0 * gy * den - (2.0 * inter[c] + smooth)) / (den * den) / static_cast<double>(fg);
            }
            for (std::size_t c = 0; c < C; ++c) dot += probs[b].data[c * P + i] * dp[c];
            for (std::size_t c = 0; c < C; ++c) {
                const double p = probs[b].data[c * P + i];
                g.data[c * P + i] = p * (dp[c] - dot) + (p - (y == c ? 1.0 : 0.0)) / N;
            }
        }
        out.grad.push_back(std::move(g));
    }
    return out;
}

Split make_split(std::size_t n, const FinetuneConfig& cfg) {
    cfg.validate();
    require(n >= 1, ErrorKind::config, "finetuning needs at least one labeled volume");
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Rng split_rng(splitmix64(cfg.split_seed ^ 0x5b117ull));
    split_rng.shuffle(all);
    auto n_held = static_cast<std::size_t>(std::floor(cfg.heldout_fraction * static_cast<double>(n)));
    if (cfg.heldout_fraction > 0.0) n_held = std::max<std::size_t>(n_held, 1);
    require(n_held < n, ErrorKind::config, "held-out split leaves no training volumes");
    Split s;
    s.heldout.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_held));
    std::sort(s.heldout.begin(), s.heldout.end());
    std::vector<std::size_t> train(all.begin() + static_cast<std::ptrdiff_t>(n_held), all.end());
    std::sort(train.begin(), train.end());
    Rng label_rng(splitmix64(cfg.seed ^ 0x1abe1ull));
    label_rng.shuffle(train);
    const auto keep = static_cast<std::size_t>(std::floor(cfg.label_fraction * static_cast<double>(train.size()) + 1e-9));
    require(keep >= 1 || !train.empty(), ErrorKind::config, "label fraction leaves no labeled volumes");
    train.resize(std::max<std::size_t>(keep, 1));
    s.train = std::move(train);
    return s;
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "run_seed,metric,value\n";
    for (const auto& r : rows) out << r.run_seed << ',' << r.metric << ',' << r.value << '\n';
    return out.str();
}

namespace {

LabelVolume crop_labels(const LabelVolume& l, Dims3 origin, Dims3 dims) {
    LabelVolume out;
    out.dims = dims;
    out.kind = l.kind;
    out.classes = l.classes;
    out.labels.resize(dims.count());
    for (std::size_t z = 0; z < dims.z; ++z)
        for (std::size_t y = 0; y < dims.y; ++y)
            for (std::size_t x = 0; x < dims.x; ++x)
                out.labels[dims.index(z, y, x)] = l.at(origin.z + z, origin.y + y, origin.x + x);
    return out;
}

struct SegModel {
    ImageEncoder encoder;
    SegDecoder decoder;

    ParamRefs params() {
        ParamRefs p = encoder.params();
        for (auto* q : decoder.params()) p.push_back(q);
        return p;
    }
    FeatureMap logits(const Volume& v) const {
        const auto t = encoder.forward(encoders::patch_to_map(volumes::whole_volume_patch(v)));
        return decoder.decode(t);
    }
};

LabelVolume predict_with(const SegModel& m, const Volume& v) {
    m.encoder.check_dims(v.dims);
    auto pred = metrics::argmax(m.logits(v));
    return pred;
}

} // namespace

FinetuneResult finetune(const Checkpoint* pretrained, const volumes::Dataset& data, const FinetuneConfig& cfg) {
    cfg.validate();
    require(data.volumes.size() == data.labels.size(), ErrorKind::linkage, "dataset volumes and labels differ in count");
    const auto split = make_split(data.volumes.size(), cfg);

    const auto enc_cfg = pretrained != nullptr ? config_from_checkpoint(*pretrained).encoder : cfg.encoder;
    SegModel model{ImageEncoder(enc_cfg, splitmix64(cfg.seed ^ 0xe1c0ull)), SegDecoder(enc_cfg, cfg.decoder, splitmix64(cfg.seed ^ 0xdec0ull))};
    if (pretrained != nullptr) load_blocks(*pretrained, model.encoder.params());
    model.encoder.check_dims(cfg.patch);

    std::vector<LabelVolume> targets(data.volumes.size());
    for (auto i : split.train) targets[i] = semantic_target(data.volumes[i], data.labels[i]);
    for (auto i : split.heldout) targets[i] = semantic_target(data.volumes[i], data.labels[i]);

    const auto params = model.params();
    optim::AdamW opt(cfg.adamw, params);
    Rng rng(splitmix64(cfg.seed ^ 0xf17eull));
    FinetuneResult result;
    result.labeled = split.train.size();
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        zero_grads(params);
        std::vector<ImageEncoder::Trace> enc_traces;
        std::vector<SegDecoder::Trace> dec_traces;
        std::vector<FeatureMap> logits;
        std::vector<LabelVolume> batch_targets;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto i = split.train[static_cast<std::size_t>(rng.below(split.train.size()))];
            const auto patch = volumes::sample_patch(data.volumes[i], cfg.patch, rng);
            batch_targets.push_back(crop_labels(targets[i], patch.origin, patch.dims));
            enc_traces.push_back(model.encoder.forward(encoders::patch_to_map(patch)));
            dec_traces.push_back(model.decoder.forward(enc_traces.back()));
            logits.push_back(dec_traces.back().logits);
        }
        std::vector<const LabelVolume*> tptr;
        for (const auto& t : batch_targets) tptr.push_back(&t);
        const auto loss = seg_loss(logits, tptr, cfg.dice_smooth);
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto g = model.decoder.backward(enc_traces[b], dec_traces[b], loss.grad[b]);
            model.encoder.backward(enc_traces[b], {}, g.skips, &g.bottleneck);
        }
        opt.step(params);
        result.loss_curve.push_back(loss.total);
    }

    // Held-out evaluation on whole volumes.
    // Dice averages over volumes with foreground: on an empty target it is 0 or 1
    // depending on a single voxel, which would dominate the mean.
    double dice_sum = 0.0, voi_sum = 0.0, arand_sum = 0.0;
    std::size_t n_dice = 0, n_inst = 0;
    for (auto i : split.heldout) {
        const auto pred = predict_with(model, data.volumes[i]);
        if (std::any_of(targets[i].labels.begin(), targets[i].labels.end(), [](auto l) { return l != 0; })) {
            dice_sum += metrics::dice(pred, targets[i], {0, 1}).mean;
            ++n_dice;
        }
        const auto kind = data.volumes[i].attributes.structure_kind;
        if (kind == volumes::StructureKind::ellipsoid_lesion || kind == volumes::StructureKind::tubular_vessel) {
            const auto inst = metrics::instances_from_argmax(pred);
            const auto t = metrics::contingency(data.labels[i], inst, true);
            voi_sum += metrics::voi(t).total;
            arand_sum += metrics::arand(t);
            ++n_inst;
        }
    }
    if (n_dice > 0) result.mean_dice = dice_sum / static_cast<double>(n_dice);
    if (n_inst > 0) {
        result.mean_voi = voi_sum / static_cast<double>(n_inst);
        result.mean_arand = arand_sum / static_cast<double>(n_inst);
    }
    result.rows = {{cfg.seed, "dice_mean", result.mean_dice},
                   {cfg.seed, "voi_total", result.mean_voi},
                   {cfg.seed, "arand", result.mean_arand},
                   {cfg.seed, "labeled_volumes", static_cast<double>(result.labeled)}};

    Checkpoint& c = result.checkpoint;
    c.metadata["kind"] = "finetune";
    c.metadata["encoder"] = enc_cfg.to_json();
    c.metadata["decoder"] = cfg.decoder.to_json();
    c.metadata["finetune"] = cfg.to_json();
    c.metadata["pretrained_hash"] = pretrained != nullptr ? nlohmann::json(pretrained->metadata.value("config_hash", "")) : nlohmann::json();
    c.metadata["pretrained_iteration"] =
        pretrained != nullptr ? nlohmann::json(pretrained->metadata.value("iteration", std::size_t{0})) : nlohmann::json();
    append_blocks(c, params);
    return result;
}

LabelVolume predict(const Checkpoint& finetuned, const Volume& v) {
    require(finetuned.metadata.value("kind", std::string()) == "finetune", ErrorKind::format, "checkpoint is not a finetuned model");
    const auto enc_cfg = encoders::ImageEncoderConfig::from_json(finetuned.metadata.at("encoder"));
    SegModel model{ImageEncoder(enc_cfg, 0), SegDecoder(enc_cfg, encoders::SegDecoderConfig::from_json(finetuned.metadata.at("decoder")), 0)};
    load_blocks(finetuned, model.params());
    return predict_with(model, v);
}

// ---- harnesses ----

std::vector<SweepRow> sweep(const std::vector<Checkpoint>& ckpts, const volumes::Dataset& data, const FinetuneConfig& cfg,
                            const std::vector<std::uint64_t>& seeds) {
    require(ckpts.size() >= 2, ErrorKind::config, "sweep needs at least two checkpoints");
    require(!seeds.empty(), ErrorKind::config, "sweep needs at least one seed");
    const auto hash = ckpts.front().metadata.value("config_hash", std::string());
    for (std::size_t i = 0; i < ckpts.size(); ++i) {
        const auto h = ckpts[i].metadata.value("config_hash", std::string());
        require(h == hash, ErrorKind::config,
                "checkpoint " + std::to_string(i) + " has config hash " + h + ", expected " + hash + " (sweeps need one pretraining run)");
    }
    std::vector<SweepRow> rows;
    for (const auto& c : ckpts) {
        std::vector<double> dice, voi, arand;
        for (auto seed : seeds) {
            auto run_cfg = cfg;
            run_cfg.seed = seed;
            const auto r = finetune(&c, data, run_cfg);
            dice.push_back(r.mean_dice);
            voi.push_back(r.mean_voi);
            arand.push_back(r.mean_arand);
        }
        const auto iteration = c.metadata.value("iteration", std::size_t{0});
        for (auto [name, values] : {std::pair{"dice_mean", &dice}, std::pair{"voi_total", &voi}, std::pair{"arand", &arand}}) {
            SweepRow row;
            row.iteration = iteration;
            row.metric = name;
            row.per_seed = *values;
            const double n = static_cast<double>(values->size());
            row.mean = std::accumulate(values->begin(), values->end(), 0.0) / n;
            double ss = 0.0;
            for (double v : *values) ss += (v - row.mean) * (v - row.mean);
            row.stddev = values->size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "pretrain_iteration,metric,mean,std,seeds\n";
    for (const auto& r : rows) out << r.iteration << ',' << r.metric << ',' << r.mean << ',' << r.stddev << ',' << r.per_seed.size() << '\n';
    return out.str();
}

std::vector<TermSet> ablation_terms() {
    return {TermSet{false, false, true}, TermSet{false, true, false}, TermSet{true, true, false}, TermSet{true, true, true}};
}

std::pair<double, double> loss_endpoints(const std::vector<LossRow>& curve, std::size_t window) {
    require(!curve.empty(), ErrorKind::degeneracy, "empty loss curve");
    const std::size_t w = std::max<std::size_t>(1, std::min(window, curve.size()));
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
        head += curve[i].total;
        tail += curve[curve.size() - w + i].total;
    }
    return {head / static_cast<double>(w), tail / static_cast<double>(w)};
}

std::vector<AblationRow> ablate(const volumes::Dataset& data, const std::vector<captioner::Caption>& captions,
                                const TrainConfig& base, const FinetuneConfig& ft) {
    const auto pairs = captioner::build_pairs(data.volumes, captions);
    std::vector<AblationRow> rows;
    for (const auto& terms : ablation_terms()) {
        auto cfg = base;
        cfg.terms = terms;
        const auto r = pretrain(data.volumes, pairs, cfg);
        AblationRow row;
        row.terms = terms;
        std::tie(row.initial_loss, row.final_loss) = loss_endpoints(r.curve, 10);
        row.converged = row.final_loss <= 0.5 * row.initial_loss;
        row.mean_dice = finetune(&r.final_checkpoint, data, ft).mean_dice;
        rows.push_back(row);
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "configuration,metric,value\n";
    for (const auto& r : rows) {
        const auto name = r.terms.label();
        out << name << ",initial_loss," << r.initial_loss << '\n';
        out << name << ",final_loss," << r.final_loss << '\n';
        out << name << ",converged," << (r.converged ? 1 : 0) << '\n';
        out << name << ",dice_mean," << r.mean_dice << '\n';
    }
    return out.str();
}

} // namespace gtgm::trainer
