// Command-line entry point: dataset synthesis, captioning, pretraining,
// finetuning, evaluation, gradient checks, sweeps, ablations and embeddings.

#include "gtgm/captioner.hpp"
#include "gtgm/error.hpp"
#include "gtgm/gradcheck.hpp"
#include "gtgm/metrics.hpp"
#include "gtgm/projection.hpp"
#include "gtgm/trainer.hpp"
#include "gtgm/volumes.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gtgm;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot read " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + p.string());
    out << bytes;
    require(static_cast<bool>(out), ErrorKind::io, "short write to " + p.string());
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    const auto text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::config, "config " + path + " is not valid JSON: " + e.what());
    }
    require(j.is_object(), ErrorKind::config, "config " + path + " must hold a JSON object");
    return j;
}

// Top-level keys of `overrides` must exist in `defaults`; values replace whole entries.
json merge_config(json defaults, const json& overrides, const std::string& context) {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : overrides.items())
        if (!defaults.contains(k)) unknown.push_back(k);
    if (!unknown.empty()) {
        std::string list;
        for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
        fail(ErrorKind::config, "unknown " + context + " keys: " + list);
    }
    for (const auto& [k, v] : overrides.items()) defaults[k] = v;
    return defaults;
}

// Exclusive claim on an output directory for the lifetime of a command.
class RunLock {
public:
    RunLock(const fs::path& dir, bool force) : path_(dir / ".gtgm.lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        require(!ec && fs::is_directory(dir), ErrorKind::io, "cannot create output directory " + dir.string());
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        require(f != nullptr, ErrorKind::io,
                fs::exists(path_) ? "output directory " + dir.string() + " is locked by another run (" + path_.string() + ")"
                                  : "cannot create lock file in " + dir.string());
        std::fclose(f);
        held_ = true;
        if (fs::exists(dir / "manifest.json") && !force) {
            release();
            fail(ErrorKind::config, "output directory " + dir.string() + " already holds a manifest; pass --force to overwrite");
        }
    }
    ~RunLock() { release(); }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    void release() noexcept {
        if (!held_) return;
        std::error_code ec;
        fs::remove(path_, ec);
        held_ = false;
    }
    fs::path path_;
    bool held_ = false;
};

struct Manifest {
    std::string command;
    json config = json::object();
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::string> inputs;
    std::vector<std::string> outputs;  // file names inside the output directory
    json extra = json::object();
};

// Content hash covers output names and bytes, so reruns with identical inputs agree.
void write_manifest(const fs::path& dir, const Manifest& m, std::chrono::steady_clock::time_point start) {
    auto outputs = m.outputs;
    std::sort(outputs.begin(), outputs.end());
    std::uint64_t h = fnv1a64("");
    for (const auto& name : outputs) {
        h = fnv1a64(name, h);
        h = fnv1a64(read_file(dir / name), h);
    }
    json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["config_hash"] = trainer::config_hash(m.config);
    j["seeds"] = m.seeds;
    j["inputs"] = m.inputs;
    j["outputs"] = outputs;
    j["content_hash"] = hex64(h);
    j["tool_version"] = kToolVersion;
    j["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!m.extra.empty()) j["details"] = m.extra;
    write_file(dir / "manifest.json", j.dump(2) + "\n");
}

std::vector<captioner::Caption> captions_or_templates(const std::string& path, const volumes::Dataset& data) {
    if (!path.empty()) return captioner::read_captions(path);
    std::vector<captioner::Caption> caps;
    for (const auto& v : data.volumes) caps.push_back(captioner::template_caption(v));
    return caps;
}

volumes::Dataset read_labeled(const std::string& dir) {
    auto d = volumes::read_dataset(dir);
    require(!d.volumes.empty(), ErrorKind::config, "dataset " + dir + " holds no volumes");
    require(d.labels.size() == d.volumes.size(), ErrorKind::config, "dataset " + dir + " is missing label volumes");
    return d;
}

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

// ---- commands ----

struct SynthArgs {
    std::string out, config;
    std::optional<std::size_t> n, dims;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_synth(const SynthArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    json j = merge_config(volumes::SynthSpec().to_json(), load_config(a.config), "synth config");
    if (a.n) j["n_volumes"] = *a.n;
    if (a.dims) j["dims"] = {*a.dims, *a.dims, *a.dims};
    if (a.seed) j["seed"] = *a.seed;
    volumes::SynthSpec spec;
    try {
        spec = volumes::SynthSpec::from_json(j);
    } catch (const json::exception& e) {
        fail(ErrorKind::config, std::string("malformed synth config: ") + e.what());
    }
    spec.validate();
    RunLock lock(a.out, a.force);
    const auto data = volumes::synth_dataset(spec);
    volumes::write_dataset(data, a.out);
    Manifest m{"synth", spec.to_json(), {spec.seed}, {}, {"dataset.json"}, {}};
    for (const auto& v : data.volumes) {
        m.outputs.push_back(v.id + ".raw");
        m.outputs.push_back(v.id + ".json");
        m.outputs.push_back(v.id + ".labels.raw");
    }
    m.extra["volumes"] = data.volumes.size();
    write_manifest(a.out, m, start);
    std::cout << "wrote " << data.volumes.size() << " volumes to " << a.out << "\n";
    return 0;
}

struct LmArgs {
    std::string data, heldout_data, out, config;
    double heldout_fraction = 0.1;
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_train_captioner(const LmArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    const json defaults = {{"train", captioner::LmTrainConfig().to_json()}, {"model", captioner::CaptionLMConfig().to_json()}};
    json j = merge_config(defaults, load_config(a.config), "captioner config");
    j["train"] = merge_config(defaults["train"], j["train"], "captioner train");
    j["model"] = merge_config(defaults["model"], j["model"], "captioner model");
    if (a.steps) j["train"]["max_steps"] = *a.steps;
    if (a.seed) j["train"]["seed"] = *a.seed;
    captioner::LmTrainConfig tc;
    captioner::CaptionLMConfig mc;
    try {
        const auto& t = j["train"];
        tc.max_steps = t["max_steps"];
        tc.batch = t["batch"];
        tc.eval_every = t["eval_every"];
        tc.accuracy_threshold = t["accuracy_threshold"];
        tc.early_stop = t["early_stop"];
        tc.clip_norm = t["clip_norm"];
        tc.augment = t["augment"];
        tc.adamw = optim::AdamWConfig::from_json(merge_config(tc.adamw.to_json(), t["adamw"], "adamw"));
        tc.seed = t["seed"];
        mc = captioner::CaptionLMConfig::from_json(j["model"]);
    } catch (const json::exception& e) {
        fail(ErrorKind::config, std::string("malformed captioner config: ") + e.what());
    }
    require(a.heldout_fraction > 0.0 && a.heldout_fraction < 1.0, ErrorKind::config, "--heldout-fraction must lie in (0, 1)");

    const auto data = volumes::read_dataset(a.data);
    std::optional<volumes::Dataset> extra;
    std::vector<const volumes::Volume*> train, held;
    if (!a.heldout_data.empty()) {
        extra = volumes::read_dataset(a.heldout_data);
        for (const auto& v : data.volumes) train.push_back(&v);
        for (const auto& v : extra->volumes) held.push_back(&v);
    } else {
        std::vector<std::size_t> idx(data.volumes.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng(splitmix64(tc.seed ^ 0x4e1dull));
        rng.shuffle(idx);
        const auto n_held = std::max<std::size_t>(1, static_cast<std::size_t>(a.heldout_fraction * static_cast<double>(idx.size())));
        require(n_held < idx.size(), ErrorKind::config, "captioner split leaves no training volumes");
        for (std::size_t i = 0; i < idx.size(); ++i) (i < n_held ? held : train).push_back(&data.volumes[idx[i]]);
    }
    RunLock lock(a.out, a.force);
    captioner::CaptionLM model(captioner::Vocabulary::standard().size(), mc, splitmix64(tc.seed ^ 0x1a4full));
    const auto report = captioner::train_caption_lm(model, train, held, tc);
    write_checkpoint(fs::path(a.out) / "caption_lm.bin", captioner::lm_checkpoint(model, {{"train", tc.to_json()}}));
    write_file(fs::path(a.out) / "caption_lm_report.json", report.to_json().dump(2) + "\n");
    Manifest m{"train-captioner", j, {tc.seed}, {{"data", a.data}}, {"caption_lm.bin", "caption_lm_report.json"}, {}};
    if (!a.heldout_data.empty()) m.inputs["heldout_data"] = a.heldout_data;
    m.extra = {{"accuracy", report.accuracy}, {"steps", report.steps}, {"reached_threshold", report.reached_threshold}};
    write_manifest(a.out, m, start);
    std::cout << "held-out greedy token accuracy " << report.accuracy << " after " << report.steps << " steps\n";
    return 0;
}

struct CaptionArgs {
    std::string data, mode = "template", lm, filters, out;
    std::uint64_t seed = 0;
    std::size_t per_volume = 1;
    bool force = false;
};

int cmd_caption(const CaptionArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    require(a.mode == "template" || a.mode == "lm", ErrorKind::config, "--mode must be template or lm");
    require(a.mode != "lm" || !a.lm.empty(), ErrorKind::config, "lm mode needs a trained language model (--lm checkpoint)");
    require(a.per_volume >= 1, ErrorKind::config, "--per-volume must be at least 1");
    const auto patterns = a.filters.empty() ? captioner::default_stop_patterns() : captioner::read_stop_patterns(a.filters);
    const auto data = volumes::read_dataset(a.data);
    std::optional<captioner::CaptionLM> lm;
    if (a.mode == "lm") {
        const auto c = read_checkpoint(a.lm);
        require(c.metadata.value("kind", std::string()) == "caption-lm", ErrorKind::config, a.lm + " is not a caption language model");
        lm = captioner::lm_from_checkpoint(c);
    }
    RunLock lock(a.out, a.force);
    std::vector<captioner::Caption> raw;
    for (std::size_t i = 0; i < data.volumes.size(); ++i) {
        const auto& v = data.volumes[i];
        for (std::size_t k = 0; k < a.per_volume; ++k) {
            const auto slice_seed = splitmix64(a.seed ^ splitmix64(i * a.per_volume + k));
            raw.push_back(lm ? captioner::lm_caption(*lm, v, slice_seed) : captioner::template_caption(v));
        }
    }
    const auto kept = captioner::filter_captions(raw, patterns);
    const std::size_t dropped = raw.size() - kept.size();
    captioner::write_captions(fs::path(a.out) / "captions.jsonl", kept);
    std::cerr << "captions: " << raw.size() << " generated, " << dropped << " duplicates removed\n";
    const json config = {{"mode", a.mode}, {"seed", a.seed}, {"per_volume", a.per_volume}, {"stop_patterns", patterns}};
    Manifest m{"caption", config, {a.seed}, {{"data", a.data}}, {"captions.jsonl"}, {}};
    if (!a.lm.empty()) m.inputs["lm"] = a.lm;
    if (!a.filters.empty()) m.inputs["filters"] = a.filters;
    m.extra = {{"generated", raw.size()}, {"duplicates_removed", dropped}, {"kept", kept.size()}};
    write_manifest(a.out, m, start);
    return 0;
}

struct PretrainArgs {
    std::string data, captions, config, resume, out;
    std::optional<std::size_t> iterations, batch, checkpoint_interval;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_pretrain(const PretrainArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    trainer::TrainConfig cfg;
    std::optional<Checkpoint> resume;
    if (!a.resume.empty()) {
        require(a.config.empty() && !a.seed && !a.batch, ErrorKind::config,
                "--resume takes its config from the checkpoint; only --iterations and --checkpoint-interval may change");
        resume = read_checkpoint(a.resume);
        cfg = trainer::config_from_checkpoint(*resume);
    } else {
        cfg = trainer::TrainConfig::from_json(load_config(a.config));
    }
    if (a.iterations) cfg.iterations = *a.iterations;
    if (a.batch) cfg.batch = *a.batch;
    if (a.seed) cfg.seed = *a.seed;
    if (a.checkpoint_interval) cfg.checkpoint_interval = *a.checkpoint_interval;
    cfg.validate();
    const auto data = volumes::read_dataset(a.data);
    const auto pairs = captioner::build_pairs(data.volumes, captions_or_templates(a.captions, data));
    RunLock lock(a.out, a.force);

    std::optional<trainer::Pretrainer> t;
    if (resume) {
        resume->metadata["config"] = cfg.to_json();
        t.emplace(*resume, data.volumes, pairs);
    } else {
        t.emplace(cfg, data.volumes, pairs);
    }
    Manifest m{"pretrain", cfg.to_json(), {cfg.seed}, {{"data", a.data}}, {}, {}};
    if (!a.captions.empty()) m.inputs["captions"] = a.captions;
    if (resume) m.inputs["resume"] = a.resume;
    t->run([&](const Checkpoint& c) {
        const auto name = "ckpt_" + std::to_string(c.metadata.at("iteration").get<std::size_t>()) + ".bin";
        write_checkpoint(fs::path(a.out) / name, c);
        m.outputs.push_back(name);
    });
    write_file(fs::path(a.out) / "loss.csv", trainer::loss_csv(t->curve()));
    m.outputs.push_back("loss.csv");
    if (!t->curve().empty()) {
        const auto [head, tail] = trainer::loss_endpoints(t->curve(), 10);
        m.extra = {{"initial_loss", head}, {"final_loss", tail}, {"iteration", t->iteration()}};
    }
    write_manifest(a.out, m, start);
    std::cout << "pretrained to iteration " << t->iteration() << "\n";
    return 0;
}

struct FinetuneArgs {
    std::string data, checkpoint, config, out;
    std::optional<double> label_fraction;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> iterations;
    bool force = false;
};

int cmd_finetune(const FinetuneArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    auto cfg = trainer::FinetuneConfig::from_json(load_config(a.config));
    if (a.label_fraction) cfg.label_fraction = *a.label_fraction;
    if (a.seed) cfg.seed = *a.seed;
    if (a.iterations) cfg.iterations = *a.iterations;
    cfg.validate();
    const auto data = read_labeled(a.data);
    std::optional<Checkpoint> pre;
    if (!a.checkpoint.empty()) pre = read_checkpoint(a.checkpoint);
    RunLock lock(a.out, a.force);
    const auto r = trainer::finetune(pre ? &*pre : nullptr, data, cfg);
    write_checkpoint(fs::path(a.out) / "finetuned.bin", r.checkpoint);
    write_file(fs::path(a.out) / "eval.csv", trainer::eval_csv(r.rows));
    std::string curve = "step,loss\n";
    for (std::size_t i = 0; i < r.loss_curve.size(); ++i) curve += std::to_string(i + 1) + "," + fmt(r.loss_curve[i]) + "\n";
    write_file(fs::path(a.out) / "finetune_loss.csv", curve);
    Manifest m{"finetune", cfg.to_json(), {cfg.seed}, {{"data", a.data}}, {"finetuned.bin", "eval.csv", "finetune_loss.csv"}, {}};
    m.inputs["checkpoint"] = a.checkpoint.empty() ? "random-init" : a.checkpoint;
    m.extra = {{"labeled_volumes", r.labeled}, {"dice_mean", r.mean_dice}};
    write_manifest(a.out, m, start);
    std::cout << trainer::eval_csv(r.rows);
    return 0;
}

struct EvalArgs {
    std::string gt, pred, checkpoint, out;
    bool force = false;
};

int cmd_eval(const EvalArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    require(a.pred.empty() != a.checkpoint.empty(), ErrorKind::config, "eval needs exactly one of --pred or --checkpoint");
    const auto gt = read_labeled(a.gt);
    RunLock lock(a.out, a.force);
    volumes::Dataset pred;
    Manifest m{"eval", json::object(), {}, {{"gt", a.gt}}, {"metrics.csv"}, {}};
    if (!a.checkpoint.empty()) {
        const auto c = read_checkpoint(a.checkpoint);
        pred.volumes = gt.volumes;
        for (const auto& v : gt.volumes) pred.labels.push_back(trainer::predict(c, v));
        volumes::write_dataset(pred, fs::path(a.out) / "predictions");
        m.inputs["checkpoint"] = a.checkpoint;
    } else {
        pred = read_labeled(a.pred);
        m.inputs["pred"] = a.pred;
    }
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < pred.volumes.size(); ++i) by_id[pred.volumes[i].id] = i;
    std::ostringstream csv;
    csv << std::setprecision(17) << "volume_id,metric,value\n";
    double dice_sum = 0, voi_sum = 0, arand_sum = 0;
    for (std::size_t i = 0; i < gt.volumes.size(); ++i) {
        const auto& v = gt.volumes[i];
        const auto it = by_id.find(v.id);
        require(it != by_id.end(), ErrorKind::linkage, "no prediction for volume '" + v.id + "'");
        const auto& p = pred.labels[it->second];
        require(p.dims == gt.labels[i].dims, ErrorKind::dimension, "prediction for '" + v.id + "' has dims " + p.dims.str());
        // A model predicts the semantic mask; stored label files compare as given.
        const auto truth = a.checkpoint.empty() ? gt.labels[i] : trainer::semantic_target(v, gt.labels[i]);
        auto binary = [](const volumes::LabelVolume& l) {
            auto b = l;
            b.kind = volumes::LabelKind::semantic;
            b.classes = {0, 1};
            for (auto& x : b.labels) x = x != 0 ? 1 : 0;
            return b;
        };
        const double d = metrics::dice(binary(p), binary(truth), {0, 1}).mean;
        const auto inst_pred = a.checkpoint.empty() ? p : metrics::instances_from_argmax(p);
        const auto t = metrics::contingency(gt.labels[i], inst_pred, true);
        const double voi = t.degenerate() ? 0.0 : metrics::voi(t).total;
        const double ar = t.degenerate() ? 0.0 : metrics::arand(t);
        csv << v.id << ",dice," << d << '\n' << v.id << ",voi," << voi << '\n' << v.id << ",arand," << ar << '\n';
        dice_sum += d;
        voi_sum += voi;
        arand_sum += ar;
    }
    const double n = static_cast<double>(gt.volumes.size());
    csv << "mean,dice," << dice_sum / n << "\nmean,voi," << voi_sum / n << "\nmean,arand," << arand_sum / n << '\n';
    write_file(fs::path(a.out) / "metrics.csv", csv.str());
    write_manifest(a.out, m, start);
    std::cout << "mean dice " << dice_sum / n << ", voi " << voi_sum / n << ", arand " << arand_sum / n << "\n";
    return 0;
}

struct GradcheckArgs {
    std::vector<std::string> suites;
    std::uint64_t seed = 0;
    std::size_t instances = 40;
    std::string out;
    bool force = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    const auto suites = gradcheck::parse_suites(a.suites);
    std::optional<RunLock> lock;
    if (!a.out.empty()) lock.emplace(a.out, a.force);
    const auto r = gradcheck::run(suites, a.seed, a.instances);
    std::cout << r.csv();
    std::cout << (r.passed() ? "PASS" : "FAIL") << " " << r.instances() << " instances in " << r.seconds << " s\n";
    if (!a.out.empty()) {
        write_file(fs::path(a.out) / "gradcheck.csv", r.csv());
        json cfg = {{"suites", a.suites}, {"instances_per_op", a.instances}};
        Manifest m{"gradcheck", cfg, {a.seed}, {}, {"gradcheck.csv"}, {{"passed", r.passed()}}};
        write_manifest(a.out, m, start);
    }
    return r.passed() ? 0 : exit_code(ErrorKind::numeric);
}

struct SweepArgs {
    std::string data, config, out;
    std::vector<std::string> checkpoints;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    bool force = false;
};

int cmd_sweep(const SweepArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    const auto cfg = trainer::FinetuneConfig::from_json(load_config(a.config));
    require(a.checkpoints.size() >= 2, ErrorKind::config, "sweep needs at least two checkpoints");
    std::vector<Checkpoint> ckpts;
    for (const auto& p : a.checkpoints) ckpts.push_back(read_checkpoint(p));
    const auto data = read_labeled(a.data);
    RunLock lock(a.out, a.force);
    const auto rows = trainer::sweep(ckpts, data, cfg, a.seeds);
    write_file(fs::path(a.out) / "sweep.csv", trainer::sweep_csv(rows));
    Manifest m{"sweep", cfg.to_json(), a.seeds, {{"data", a.data}}, {"sweep.csv"}, {}};
    for (std::size_t i = 0; i < a.checkpoints.size(); ++i) m.inputs["checkpoint_" + std::to_string(i)] = a.checkpoints[i];
    write_manifest(a.out, m, start);
    std::cout << trainer::sweep_csv(rows);
    return 0;
}

struct AblateArgs {
    std::string data, captions, config, finetune_config, out;
    bool force = false;
};

int cmd_ablate(const AblateArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    const auto base = trainer::TrainConfig::from_json(load_config(a.config));
    const auto ft = trainer::FinetuneConfig::from_json(load_config(a.finetune_config));
    const auto data = read_labeled(a.data);
    const auto captions = captions_or_templates(a.captions, data);
    RunLock lock(a.out, a.force);
    const auto rows = trainer::ablate(data, captions, base, ft);
    write_file(fs::path(a.out) / "ablation.csv", trainer::ablation_csv(rows));
    Manifest m{"ablate", {{"pretrain", base.to_json()}, {"finetune", ft.to_json()}}, {base.seed, ft.seed}, {{"data", a.data}},
               {"ablation.csv"}, {}};
    if (!a.captions.empty()) m.inputs["captions"] = a.captions;
    write_manifest(a.out, m, start);
    std::cout << trainer::ablation_csv(rows);
    return 0;
}

struct EmbedArgs {
    std::string checkpoint, data, out;
    bool force = false;
};

int cmd_embed(const EmbedArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    const auto c = read_checkpoint(a.checkpoint);
    const auto cfg = trainer::config_from_checkpoint(c);
    const auto data = volumes::read_dataset(a.data);
    require(data.volumes.size() >= 2, ErrorKind::config, "embedding needs at least two volumes");
    trainer::PretrainModel model(cfg);
    load_blocks(c, model.trainable());
    Matrix feats(data.volumes.size(), model.encoder.output_width());
    std::vector<std::string> tags;
    for (std::size_t i = 0; i < data.volumes.size(); ++i) {
        const auto& v = data.volumes[i];
        require(v.dims.z >= cfg.patch.z && v.dims.y >= cfg.patch.y && v.dims.x >= cfg.patch.x, ErrorKind::dimension,
                "volume '" + v.id + "' " + v.dims.str() + " is smaller than the checkpoint patch " + cfg.patch.str());
        const Dims3 origin{(v.dims.z - cfg.patch.z) / 2, (v.dims.y - cfg.patch.y) / 2, (v.dims.x - cfg.patch.x) / 2};
        const auto out = model.encoder.encode(volumes::crop(v, origin, cfg.patch));
        std::copy(out.begin(), out.end(), feats.row(i).begin());
        tags.push_back(volumes::to_string(v.modality));
    }
    const Matrix emb = model.image_projector.forward(feats).output;
    RunLock lock(a.out, a.force);
    std::ostringstream csv;
    csv << std::setprecision(17) << "volume_id,modality";
    for (std::size_t k = 0; k < emb.cols(); ++k) csv << ",e" << k;
    csv << '\n';
    for (std::size_t i = 0; i < emb.rows(); ++i) {
        csv << data.volumes[i].id << ',' << tags[i];
        for (std::size_t k = 0; k < emb.cols(); ++k) csv << ',' << emb(i, k);
        csv << '\n';
    }
    const auto proj = projection::principal_components(emb, 2);
    std::ostringstream pcsv;
    pcsv << std::setprecision(17) << "volume_id,modality,pc1,pc2\n";
    for (std::size_t i = 0; i < emb.rows(); ++i)
        pcsv << data.volumes[i].id << ',' << tags[i] << ',' << proj.coords(i, 0) << ',' << proj.coords(i, 1) << '\n';
    write_file(fs::path(a.out) / "embeddings.csv", csv.str());
    write_file(fs::path(a.out) / "projection.csv", pcsv.str());
    write_file(fs::path(a.out) / "projection.svg", projection::scatter_svg(proj.coords, tags, "embeddings, top-2 principal components"));
    Manifest m{"embed", cfg.to_json(), {cfg.seed}, {{"checkpoint", a.checkpoint}, {"data", a.data}},
               {"embeddings.csv", "projection.csv", "projection.svg"}, {}};
    m.extra = {{"component_variances", proj.variances}};
    write_manifest(a.out, m, start);
    return 0;
}

void add_out(CLI::App* sub, std::string& out, bool& force) {
    sub->add_option("--out", out, "Output directory")->required();
    sub->add_flag("--force", force, "Overwrite results of a previous run");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic-caption guided pretraining for 3D volumes"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
    add_out(s, synth.out, synth.force);
    s->add_option("--config", synth.config, "JSON synthesis spec");
    s->add_option("--n", synth.n, "Number of volumes");
    s->add_option("--dims", synth.dims, "Cubic volume edge length");
    s->add_option("--seed", synth.seed, "Generator seed");

    LmArgs lm;
    auto* l = app.add_subcommand("train-captioner", "Train the caption language model");
    add_out(l, lm.out, lm.force);
    l->add_option("--data", lm.data, "Dataset directory")->required();
    l->add_option("--heldout-data", lm.heldout_data, "Separate held-out dataset directory");
    l->add_option("--heldout-fraction", lm.heldout_fraction, "Held-out share when no held-out dataset is given");
    l->add_option("--config", lm.config, "JSON with train and model sections");
    l->add_option("--steps", lm.steps, "Training steps");
    l->add_option("--seed", lm.seed, "Training seed");

    CaptionArgs cap;
    auto* c = app.add_subcommand("caption", "Caption a dataset and filter the captions");
    add_out(c, cap.out, cap.force);
    c->add_option("--data", cap.data, "Dataset directory")->required();
    c->add_option("--mode", cap.mode, "template or lm")->check(CLI::IsMember({"template", "lm"}));
    c->add_option("--lm", cap.lm, "Caption language model checkpoint");
    c->add_option("--filters", cap.filters, "Stop patterns, one regex per line");
    c->add_option("--seed", cap.seed, "Slice sampling seed for lm mode");
    c->add_option("--per-volume", cap.per_volume, "Captions drawn per volume before deduplication");

    PretrainArgs pre;
    auto* p = app.add_subcommand("pretrain", "Pretrain the image encoder");
    add_out(p, pre.out, pre.force);
    p->add_option("--data", pre.data, "Dataset directory")->required();
    p->add_option("--captions", pre.captions, "Caption corpus (JSON lines); template captions when absent");
    p->add_option("--config", pre.config, "JSON pretraining config");
    p->add_option("--resume", pre.resume, "Checkpoint to resume from");
    p->add_option("--iterations", pre.iterations, "Total iterations");
    p->add_option("--batch", pre.batch, "Batch size K");
    p->add_option("--checkpoint-interval", pre.checkpoint_interval, "Iterations between checkpoints (0: final only)");
    p->add_option("--seed", pre.seed, "Run seed");

    FinetuneArgs fin;
    auto* f = app.add_subcommand("finetune", "Finetune encoder and decoder for segmentation");
    add_out(f, fin.out, fin.force);
    f->add_option("--data", fin.data, "Labeled dataset directory")->required();
    f->add_option("--checkpoint", fin.checkpoint, "Pretraining checkpoint; random init when absent");
    f->add_option("--config", fin.config, "JSON finetune config");
    f->add_option("--label-fraction", fin.label_fraction, "Share of training volumes with labels");
    f->add_option("--iterations", fin.iterations, "Finetune iterations");
    f->add_option("--seed", fin.seed, "Run seed");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Compare predictions with ground truth");
    add_out(e, ev.out, ev.force);
    e->add_option("--gt", ev.gt, "Ground-truth dataset directory")->required();
    e->add_option("--pred", ev.pred, "Prediction dataset directory");
    e->add_option("--checkpoint", ev.checkpoint, "Finetuned checkpoint to predict with");

    GradcheckArgs gc;
    auto* g = app.add_subcommand("gradcheck", "Finite-difference checks of all gradients");
    g->add_option("--suite", gc.suites, "objectives, captioner, encoders or all (repeatable)");
    g->add_option("--seed", gc.seed, "Instance seed");
    g->add_option("--instances", gc.instances, "Instances per operation");
    g->add_option("--out", gc.out, "Optional output directory for the report");
    g->add_flag("--force", gc.force, "Overwrite results of a previous run");

    SweepArgs sw;
    auto* w = app.add_subcommand("sweep", "Finetune from several checkpoints of one run");
    add_out(w, sw.out, sw.force);
    w->add_option("--data", sw.data, "Labeled dataset directory")->required();
    w->add_option("--checkpoints", sw.checkpoints, "Checkpoints from one pretraining run")->required();
    w->add_option("--config", sw.config, "JSON finetune config");
    w->add_option("--seeds", sw.seeds, "Finetune seeds");

    AblateArgs ab;
    auto* b = app.add_subcommand("ablate", "Pretrain and finetune every loss-term combination");
    add_out(b, ab.out, ab.force);
    b->add_option("--data", ab.data, "Labeled dataset directory")->required();
    b->add_option("--captions", ab.captions, "Caption corpus; template captions when absent");
    b->add_option("--config", ab.config, "JSON pretraining config");
    b->add_option("--finetune-config", ab.finetune_config, "JSON finetune config");

    EmbedArgs em;
    auto* m = app.add_subcommand("embed", "Embed volumes and plot their top-2 principal components");
    add_out(m, em.out, em.force);
    m->add_option("--checkpoint", em.checkpoint, "Pretraining checkpoint")->required();
    m->add_option("--data", em.data, "Dataset directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : exit_code(ErrorKind::config);
    }

    try {
        if (*s) return cmd_synth(synth);
        if (*l) return cmd_train_captioner(lm);
        if (*c) return cmd_caption(cap);
        if (*p) return cmd_pretrain(pre);
        if (*f) return cmd_finetune(fin);
        if (*e) return cmd_eval(ev);
        if (*g) return cmd_gradcheck(gc);
        if (*w) return cmd_sweep(sw);
        if (*b) return cmd_ablate(ab);
        if (*m) return cmd_embed(em);
    } catch (const Error& err) {
        std::cerr << "gtgm: " << err.what() << "\n";
        return exit_code(err.kind());
    } catch (const json::exception& err) {
        std::cerr << "gtgm: format error: " << err.what() << "\n";
        return exit_code(ErrorKind::format);
    } catch (const fs::filesystem_error& err) {
        std::cerr << "gtgm: io error: " << err.what() << "\n";
        return exit_code(ErrorKind::io);
    }
    return 0;
}
