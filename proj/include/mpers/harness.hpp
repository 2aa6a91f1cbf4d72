#pragma once

// End-to-end workflow behind the CLI: dataset generation, captioning,
// training, evaluation, the component-ablation ladder, and inference timing.
// All commands are driven by one JSON config and write into its run
// directory; all randomness flows from the config seed through named
// substreams.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpers/caption.hpp"
#include "mpers/errors.hpp"
#include "mpers/metrics.hpp"
#include "mpers/model.hpp"
#include "mpers/synth.hpp"
#include "mpers/train.hpp"

namespace mpers {

struct RunConfig {
    uint64_t seed = 0;
    std::string run_dir = "runs/default";

    // data
    int num_scenes = 20;
    double train_fraction = 0.8;
    int image_size = 64;
    int min_objects = 2;
    int max_objects = 6;

    // captions
    std::string corruption = "none";
    double tau = kCaptionTau;
    int max_attempts = kCaptionMaxAttempts;
    std::string mllm_endpoint;  // optional real client; empty = offline stub
    std::string mllm_model;
    std::string mllm_key_env;

    ModelConfig model;
    TrainOptions train;

    // timing
    int timing_image_size = 512;
    int timing_warmup = 2;
    int timing_runs = 10;

    void validate() const {
        model.validate();
        if (num_scenes < 1) throw ValidationError("num_scenes must be >= 1");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw ValidationError("train_fraction must be in (0,1)");
        if (image_size < 16 || image_size % 16 != 0)
            throw ValidationError("image_size must be >= 16 and divisible by 16");
        corruption_from_string(corruption);
    }
};

inline uint64_t substream(uint64_t seed, const std::string& name, uint64_t index = 0) {
    return fnv1a(name) ^ (seed * 0x9E3779B97F4A7C15ull + index * 0xBF58476D1CE4E5B9ull);
}

inline RunConfig parse_config(const nlohmann::json& j) {
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    c.run_dir = j.value("run_dir", c.run_dir);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        c.num_scenes = d.value("num_scenes", c.num_scenes);
        c.train_fraction = d.value("train_fraction", c.train_fraction);
        c.model.num_classes = d.value("num_classes", c.model.num_classes);
        c.image_size = d.value("image_size", c.image_size);
        c.min_objects = d.value("min_objects", c.min_objects);
        c.max_objects = d.value("max_objects", c.max_objects);
    }
    if (j.contains("captions")) {
        const auto& p = j.at("captions");
        c.model.num_experts = p.value("experts", c.model.num_experts);
        c.corruption = p.value("corruption", c.corruption);
        c.tau = p.value("tau", c.tau);
        c.max_attempts = p.value("max_attempts", c.max_attempts);
        c.mllm_endpoint = p.value("endpoint", c.mllm_endpoint);
        c.mllm_model = p.value("model", c.mllm_model);
        c.mllm_key_env = p.value("key_env", c.mllm_key_env);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        c.model.fusion_c = m.value("fusion_c", c.model.fusion_c);
        c.model.skip_c = m.value("skip_c", c.model.skip_c);
        c.model.dilation = m.value("dilation", c.model.dilation);
        c.model.window = m.value("window", c.model.window);
        c.model.text_tokens = m.value("text_tokens", c.model.text_tokens);
        c.model.text_c = m.value("text_c", c.model.text_c);
        c.model.embed_c = m.value("embed_c", c.model.embed_c);
        c.model.lqga_blocks = m.value("lqga_blocks", c.model.lqga_blocks);
        c.model.use_ldpe = m.value("use_ldpe", c.model.use_ldpe);
        c.model.use_lqga = m.value("use_lqga", c.model.use_lqga);
        c.model.use_dmte = m.value("use_dmte", c.model.use_dmte);
        if (m.contains("backbone_widths")) {
            auto w = m.at("backbone_widths").get<std::vector<int>>();
            if (w.size() != 4) throw ValidationError("backbone_widths needs 4 entries");
            c.model.backbone_widths = {w[0], w[1], w[2], w[3]};
        }
        if (m.contains("ldpe_widths")) {
            auto w = m.at("ldpe_widths").get<std::vector<int>>();
            if (w.size() != 3) throw ValidationError("ldpe_widths needs 3 entries");
            c.model.ldpe_widths = {w[0], w[1], w[2]};
        }
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        c.train.adam.lr = o.value("lr", c.train.adam.lr);
        c.train.adam.weight_decay = o.value("weight_decay", c.train.adam.weight_decay);
        c.train.batch_size = o.value("batch_size", c.train.batch_size);
        c.train.epochs = o.value("epochs", c.train.epochs);
        if (o.contains("milestones")) c.train.milestones = o.at("milestones").get<std::vector<double>>();
    }
    if (j.contains("timing")) {
        const auto& t = j.at("timing");
        c.timing_image_size = t.value("image_size", c.timing_image_size);
        c.timing_warmup = t.value("warmup", c.timing_warmup);
        c.timing_runs = t.value("runs", c.timing_runs);
    }
    c.model.param_seed = substream(c.seed, "params");
    c.model.backbone_seed = substream(c.seed, "backbone");
    c.model.text_seed = substream(c.seed, "text_encoder");
    c.train.shuffle_seed = substream(c.seed, "shuffle");
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    f >> j;
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// dataset on disk

struct DatasetEntry {
    uint64_t seed = 0;
    std::string image_path;
    std::string label_path;
    std::string split;  // "train" or "eval"
    SceneMetadata metadata;
};

inline std::string manifest_path(const RunConfig& c) { return c.run_dir + "/manifest.jsonl"; }
inline std::string transcript_path(const RunConfig& c) { return c.run_dir + "/captions.jsonl"; }
inline std::string checkpoint_path(const RunConfig& c) { return c.run_dir + "/checkpoint.mpa"; }

inline std::vector<DatasetEntry> cmd_gen_data(const RunConfig& c, bool force = false) {
    namespace fs = std::filesystem;
    fs::create_directories(c.run_dir);
    if (fs::exists(manifest_path(c)) && !force)
        throw IoError("manifest already exists (use --force): " + manifest_path(c));

    std::vector<uint64_t> seeds;
    for (int i = 0; i < c.num_scenes; ++i) seeds.push_back(substream(c.seed, "scenes", static_cast<uint64_t>(i)));
    auto [train_seeds, eval_seeds] = make_split(seeds, c.train_fraction);

    std::vector<DatasetEntry> entries;
    std::ofstream manifest(manifest_path(c), std::ios::trunc);
    for (int i = 0; i < c.num_scenes; ++i) {
        auto [scene, meta] = generate_scene(seeds[i], c.model.num_classes, c.image_size, c.min_objects,
                                            c.max_objects);
        DatasetEntry e;
        e.seed = seeds[i];
        e.image_path = c.run_dir + "/scene_" + std::to_string(i) + ".mpt";
        e.label_path = c.run_dir + "/scene_" + std::to_string(i) + ".mpl";
        e.split = i < static_cast<int>(train_seeds.size()) ? "train" : "eval";
        e.metadata = meta;
        save_bytes(e.image_path, write_tensor(scene.image));
        save_bytes(e.label_path, write_raster(scene.labels));
        manifest << nlohmann::json{{"seed", e.seed},
                                   {"image", e.image_path},
                                   {"labels", e.label_path},
                                   {"split", e.split},
                                   {"metadata", metadata_to_json(meta)}}
                         .dump()
                 << "\n";
        entries.push_back(std::move(e));
    }
    return entries;
}

inline std::vector<DatasetEntry> load_manifest(const RunConfig& c) {
    std::ifstream f(manifest_path(c));
    if (!f) throw IoError("missing dataset manifest: " + manifest_path(c));
    std::vector<DatasetEntry> entries;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        DatasetEntry e;
        e.seed = j.at("seed").get<uint64_t>();
        e.image_path = j.at("image").get<std::string>();
        e.label_path = j.at("labels").get<std::string>();
        e.split = j.at("split").get<std::string>();
        e.metadata = metadata_from_json(j.at("metadata"));
        entries.push_back(std::move(e));
    }
    return entries;
}

struct CaptionSummary {
    double acceptance_rate = 0.0;
    int records = 0;
};

inline CaptionSummary cmd_caption(const RunConfig& c, bool force = false) {
    namespace fs = std::filesystem;
    const std::vector<DatasetEntry> entries = load_manifest(c);
    if (fs::exists(transcript_path(c)) && !force)
        throw IoError("caption transcript already exists (use --force): " + transcript_path(c));

    const std::vector<std::string> vocab = default_vocabulary(c.model.num_classes);
    const PromptSet prompts = build_prompts(vocab);
    const Corruption corruption = corruption_from_string(c.corruption);
    std::vector<std::unique_ptr<MllmClient>> owned;
    std::vector<MllmClient*> experts;
    for (int e = 0; e < c.model.num_experts; ++e) {
        owned.push_back(stub_client(e, vocab, corruption));
        experts.push_back(owned.back().get());
    }
    KeywordRecallProvider provider;

    std::ofstream transcript(transcript_path(c), std::ios::trunc);
    int accepted = 0, total = 0;
    for (const auto& e : entries) {
        SceneRef ref{e.seed, &e.metadata};
        for (const auto& rec : run_check_loop(experts, ref, prompts, vocab, provider, c.tau, c.max_attempts)) {
            transcript << caption_record_to_json(rec, e.seed, prompts).dump() << "\n";
            accepted += rec.accepted ? 1 : 0;
            ++total;
        }
    }
    return {total ? static_cast<double>(accepted) / total : 0.0, total};
}

// captions keyed by scene seed
inline std::map<uint64_t, std::vector<CaptionRecord>> load_transcript(const RunConfig& c) {
    std::ifstream f(transcript_path(c));
    if (!f) throw IoError("missing caption transcript: " + transcript_path(c));
    std::map<uint64_t, std::vector<CaptionRecord>> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        out[j.at("scene_seed").get<uint64_t>()].push_back(caption_record_from_json(j));
    }
    return out;
}

inline std::vector<TrainSample> load_samples(const RunConfig& c, const std::string& split) {
    const std::vector<DatasetEntry> entries = load_manifest(c);
    std::map<uint64_t, std::vector<CaptionRecord>> transcript;
    if (c.model.use_lqga) transcript = load_transcript(c);
    std::vector<TrainSample> samples;
    for (const auto& e : entries) {
        if (e.split != split) continue;
        TrainSample s;
        s.image = read_tensor(load_bytes(e.image_path));
        s.targets = raster_targets(read_raster(load_bytes(e.label_path)));
        if (c.model.use_lqga) {
            auto it = transcript.find(e.seed);
            if (it == transcript.end()) throw IoError("no captions for scene seed " + std::to_string(e.seed));
            s.captions = c.model.use_dmte ? it->second : std::vector<CaptionRecord>{it->second.front()};
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

inline TrainResult cmd_train(const RunConfig& c, Model& model) {
    const std::vector<TrainSample> train_samples = load_samples(c, "train");
    AdamW opt(model.registry().trainable(), c.train.adam);
    TrainResult result = train_loop(model, train_samples, c.train, opt);
    save_checkpoint(checkpoint_path(c), model, &opt);
    std::ofstream csv(c.run_dir + "/loss.csv", std::ios::trunc);
    csv << loss_log_csv(result.loss_log);
    return result;
}

inline MetricsReport cmd_eval(const RunConfig& c, const Model& model, const std::string& split = "eval") {
    const MetricsReport report = evaluate(model, load_samples(c, split));
    std::ofstream out(c.run_dir + "/metrics.json", std::ios::trunc);
    out << report_to_json(report, default_vocabulary(c.model.num_classes)).dump(2) << "\n";
    return report;
}

// ---------------------------------------------------------------------------
// ablation ladder: baseline -> +LDPE -> +LQGA -> +DMTE on one shared dataset
// and caption transcript

struct AblationRow {
    std::string name;
    bool use_ldpe = false, use_lqga = false, use_dmte = false;
    long long param_count = 0;
    MetricsReport report;
};

inline std::vector<AblationRow> cmd_ablate(const RunConfig& c) {
    const bool flag_rows[4][3] = {{false, false, false}, {true, false, false}, {true, true, false}, {true, true, true}};
    const char* names[4] = {"baseline", "+LDPE", "+LDPE+LQGA", "+LDPE+LQGA+DMTE"};
    std::vector<AblationRow> rows;
    for (int r = 0; r < 4; ++r) {
        RunConfig rc = c;
        rc.model.use_ldpe = flag_rows[r][0];
        rc.model.use_lqga = flag_rows[r][1];
        rc.model.use_dmte = flag_rows[r][2];
        Model model(rc.model);
        train_loop(model, load_samples(rc, "train"), rc.train);
        AblationRow row;
        row.name = names[r];
        row.use_ldpe = rc.model.use_ldpe;
        row.use_lqga = rc.model.use_lqga;
        row.use_dmte = rc.model.use_dmte;
        row.param_count = model.registry().count_trainable();
        row.report = evaluate(model, load_samples(rc, "eval"));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << std::setw(18) << std::left << "configuration" << std::right << std::setw(12) << "params"
       << std::setw(10) << "OA(%)" << std::setw(10) << "mIoU(%)" << std::setw(10) << "F1(%)" << "\n";
    for (const auto& r : rows)
        os << std::setw(18) << std::left << r.name << std::right << std::setw(12) << r.param_count << std::setw(10)
           << r.report.oa * 100.0 << std::setw(10) << r.report.miou * 100.0 << std::setw(10) << r.report.mf1 * 100.0
           << "\n";
    return os.str();
}

// median wall-clock per single-image forward pass after warmup
inline double cmd_time(const RunConfig& c, const Model& model) {
    if (c.timing_runs < 1) throw ValidationError("timing runs must be >= 1");
    auto [scene, meta] = generate_scene(substream(c.seed, "timing"), c.model.num_classes,
                                        c.timing_image_size, c.min_objects, c.max_objects);
    std::vector<CaptionRecord> captions;
    if (c.model.use_lqga) {
        const std::vector<std::string> vocab = default_vocabulary(c.model.num_classes);
        const int n = c.model.use_dmte ? c.model.num_experts : 1;
        KeywordRecallProvider provider;
        for (int e = 0; e < n; ++e) {
            CaptionRecord rec;
            rec.expert_id = e;
            rec.text = stub_client(e, vocab)->generate({scene.seed, &meta}, "", 1);
            rec.similarity = provider.score(rec.text, meta, vocab);
            captions.push_back(rec);
        }
    }
    std::vector<double> times;
    for (int i = 0; i < c.timing_warmup + c.timing_runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor logits = model.forward(scene.image, captions);
        const auto t1 = std::chrono::steady_clock::now();
        if (i >= c.timing_warmup)
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

}  // namespace mpers
