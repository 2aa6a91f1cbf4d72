#pragma once

// Multi-expert caption generation with the check strategy: multi-perspective
// prompts, an image-text similarity threshold (tau = 0.55), a three-element
// sentence check (number / category / location), and bounded regeneration.
// The offline client and scorer are deterministic stand-ins driven by scene
// metadata; both sit behind interfaces a real MLLM / learned scorer can fill.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mpers/errors.hpp"
#include "mpers/synth.hpp"

namespace mpers {

constexpr double kCaptionTau = 0.55;
constexpr int kCaptionMaxAttempts = 3;

struct PromptSet {
    std::string inventory;    // existing land-covers
    std::string proportions;  // class proportions
    std::string relations;    // location relationships

    std::string concatenated() const { return inventory + " " + proportions + " " + relations; }
};

struct CaptionRecord {
    int expert_id = 0;
    std::string text;
    double similarity = 0.0;
    bool has_number = false;
    bool has_category = false;
    bool has_location = false;
    int attempts = 0;
    bool accepted = false;
};

struct SceneRef {
    uint64_t seed = 0;
    const SceneMetadata* metadata = nullptr;
};

class MllmClient {
public:
    virtual ~MllmClient() = default;
    virtual std::string generate(const SceneRef& scene, const std::string& prompt, int attempt) = 0;
};

class SimilarityProvider {
public:
    virtual ~SimilarityProvider() = default;
    virtual double score(const std::string& caption, const SceneMetadata& metadata,
                         const std::vector<std::string>& vocabulary) = 0;
};

// ---------------------------------------------------------------------------
// text utilities

inline std::string normalize_text(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else
            out.push_back(' ');
    }
    return out;
}

inline std::vector<std::string> tokenize(const std::string& text) {
    std::istringstream is(normalize_text(text));
    std::vector<std::string> tokens;
    std::string t;
    while (is >> t) tokens.push_back(t);
    return tokens;
}

inline bool token_matches(const std::string& token, const std::string& keyword) {
    return token == keyword || token == keyword + "s" || token + "s" == keyword;
}

inline std::string number_word(int n) {
    static const char* words[] = {"no",      "one",     "two",     "three",   "four",   "five",    "six",
                                  "seven",   "eight",   "nine",    "ten",     "eleven", "twelve",  "thirteen",
                                  "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty"};
    if (n >= 0 && n <= 20) return words[n];
    return "many";
}

inline std::vector<std::string> default_vocabulary(int num_classes) {
    static const char* names[] = {"background", "building", "road", "vegetation", "tree", "car", "water", "field"};
    std::vector<std::string> vocab;
    for (int k = 0; k < num_classes; ++k) vocab.push_back(names[k % 8]);
    return vocab;
}

// ---------------------------------------------------------------------------
// prompts

inline PromptSet build_prompts(const std::vector<std::string>& vocabulary) {
    if (vocabulary.empty()) throw ContractError("build_prompts: empty class vocabulary");
    std::string classes;
    for (size_t i = 0; i < vocabulary.size(); ++i) classes += (i ? ", " : "") + vocabulary[i];
    PromptSet p;
    p.inventory = "List every land cover visible in this scene and how many regions of each appear. "
                  "Candidate classes: " + classes + ".";
    p.proportions = "Estimate what fraction of the image each land cover occupies, considering: " + classes + ".";
    p.relations = "Describe the spatial relationships (left, right, above, below, adjacent) between the "
                  "land covers among: " + classes + ".";
    return p;
}

// ---------------------------------------------------------------------------
// checking

struct ElementFlags {
    bool has_number = false;
    bool has_category = false;
    bool has_location = false;
};

inline ElementFlags check_elements(const std::string& text, const std::vector<std::string>& vocabulary) {
    static const std::set<std::string> number_lexicon = {
        "one",  "two",   "three", "four",   "five",    "six",      "seven",   "eight",   "nine",
        "ten",  "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
        "eighteen", "nineteen", "twenty", "several", "many", "few", "no"};
    static const std::set<std::string> location_lexicon = {"left",  "right", "above",  "below", "adjacent",
                                                           "between", "north", "south", "east",  "west",
                                                           "center", "near"};
    ElementFlags f;
    const std::string norm = normalize_text(text);
    const std::vector<std::string> tokens = tokenize(text);
    for (const auto& t : tokens) {
        if (!f.has_number) {
            bool digit = std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
            if (digit || number_lexicon.count(t)) f.has_number = true;
        }
        if (!f.has_location && location_lexicon.count(t)) f.has_location = true;
        if (!f.has_category)
            for (const auto& name : vocabulary)
                if (token_matches(t, name)) {
                    f.has_category = true;
                    break;
                }
    }
    if (!f.has_location && norm.find(" next to ") != std::string::npos) f.has_location = true;
    return f;
}

// metadata-derived keyword set: present class names, number words for the
// counts, and the relation predicates
inline std::set<std::string> metadata_keywords(const SceneMetadata& metadata,
                                               const std::vector<std::string>& vocabulary) {
    std::set<std::string> keys;
    for (int k = 1; k < metadata.num_classes; ++k)
        if (metadata.class_counts[k] > 0) {
            keys.insert(vocabulary[k]);
            keys.insert(number_word(metadata.class_counts[k]));
        }
    for (const auto& r : metadata.relations) keys.insert(tokenize(r.predicate)[0]);
    if (keys.empty()) keys.insert(vocabulary[0]);  // empty scene: background only
    return keys;
}

class KeywordRecallProvider : public SimilarityProvider {
public:
    double score(const std::string& caption, const SceneMetadata& metadata,
                 const std::vector<std::string>& vocabulary) override {
        const std::set<std::string> keys = metadata_keywords(metadata, vocabulary);
        const std::vector<std::string> tokens = tokenize(caption);
        int hit = 0;
        for (const auto& k : keys)
            for (const auto& t : tokens)
                if (token_matches(t, k)) {
                    ++hit;
                    break;
                }
        return static_cast<double>(hit) / static_cast<double>(keys.size());
    }
};

// ---------------------------------------------------------------------------
// offline stub client

enum class Corruption { none, drop_numbers, drop_relations, noise };

inline Corruption corruption_from_string(const std::string& s) {
    if (s == "none") return Corruption::none;
    if (s == "drop_numbers") return Corruption::drop_numbers;
    if (s == "drop_relations") return Corruption::drop_relations;
    if (s == "noise") return Corruption::noise;
    throw ValidationError("unknown corruption mode: " + s);
}

class StubMllmClient : public MllmClient {
public:
    StubMllmClient(int expert_id, std::vector<std::string> vocabulary, Corruption corruption = Corruption::none)
        : expert_id_(expert_id), vocabulary_(std::move(vocabulary)), corruption_(corruption) {}

    std::string generate(const SceneRef& scene, const std::string& /*prompt*/, int attempt) override {
        if (scene.metadata == nullptr) throw ContractError("stub client needs scene metadata");
        const Corruption mode = attempt == 1 ? corruption_ : Corruption::none;
        return synthesize(*scene.metadata, mode);
    }

private:
    static const char* opener(int expert_id) {
        static const char* openers[] = {"The scene contains", "This image shows", "Visible here are"};
        return openers[expert_id % 3];
    }

    std::string synthesize(const SceneMetadata& m, Corruption mode) const {
        if (mode == Corruption::noise) return "An unremarkable view.";
        std::ostringstream os;
        os << opener(expert_id_);
        bool first = true;
        for (int k = 1; k < m.num_classes; ++k) {
            if (m.class_counts[k] == 0) continue;
            const std::string count =
                mode == Corruption::drop_numbers ? "assorted" : number_word(m.class_counts[k]);
            os << (first ? " " : ", ") << count << " " << vocabulary_[k]
               << (m.class_counts[k] == 1 ? " region" : " regions");
            first = false;
        }
        if (first) os << " only " << vocabulary_[0];
        os << ".";
        if (mode != Corruption::drop_relations) {
            for (const auto& r : m.relations)
                os << " The " << vocabulary_[r.class_a] << " is " << r.predicate << " the " << vocabulary_[r.class_b]
                   << ".";
            if (m.relations.empty()) os << " Nothing lies adjacent.";
        }
        int dominant = 0;
        for (int k = 1; k < m.num_classes; ++k)
            if (m.class_proportions[k] > m.class_proportions[dominant]) dominant = k;
        os << " Mostly " << vocabulary_[dominant] << " by area.";
        return os.str();
    }

    int expert_id_;
    std::vector<std::string> vocabulary_;
    Corruption corruption_;
};

inline std::unique_ptr<MllmClient> stub_client(int expert_id, const std::vector<std::string>& vocabulary,
                                               Corruption corruption = Corruption::none) {
    return std::make_unique<StubMllmClient>(expert_id, vocabulary, corruption);
}

// ---------------------------------------------------------------------------
// check loop

inline std::vector<CaptionRecord> run_check_loop(const std::vector<MllmClient*>& experts, const SceneRef& scene,
                                                 const PromptSet& prompts,
                                                 const std::vector<std::string>& vocabulary,
                                                 SimilarityProvider& provider, double tau = kCaptionTau,
                                                 int max_attempts = kCaptionMaxAttempts) {
    if (experts.empty()) throw ContractError("run_check_loop: need at least one expert");
    if (scene.metadata == nullptr) throw ContractError("run_check_loop: missing metadata");
    const std::string request = prompts.concatenated();
    std::vector<CaptionRecord> records;
    for (size_t e = 0; e < experts.size(); ++e) {
        CaptionRecord rec;
        rec.expert_id = static_cast<int>(e);
        for (int attempt = 1; attempt <= max_attempts; ++attempt) {
            rec.text = experts[e]->generate(scene, request, attempt);
            rec.similarity = provider.score(rec.text, *scene.metadata, vocabulary);
            const ElementFlags f = check_elements(rec.text, vocabulary);
            rec.has_number = f.has_number;
            rec.has_category = f.has_category;
            rec.has_location = f.has_location;
            rec.attempts = attempt;
            rec.accepted = rec.similarity >= tau && f.has_number && f.has_category && f.has_location;
            if (rec.accepted) break;
        }
        records.push_back(rec);
    }
    return records;
}

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline nlohmann::json caption_record_to_json(const CaptionRecord& r, uint64_t scene_seed,
                                             const PromptSet& prompts) {
    std::ostringstream hash;
    hash << std::hex << fnv1a(prompts.concatenated());
    return {{"scene_seed", scene_seed}, {"expert_id", r.expert_id},       {"attempt", r.attempts},
            {"prompt_hash", hash.str()}, {"text", r.text},                 {"similarity", r.similarity},
            {"has_number", r.has_number}, {"has_category", r.has_category}, {"has_location", r.has_location},
            {"accepted", r.accepted}};
}

inline CaptionRecord caption_record_from_json(const nlohmann::json& j) {
    CaptionRecord r;
    r.expert_id = j.at("expert_id").get<int>();
    r.text = j.at("text").get<std::string>();
    r.similarity = j.at("similarity").get<double>();
    r.has_number = j.at("has_number").get<bool>();
    r.has_category = j.at("has_category").get<bool>();
    r.has_location = j.at("has_location").get<bool>();
    r.attempts = j.at("attempt").get<int>();
    r.accepted = j.at("accepted").get<bool>();
    return r;
}

}  // namespace mpers
