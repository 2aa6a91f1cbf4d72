#pragma once

// Synthetic dense-scene generator. Scenes are axis-aligned rectangles and
// discs over a background class, one fixed base color per class plus
// Gaussian noise. Metadata (counts, pixel proportions, spatial relations)
// grounds caption synthesis and the offline similarity scorer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpers/errors.hpp"
#include "mpers/init.hpp"
#include "mpers/tensor.hpp"
#include "mpers/tensor_io.hpp"

namespace mpers {

struct SceneObject {
    int cls = 0;
    bool is_disc = false;
    double centroid_y = 0.0, centroid_x = 0.0;
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // bounding box, half-open
};

struct Relation {
    int class_a = 0;
    std::string predicate;  // left of / right of / above / below / adjacent to
    int class_b = 0;
};

struct SceneMetadata {
    int num_classes = 0;
    std::vector<int> class_counts;          // objects placed per class
    std::vector<double> class_proportions;  // pixel fractions, sum to 1
    std::vector<Relation> relations;
    std::vector<SceneObject> objects;
};

struct LabeledScene {
    Tensor image;  // 3xHxW in [0,1]
    LabelRaster labels;
    uint64_t seed = 0;
};

inline std::array<float, 3> class_base_color(int cls) {
    // background gray, object classes on fixed distinct hues
    static const std::array<float, 3> palette[] = {
        {0.5f, 0.5f, 0.5f}, {0.85f, 0.2f, 0.2f}, {0.2f, 0.75f, 0.25f}, {0.2f, 0.35f, 0.85f},
        {0.9f, 0.8f, 0.2f}, {0.2f, 0.8f, 0.8f},  {0.8f, 0.3f, 0.8f},  {0.9f, 0.55f, 0.15f},
    };
    return palette[cls == 0 ? 0 : 1 + (cls - 1) % 7];
}

// centroid-offset predicate, adjacency from bounding-box gap < 2 px
inline std::string spatial_predicate(const SceneObject& a, const SceneObject& b) {
    const int gap_y = std::max(a.y0, b.y0) - std::min(a.y1, b.y1);
    const int gap_x = std::max(a.x0, b.x0) - std::min(a.x1, b.x1);
    if (gap_y < 2 && gap_x < 2) return "adjacent to";
    const double dy = a.centroid_y - b.centroid_y;
    const double dx = a.centroid_x - b.centroid_x;
    if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? "left of" : "right of";
    return dy < 0 ? "above" : "below";
}

inline std::pair<LabeledScene, SceneMetadata> generate_scene(uint64_t seed, int num_classes, int size,
                                                             int min_objects, int max_objects) {
    if (num_classes < 2) throw ContractError("generate_scene requires num_classes >= 2");
    if (size < 16) throw ContractError("generate_scene requires size >= 16");
    if (min_objects < 0 || max_objects < min_objects) throw ContractError("invalid object count range");

    Rng rng(seed);
    const int H = size, W = size;
    std::vector<uint8_t> labels(static_cast<size_t>(H) * W, 0);

    const int n_objects = min_objects + static_cast<int>(rng() % static_cast<uint64_t>(max_objects - min_objects + 1));
    std::vector<SceneObject> objects;
    std::uniform_int_distribution<int> cls_dist(1, num_classes - 1);
    std::uniform_int_distribution<int> ext_dist(std::max(3, size / 8), std::max(4, size / 3));

    for (int n = 0; n < n_objects; ++n) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            const int cls = cls_dist(rng);
            const bool disc = (rng() & 1u) != 0;
            const int h = ext_dist(rng);
            const int w = disc ? h : ext_dist(rng);
            std::uniform_int_distribution<int> ypos(0, H - h);
            std::uniform_int_distribution<int> xpos(0, W - w);
            const int y0 = ypos(rng), x0 = xpos(rng);

            std::vector<int> footprint;  // linear pixel indices
            const double cy = y0 + (h - 1) / 2.0, cx = x0 + (w - 1) / 2.0, rad = (std::min(h, w) - 1) / 2.0;
            for (int y = y0; y < y0 + h; ++y)
                for (int x = x0; x < x0 + w; ++x) {
                    if (disc) {
                        const double dy = y - cy, dx = x - cx;
                        if (dy * dy + dx * dx > rad * rad + 0.5) continue;
                    }
                    footprint.push_back(y * W + x);
                }
            if (footprint.empty()) continue;
            int bg = 0;
            for (int idx : footprint) bg += labels[idx] == 0 ? 1 : 0;
            // keep scenes dense but never fully occluded
            if (bg * 10 < static_cast<int>(footprint.size()) * 3) continue;

            double sum_y = 0.0, sum_x = 0.0;
            for (int idx : footprint) {
                labels[idx] = static_cast<uint8_t>(cls);
                sum_y += idx / W;
                sum_x += idx % W;
            }
            SceneObject obj;
            obj.cls = cls;
            obj.is_disc = disc;
            obj.centroid_y = sum_y / static_cast<double>(footprint.size());
            obj.centroid_x = sum_x / static_cast<double>(footprint.size());
            obj.y0 = y0;
            obj.x0 = x0;
            obj.y1 = y0 + h;
            obj.x1 = x0 + w;
            objects.push_back(obj);
            placed = true;
        }
        if (!placed)
            throw GenerationError("object placement unsatisfiable after 1000 attempts (seed " +
                                  std::to_string(seed) + ")");
    }

    SceneMetadata meta;
    meta.num_classes = num_classes;
    meta.class_counts.assign(num_classes, 0);
    for (const auto& o : objects) meta.class_counts[o.cls]++;
    meta.class_proportions.assign(num_classes, 0.0);
    for (uint8_t l : labels) meta.class_proportions[l] += 1.0;
    for (double& p : meta.class_proportions) p /= static_cast<double>(H) * W;
    meta.objects = objects;
    for (size_t i = 0; i < objects.size(); ++i)
        for (size_t j = i + 1; j < objects.size() && meta.relations.size() < 16; ++j) {
            if (objects[i].cls == objects[j].cls) continue;
            meta.relations.push_back({objects[i].cls, spatial_predicate(objects[i], objects[j]), objects[j].cls});
        }

    Tensor image = Tensor::zeros({3, H, W});
    std::normal_distribution<float> noise(0.0f, 0.05f);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const auto base = class_base_color(labels[y * W + x]);
            for (int c = 0; c < 3; ++c)
                image.data()[(c * H + y) * W + x] = std::clamp(base[c] + noise(rng), 0.0f, 1.0f);
        }

    LabeledScene scene;
    scene.image = image;
    scene.labels = {H, W, std::move(labels)};
    scene.seed = seed;
    return {scene, meta};
}

inline std::pair<std::vector<uint64_t>, std::vector<uint64_t>> make_split(const std::vector<uint64_t>& seeds,
                                                                          double train_fraction) {
    if (seeds.empty()) throw ContractError("make_split: empty seed list");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ContractError("train_fraction must be in (0,1)");
    const size_t n_train = static_cast<size_t>(std::floor(seeds.size() * train_fraction));
    std::vector<uint64_t> train(seeds.begin(), seeds.begin() + static_cast<long>(n_train));
    std::vector<uint64_t> eval(seeds.begin() + static_cast<long>(n_train), seeds.end());
    return {train, eval};
}

inline nlohmann::json metadata_to_json(const SceneMetadata& m) {
    nlohmann::json rel = nlohmann::json::array();
    for (const auto& r : m.relations) rel.push_back({{"a", r.class_a}, {"pred", r.predicate}, {"b", r.class_b}});
    return {{"num_classes", m.num_classes},
            {"class_counts", m.class_counts},
            {"class_proportions", m.class_proportions},
            {"relations", rel}};
}

inline SceneMetadata metadata_from_json(const nlohmann::json& j) {
    SceneMetadata m;
    m.num_classes = j.at("num_classes").get<int>();
    m.class_counts = j.at("class_counts").get<std::vector<int>>();
    m.class_proportions = j.at("class_proportions").get<std::vector<double>>();
    for (const auto& r : j.at("relations"))
        m.relations.push_back({r.at("a").get<int>(), r.at("pred").get<std::string>(), r.at("b").get<int>()});
    return m;
}

}  // namespace mpers
