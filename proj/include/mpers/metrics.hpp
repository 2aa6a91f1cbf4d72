#pragma once

// Confusion-matrix based segmentation metrics: per-class IoU and F1, their
// means over defined classes, and overall pixel accuracy.

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpers/errors.hpp"
#include "mpers/tensor_io.hpp"

namespace mpers {

struct ConfusionMatrix {
    int num_classes = 0;
    int ignore_label = kIgnoreLabel;
    std::vector<uint64_t> counts;  // counts[g * K + p]

    explicit ConfusionMatrix(int k = 0, int ignore = kIgnoreLabel)
        : num_classes(k), ignore_label(ignore), counts(static_cast<size_t>(k) * k, 0) {}

    uint64_t at(int gt, int pred) const { return counts[static_cast<size_t>(gt) * num_classes + pred]; }
    uint64_t& at(int gt, int pred) { return counts[static_cast<size_t>(gt) * num_classes + pred]; }

    uint64_t total() const {
        uint64_t t = 0;
        for (uint64_t c : counts) t += c;
        return t;
    }

    ConfusionMatrix& merge(const ConfusionMatrix& other) {
        for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
        return *this;
    }
};

inline void accumulate(ConfusionMatrix& cm, const LabelRaster& pred, const LabelRaster& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw DimensionError("accumulate raster size mismatch");
    const int K = cm.num_classes;
    for (int y = 0; y < gt.height; ++y)
        for (int x = 0; x < gt.width; ++x) {
            const int g = gt.labels[y * gt.width + x];
            const int p = pred.labels[y * pred.width + x];
            if (g == cm.ignore_label) continue;
            if (g >= K || p >= K)
                throw LabelError("label out of range at pixel (" + std::to_string(y) + "," + std::to_string(x) +
                                 "): gt=" + std::to_string(g) + " pred=" + std::to_string(p));
            cm.at(g, p)++;
        }
}

struct ClassMetrics {
    double iou = 0.0;
    double f1 = 0.0;
    bool defined = false;  // TP+FP+FN > 0
};

inline std::vector<ClassMetrics> per_class(const ConfusionMatrix& cm) {
    const int K = cm.num_classes;
    std::vector<ClassMetrics> out(K);
    for (int k = 0; k < K; ++k) {
        const uint64_t tp = cm.at(k, k);
        uint64_t fp = 0, fn = 0;
        for (int g = 0; g < K; ++g)
            if (g != k) fp += cm.at(g, k);
        for (int p = 0; p < K; ++p)
            if (p != k) fn += cm.at(k, p);
        if (tp + fp + fn == 0) continue;
        out[k].defined = true;
        out[k].iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        out[k].f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    }
    return out;
}

struct MetricsReport {
    std::vector<ClassMetrics> classes;
    double miou = 0.0;
    double mf1 = 0.0;
    double oa = 0.0;
};

inline MetricsReport summarize(const ConfusionMatrix& cm) {
    const uint64_t total = cm.total();
    if (total == 0) throw ContractError("summarize: zero non-ignored pixels");
    MetricsReport r;
    r.classes = per_class(cm);
    int defined = 0;
    for (const auto& c : r.classes)
        if (c.defined) {
            r.miou += c.iou;
            r.mf1 += c.f1;
            ++defined;
        }
    if (defined == 0) throw ContractError("summarize: no defined classes");
    r.miou /= defined;
    r.mf1 /= defined;
    uint64_t diag = 0;
    for (int k = 0; k < cm.num_classes; ++k) diag += cm.at(k, k);
    r.oa = static_cast<double>(diag) / static_cast<double>(total);
    return r;
}

inline nlohmann::json report_to_json(const MetricsReport& r, const std::vector<std::string>& class_names = {}) {
    nlohmann::json classes = nlohmann::json::array();
    for (size_t k = 0; k < r.classes.size(); ++k) {
        nlohmann::json c = {{"iou", r.classes[k].iou}, {"f1", r.classes[k].f1}, {"defined", r.classes[k].defined}};
        if (k < class_names.size()) c["name"] = class_names[k];
        classes.push_back(c);
    }
    return {{"classes", classes}, {"miou", r.miou}, {"mf1", r.mf1}, {"oa", r.oa}};
}

// aligned per-class IoU(%)/F1(%) table, then means
inline std::string report_to_table(const MetricsReport& r, const std::vector<std::string>& class_names = {}) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << std::setw(16) << std::left << "class" << std::right << std::setw(10) << "IoU(%)" << std::setw(10)
       << "F1(%)" << "\n";
    for (size_t k = 0; k < r.classes.size(); ++k) {
        const std::string name = k < class_names.size() ? class_names[k] : "class " + std::to_string(k);
        os << std::setw(16) << std::left << name << std::right;
        if (r.classes[k].defined)
            os << std::setw(10) << r.classes[k].iou * 100.0 << std::setw(10) << r.classes[k].f1 * 100.0;
        else
            os << std::setw(10) << "-" << std::setw(10) << "-";
        os << "\n";
    }
    os << std::setw(16) << std::left << "mIoU" << std::right << std::setw(10) << r.miou * 100.0 << "\n";
    os << std::setw(16) << std::left << "mF1" << std::right << std::setw(10) << r.mf1 * 100.0 << "\n";
    os << std::setw(16) << std::left << "OA" << std::right << std::setw(10) << r.oa * 100.0 << "\n";
    return os.str();
}

}  // namespace mpers
