#include "pgmfuse/evaluate.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace pgmfuse::evaluate {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (const auto v : counts) t += v;
    return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

void accumulate(ConfusionMatrix& cm, std::span<const std::uint32_t> truth,
                std::span<const std::uint32_t> pred,
                std::span<const std::uint8_t> mask) {
    if (truth.size() != pred.size()) {
        throw ContractError("accumulate: truth and prediction sizes differ");
    }
    if (!mask.empty() && mask.size() != truth.size()) {
        throw ContractError("accumulate: mask size differs");
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= kClasses || pred[i] >= kClasses) {
            throw ContractError("accumulate: class id out of range at sample " +
                                std::to_string(i));
        }
        if (truth[i] == 0) continue;
        if (!mask.empty() && mask[i] == 0) continue;
        ++cm.at(static_cast<int>(truth[i]), static_cast<int>(pred[i]));
    }
}

Scores miou(const ConfusionMatrix& cm) {
    Scores s;
    s.per_class.fill(std::numeric_limits<double>::quiet_NaN());

    std::uint64_t diag = 0;
    double sum = 0.0;
    for (int c = 1; c < kClasses; ++c) {
        const std::uint64_t tp = cm.at(c, c);
        std::uint64_t row = 0, col = 0;
        for (int k = 0; k < kClasses; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        diag += tp;
        const std::uint64_t denom = row + col - tp;  // TP + FP + FN
        if (denom == 0) continue;  // absent from truth and prediction
        const double iou = static_cast<double>(tp) / static_cast<double>(denom);
        s.per_class[c] = iou;
        sum += iou;
        ++s.scored_classes;
    }
    if (s.scored_classes > 0) s.miou = sum / s.scored_classes;
    const std::uint64_t total = cm.total();
    if (total > 0) s.oa = static_cast<double>(diag) / static_cast<double>(total);
    return s;
}

std::string format_report(const Scores& s) {
    std::ostringstream out;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "mIoU %.4f  OA %.4f  (%d classes scored)\n",
                  s.miou, s.oa, s.scored_classes);
    out << buf;
    for (int c = 1; c < kClasses; ++c) {
        if (std::isnan(s.per_class[c])) {
            std::snprintf(buf, sizeof(buf), "  %-14s     -\n", labels::kClassNames[c]);
        } else {
            std::snprintf(buf, sizeof(buf), "  %-14s %.4f\n", labels::kClassNames[c],
                          s.per_class[c]);
        }
        out << buf;
    }
    return out.str();
}

std::string format_report_tsv(const Scores& s) {
    std::ostringstream out;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "miou\t%.6f\noa\t%.6f\n", s.miou, s.oa);
    out << buf;
    for (int c = 1; c < kClasses; ++c) {
        const double v = std::isnan(s.per_class[c]) ? -1.0 : s.per_class[c];
        std::snprintf(buf, sizeof(buf), "iou_%s\t%.6f\n", labels::kClassNames[c], v);
        out << buf;
    }
    return out.str();
}

}  // namespace pgmfuse::evaluate
