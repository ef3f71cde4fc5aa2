#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pgmfuse/common.hpp"
#include "pgmfuse/labels.hpp"

namespace pgmfuse::evaluate {

constexpr int kClasses = labels::kNumClasses;  // 16 incl. unlabeled

// Rows = ground truth, columns = prediction. Cells with truth 0 are never
// ingested: the unlabeled class is excluded from every metric.
struct ConfusionMatrix {
    std::array<std::uint64_t, kClasses * kClasses> counts{};

    std::uint64_t& at(int truth, int pred) { return counts[truth * kClasses + pred]; }
    std::uint64_t at(int truth, int pred) const { return counts[truth * kClasses + pred]; }

    std::uint64_t total() const;
    void merge(const ConfusionMatrix& other);
};

// Skips samples with truth == 0 or mask == 0; mask may be empty (all valid).
// Throws ContractError on ids >= 16.
void accumulate(ConfusionMatrix& cm, std::span<const std::uint32_t> truth,
                std::span<const std::uint32_t> pred,
                std::span<const std::uint8_t> mask = {});

struct Scores {
    double miou = 0.0;
    double oa = 0.0;
    std::array<double, kClasses> per_class{};  // index 1..15; NaN if unscored
    int scored_classes = 0;
};

// IoU_c = TP_c / (TP_c + FP_c + FN_c) for c = 1..15; classes absent from both
// truth and prediction are left out of the mean. OA = sum TP_c / total.
Scores miou(const ConfusionMatrix& cm);

// Human-readable table in the paper's column order, plus a machine-readable
// "name<TAB>value" block.
std::string format_report(const Scores& scores);
std::string format_report_tsv(const Scores& scores);

}  // namespace pgmfuse::evaluate
