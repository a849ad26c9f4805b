#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tnseg/tensor.hpp"

namespace tnseg {

/// Pixel counts over the masked region; a pixel is predicted vessel when prob >= threshold.
struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
};

/// Throws std::invalid_argument on shape mismatch or when the mask holds only one class.
Confusion confusion(const Tensor& prob, const Tensor& label, const Tensor& mask, double threshold = 0.5);

/// A metric whose denominator is zero is reported as 0 and flagged.
struct BinaryMetrics {
    double f1 = 0, se = 0, sp = 0, acc = 0;
    bool f1_undefined = false, se_undefined = false, sp_undefined = false, acc_undefined = false;
};
BinaryMetrics binary_metrics(const Confusion& c);

/// Mann-Whitney AUC over masked pixels, ties counted 1/2.
double auc(const Tensor& scores, const Tensor& labels, const Tensor& mask);
/// Step-wise area under the precision-recall curve: sum over distinct thresholds of (R_i - R_{i-1}) * P_i.
double aupr(const Tensor& scores, const Tensor& labels, const Tensor& mask);

struct MetricsReport {
    double auc = 0, aupr = 0, f1 = 0, se = 0, sp = 0, acc = 0;
    double threshold = 0.5;
    std::size_t n_pos = 0, n_neg = 0;
    Confusion counts;
};
MetricsReport evaluate_map(const Tensor& prob, const Tensor& label, const Tensor& mask, double threshold = 0.5);

/// Component-wise mean of per-image reports (counts are summed).
MetricsReport mean_report(const std::vector<MetricsReport>& reports);

/// `image,auc,aupr,f1,se,sp,acc` with one row per image and a final `mean` row.
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, MetricsReport>>& rows);

}  // namespace tnseg
