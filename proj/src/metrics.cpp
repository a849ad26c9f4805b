#include "tnseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace tnseg {

namespace {

struct Scored {
    double score;
    bool positive;
};

std::vector<Scored> masked_pairs(const Tensor& scores, const Tensor& labels, const Tensor& mask, const char* who) {
    if (scores.shape() != labels.shape() || scores.shape() != mask.shape()) {
        throw std::invalid_argument(std::string(who) + ": shapes " + shape_str(scores.shape()) + ", " +
                                    shape_str(labels.shape()) + ", " + shape_str(mask.shape()) + " differ");
    }
    std::vector<Scored> out;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (mask[i] != 0.0) out.push_back({scores[i], labels[i] != 0.0});
    }
    return out;
}

std::pair<std::size_t, std::size_t> class_counts(const std::vector<Scored>& v) {
    const auto pos = static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](const Scored& s) { return s.positive; }));
    return {pos, v.size() - pos};
}

void require_both_classes(std::size_t pos, std::size_t neg, const char* who) {
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument(std::string(who) + ": masked region holds " + std::to_string(pos) +
                                    " positive and " + std::to_string(neg) + " negative pixels; both are required");
    }
}

double ratio(std::size_t num, std::size_t den, bool& undefined) {
    undefined = den == 0;
    return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

Confusion confusion(const Tensor& prob, const Tensor& label, const Tensor& mask, double threshold) {
    const auto pairs = masked_pairs(prob, label, mask, "confusion");
    const auto [pos, neg] = class_counts(pairs);
    require_both_classes(pos, neg, "confusion");
    Confusion c;
    for (const auto& p : pairs) {
        const bool predicted = p.score >= threshold;
        if (p.positive) {
            ++(predicted ? c.tp : c.fn);
        } else {
            ++(predicted ? c.fp : c.tn);
        }
    }
    return c;
}

BinaryMetrics binary_metrics(const Confusion& c) {
    BinaryMetrics m;
    m.se = ratio(c.tp, c.tp + c.fn, m.se_undefined);
    m.sp = ratio(c.tn, c.tn + c.fp, m.sp_undefined);
    m.acc = ratio(c.tp + c.tn, c.total(), m.acc_undefined);
    m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, m.f1_undefined);
    return m;
}

double auc(const Tensor& scores, const Tensor& labels, const Tensor& mask) {
    auto v = masked_pairs(scores, labels, mask, "auc");
    const auto [pos, neg] = class_counts(v);
    require_both_classes(pos, neg, "auc");
    std::sort(v.begin(), v.end(), [](const Scored& a, const Scored& b) { return a.score < b.score; });
    // Sum of (1-based, tie-averaged) ranks of the positives.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        std::size_t pos_in_group = 0;
        while (j < v.size() && v[j].score == v[i].score) pos_in_group += v[j++].positive ? 1 : 0;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
        rank_sum += mid_rank * static_cast<double>(pos_in_group);
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

double aupr(const Tensor& scores, const Tensor& labels, const Tensor& mask) {
    auto v = masked_pairs(scores, labels, mask, "aupr");
    const auto [pos, neg] = class_counts(v);
    if (pos == 0) throw std::invalid_argument("aupr: no positive pixels in the masked region");
    std::sort(v.begin(), v.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
    double area = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        while (j < v.size() && v[j].score == v[i].score) {
            ++(v[j].positive ? tp : fp);
            ++j;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return area;
}

MetricsReport evaluate_map(const Tensor& prob, const Tensor& label, const Tensor& mask, double threshold) {
    MetricsReport r;
    r.threshold = threshold;
    r.counts = confusion(prob, label, mask, threshold);
    r.n_pos = r.counts.tp + r.counts.fn;
    r.n_neg = r.counts.tn + r.counts.fp;
    const BinaryMetrics b = binary_metrics(r.counts);
    r.f1 = b.f1;
    r.se = b.se;
    r.sp = b.sp;
    r.acc = b.acc;
    r.auc = auc(prob, label, mask);
    r.aupr = aupr(prob, label, mask);
    return r;
}

MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("mean_report of no reports");
    MetricsReport m;
    const double k = static_cast<double>(reports.size());
    m.threshold = reports.front().threshold;
    for (const auto& r : reports) {
        m.auc += r.auc / k;
        m.aupr += r.aupr / k;
        m.f1 += r.f1 / k;
        m.se += r.se / k;
        m.sp += r.sp / k;
        m.acc += r.acc / k;
        m.n_pos += r.n_pos;
        m.n_neg += r.n_neg;
        m.counts.tp += r.counts.tp;
        m.counts.fp += r.counts.fp;
        m.counts.tn += r.counts.tn;
        m.counts.fn += r.counts.fn;
    }
    return m;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    auto line = [&](const std::string& name, const MetricsReport& r) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", name.c_str(), r.auc, r.aupr, r.f1,
                      r.se, r.sp, r.acc);
        out << buf;
    };
    out << "image,auc,aupr,f1,se,sp,acc\n";
    std::vector<MetricsReport> all;
    for (const auto& [name, r] : rows) {
        line(name, r);
        all.push_back(r);
    }
    if (!all.empty()) line("mean", mean_report(all));
}

}  // namespace tnseg
