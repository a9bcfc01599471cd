#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace etrnlp {

struct MetricValue {
    std::string name;
    double value = 0.0;
    bool higher_better = true;
};

struct TaskMetrics {
    std::string task;
    std::vector<MetricValue> metrics;
};

struct MetricRecord {
    std::vector<TaskMetrics> tasks;
};

// Average relative improvement over a baseline, in percent: per metric the
// relative change is credited positively when it moves in the metric's better
// direction, averaged over metrics within a task and then over tasks.
inline double delta_p(const MetricRecord& method, const MetricRecord& baseline) {
    if (method.tasks.size() != baseline.tasks.size() || method.tasks.empty()) {
        throw std::invalid_argument("delta_p: task structure mismatch");
    }
    double task_sum = 0.0;
    for (std::size_t t = 0; t < method.tasks.size(); ++t) {
        const auto& mt = method.tasks[t];
        const auto& bt = baseline.tasks[t];
        if (mt.metrics.size() != bt.metrics.size() || mt.metrics.empty()) {
            throw std::invalid_argument("delta_p: metric structure mismatch in task '" + mt.task +
                                        "'");
        }
        double metric_sum = 0.0;
        for (std::size_t n = 0; n < mt.metrics.size(); ++n) {
            const auto& m = mt.metrics[n];
            const auto& b = bt.metrics[n];
            if (m.name != b.name || m.higher_better != b.higher_better) {
                throw std::invalid_argument("delta_p: metric '" + m.name +
                                            "' does not line up with baseline '" + b.name + "'");
            }
            if (b.value == 0.0) {
                throw std::invalid_argument("delta_p: zero baseline for metric '" + m.name + "'");
            }
            const double rel = (m.value - b.value) / b.value;
            metric_sum += m.higher_better ? rel : -rel;
        }
        task_sum += metric_sum / static_cast<double>(mt.metrics.size());
    }
    return 100.0 * task_sum / static_cast<double>(method.tasks.size());
}

struct PrfScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct ClassificationReport {
    std::vector<PrfScores> per_task;
    PrfScores macro;  // unweighted task mean; macro F is the mean of task Fs
};

// Binary multi-task precision/recall/F at threshold 0.5 on the sigmoid,
// i.e. positive prediction iff logit > 0. Degenerate-denominator convention:
// P = 0 when nothing is predicted positive, F = 0 when P + R = 0.
inline ClassificationReport classification_metrics(
    const std::vector<std::vector<float>>& logits, const std::vector<std::vector<float>>& labels) {
    if (logits.size() != labels.size() || logits.empty()) {
        throw std::invalid_argument("classification_metrics: task count mismatch");
    }
    ClassificationReport rep;
    for (std::size_t t = 0; t < logits.size(); ++t) {
        if (logits[t].size() != labels[t].size()) {
            throw std::invalid_argument("classification_metrics: sample count mismatch in task " +
                                        std::to_string(t));
        }
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < logits[t].size(); ++i) {
            const bool pred = logits[t][i] > 0.0f;
            const bool pos = labels[t][i] > 0.5f;
            if (pred && pos) ++tp;
            else if (pred && !pos) ++fp;
            else if (!pred && pos) ++fn;
        }
        PrfScores s;
        s.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        s.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        s.f1 = (s.precision + s.recall) > 0.0
                   ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                   : 0.0;
        rep.per_task.push_back(s);
        rep.macro.precision += s.precision;
        rep.macro.recall += s.recall;
        rep.macro.f1 += s.f1;
    }
    const double inv = 1.0 / static_cast<double>(rep.per_task.size());
    rep.macro.precision *= inv;
    rep.macro.recall *= inv;
    rep.macro.f1 *= inv;
    return rep;
}

struct DenseReport {
    std::vector<double> iou_per_category;
    double miou = 0.0;
    double pixel_acc = 0.0;  // binary accuracy averaged over categories
    double abs_err = 0.0;
    double rel_err = 0.0;
};

// Dense-prediction metrics: per-category binary IoU (threshold 0 on logits,
// 1.0 when prediction and ground truth are both empty), mean absolute and
// relative depth error. Relative error requires positive ground-truth depth.
inline DenseReport dense_metrics(const std::vector<std::vector<float>>& pred_seg_logits,
                                 const std::vector<std::vector<float>>& gt_seg,
                                 const std::vector<float>& pred_depth,
                                 const std::vector<float>& gt_depth) {
    if (pred_seg_logits.size() != gt_seg.size()) {
        throw std::invalid_argument("dense_metrics: category count mismatch");
    }
    DenseReport rep;
    for (std::size_t c = 0; c < pred_seg_logits.size(); ++c) {
        const auto& p = pred_seg_logits[c];
        const auto& g = gt_seg[c];
        if (p.size() != g.size()) {
            throw std::invalid_argument("dense_metrics: pixel count mismatch in category " +
                                        std::to_string(c));
        }
        std::int64_t inter = 0, uni = 0, correct = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const bool pp = p[i] > 0.0f;
            const bool gg = g[i] > 0.5f;
            if (pp && gg) ++inter;
            if (pp || gg) ++uni;
            if (pp == gg) ++correct;
        }
        const double iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
        rep.iou_per_category.push_back(iou);
        rep.miou += iou;
        rep.pixel_acc += p.empty() ? 1.0
                                   : static_cast<double>(correct) / static_cast<double>(p.size());
    }
    if (!rep.iou_per_category.empty()) {
        rep.miou /= static_cast<double>(rep.iou_per_category.size());
        rep.pixel_acc /= static_cast<double>(rep.iou_per_category.size());
    }
    if (pred_depth.size() != gt_depth.size()) {
        throw std::invalid_argument("dense_metrics: depth pixel count mismatch");
    }
    if (!pred_depth.empty()) {
        double abs_sum = 0.0, rel_sum = 0.0;
        for (std::size_t i = 0; i < pred_depth.size(); ++i) {
            const double d = static_cast<double>(gt_depth[i]);
            if (!(d > 0.0)) {
                throw std::invalid_argument(
                    "dense_metrics: nonpositive ground-truth depth at pixel " + std::to_string(i));
            }
            const double e = std::abs(static_cast<double>(pred_depth[i]) - d);
            abs_sum += e;
            rel_sum += e / d;
        }
        rep.abs_err = abs_sum / static_cast<double>(pred_depth.size());
        rep.rel_err = rel_sum / static_cast<double>(pred_depth.size());
    }
    return rep;
}

}  // namespace etrnlp
