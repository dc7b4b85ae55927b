#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "typhoon/errors.hpp"

namespace typhoon {

struct ConfusionCounts {
    int64_t tp = 0;
    int64_t tn = 0;
    int64_t fp = 0;
    int64_t fn = 0;
};

inline ConfusionCounts confusion(const std::vector<int>& predictions,
                                 const std::vector<int>& labels) {
    if (predictions.empty() || predictions.size() != labels.size()) {
        throw ContractError("metrics require equal non-zero prediction/label lengths");
    }
    ConfusionCounts counts;
    for (size_t i = 0; i < predictions.size(); ++i) {
        if (labels[i] == 1) {
            predictions[i] == 1 ? ++counts.tp : ++counts.fn;
        } else {
            predictions[i] == 1 ? ++counts.fp : ++counts.tn;
        }
    }
    return counts;
}

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    const ConfusionCounts c = confusion(predictions, labels);
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(predictions.size());
}

// Binary F1 for positive class 1; 0 when precision + recall degenerate.
inline double f1_binary(const std::vector<int>& predictions, const std::vector<int>& labels) {
    const ConfusionCounts c = confusion(predictions, labels);
    const double denom_p = static_cast<double>(c.tp + c.fp);
    const double denom_r = static_cast<double>(c.tp + c.fn);
    if (denom_p == 0.0 || denom_r == 0.0) {
        return 0.0;
    }
    const double precision = static_cast<double>(c.tp) / denom_p;
    const double recall = static_cast<double>(c.tp) / denom_r;
    if (precision + recall == 0.0) {
        return 0.0;
    }
    return 2.0 * precision * recall / (precision + recall);
}

// Matthews correlation; 0 when any denominator factor is 0.
inline double matthews_corr(const std::vector<int>& predictions, const std::vector<int>& labels) {
    const ConfusionCounts c = confusion(predictions, labels);
    const double f1 = static_cast<double>(c.tp + c.fp);
    const double f2 = static_cast<double>(c.tp + c.fn);
    const double f3 = static_cast<double>(c.tn + c.fp);
    const double f4 = static_cast<double>(c.tn + c.fn);
    if (f1 == 0.0 || f2 == 0.0 || f3 == 0.0 || f4 == 0.0) {
        return 0.0;
    }
    const double num = static_cast<double>(c.tp) * static_cast<double>(c.tn) -
                       static_cast<double>(c.fp) * static_cast<double>(c.fn);
    return num / std::sqrt(f1 * f2 * f3 * f4);
}

} // namespace typhoon
