#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "typhoon/metrics.hpp"
#include "typhoon/rng.hpp"

using namespace typhoon;

TEST_CASE("accuracy counts exact matches", "[metrics]") {
    REQUIRE(accuracy({1, 0, 1}, {1, 0, 1}) == 1.0);
    REQUIRE(accuracy({1, 0}, {0, 1}) == 0.0);
    REQUIRE(accuracy({1, 1, 0, 0}, {1, 0, 0, 0}) == 0.75);
}

TEST_CASE("f1 follows precision/recall with the zero convention", "[metrics]") {
    REQUIRE(f1_binary({1, 0, 1}, {1, 0, 1}) == 1.0);
    // TP=2, FP=1, FN=1 -> precision 2/3, recall 2/3
    REQUIRE_THAT(f1_binary({1, 1, 1, 0, 0}, {1, 1, 0, 1, 0}),
                 Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
    REQUIRE(f1_binary({0, 0, 0}, {1, 0, 1}) == 0.0);
}

TEST_CASE("matthews correlation matches the closed form", "[metrics]") {
    REQUIRE(matthews_corr({1, 0, 1, 0}, {1, 0, 1, 0}) == 1.0);
    // TP=1, TN=2, FP=1, FN=0 -> 2/sqrt(12)
    REQUIRE_THAT(matthews_corr({1, 1, 0, 0}, {1, 0, 0, 0}),
                 Catch::Matchers::WithinAbs(2.0 / std::sqrt(12.0), 1e-12));
    REQUIRE(matthews_corr({1, 1, 1}, {1, 0, 1}) == 0.0);
}

TEST_CASE("metrics reject empty or mismatched inputs", "[metrics]") {
    REQUIRE_THROWS_AS(accuracy({}, {}), ContractError);
    REQUIRE_THROWS_AS(f1_binary({1}, {1, 0}), ContractError);
    REQUIRE_THROWS_AS(matthews_corr({}, {}), ContractError);
}

namespace {

// Independent count-based oracle used by the randomized comparison.
struct NaiveMetrics {
    double acc, f1, mcc;
};

NaiveMetrics naive_metrics(const std::vector<int>& preds, const std::vector<int>& labels) {
    double tp = 0, tn = 0, fp = 0, fn = 0, match = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == labels[i]) match += 1;
        if (preds[i] == 1 && labels[i] == 1) tp += 1;
        if (preds[i] == 0 && labels[i] == 0) tn += 1;
        if (preds[i] == 1 && labels[i] == 0) fp += 1;
        if (preds[i] == 0 && labels[i] == 1) fn += 1;
    }
    NaiveMetrics out{};
    out.acc = match / static_cast<double>(preds.size());
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    out.f1 = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
    const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    out.mcc = denom > 0 ? (tp * tn - fp * fn) / std::sqrt(denom) : 0.0;
    return out;
}

} // namespace

TEST_CASE("metrics agree with a naive oracle on random vectors", "[metrics]") {
    Rng rng(2024);
    for (int trial = 0; trial < 500; ++trial) {
        const size_t n = 1 + rng.below(64);
        std::vector<int> preds(n), labels(n);
        for (size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.below(2));
            labels[i] = static_cast<int>(rng.below(2));
        }
        const NaiveMetrics expect = naive_metrics(preds, labels);
        REQUIRE_THAT(accuracy(preds, labels), Catch::Matchers::WithinAbs(expect.acc, 1e-12));
        REQUIRE_THAT(f1_binary(preds, labels), Catch::Matchers::WithinAbs(expect.f1, 1e-12));
        REQUIRE_THAT(matthews_corr(preds, labels), Catch::Matchers::WithinAbs(expect.mcc, 1e-12));
    }
}

TEST_CASE("metrics are invariant under simultaneous permutation", "[metrics]") {
    Rng rng(55);
    for (int trial = 0; trial < 50; ++trial) {
        const size_t n = 2 + rng.below(32);
        std::vector<int> preds(n), labels(n);
        for (size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.below(2));
            labels[i] = static_cast<int>(rng.below(2));
        }
        std::vector<size_t> perm(n);
        for (size_t i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(perm);
        std::vector<int> preds_p(n), labels_p(n);
        for (size_t i = 0; i < n; ++i) {
            preds_p[i] = preds[perm[i]];
            labels_p[i] = labels[perm[i]];
        }
        REQUIRE(accuracy(preds, labels) == accuracy(preds_p, labels_p));
        REQUIRE(f1_binary(preds, labels) == f1_binary(preds_p, labels_p));
        REQUIRE(matthews_corr(preds, labels) == matthews_corr(preds_p, labels_p));
    }
}

TEST_CASE("class swap preserves accuracy and MCC, maps F1 to the other class", "[metrics]") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const size_t n = 2 + rng.below(32);
        std::vector<int> preds(n), labels(n), preds_s(n), labels_s(n);
        for (size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.below(2));
            labels[i] = static_cast<int>(rng.below(2));
            preds_s[i] = 1 - preds[i];
            labels_s[i] = 1 - labels[i];
        }
        REQUIRE(accuracy(preds, labels) == accuracy(preds_s, labels_s));
        REQUIRE_THAT(matthews_corr(preds, labels),
                     Catch::Matchers::WithinAbs(matthews_corr(preds_s, labels_s), 1e-12));
        // F1 of the swapped problem is the F1 of class 0 in the original:
        // compute it directly from the original counts
        double tn = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < n; ++i) {
            if (preds[i] == 0 && labels[i] == 0) tn += 1;
            if (preds[i] == 1 && labels[i] == 0) fp += 1;
            if (preds[i] == 0 && labels[i] == 1) fn += 1;
        }
        const double p0 = tn + fn > 0 ? tn / (tn + fn) : 0.0;
        const double r0 = tn + fp > 0 ? tn / (tn + fp) : 0.0;
        const double f1_class0 = (p0 + r0) > 0 ? 2 * p0 * r0 / (p0 + r0) : 0.0;
        REQUIRE_THAT(f1_binary(preds_s, labels_s), Catch::Matchers::WithinAbs(f1_class0, 1e-12));
    }
}
