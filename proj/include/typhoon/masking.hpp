#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "typhoon/data.hpp"
#include "typhoon/errors.hpp"
#include "typhoon/rng.hpp"
#include "typhoon/vocab.hpp"

namespace typhoon {

// One masked view of a sequence. At every non-structural position exactly
// one of x_masked / y_labels is MASK: masked positions expose the original
// id in y_labels, unmasked positions keep it in x_masked. Structural
// positions are never masked (b = 0, y = MASK).
struct MaskOutcome {
    std::vector<TokenId> x_masked;
    std::vector<TokenId> y_labels;
    std::vector<uint8_t> b;

    bool any_masked() const {
        for (uint8_t flag : b) {
            if (flag) return true;
        }
        return false;
    }
};

namespace detail {

inline bool in_set(TokenId id, const std::vector<TokenId>& set) {
    return std::find(set.begin(), set.end(), id) != set.end();
}

inline MaskOutcome outcome_from_flags(const std::vector<TokenId>& ids,
                                      const std::vector<uint8_t>& masked) {
    MaskOutcome out;
    out.x_masked = ids;
    out.y_labels.assign(ids.size(), Vocab::kMask);
    out.b.assign(ids.size(), 0);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (masked[i]) {
            out.b[i] = 1;
            out.y_labels[i] = ids[i];
            out.x_masked[i] = Vocab::kMask;
        }
    }
    return out;
}

} // namespace detail

// Uniform random masking: independent Bernoulli(p) per non-structural
// position. No 80-10-10 corruption mixing.
inline MaskOutcome random_mask(const std::vector<TokenId>& ids,
                               const std::vector<TokenId>& structural, double p, Rng& rng) {
    std::vector<uint8_t> masked(ids.size(), 0);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (!detail::in_set(ids[i], structural)) {
            masked[i] = rng.bernoulli(p) ? 1 : 0;
        }
    }
    return detail::outcome_from_flags(ids, masked);
}

// Whole-word masking: one Bernoulli(p) per word span; a selected span has
// every piece masked, an unselected span none.
inline MaskOutcome whole_word_mask(const std::vector<TokenId>& ids,
                                   const std::vector<std::pair<size_t, size_t>>& word_spans,
                                   double p, Rng& rng) {
    std::vector<uint8_t> masked(ids.size(), 0);
    for (const auto& [start, end] : word_spans) {
        if (rng.bernoulli(p)) {
            for (size_t i = start; i < end; ++i) {
                masked[i] = 1;
            }
        }
    }
    return detail::outcome_from_flags(ids, masked);
}

// Typhoon per-vocabulary-id masking state: EMA weights w, per-batch
// accumulator c, seen flags, dataset counts k, and (p, tau, lambda).
// Structural ids keep w = 0 and seen = false permanently.
struct TyphoonState {
    std::vector<double> w;
    std::vector<double> c;
    std::vector<uint8_t> seen;
    TokenCounts k;
    std::vector<TokenId> structural;
    double p = 0.15;
    double tau = 0.5;
    double lambda = 0.1;

    TyphoonState() = default;

    TyphoonState(size_t vocab_size, TokenCounts counts, std::vector<TokenId> structural_ids,
                 double p_, double tau_, double lambda_)
        : w(vocab_size, 0.0),
          c(vocab_size, 0.0),
          seen(vocab_size, 0),
          k(std::move(counts)),
          structural(std::move(structural_ids)),
          p(p_),
          tau(tau_),
          lambda(lambda_) {
        validate();
        if (k.k.size() != vocab_size) {
            throw ContractError("token counts length does not match vocab size");
        }
    }

    void validate() const {
        if (!(p > 0.0 && p <= 0.5)) {
            throw ConfigError("typhoon masking probability p must lie in (0, 0.5]");
        }
        if (!(tau > 0.0 && tau <= 1.0)) {
            throw ConfigError("typhoon spread temperature tau must lie in (0, 1]");
        }
        if (!(lambda > 0.0 && lambda <= 1.0)) {
            throw ConfigError("typhoon EMA factor lambda must lie in (0, 1]");
        }
    }

    size_t vocab_size() const { return w.size(); }

    bool is_structural_id(TokenId id) const { return detail::in_set(id, structural); }
};

// Per-id mask rates from the current weights. Seen weights are min-max
// normalized to [0,1], unseen maskable ids sit at mid-spread 0.5, the
// spread step maps into [tau, 2*tau], and the final rescale makes the
// k-weighted mean rate equal p. Degenerate weight ranges fall back to a
// uniform rate p. Structural ids are forced to 0.
inline std::vector<double> typhoon_rates(const TyphoonState& state) {
    state.validate();
    const size_t size = state.vocab_size();
    std::vector<double> z(size, 0.0);

    double w_min = std::numeric_limits<double>::infinity();
    double w_max = -std::numeric_limits<double>::infinity();
    bool any_seen = false;
    for (size_t i = 0; i < size; ++i) {
        if (state.seen[i]) {
            any_seen = true;
            w_min = std::min(w_min, state.w[i]);
            w_max = std::max(w_max, state.w[i]);
        }
    }

    const bool degenerate = !any_seen || (w_max - w_min) < 1e-12;
    if (degenerate) {
        for (size_t i = 0; i < size; ++i) {
            z[i] = state.is_structural_id(static_cast<TokenId>(i)) ? 0.0 : state.p;
        }
        return z;
    }

    for (size_t i = 0; i < size; ++i) {
        if (state.is_structural_id(static_cast<TokenId>(i))) {
            continue;
        }
        const double normalized = state.seen[i] ? (state.w[i] - w_min) / (w_max - w_min) : 0.5;
        z[i] = state.tau + normalized * state.tau;
    }

    double weighted = 0.0;
    double total = 0.0;
    for (size_t i = 0; i < size; ++i) {
        weighted += z[i] * static_cast<double>(state.k.k[i]);
        total += static_cast<double>(state.k.k[i]);
    }
    if (total <= 0.0) {
        throw ContractError("typhoon_rates requires sum(k) > 0");
    }
    const double freq_mean = weighted / total;

    for (size_t i = 0; i < size; ++i) {
        if (state.is_structural_id(static_cast<TokenId>(i))) {
            z[i] = 0.0;
        } else {
            z[i] = std::clamp(z[i] * state.p / freq_mean, 0.0, 1.0);
        }
    }
    return z;
}

// Per-position Bernoulli draw at the rate of the token id occupying that
// position. Structural positions are never masked.
inline MaskOutcome typhoon_mask(const std::vector<TokenId>& ids,
                                const std::vector<TokenId>& structural,
                                const std::vector<double>& rates, Rng& rng) {
    std::vector<uint8_t> masked(ids.size(), 0);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (!detail::in_set(ids[i], structural)) {
            masked[i] = rng.bernoulli(rates[static_cast<size_t>(ids[i])]) ? 1 : 0;
        }
    }
    return detail::outcome_from_flags(ids, masked);
}

namespace detail {

// Unmasked pass: subtract g_j normalized by how often x_j appears among the
// non-structural positions of x'. Masked pass: add g_j normalized by how
// often x_j appears among the non-MASK positions of y.
inline void typhoon_accumulate(TyphoonState& state, const MaskOutcome& outcome,
                               const std::vector<TokenId>& original,
                               const std::vector<double>& input_grads) {
    if (original.size() != input_grads.size() || original.size() != outcome.x_masked.size()) {
        throw ContractError("typhoon update: gradient/id length mismatch");
    }

    std::vector<int64_t> count_in_x_masked(state.vocab_size(), 0);
    std::vector<int64_t> count_in_y(state.vocab_size(), 0);
    for (size_t j = 0; j < original.size(); ++j) {
        const TokenId xm = outcome.x_masked[j];
        if (xm != Vocab::kMask && !state.is_structural_id(xm)) {
            count_in_x_masked[static_cast<size_t>(xm)] += 1;
        }
        const TokenId y = outcome.y_labels[j];
        if (y != Vocab::kMask) {
            count_in_y[static_cast<size_t>(y)] += 1;
        }
    }

    for (size_t j = 0; j < original.size(); ++j) {
        const TokenId id = original[j];
        if (state.is_structural_id(id)) {
            continue;
        }
        const auto idx = static_cast<size_t>(id);
        if (outcome.x_masked[j] != Vocab::kMask) {
            state.c[idx] -= input_grads[j] / static_cast<double>(count_in_x_masked[idx]);
        }
        if (outcome.y_labels[j] != Vocab::kMask) {
            state.c[idx] += input_grads[j] / static_cast<double>(count_in_y[idx]);
        }
        state.seen[idx] = 1;
    }
}

inline void typhoon_apply_ema(TyphoonState& state) {
    for (size_t i = 0; i < state.vocab_size(); ++i) {
        state.w[i] = state.lambda * state.c[i] + (1.0 - state.lambda) * state.w[i];
    }
}

} // namespace detail

// One weight update from one sequence: reset the accumulator, fold in the
// signed per-token gradient sums, then take the EMA step.
inline void typhoon_update(TyphoonState& state, const MaskOutcome& outcome,
                           const std::vector<TokenId>& original,
                           const std::vector<double>& input_grads) {
    std::fill(state.c.begin(), state.c.end(), 0.0);
    detail::typhoon_accumulate(state, outcome, original, input_grads);
    detail::typhoon_apply_ema(state);
}

// Batch form used by the training loop: the accumulator is reset once,
// every row contributes, and a single EMA step closes the batch. With one
// row this is exactly typhoon_update.
inline void typhoon_update_batch(TyphoonState& state, const std::vector<MaskOutcome>& outcomes,
                                 const std::vector<std::vector<TokenId>>& originals,
                                 const std::vector<std::vector<double>>& input_grads) {
    if (outcomes.size() != originals.size() || outcomes.size() != input_grads.size()) {
        throw ContractError("typhoon update: batch row count mismatch");
    }
    std::fill(state.c.begin(), state.c.end(), 0.0);
    for (size_t r = 0; r < outcomes.size(); ++r) {
        detail::typhoon_accumulate(state, outcomes[r], originals[r], input_grads[r]);
    }
    detail::typhoon_apply_ema(state);
}

inline void save_typhoon_state(const TyphoonState& state, const std::string& path) {
    nlohmann::json doc;
    doc["format"] = "typhoon-state";
    doc["version"] = 1;
    doc["p"] = state.p;
    doc["tau"] = state.tau;
    doc["lambda"] = state.lambda;
    doc["w"] = state.w;
    doc["seen"] = state.seen;
    doc["k"] = state.k.k;
    doc["structural"] = state.structural;
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write typhoon state: " + path);
    }
    out << doc.dump(2) << '\n';
}

inline TyphoonState load_typhoon_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read typhoon state: " + path);
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt typhoon state " + path + ": " + e.what());
    }
    if (doc.value("format", "") != "typhoon-state" || doc.value("version", 0) != 1) {
        throw DataError("not a typhoon state file: " + path);
    }
    TyphoonState state;
    state.p = doc.at("p").get<double>();
    state.tau = doc.at("tau").get<double>();
    state.lambda = doc.at("lambda").get<double>();
    state.w = doc.at("w").get<std::vector<double>>();
    state.seen = doc.at("seen").get<std::vector<uint8_t>>();
    state.k.k = doc.at("k").get<std::vector<int64_t>>();
    state.structural = doc.at("structural").get<std::vector<TokenId>>();
    state.c.assign(state.w.size(), 0.0);
    if (state.seen.size() != state.w.size() || state.k.k.size() != state.w.size()) {
        throw DataError("inconsistent typhoon state vectors in " + path);
    }
    state.validate();
    return state;
}

// Mask-rate dump: token,id,count_k,weight_w,rate_z sorted by rate
// descending (ties by id), one row per vocabulary id. Tokens that would
// break the CSV (punctuation entries like ",") are double-quoted.
inline std::string format_rate_csv(const TyphoonState& state, const Vocab& vocab) {
    const std::vector<double> rates = typhoon_rates(state);
    std::vector<size_t> order(rates.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&rates](size_t a, size_t b) {
        if (rates[a] != rates[b]) return rates[a] > rates[b];
        return a < b;
    });

    auto csv_field = [](const std::string& token) {
        if (token.find_first_of(",\"\n") == std::string::npos) {
            return token;
        }
        std::string quoted = "\"";
        for (char c : token) {
            if (c == '"') quoted += '"';
            quoted += c;
        }
        quoted += '"';
        return quoted;
    };

    std::string csv = "token,id,count_k,weight_w,rate_z\n";
    char buf[96];
    for (size_t idx : order) {
        std::snprintf(buf, sizeof(buf), ",%zu,%lld,%.12g,%.12g\n", idx,
                      static_cast<long long>(state.k.k[idx]), state.w[idx], rates[idx]);
        csv += csv_field(vocab.tokens[idx]);
        csv += buf;
    }
    return csv;
}

} // namespace typhoon
