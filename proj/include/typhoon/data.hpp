#pragma once

#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "typhoon/errors.hpp"
#include "typhoon/rng.hpp"
#include "typhoon/vocab.hpp"

namespace typhoon {

enum class TaskKind { kSingle, kPair };

enum class Split { kTrain, kValidation };

struct Example {
    int label = 0; // 0 or 1
    std::string text_a;
    std::optional<std::string> text_b;
};

struct Dataset {
    TaskKind task_kind = TaskKind::kSingle;
    Split split = Split::kTrain;
    std::vector<Example> examples;
};

// Per-vocabulary-id occurrence counts over the encoded training set.
// Structural ids (PAD, CLS, SEP, MASK) are always zero.
struct TokenCounts {
    std::vector<int64_t> k;

    int64_t total() const { return std::accumulate(k.begin(), k.end(), int64_t{0}); }
};

struct Batch {
    std::vector<std::vector<TokenId>> ids;                              // B x N
    std::vector<std::vector<uint8_t>> attention;                        // B x N
    std::vector<int> labels;                                            // B
    std::vector<std::vector<std::pair<size_t, size_t>>> word_spans;     // per row
    size_t size() const { return ids.size(); }
};

// TSV, UTF-8, no header. Single-sentence rows: label<TAB>text.
// Pair rows: label<TAB>text_a<TAB>text_b. Labels are ASCII "0"/"1".
inline Dataset load_dataset(const std::string& path, TaskKind task_kind,
                            Split split = Split::kTrain) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read dataset file: " + path);
    }
    Dataset ds;
    ds.task_kind = task_kind;
    ds.split = split;

    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        std::vector<std::string> cols;
        size_t start = 0;
        while (true) {
            const size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                cols.push_back(line.substr(start));
                break;
            }
            cols.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        const size_t expected = task_kind == TaskKind::kSingle ? 2 : 3;
        if (cols.size() != expected) {
            throw DataError(path + ": line " + std::to_string(line_no) + ": expected " +
                            std::to_string(expected) + " tab-separated columns, got " +
                            std::to_string(cols.size()));
        }
        Example ex;
        if (cols[0] == "0") {
            ex.label = 0;
        } else if (cols[0] == "1") {
            ex.label = 1;
        } else {
            throw DataError(path + ": line " + std::to_string(line_no) +
                            ": invalid label \"" + cols[0] + "\" (expected 0 or 1)");
        }
        ex.text_a = cols[1];
        if (task_kind == TaskKind::kPair) {
            ex.text_b = cols[2];
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

inline Encoded encode_dataset_example(const Example& ex, const Vocab& vocab, size_t max_len) {
    return encode_example(ex.text_a, ex.text_b, vocab, max_len);
}

// Counts are taken over encoded, truncated sequences so the frequency
// weighting matches what the model actually sees. Structural ids excluded.
inline TokenCounts count_tokens(const Dataset& dataset, const Vocab& vocab, size_t max_len) {
    if (dataset.examples.empty()) {
        throw ContractError("count_tokens requires a non-empty dataset");
    }
    TokenCounts counts;
    counts.k.assign(vocab.size(), 0);
    for (const auto& ex : dataset.examples) {
        const Encoded enc = encode_dataset_example(ex, vocab, max_len);
        for (TokenId id : enc.ids) {
            if (!Vocab::is_structural(id)) {
                counts.k[static_cast<size_t>(id)] += 1;
            }
        }
    }
    return counts;
}

// Seeded shuffle, fixed-size batches, one trailing partial batch allowed.
inline std::vector<Batch> make_batches(const Dataset& dataset, const Vocab& vocab,
                                       size_t batch_size, size_t max_len, uint64_t rng_seed) {
    if (batch_size < 1) {
        throw ContractError("batch_size must be >= 1");
    }
    std::vector<size_t> order(dataset.examples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(rng_seed);
    rng.shuffle(order);

    std::vector<Batch> batches;
    for (size_t at = 0; at < order.size(); at += batch_size) {
        Batch batch;
        const size_t stop = std::min(at + batch_size, order.size());
        for (size_t i = at; i < stop; ++i) {
            const Example& ex = dataset.examples[order[i]];
            Encoded enc = encode_dataset_example(ex, vocab, max_len);
            batch.ids.push_back(std::move(enc.ids));
            batch.attention.push_back(std::move(enc.attention));
            batch.word_spans.push_back(std::move(enc.word_spans));
            batch.labels.push_back(ex.label);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

} // namespace typhoon
