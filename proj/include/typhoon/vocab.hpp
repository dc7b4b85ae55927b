#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "typhoon/errors.hpp"

namespace typhoon {

using TokenId = int32_t;

// WordPiece-style subword vocabulary. Ids are dense 0..size-1; the five
// special tokens occupy fixed slots 0-4. Pieces that continue a word carry
// the "##" prefix. Immutable once built.
struct Vocab {
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kCls = 2;
    static constexpr TokenId kSep = 3;
    static constexpr TokenId kMask = 4;
    static constexpr const char* kContinuation = "##";

    std::vector<std::string> tokens;
    std::unordered_map<std::string, TokenId> index;

    size_t size() const { return tokens.size(); }

    TokenId lookup(const std::string& token) const {
        auto it = index.find(token);
        return it == index.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const {
        return index.find(token) != index.end();
    }

    const std::string& token_of(TokenId id) const { return tokens[static_cast<size_t>(id)]; }

    // Structural ids are never masked and never counted; UNK is ordinary
    // content (a real token the model must predict like any other).
    static bool is_structural(TokenId id) {
        return id == kPad || id == kCls || id == kSep || id == kMask;
    }

    std::vector<TokenId> structural_ids() const { return {kPad, kCls, kSep, kMask}; }
};

inline const std::vector<std::string>& special_token_strings() {
    static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return specials;
}

// Token ids plus word grouping: each span is [start, end) over the id list,
// covering one source word (head piece first, "##" continuations after).
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<std::pair<size_t, size_t>> word_spans;
};

namespace detail {

inline bool is_ascii_space(unsigned char c) { return std::isspace(c) != 0; }
inline bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c) != 0; }

} // namespace detail

// Lowercase and split into words: whitespace separates, ASCII punctuation
// becomes a standalone single-character word. Bytes >= 128 are treated as
// word characters so UTF-8 sequences stay inside their word.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string current;
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (detail::is_ascii_space(c)) {
            if (!current.empty()) {
                words.push_back(std::move(current));
                current.clear();
            }
        } else if (detail::is_ascii_punct(c)) {
            if (!current.empty()) {
                words.push_back(std::move(current));
                current.clear();
            }
            words.emplace_back(1, raw);
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) {
        words.push_back(std::move(current));
    }
    return words;
}

// Frequency-ranked whole words on top of a full character closure. Every
// byte seen in the corpus gets a standalone and a "##" entry, so in-corpus
// words always tokenize without UNK.
inline Vocab build_vocab(const std::vector<std::string>& corpus, size_t size_budget) {
    std::set<char> chars;
    std::map<std::string, size_t> word_freq;
    for (const auto& line : corpus) {
        for (const auto& word : split_words(line)) {
            word_freq[word] += 1;
            for (char c : word) {
                chars.insert(c);
            }
        }
    }

    const size_t floor_size = special_token_strings().size() + 2 * chars.size();
    if (size_budget < floor_size) {
        throw ConfigError("vocab budget " + std::to_string(size_budget) +
                          " below specials + character closure (" + std::to_string(floor_size) + ")");
    }

    Vocab vocab;
    auto admit = [&vocab](const std::string& token) {
        if (vocab.index.emplace(token, static_cast<TokenId>(vocab.tokens.size())).second) {
            vocab.tokens.push_back(token);
        }
    };

    for (const auto& special : special_token_strings()) {
        admit(special);
    }
    for (char c : chars) {
        admit(std::string(1, c));
        admit(std::string(Vocab::kContinuation) + c);
    }

    std::vector<std::pair<std::string, size_t>> ranked(word_freq.begin(), word_freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [word, freq] : ranked) {
        (void)freq;
        if (vocab.size() >= size_budget) break;
        if (!vocab.contains(word)) {
            admit(word);
        }
    }
    return vocab;
}

// Greedy longest-match WordPiece encoding of one word. Returns the piece
// ids, or empty if some suffix has no match at all (caller emits UNK).
inline std::vector<TokenId> wordpiece_pieces(const std::string& word, const Vocab& vocab) {
    std::vector<TokenId> pieces;
    size_t start = 0;
    while (start < word.size()) {
        size_t end = word.size();
        TokenId match = -1;
        while (start < end) {
            std::string piece = word.substr(start, end - start);
            if (start > 0) {
                piece = std::string(Vocab::kContinuation) + piece;
            }
            auto it = vocab.index.find(piece);
            if (it != vocab.index.end()) {
                match = it->second;
                break;
            }
            --end;
        }
        if (match < 0) {
            return {};
        }
        pieces.push_back(match);
        start = end;
    }
    return pieces;
}

inline TokenSequence tokenize(const std::string& text, const Vocab& vocab) {
    TokenSequence seq;
    for (const auto& word : split_words(text)) {
        std::vector<TokenId> pieces = wordpiece_pieces(word, vocab);
        if (pieces.empty()) {
            pieces.push_back(Vocab::kUnk);
        }
        const size_t start = seq.ids.size();
        seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.end());
        seq.word_spans.emplace_back(start, seq.ids.size());
    }
    return seq;
}

// One encoded example: fixed length max_len, [CLS] a [SEP] (b [SEP]) layout,
// PAD tail. Word spans carry the CLS/SEP offsets and never cross a SEP.
struct Encoded {
    std::vector<TokenId> ids;
    std::vector<uint8_t> attention;
    std::vector<std::pair<size_t, size_t>> word_spans;
};

inline Encoded encode_example(const std::string& text_a, const std::optional<std::string>& text_b,
                              const Vocab& vocab, size_t max_len) {
    TokenSequence a = tokenize(text_a, vocab);
    TokenSequence b;
    const bool pair = text_b.has_value() && !text_b->empty();
    if (pair) {
        b = tokenize(*text_b, vocab);
    }

    const size_t specials = pair ? 3 : 2;
    const size_t floor_a = a.ids.empty() ? 0 : 1;
    const size_t floor_b = b.ids.empty() ? 0 : 1;
    if (max_len < specials + floor_a + floor_b) {
        throw ConfigError("max_len " + std::to_string(max_len) +
                          " cannot hold the special tokens plus one token per segment");
    }

    // Truncate the longer segment from its end, one token at a time;
    // ties take from the second segment. Nonempty segments keep >= 1 token.
    size_t len_a = a.ids.size();
    size_t len_b = b.ids.size();
    while (len_a + len_b + specials > max_len) {
        if (len_b >= len_a && len_b > floor_b) {
            --len_b;
        } else if (len_a > floor_a) {
            --len_a;
        } else {
            --len_b;
        }
    }

    auto trim_spans = [](const TokenSequence& seq, size_t keep, size_t offset,
                         std::vector<std::pair<size_t, size_t>>& out) {
        for (const auto& [start, end] : seq.word_spans) {
            const size_t clipped = std::min(end, keep);
            if (start < clipped) {
                out.emplace_back(start + offset, clipped + offset);
            }
        }
    };

    Encoded enc;
    enc.ids.push_back(Vocab::kCls);
    trim_spans(a, len_a, enc.ids.size(), enc.word_spans);
    enc.ids.insert(enc.ids.end(), a.ids.begin(), a.ids.begin() + static_cast<ptrdiff_t>(len_a));
    enc.ids.push_back(Vocab::kSep);
    if (pair) {
        trim_spans(b, len_b, enc.ids.size(), enc.word_spans);
        enc.ids.insert(enc.ids.end(), b.ids.begin(), b.ids.begin() + static_cast<ptrdiff_t>(len_b));
        enc.ids.push_back(Vocab::kSep);
    }

    enc.attention.assign(enc.ids.size(), 1);
    enc.ids.resize(max_len, Vocab::kPad);
    enc.attention.resize(max_len, 0);
    return enc;
}

// Vocab file: one token per line, line number = id, specials on lines 0-4.
inline void save_vocab(const Vocab& vocab, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write vocab file: " + path);
    }
    for (const auto& token : vocab.tokens) {
        out << token << '\n';
    }
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read vocab file: " + path);
    }
    Vocab vocab;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!vocab.index.emplace(line, static_cast<TokenId>(vocab.tokens.size())).second) {
            throw DataError("duplicate token at line " + std::to_string(vocab.tokens.size() + 1) +
                            " in " + path);
        }
        vocab.tokens.push_back(line);
    }
    const auto& specials = special_token_strings();
    if (vocab.tokens.size() < specials.size()) {
        throw DataError("vocab file too small for special tokens: " + path);
    }
    for (size_t i = 0; i < specials.size(); ++i) {
        if (vocab.tokens[i] != specials[i]) {
            throw DataError("vocab line " + std::to_string(i) + " must be " + specials[i] +
                            ", got " + vocab.tokens[i] + " in " + path);
        }
    }
    return vocab;
}

} // namespace typhoon
