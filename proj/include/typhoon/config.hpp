#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "typhoon/data.hpp"
#include "typhoon/errors.hpp"
#include "typhoon/training.hpp"

namespace typhoon {

// Flat key-value config with [data], [model], [mlm], [sc], [masking]
// sections. Every key has a default; a minimal file names the data paths
// and the strategy. '#' starts a comment.
struct PipelineConfig {
    // [data]
    std::string train_path;
    std::string validation_path;
    TaskKind task = TaskKind::kSingle;
    std::string vocab_path; // empty: build from the train split
    size_t vocab_budget = 2000;
    size_t max_len = 128;

    // [model]
    size_t hidden = 128;
    size_t layers = 2;
    size_t heads = 2;
    size_t ff = 512;

    // [mlm]
    size_t mlm_epochs = 20;
    double mlm_lr = 1e-4;
    size_t mlm_batch = 32;

    // [sc]
    size_t sc_epochs = 20;
    double sc_lr = 3e-5;
    size_t sc_batch = 32;
    std::string metric; // empty: mcc for single-sentence tasks, f1 for pairs

    // [masking]
    Strategy strategy = Strategy::kRandom;
    double p = 0.15;
    double tau = 0.5;
    double lambda = 0.1;

    uint64_t seed = 42; // set from the command line, not the file

    std::string resolved_metric() const {
        if (!metric.empty()) return metric;
        return task == TaskKind::kSingle ? "mcc" : "f1";
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.mlm = {mlm_epochs, mlm_lr, mlm_batch};
        tc.sc = {sc_epochs, sc_lr, sc_batch};
        tc.strategy = strategy;
        tc.p = p;
        tc.tau = tau;
        tc.lambda = lambda;
        tc.seed = seed;
        tc.metric = resolved_metric();
        tc.max_len = max_len;
        tc.model.hidden = hidden;
        tc.model.layers = layers;
        tc.model.heads = heads;
        tc.model.ff = ff;
        tc.model.max_len = max_len;
        tc.model.num_classes = 2;
        return tc;
    }

    // Fully resolved snapshot (no defaults left implicit), fixed key order.
    std::vector<std::pair<std::string, std::string>> snapshot() const {
        return {
            {"data.train", train_path},
            {"data.validation", validation_path},
            {"data.task", task == TaskKind::kSingle ? "single" : "pair"},
            {"data.vocab", vocab_path},
            {"data.vocab_budget", std::to_string(vocab_budget)},
            {"data.max_len", std::to_string(max_len)},
            {"model.hidden", std::to_string(hidden)},
            {"model.layers", std::to_string(layers)},
            {"model.heads", std::to_string(heads)},
            {"model.ff", std::to_string(ff)},
            {"mlm.epochs", std::to_string(mlm_epochs)},
            {"mlm.lr", format_double(mlm_lr)},
            {"mlm.batch", std::to_string(mlm_batch)},
            {"sc.epochs", std::to_string(sc_epochs)},
            {"sc.lr", format_double(sc_lr)},
            {"sc.batch", std::to_string(sc_batch)},
            {"sc.metric", resolved_metric()},
            {"masking.strategy", strategy_name(strategy)},
            {"masking.p", format_double(p)},
            {"masking.tau", format_double(tau)},
            {"masking.lambda", format_double(lambda)},
            {"seed", std::to_string(seed)},
        };
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t start = s.find_first_not_of(" \t\r");
    if (start == std::string::npos) return "";
    size_t end = s.find_last_not_of(" \t\r");
    return s.substr(start, end - start + 1);
}

inline size_t parse_count(const std::string& value, const std::string& key) {
    try {
        size_t pos = 0;
        const long long parsed = std::stoll(value, &pos);
        if (pos != value.size() || parsed < 0) throw std::invalid_argument(value);
        return static_cast<size_t>(parsed);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected a non-negative integer, got \"" +
                          value + "\"");
    }
}

inline double parse_real(const std::string& value, const std::string& key) {
    try {
        size_t pos = 0;
        const double parsed = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return parsed;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected a number, got \"" + value + "\"");
    }
}

} // namespace detail

inline PipelineConfig parse_pipeline_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read config file: " + path);
    }
    PipelineConfig cfg;
    std::string section;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = detail::trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(path + ": line " + std::to_string(line_no) +
                                  ": malformed section header");
            }
            section = line.substr(1, line.size() - 2);
            if (section != "data" && section != "model" && section != "mlm" && section != "sc" &&
                section != "masking") {
                throw ConfigError(path + ": line " + std::to_string(line_no) +
                                  ": unknown section [" + section + "]");
            }
            continue;
        }

        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ": line " + std::to_string(line_no) +
                              ": expected key = value");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;

        if (full == "data.train") {
            cfg.train_path = value;
        } else if (full == "data.validation") {
            cfg.validation_path = value;
        } else if (full == "data.task") {
            if (value == "single") {
                cfg.task = TaskKind::kSingle;
            } else if (value == "pair") {
                cfg.task = TaskKind::kPair;
            } else {
                throw ConfigError("config key data.task: expected single or pair, got \"" + value +
                                  "\"");
            }
        } else if (full == "data.vocab") {
            cfg.vocab_path = value;
        } else if (full == "data.vocab_budget") {
            cfg.vocab_budget = detail::parse_count(value, full);
        } else if (full == "data.max_len") {
            cfg.max_len = detail::parse_count(value, full);
        } else if (full == "model.hidden") {
            cfg.hidden = detail::parse_count(value, full);
        } else if (full == "model.layers") {
            cfg.layers = detail::parse_count(value, full);
        } else if (full == "model.heads") {
            cfg.heads = detail::parse_count(value, full);
        } else if (full == "model.ff") {
            cfg.ff = detail::parse_count(value, full);
        } else if (full == "mlm.epochs") {
            cfg.mlm_epochs = detail::parse_count(value, full);
        } else if (full == "mlm.lr") {
            cfg.mlm_lr = detail::parse_real(value, full);
        } else if (full == "mlm.batch") {
            cfg.mlm_batch = detail::parse_count(value, full);
        } else if (full == "sc.epochs") {
            cfg.sc_epochs = detail::parse_count(value, full);
        } else if (full == "sc.lr") {
            cfg.sc_lr = detail::parse_real(value, full);
        } else if (full == "sc.batch") {
            cfg.sc_batch = detail::parse_count(value, full);
        } else if (full == "sc.metric") {
            cfg.metric = value;
        } else if (full == "masking.strategy") {
            const auto parsed = parse_strategy(value);
            if (!parsed) {
                throw ConfigError(
                    "config key masking.strategy: expected random, whole-word or typhoon, got \"" +
                    value + "\"");
            }
            cfg.strategy = *parsed;
        } else if (full == "masking.p") {
            cfg.p = detail::parse_real(value, full);
        } else if (full == "masking.tau") {
            cfg.tau = detail::parse_real(value, full);
        } else if (full == "masking.lambda") {
            cfg.lambda = detail::parse_real(value, full);
        } else {
            throw ConfigError(path + ": line " + std::to_string(line_no) + ": unknown key \"" +
                              full + "\"");
        }
    }
    if (cfg.train_path.empty()) {
        throw ConfigError(path + ": missing required key data.train");
    }
    if (cfg.validation_path.empty()) {
        throw ConfigError(path + ": missing required key data.validation");
    }
    return cfg;
}

} // namespace typhoon
