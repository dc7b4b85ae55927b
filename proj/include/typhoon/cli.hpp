#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "typhoon/config.hpp"
#include "typhoon/data.hpp"
#include "typhoon/errors.hpp"
#include "typhoon/masking.hpp"
#include "typhoon/model.hpp"
#include "typhoon/training.hpp"
#include "typhoon/vocab.hpp"

namespace typhoon {
namespace cli {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read input file: " + path);
    }
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
        if (in.eof()) break;
    }
    return hex64(h);
}

// Run id derived from the resolved config snapshot, so identical configs
// and seeds name identical runs.
inline std::string make_run_id(const PipelineConfig& cfg, const std::string& command) {
    std::string blob = command;
    for (const auto& [key, value] : cfg.snapshot()) {
        blob += '\n' + key + '=' + value;
    }
    return hex64(fnv1a64(blob.data(), blob.size()));
}

struct RunManifest {
    std::string run_id;
    std::string command;
    std::vector<std::pair<std::string, std::string>> config;  // resolved snapshot
    std::vector<std::pair<std::string, std::string>> inputs;  // path -> digest
    std::vector<std::string> outputs;

    void save(const std::string& path) const {
        nlohmann::json doc;
        doc["run_id"] = run_id;
        doc["command"] = command;
        nlohmann::json cfg = nlohmann::json::object();
        for (const auto& [key, value] : config) {
            cfg[key] = value;
        }
        doc["config"] = cfg;
        nlohmann::json ins = nlohmann::json::object();
        for (const auto& [file, digest] : inputs) {
            ins[file] = digest;
        }
        doc["inputs"] = ins;
        doc["outputs"] = outputs;
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot write manifest: " + path);
        }
        out << doc.dump(2) << '\n';
    }
};

struct CommonOptions {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<uint64_t> seed;
    std::string strategy_override;
};

namespace detail {

inline void require_file(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path)) {
        throw DataError(what + " not found: " + path);
    }
}

inline PipelineConfig load_config(const CommonOptions& opts) {
    PipelineConfig cfg = parse_pipeline_config(opts.config_path);
    if (opts.seed) {
        cfg.seed = *opts.seed;
    }
    if (!opts.strategy_override.empty()) {
        const auto parsed = parse_strategy(opts.strategy_override);
        if (!parsed) {
            throw ConfigError("--strategy: expected random, whole-word or typhoon, got \"" +
                              opts.strategy_override + "\"");
        }
        cfg.strategy = *parsed;
    }
    return cfg;
}

struct PreparedRun {
    PipelineConfig cfg;
    Dataset train;
    Dataset validation;
    Vocab vocab;
    bool vocab_built = false; // built here vs loaded from cfg.vocab_path
};

// Validates and loads every input before any output file is created, so a
// failed run leaves nothing half-written behind.
inline PreparedRun prepare_run(const CommonOptions& opts) {
    PreparedRun run;
    run.cfg = load_config(opts);
    require_file(run.cfg.train_path, "training data");
    require_file(run.cfg.validation_path, "validation data");
    if (!run.cfg.vocab_path.empty()) {
        require_file(run.cfg.vocab_path, "vocab file");
    }

    run.train = load_dataset(run.cfg.train_path, run.cfg.task, Split::kTrain);
    run.validation = load_dataset(run.cfg.validation_path, run.cfg.task, Split::kValidation);
    if (run.train.examples.empty()) {
        throw DataError("training data is empty: " + run.cfg.train_path);
    }
    if (run.validation.examples.empty()) {
        throw DataError("validation data is empty: " + run.cfg.validation_path);
    }

    if (run.cfg.vocab_path.empty()) {
        std::vector<std::string> corpus;
        for (const auto& ex : run.train.examples) {
            corpus.push_back(ex.text_a);
            if (ex.text_b) {
                corpus.push_back(*ex.text_b);
            }
        }
        run.vocab = build_vocab(corpus, run.cfg.vocab_budget);
        run.vocab_built = true;
    } else {
        run.vocab = load_vocab(run.cfg.vocab_path);
    }
    return run;
}

inline std::string out_path(const CommonOptions& opts, const std::string& name) {
    return (std::filesystem::path(opts.out_dir) / name).string();
}

inline RunManifest start_manifest(const PreparedRun& run, const CommonOptions& opts,
                                  const std::string& command,
                                  const std::vector<std::string>& outputs) {
    RunManifest manifest;
    manifest.run_id = make_run_id(run.cfg, command);
    manifest.command = command;
    manifest.config = run.cfg.snapshot();
    manifest.inputs.emplace_back(run.cfg.train_path, file_digest(run.cfg.train_path));
    manifest.inputs.emplace_back(run.cfg.validation_path, file_digest(run.cfg.validation_path));
    if (!run.cfg.vocab_path.empty()) {
        manifest.inputs.emplace_back(run.cfg.vocab_path, file_digest(run.cfg.vocab_path));
    }
    manifest.outputs = outputs;
    std::filesystem::create_directories(opts.out_dir);
    manifest.save(out_path(opts, "manifest.json"));
    return manifest;
}

} // namespace detail

// Stage 1 only: masked pre-training, then checkpoint + state + metrics.
inline int cmd_train_mlm(const CommonOptions& opts, std::ostream& out) {
    detail::PreparedRun run = detail::prepare_run(opts);
    const TrainConfig tc = run.cfg.train_config();

    std::vector<std::string> outputs = {detail::out_path(opts, "manifest.json"),
                                        detail::out_path(opts, "metrics.csv"),
                                        detail::out_path(opts, "mlm_checkpoint.typh")};
    if (run.vocab_built) {
        outputs.push_back(detail::out_path(opts, "vocab.txt"));
    }
    if (tc.strategy == Strategy::kTyphoon) {
        outputs.push_back(detail::out_path(opts, "typhoon_state.json"));
    }
    const RunManifest manifest = detail::start_manifest(run, opts, "train-mlm", outputs);
    if (run.vocab_built) {
        save_vocab(run.vocab, detail::out_path(opts, "vocab.txt"));
    }

    const MlmTrainResult result = train_mlm(tc, run.train, run.vocab);
    save_checkpoint(result.params, detail::out_path(opts, "mlm_checkpoint.typh"));
    if (result.typhoon) {
        save_typhoon_state(*result.typhoon, detail::out_path(opts, "typhoon_state.json"));
    }

    MetricsCsv csv;
    for (size_t epoch = 0; epoch < result.epoch_losses.size(); ++epoch) {
        csv.add_mlm_epoch(manifest.run_id, epoch, result.epoch_losses[epoch]);
    }
    csv.save(detail::out_path(opts, "metrics.csv"));

    out << "strategy=" << strategy_name(tc.strategy) << " mlm_epochs=" << tc.mlm.epochs
        << " final_loss="
        << (result.epoch_losses.empty() ? "n/a" : format_double(result.epoch_losses.back()))
        << "\n";
    return kExitOk;
}

// Stage 2 only: load an MLM checkpoint, transfer the encoder, fine-tune.
inline int cmd_train_sc(const CommonOptions& opts, const std::string& init_checkpoint,
                        std::ostream& out) {
    detail::PreparedRun run = detail::prepare_run(opts);
    detail::require_file(init_checkpoint, "initial checkpoint");
    const TrainConfig tc = run.cfg.train_config();

    const ModelParams mlm_params = load_checkpoint(init_checkpoint);
    Hyperparams hyper = tc.model;
    hyper.vocab_size = run.vocab.size();
    hyper.max_len = tc.max_len;
    if (!(mlm_params.hyper == hyper)) {
        throw ConfigError("checkpoint " + init_checkpoint +
                          " has different model dimensions than this config");
    }

    const std::vector<std::string> outputs = {detail::out_path(opts, "manifest.json"),
                                              detail::out_path(opts, "metrics.csv"),
                                              detail::out_path(opts, "sc_best_checkpoint.typh")};
    const RunManifest manifest = detail::start_manifest(run, opts, "train-sc", outputs);

    const ModelParams sc_init =
        transfer_encoder(mlm_params, hyper, derive_seed(tc.seed, "sc-head"));
    const ScTrainResult result = train_sc(tc, run.train, run.validation, sc_init, run.vocab);
    save_checkpoint(result.best_params, detail::out_path(opts, "sc_best_checkpoint.typh"));

    MetricsCsv csv;
    for (const auto& record : result.records) {
        csv.add_sc_epoch(manifest.run_id, record);
    }
    csv.save(detail::out_path(opts, "metrics.csv"));

    const size_t best = result.best_epoch;
    out << "strategy=" << strategy_name(tc.strategy) << " best_epoch=" << best << " " << tc.metric
        << "=" << format_double(record_metric(result.records[best], tc.metric)) << "\n";
    return kExitOk;
}

// Full two-stage pipeline: vocab, counts, MLM pre-training, encoder
// transfer, SC fine-tuning, best-epoch summary.
inline int cmd_pipeline(const CommonOptions& opts, std::ostream& out) {
    detail::PreparedRun run = detail::prepare_run(opts);
    const TrainConfig tc = run.cfg.train_config();

    std::vector<std::string> outputs = {detail::out_path(opts, "manifest.json"),
                                        detail::out_path(opts, "metrics.csv"),
                                        detail::out_path(opts, "mlm_checkpoint.typh"),
                                        detail::out_path(opts, "sc_best_checkpoint.typh")};
    if (run.vocab_built) {
        outputs.push_back(detail::out_path(opts, "vocab.txt"));
    }
    if (tc.strategy == Strategy::kTyphoon) {
        outputs.push_back(detail::out_path(opts, "typhoon_state.json"));
    }
    const RunManifest manifest = detail::start_manifest(run, opts, "pipeline", outputs);
    if (run.vocab_built) {
        save_vocab(run.vocab, detail::out_path(opts, "vocab.txt"));
    }

    const MlmTrainResult mlm = train_mlm(tc, run.train, run.vocab);
    save_checkpoint(mlm.params, detail::out_path(opts, "mlm_checkpoint.typh"));
    if (mlm.typhoon) {
        save_typhoon_state(*mlm.typhoon, detail::out_path(opts, "typhoon_state.json"));
    }

    const ModelParams sc_init =
        transfer_encoder(mlm.params, mlm.params.hyper, derive_seed(tc.seed, "sc-head"));
    const ScTrainResult sc = train_sc(tc, run.train, run.validation, sc_init, run.vocab);
    save_checkpoint(sc.best_params, detail::out_path(opts, "sc_best_checkpoint.typh"));

    MetricsCsv csv;
    for (size_t epoch = 0; epoch < mlm.epoch_losses.size(); ++epoch) {
        csv.add_mlm_epoch(manifest.run_id, epoch, mlm.epoch_losses[epoch]);
    }
    for (const auto& record : sc.records) {
        csv.add_sc_epoch(manifest.run_id, record);
    }
    csv.save(detail::out_path(opts, "metrics.csv"));

    const size_t best = select_best_epoch(sc.records, tc.metric);
    out << "strategy=" << strategy_name(tc.strategy) << " best_epoch=" << best << " " << tc.metric
        << "=" << format_double(record_metric(sc.records[best], tc.metric)) << "\n";
    return kExitOk;
}

// Evaluate a saved checkpoint on a dataset split.
inline int cmd_eval(const std::string& checkpoint_path, const std::string& data_path,
                    const std::string& task, const std::string& vocab_path, std::ostream& out) {
    if (task != "single" && task != "pair") {
        throw ConfigError("--task: expected single or pair, got \"" + task + "\"");
    }
    detail::require_file(checkpoint_path, "checkpoint");
    detail::require_file(data_path, "dataset");
    detail::require_file(vocab_path, "vocab file");

    const ModelParams params = load_checkpoint(checkpoint_path);
    const Vocab vocab = load_vocab(vocab_path);
    if (vocab.size() != params.hyper.vocab_size) {
        throw ConfigError("vocab size " + std::to_string(vocab.size()) +
                          " does not match checkpoint vocab size " +
                          std::to_string(params.hyper.vocab_size));
    }
    const TaskKind kind = task == "single" ? TaskKind::kSingle : TaskKind::kPair;
    const Dataset dataset = load_dataset(data_path, kind, Split::kValidation);
    if (dataset.examples.empty()) {
        throw DataError("dataset is empty: " + data_path);
    }

    const EvalResult result = evaluate_sc(params, dataset, vocab, params.hyper.max_len);
    out << "loss=" << format_double(result.loss) << " accuracy=" << format_double(result.accuracy)
        << " f1=" << format_double(result.f1) << " mcc=" << format_double(result.mcc) << "\n";
    return kExitOk;
}

// Dump the current Typhoon mask-rate table; top 10 echoed to stdout.
inline int cmd_inspect_rates(const std::string& state_path, const std::string& vocab_path,
                             const std::string& csv_path, std::ostream& out) {
    detail::require_file(state_path, "typhoon state");
    detail::require_file(vocab_path, "vocab file");
    const TyphoonState state = load_typhoon_state(state_path);
    const Vocab vocab = load_vocab(vocab_path);
    if (vocab.size() != state.vocab_size()) {
        throw DataError("vocab size " + std::to_string(vocab.size()) +
                        " does not match state size " + std::to_string(state.vocab_size()));
    }

    const std::string csv = format_rate_csv(state, vocab);
    std::ofstream file(csv_path, std::ios::binary | std::ios::trunc);
    if (!file) {
        throw DataError("cannot write rate csv: " + csv_path);
    }
    file << csv;

    // echo the header plus the ten highest-rate rows
    std::istringstream lines(csv);
    std::string line;
    for (size_t i = 0; i < 11 && std::getline(lines, line); ++i) {
        out << line << "\n";
    }
    return kExitOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
    CLI::App app{"typhoon: masked-language-model training with gradient-guided masking"};
    app.require_subcommand(1);

    CommonOptions opts;
    std::string init_checkpoint;
    std::string eval_checkpoint, eval_data, eval_task = "single", eval_vocab;
    std::string rates_state, rates_vocab, rates_csv = "rates.csv";

    auto add_common = [&opts](CLI::App* cmd, bool with_strategy = true) {
        cmd->add_option("--config", opts.config_path, "config file path")->required();
        cmd->add_option("--out", opts.out_dir, "output directory (default: out)");
        cmd->add_option("--seed", opts.seed, "override the base seed");
        if (with_strategy) {
            cmd->add_option("--strategy", opts.strategy_override,
                            "override masking strategy: random | whole-word | typhoon");
        }
    };

    CLI::App* pipeline = app.add_subcommand("pipeline", "run both training stages end to end");
    add_common(pipeline);
    CLI::App* train_mlm_cmd = app.add_subcommand("train-mlm", "masked pre-training stage only");
    add_common(train_mlm_cmd);
    CLI::App* train_sc_cmd =
        app.add_subcommand("train-sc", "sequence-classification fine-tuning stage only");
    add_common(train_sc_cmd);
    train_sc_cmd->add_option("--init", init_checkpoint, "MLM checkpoint to transfer from")
        ->required();

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "TSV dataset file")->required();
    eval_cmd->add_option("--task", eval_task, "single | pair (default: single)");
    eval_cmd->add_option("--vocab", eval_vocab, "vocab file")->required();

    CLI::App* rates_cmd =
        app.add_subcommand("inspect-rates", "dump the Typhoon mask-rate table as CSV");
    rates_cmd->add_option("--state", rates_state, "saved typhoon state (JSON)")->required();
    rates_cmd->add_option("--vocab", rates_vocab, "vocab file")->required();
    rates_cmd->add_option("--csv", rates_csv, "output CSV path (default: rates.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitConfig;
    }

    try {
        if (pipeline->parsed()) {
            return cmd_pipeline(opts, out);
        }
        if (train_mlm_cmd->parsed()) {
            return cmd_train_mlm(opts, out);
        }
        if (train_sc_cmd->parsed()) {
            return cmd_train_sc(opts, init_checkpoint, out);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(eval_checkpoint, eval_data, eval_task, eval_vocab, out);
        }
        if (rates_cmd->parsed()) {
            return cmd_inspect_rates(rates_state, rates_vocab, rates_csv, out);
        }
        err << "error: no command given\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

} // namespace cli
} // namespace typhoon
