#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "typhoon/data.hpp"
#include "typhoon/errors.hpp"
#include "typhoon/masking.hpp"
#include "typhoon/metrics.hpp"
#include "typhoon/model.hpp"
#include "typhoon/rng.hpp"
#include "typhoon/vocab.hpp"

namespace typhoon {

enum class Strategy { kRandom, kWholeWord, kTyphoon };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::kRandom: return "random";
        case Strategy::kWholeWord: return "whole-word";
        case Strategy::kTyphoon: return "typhoon";
    }
    return "?";
}

inline std::optional<Strategy> parse_strategy(const std::string& name) {
    if (name == "random") return Strategy::kRandom;
    if (name == "whole-word") return Strategy::kWholeWord;
    if (name == "typhoon") return Strategy::kTyphoon;
    return std::nullopt;
}

struct StageConfig {
    size_t epochs = 20;
    double lr = 1e-4;
    size_t batch_size = 32;
};

struct TrainConfig {
    StageConfig mlm{20, 1e-4, 32};
    StageConfig sc{20, 3e-5, 32};
    Strategy strategy = Strategy::kRandom;
    double p = 0.15;
    double tau = 0.5;
    double lambda = 0.1;
    uint64_t seed = 42;
    std::string metric = "mcc"; // accuracy | f1 | mcc
    size_t max_len = 128;
    Hyperparams model; // vocab_size/max_len filled in by the caller

    void validate() const {
        if (mlm.lr <= 0.0 || sc.lr <= 0.0) {
            throw ConfigError("learning rates must be positive");
        }
        if (mlm.batch_size < 1 || sc.batch_size < 1) {
            throw ConfigError("batch sizes must be at least 1");
        }
        if (max_len < 8) {
            throw ConfigError("max_len must be at least 8");
        }
        if (metric != "accuracy" && metric != "f1" && metric != "mcc") {
            throw ConfigError("unknown metric \"" + metric + "\" (accuracy, f1, mcc)");
        }
    }
};

struct EpochRecord {
    size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double val_f1 = 0.0;
    double val_mcc = 0.0;
};

inline double record_metric(const EpochRecord& record, const std::string& metric) {
    if (metric == "accuracy") return record.val_accuracy;
    if (metric == "f1") return record.val_f1;
    if (metric == "mcc") return record.val_mcc;
    throw ConfigError("unknown metric \"" + metric + "\"");
}

// Index of the epoch maximizing the primary metric; ties go to the earliest.
inline size_t select_best_epoch(const std::vector<EpochRecord>& records,
                                const std::string& metric) {
    if (records.empty()) {
        throw ContractError("select_best_epoch requires at least one record");
    }
    size_t best = 0;
    for (size_t i = 1; i < records.size(); ++i) {
        if (record_metric(records[i], metric) > record_metric(records[best], metric)) {
            best = i;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct OptState {
    ModelParams m;
    ModelParams v;
    int64_t t = 0;

    explicit OptState(const ModelParams& params)
        : m(make_zero_like(params)), v(make_zero_like(params)) {}
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

inline std::vector<Mat*> tensor_list(ModelParams& params) {
    std::vector<Mat*> out;
    for_each_tensor(params, [&out](const std::string&, Mat& m) { out.push_back(&m); });
    return out;
}

inline std::vector<const Mat*> tensor_list(const ModelParams& params) {
    std::vector<const Mat*> out;
    for_each_tensor(params, [&out](const std::string&, const Mat& m) { out.push_back(&m); });
    return out;
}

// Standard Adam with bias correction. Rejects non-finite gradients before
// touching any state, so an aborted step leaves params and moments intact.
inline void adam_step(ModelParams& params, const ModelParams& grads, OptState& opt, double lr) {
    if (!(params.hyper == grads.hyper)) {
        throw ContractError("adam_step: gradient shapes do not match parameters");
    }
    for_each_tensor(grads, [](const std::string& name, const Mat& g) {
        for (double v : g.data) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite gradient in " + name + "; step aborted");
            }
        }
    });

    opt.t += 1;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(opt.t));

    const auto p_list = tensor_list(params);
    const auto g_list = tensor_list(grads);
    const auto m_list = tensor_list(opt.m);
    const auto v_list = tensor_list(opt.v);
    for (size_t ti = 0; ti < p_list.size(); ++ti) {
        Mat& p = *p_list[ti];
        const Mat& g_mat = *g_list[ti];
        Mat& m_mat = *m_list[ti];
        Mat& v_mat = *v_list[ti];
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double g = g_mat.data[i];
            double& m = m_mat.data[i];
            double& v = v_mat.data[i];
            m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
            v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g * g;
            p.data[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
        }
    }
}

namespace detail {

inline void accumulate(ModelParams& into, const ModelParams& grads) {
    const auto dst = tensor_list(into);
    const auto src = tensor_list(grads);
    for (size_t ti = 0; ti < dst.size(); ++ti) {
        for (size_t i = 0; i < dst[ti]->data.size(); ++i) {
            dst[ti]->data[i] += src[ti]->data[i];
        }
    }
}

inline void scale(ModelParams& params, double factor) {
    for_each_tensor(params, [factor](const std::string&, Mat& m) {
        for (double& v : m.data) {
            v *= factor;
        }
    });
}

} // namespace detail

// ---------------------------------------------------------------------------
// stage 1: masked pre-training
// ---------------------------------------------------------------------------

struct MlmTrainResult {
    ModelParams params;
    std::optional<TyphoonState> typhoon;
    std::vector<double> epoch_losses;
};

// Per batch: recompute Typhoon rates from the current state, mask every
// row, forward/backward, one Typhoon weight update (typhoon strategy only),
// one Adam step. Batches with no masked position anywhere advance nothing.
inline MlmTrainResult train_mlm(const TrainConfig& config, const Dataset& dataset,
                                const Vocab& vocab) {
    config.validate();
    Hyperparams hyper = config.model;
    hyper.max_len = config.max_len;
    hyper.vocab_size = vocab.size();
    hyper.validate();

    MlmTrainResult result;
    result.params = init_params(hyper, derive_seed(config.seed, "init"));

    const TokenCounts counts = count_tokens(dataset, vocab, config.max_len);
    if (config.strategy == Strategy::kTyphoon) {
        result.typhoon.emplace(vocab.size(), counts, vocab.structural_ids(), config.p, config.tau,
                               config.lambda);
    }

    OptState opt(result.params);
    Rng mask_rng(derive_seed(config.seed, "mask"));
    const std::vector<TokenId> structural = vocab.structural_ids();

    for (size_t epoch = 0; epoch < config.mlm.epochs; ++epoch) {
        const std::vector<Batch> batches =
            make_batches(dataset, vocab, config.mlm.batch_size, config.max_len,
                         derive_seed(config.seed, "mlm-shuffle", epoch));
        double epoch_loss_sum = 0.0;
        size_t epoch_rows = 0;

        for (size_t bi = 0; bi < batches.size(); ++bi) {
            const Batch& batch = batches[bi];
            try {
                std::vector<double> rates;
                if (config.strategy == Strategy::kTyphoon) {
                    rates = typhoon_rates(*result.typhoon);
                }

                ModelParams grad_sum = make_zero_like(result.params);
                size_t contributing = 0;
                std::vector<MaskOutcome> outcomes;
                std::vector<std::vector<TokenId>> originals;
                std::vector<std::vector<double>> input_grads;

                for (size_t r = 0; r < batch.size(); ++r) {
                    MaskOutcome outcome;
                    switch (config.strategy) {
                        case Strategy::kRandom:
                            outcome = random_mask(batch.ids[r], structural, config.p, mask_rng);
                            break;
                        case Strategy::kWholeWord:
                            outcome = whole_word_mask(batch.ids[r], batch.word_spans[r], config.p,
                                                      mask_rng);
                            break;
                        case Strategy::kTyphoon:
                            outcome = typhoon_mask(batch.ids[r], structural, rates, mask_rng);
                            break;
                    }

                    MlmResult fwd = mlm_forward(result.params, outcome, batch.attention[r]);
                    if (fwd.cache.skip) {
                        continue;
                    }
                    epoch_loss_sum += fwd.loss;
                    ++epoch_rows;
                    ++contributing;

                    MlmGrads grads = mlm_backward(result.params, fwd.cache);
                    detail::accumulate(grad_sum, grads.params);
                    if (config.strategy == Strategy::kTyphoon) {
                        outcomes.push_back(std::move(outcome));
                        originals.push_back(batch.ids[r]);
                        input_grads.push_back(std::move(grads.input_grads));
                    }
                }

                if (contributing == 0) {
                    continue; // skip-update batch
                }
                detail::scale(grad_sum, 1.0 / static_cast<double>(contributing));
                if (config.strategy == Strategy::kTyphoon) {
                    typhoon_update_batch(*result.typhoon, outcomes, originals, input_grads);
                }
                adam_step(result.params, grad_sum, opt, config.mlm.lr);
            } catch (const NumericError& e) {
                throw NumericError("mlm epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(bi) + ": " + e.what());
            }
        }
        result.epoch_losses.push_back(epoch_rows == 0 ? 0.0
                                                      : epoch_loss_sum /
                                                            static_cast<double>(epoch_rows));
    }
    return result;
}

// ---------------------------------------------------------------------------
// stage 2: sequence-classification fine-tuning
// ---------------------------------------------------------------------------

struct ScTrainResult {
    std::vector<EpochRecord> records;
    ModelParams best_params;
    size_t best_epoch = 0;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    double f1 = 0.0;
    double mcc = 0.0;
};

inline EvalResult evaluate_sc(const ModelParams& params, const Dataset& dataset,
                              const Vocab& vocab, size_t max_len) {
    if (dataset.examples.empty()) {
        throw ContractError("evaluate_sc requires a non-empty dataset");
    }
    std::vector<int> predictions;
    std::vector<int> labels;
    double loss_sum = 0.0;
    for (const auto& ex : dataset.examples) {
        const Encoded enc = encode_dataset_example(ex, vocab, max_len);
        const ScResult fwd = sc_forward(params, enc.ids, enc.attention, ex.label);
        loss_sum += fwd.loss;
        predictions.push_back(sc_predict(fwd.logits));
        labels.push_back(ex.label);
    }
    EvalResult out;
    out.loss = loss_sum / static_cast<double>(dataset.examples.size());
    out.accuracy = accuracy(predictions, labels);
    out.f1 = f1_binary(predictions, labels);
    out.mcc = matthews_corr(predictions, labels);
    return out;
}

inline ScTrainResult train_sc(const TrainConfig& config, const Dataset& train,
                              const Dataset& validation, const ModelParams& initial_params,
                              const Vocab& vocab) {
    config.validate();
    ScTrainResult result;
    ModelParams params = initial_params;
    result.best_params = params;
    OptState opt(params);

    for (size_t epoch = 0; epoch < config.sc.epochs; ++epoch) {
        const std::vector<Batch> batches =
            make_batches(train, vocab, config.sc.batch_size, config.max_len,
                         derive_seed(config.seed, "sc-shuffle", epoch));
        double train_loss_sum = 0.0;
        size_t train_rows = 0;

        for (size_t bi = 0; bi < batches.size(); ++bi) {
            const Batch& batch = batches[bi];
            try {
                ModelParams grad_sum = make_zero_like(params);
                for (size_t r = 0; r < batch.size(); ++r) {
                    ScResult fwd =
                        sc_forward(params, batch.ids[r], batch.attention[r], batch.labels[r]);
                    train_loss_sum += fwd.loss;
                    ++train_rows;
                    const ModelParams grads = sc_backward(params, fwd.cache);
                    detail::accumulate(grad_sum, grads);
                }
                detail::scale(grad_sum, 1.0 / static_cast<double>(batch.size()));
                adam_step(params, grad_sum, opt, config.sc.lr);
            } catch (const NumericError& e) {
                throw NumericError("sc epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(bi) + ": " + e.what());
            }
        }

        const EvalResult val = evaluate_sc(params, validation, vocab, config.max_len);
        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = train_rows == 0 ? 0.0 : train_loss_sum / static_cast<double>(train_rows);
        record.val_loss = val.loss;
        record.val_accuracy = val.accuracy;
        record.val_f1 = val.f1;
        record.val_mcc = val.mcc;
        result.records.push_back(record);

        if (result.records.size() == 1 ||
            record_metric(record, config.metric) >
                record_metric(result.records[result.best_epoch], config.metric)) {
            result.best_epoch = epoch;
            result.best_params = params;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// metrics CSV
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

// Columns: run_id, stage, epoch, split, loss, accuracy, f1, mcc.
// Metric cells are empty where a stage does not produce them.
struct MetricsCsv {
    std::string text = "run_id,stage,epoch,split,loss,accuracy,f1,mcc\n";

    void add_mlm_epoch(const std::string& run_id, size_t epoch, double loss) {
        text += run_id + ",mlm," + std::to_string(epoch) + ",train," + format_double(loss) +
                ",,,\n";
    }

    void add_sc_epoch(const std::string& run_id, const EpochRecord& record) {
        text += run_id + ",sc," + std::to_string(record.epoch) + ",train," +
                format_double(record.train_loss) + ",,,\n";
        text += run_id + ",sc," + std::to_string(record.epoch) + ",validation," +
                format_double(record.val_loss) + "," + format_double(record.val_accuracy) + "," +
                format_double(record.val_f1) + "," + format_double(record.val_mcc) + "\n";
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot write metrics csv: " + path);
        }
        out << text;
    }
};

} // namespace typhoon
