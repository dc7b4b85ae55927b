// Acceptance suite: one line per criterion, nonzero exit on any failure.
// Run from the repository root (ctest does this automatically).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "typhoon/cli.hpp"
#include "typhoon/masking.hpp"
#include "typhoon/metrics.hpp"
#include "typhoon/model.hpp"
#include "typhoon/rng.hpp"
#include "typhoon/training.hpp"
#include "typhoon/vocab.hpp"

using namespace typhoon;

namespace {

struct Checker {
    bool ok = true;
    std::string detail;

    void expect(bool condition, const std::string& what) {
        if (!condition && ok) {
            ok = false;
            detail = what;
        }
    }
};

struct Harness {
    int failures = 0;

    void run(const std::string& name, const std::function<void(Checker&)>& fn) {
        Checker checker;
        try {
            fn(checker);
        } catch (const std::exception& e) {
            checker.ok = false;
            checker.detail = std::string("exception: ") + e.what();
        }
        if (checker.ok) {
            std::cout << "PASS  " << name << "\n";
        } else {
            std::cout << "FAIL  " << name << "  (" << checker.detail << ")\n";
            ++failures;
        }
        std::cout.flush();
    }
};

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::filesystem::path scratch_dir() {
    const auto dir =
        std::filesystem::temp_directory_path() / ("typhoon_acceptance_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

const std::vector<TokenId> kStructural = {Vocab::kPad, Vocab::kCls, Vocab::kSep, Vocab::kMask};

// --------------------------------------------------------------------------
// 1. gradient fidelity
// --------------------------------------------------------------------------

void criterion_gradients(Checker& c) {
    const auto start = std::chrono::steady_clock::now();

    Hyperparams hp;
    hp.hidden = 8;
    hp.layers = 1;
    hp.heads = 2;
    hp.ff = 16;
    hp.max_len = 12;
    hp.vocab_size = 20;
    ModelParams params = init_params(hp, 2024);

    const std::vector<TokenId> ids = {Vocab::kCls, 5, 6, 7, 8, 9,
                                      10, 11, 5, 6, Vocab::kSep, Vocab::kPad};
    const std::vector<uint8_t> attention = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0};
    Rng rng(12);
    const MaskOutcome outcome = random_mask(ids, kStructural, 0.35, rng);
    c.expect(outcome.any_masked(), "test sequence must contain masked positions");

    MlmResult fwd = mlm_forward(params, outcome, attention);
    const MlmGrads analytic = mlm_backward(params, fwd.cache);

    const auto loss = [&]() { return mlm_forward(params, outcome, attention).loss; };
    const auto report = grad_check::check_all_params(
        params, analytic.params, loss,
        [](const std::string& name) { return name.rfind("sc.", 0) != 0; });
    c.expect(report.checked > 1000, "expected to sweep every tensor entry");
    c.expect(report.ok(), "parameter gradient mismatch at " + report.worst_at + " rel " +
                              std::to_string(report.worst_rel));

    // per-position input gradient along the original token's one-hot coordinate
    grad_check::Report g_report;
    for (size_t j = 0; j < hp.max_len; ++j) {
        const TokenId original = outcome.b[j] ? outcome.y_labels[j] : outcome.x_masked[j];
        Mat offset(hp.max_len, hp.hidden);
        const double* e = params.tok_emb.row(static_cast<size_t>(original));
        const auto loss_at = [&](double eps) {
            for (size_t col = 0; col < hp.hidden; ++col) {
                offset.at(j, col) = eps * e[col];
            }
            return mlm_forward(params, outcome, attention, &offset).loss;
        };
        const double numeric =
            (loss_at(grad_check::kStep) - loss_at(-grad_check::kStep)) / (2.0 * grad_check::kStep);
        g_report.record("g[" + std::to_string(j) + "]", analytic.input_grads[j], numeric);
    }
    c.expect(g_report.ok(), "input gradient mismatch at " + g_report.worst_at);

    const double seconds = elapsed_seconds(start);
    c.expect(seconds < 60.0, "took " + std::to_string(seconds) + "s, budget 60s");
}

// --------------------------------------------------------------------------
// 2. rate conservation and bounds over random instances
// --------------------------------------------------------------------------

void criterion_conservation(Checker& c) {
    Rng rng(777);
    for (int trial = 0; trial < 1000; ++trial) {
        const size_t size = 2 + rng.below(48);
        TokenCounts counts;
        counts.k.assign(size, 0);
        std::vector<double> w(size);
        std::vector<uint8_t> seen(size);
        int64_t total = 0;
        for (size_t i = 0; i < size; ++i) {
            w[i] = rng.normal(0.0, 3.0);
            counts.k[i] = static_cast<int64_t>(rng.below(40));
            seen[i] = rng.bernoulli(0.75) ? 1 : 0;
            total += counts.k[i];
        }
        if (total == 0) {
            counts.k[0] = 1;
        }
        const double p = 0.01 + 0.49 * rng.uniform();
        const double tau = 0.01 + 0.99 * rng.uniform();

        TyphoonState state(size, counts, {}, p, tau, 0.5);
        state.w = w;
        state.seen = seen;

        const std::vector<double> z = typhoon_rates(state);
        double weighted = 0.0, ktotal = 0.0;
        for (size_t i = 0; i < size; ++i) {
            weighted += z[i] * static_cast<double>(counts.k[i]);
            ktotal += static_cast<double>(counts.k[i]);
            c.expect(z[i] >= p / 2 - 1e-12 && z[i] <= 2 * p + 1e-12,
                     "rate outside [p/2, 2p] in trial " + std::to_string(trial));
        }
        c.expect(std::abs(weighted / ktotal - p) <= 1e-9,
                 "weighted mean off by " + std::to_string(std::abs(weighted / ktotal - p)));
        if (!c.ok) return;
    }
}

// --------------------------------------------------------------------------
// 3. rate hand traces
// --------------------------------------------------------------------------

void criterion_rate_traces(Checker& c) {
    {
        TokenCounts counts;
        counts.k = {10, 10, 10};
        TyphoonState state(3, counts, {}, 0.15, 0.2, 0.5);
        state.w = {-1.0, 1.0, 3.0};
        state.seen = {1, 1, 1};
        const std::vector<double> z = typhoon_rates(state);
        c.expect(std::abs(z[0] - 0.10) <= 1e-12, "z[0] != 0.10");
        c.expect(std::abs(z[1] - 0.15) <= 1e-12, "z[1] != 0.15");
        c.expect(std::abs(z[2] - 0.20) <= 1e-12, "z[2] != 0.20");
    }
    {
        TokenCounts counts;
        counts.k = {30, 10};
        TyphoonState state(2, counts, {}, 0.2, 0.5, 0.5);
        state.w = {-1.0, 3.0};
        state.seen = {1, 1};
        const std::vector<double> z = typhoon_rates(state);
        c.expect(std::abs(z[0] - 0.16) <= 1e-12, "z[0] != 0.16");
        c.expect(std::abs(z[1] - 0.32) <= 1e-12, "z[1] != 0.32");
        const double mean = (z[0] * 30 + z[1] * 10) / 40.0;
        c.expect(std::abs(mean - 0.2) <= 1e-12, "weighted mean != p");
    }
}

// --------------------------------------------------------------------------
// 4. weight update hand trace and EMA closed form
// --------------------------------------------------------------------------

void criterion_update_trace(Checker& c) {
    {
        TokenCounts counts;
        counts.k.assign(8, 1);
        TyphoonState state(8, counts, kStructural, 0.15, 0.5, 0.5);
        MaskOutcome outcome;
        outcome.x_masked = {5, Vocab::kMask, 5};
        outcome.y_labels = {Vocab::kMask, 7, Vocab::kMask};
        outcome.b = {0, 1, 0};
        typhoon_update(state, outcome, {5, 7, 5}, {0.3, -0.9, 0.1});
        c.expect(std::abs(state.c[5] - (-0.2)) <= 1e-12, "c[5] != -0.2");
        c.expect(std::abs(state.c[7] - (-0.9)) <= 1e-12, "c[7] != -0.9");
        c.expect(std::abs(state.w[5] - (-0.1)) <= 1e-12, "w[5] != -0.1");
        c.expect(std::abs(state.w[7] - (-0.45)) <= 1e-12, "w[7] != -0.45");
    }
    {
        TokenCounts counts;
        counts.k.assign(8, 1);
        const double lambda = 0.25;
        TyphoonState state(8, counts, kStructural, 0.15, 0.5, lambda);
        const double w0 = 1.5;
        state.w[5] = w0;
        MaskOutcome outcome;
        outcome.x_masked = {5};
        outcome.y_labels = {Vocab::kMask};
        outcome.b = {0};
        const double constant_c = -0.6;
        for (int t = 1; t <= 100; ++t) {
            typhoon_update(state, outcome, {5}, {0.6});
            const double expect = constant_c + std::pow(1.0 - lambda, t) * (w0 - constant_c);
            c.expect(std::abs(state.w[5] - expect) <= 1e-12,
                     "EMA closed form off at step " + std::to_string(t));
            if (!c.ok) return;
        }
    }
}

// --------------------------------------------------------------------------
// 5. masking statistics
// --------------------------------------------------------------------------

void criterion_masking_stats(Checker& c) {
    {
        std::vector<TokenId> ids(120000, 6);
        Rng rng(31337);
        const MaskOutcome out = random_mask(ids, kStructural, 0.15, rng);
        size_t masked = 0;
        for (uint8_t b : out.b) masked += b;
        const double fraction = static_cast<double>(masked) / static_cast<double>(ids.size());
        c.expect(std::abs(fraction - 0.15) <= 0.005,
                 "masked fraction " + std::to_string(fraction));
    }
    {
        Vocab vocab;
        for (const auto& s : special_token_strings()) {
            vocab.index.emplace(s, static_cast<TokenId>(vocab.tokens.size()));
            vocab.tokens.push_back(s);
        }
        for (const std::string t :
             {"john", "jo", "##han", "##sen", "lives", "in", "mary", "##vale"}) {
            vocab.index.emplace(t, static_cast<TokenId>(vocab.tokens.size()));
            vocab.tokens.push_back(t);
        }
        const TokenSequence seq = tokenize("John Johansen lives in Maryvale", vocab);
        c.expect(seq.word_spans.size() == 5, "expected 5 word spans");
        c.expect(seq.word_spans[1] == std::make_pair<size_t, size_t>(1, 4),
                 "Johansen span should cover three pieces");
        bool middle_selected = false;
        for (uint64_t seed = 0; seed < 10000; ++seed) {
            Rng rng(seed);
            const MaskOutcome out = whole_word_mask(seq.ids, seq.word_spans, 0.3, rng);
            for (const auto& [start, end] : seq.word_spans) {
                for (size_t i = start + 1; i < end; ++i) {
                    c.expect(out.b[i] == out.b[start],
                             "span split at seed " + std::to_string(seed));
                }
            }
            if (out.b[1]) middle_selected = true;
            if (!c.ok) return;
        }
        c.expect(middle_selected, "Johansen span never selected across trials");
    }
}

// --------------------------------------------------------------------------
// 6. metric oracles
// --------------------------------------------------------------------------

void criterion_metric_oracles(Checker& c) {
    Rng rng(9090);
    for (int trial = 0; trial < 5000; ++trial) {
        const size_t n = 1 + rng.below(48);
        std::vector<int> preds(n), labels(n);
        for (size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.below(2));
            labels[i] = static_cast<int>(rng.below(2));
        }
        double tp = 0, tn = 0, fp = 0, fn = 0, match = 0;
        for (size_t i = 0; i < n; ++i) {
            if (preds[i] == labels[i]) match += 1;
            if (preds[i] == 1 && labels[i] == 1) tp += 1;
            if (preds[i] == 0 && labels[i] == 0) tn += 1;
            if (preds[i] == 1 && labels[i] == 0) fp += 1;
            if (preds[i] == 0 && labels[i] == 1) fn += 1;
        }
        const double naive_acc = match / static_cast<double>(n);
        const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        const double naive_f1 =
            precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
        const double naive_mcc = denom > 0 ? (tp * tn - fp * fn) / std::sqrt(denom) : 0.0;

        c.expect(std::abs(accuracy(preds, labels) - naive_acc) <= 1e-12, "accuracy oracle");
        c.expect(std::abs(f1_binary(preds, labels) - naive_f1) <= 1e-12, "f1 oracle");
        c.expect(std::abs(matthews_corr(preds, labels) - naive_mcc) <= 1e-12, "mcc oracle");
        if (!c.ok) return;
    }
    // TP=1, TN=2, FP=1, FN=0 -> 2/sqrt(12)
    const double example = matthews_corr({1, 1, 0, 0}, {1, 0, 0, 0});
    c.expect(std::abs(example - 2.0 / std::sqrt(12.0)) <= 1e-12, "mcc worked example");
}

// --------------------------------------------------------------------------
// 7 + 9. end-to-end smoke and the qualitative shape check
// --------------------------------------------------------------------------

struct ScCurve {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<double> val_accuracy;
};

ScCurve parse_sc_curve(const std::string& csv_text) {
    ScCurve curve;
    std::istringstream stream(csv_text);
    std::string line;
    std::getline(stream, line); // header
    while (std::getline(stream, line)) {
        std::vector<std::string> cols;
        std::string col;
        std::istringstream row(line);
        while (std::getline(row, col, ',')) {
            cols.push_back(col);
        }
        while (cols.size() < 8) cols.emplace_back();
        if (cols[1] != "sc") continue;
        if (cols[3] == "train") {
            curve.train_loss.push_back(std::stod(cols[4]));
        } else if (cols[3] == "validation") {
            curve.val_loss.push_back(std::stod(cols[4]));
            curve.val_accuracy.push_back(std::stod(cols[5]));
        }
    }
    return curve;
}

std::vector<ScCurve> g_smoke_curves; // filled by criterion 7, reused by 9

void criterion_smoke(Checker& c) {
    const auto start = std::chrono::steady_clock::now();
    const auto dir = scratch_dir();
    g_smoke_curves.clear();

    for (const std::string strategy : {"random", "whole-word", "typhoon"}) {
        const std::string out_dir = (dir / ("smoke_" + strategy)).string();
        std::vector<const char*> argv = {"typhoon",    "pipeline", "--config",
                                         "data/toy.cfg", "--out",    out_dir.c_str(),
                                         "--strategy", strategy.c_str(), "--seed", "42"};
        std::ostringstream out, err;
        const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        c.expect(code == 0, "pipeline exited " + std::to_string(code) + " for " + strategy +
                                ": " + err.str());
        if (!c.ok) return;

        const ScCurve curve = parse_sc_curve(slurp(out_dir + "/metrics.csv"));
        c.expect(curve.val_accuracy.size() == 20, "expected 20 SC epochs for " + strategy);
        double best = 0.0;
        for (double acc : curve.val_accuracy) best = std::max(best, acc);
        c.expect(best >= 0.95, strategy + " best validation accuracy " + std::to_string(best));
        g_smoke_curves.push_back(curve);
    }

    const double seconds = elapsed_seconds(start);
    c.expect(seconds < 300.0, "took " + std::to_string(seconds) + "s, budget 300s");
    std::filesystem::remove_all(dir);
}

void criterion_shape(Checker& c) {
    c.expect(g_smoke_curves.size() == 3, "smoke runs unavailable (criterion 7 must run first)");
    if (!c.ok) return;
    const std::vector<std::string> names = {"random", "whole-word", "typhoon"};
    for (size_t s = 0; s < g_smoke_curves.size(); ++s) {
        const ScCurve& curve = g_smoke_curves[s];
        // metrics rise within the first few epochs
        double early_best = 0.0;
        for (size_t e = 0; e < 5 && e < curve.val_accuracy.size(); ++e) {
            early_best = std::max(early_best, curve.val_accuracy[e]);
        }
        c.expect(early_best > curve.val_accuracy.front() || early_best >= 0.9,
                 names[s] + ": no early metric rise");

        // validation loss turns upward after its minimum while train loss
        // keeps falling
        size_t argmin = 0;
        for (size_t e = 1; e < curve.val_loss.size(); ++e) {
            if (curve.val_loss[e] < curve.val_loss[argmin]) argmin = e;
        }
        double later_max = -1.0;
        for (size_t e = argmin + 1; e < curve.val_loss.size(); ++e) {
            later_max = std::max(later_max, curve.val_loss[e]);
        }
        c.expect(argmin + 1 < curve.val_loss.size() &&
                     later_max > curve.val_loss[argmin] + 1e-9,
                 names[s] + ": validation loss never increased after its minimum");
        c.expect(curve.train_loss.back() < curve.train_loss[argmin],
                 names[s] + ": train loss did not keep decreasing past the best epoch");
    }
}

// --------------------------------------------------------------------------
// 8. determinism
// --------------------------------------------------------------------------

void criterion_determinism(Checker& c) {
    const auto dir = scratch_dir();
    const std::string cfg_path = (dir / "det.cfg").string();
    {
        std::ofstream cfg(cfg_path, std::ios::binary);
        cfg << "[data]\ntrain = data/toy_train.tsv\nvalidation = data/toy_val.tsv\n"
               "task = single\nvocab_budget = 200\nmax_len = 12\n"
               "[model]\nhidden = 32\nlayers = 1\nheads = 2\nff = 64\n"
               "[mlm]\nepochs = 3\nlr = 1e-3\nbatch = 8\n"
               "[sc]\nepochs = 3\nlr = 1e-3\nbatch = 8\n"
               "[masking]\nstrategy = typhoon\n";
    }

    auto run_once = [&](const std::string& out_dir) {
        std::vector<const char*> argv = {"typhoon", "pipeline", "--config", cfg_path.c_str(),
                                         "--out",   out_dir.c_str(), "--seed", "7"};
        std::ostringstream out, err;
        return cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    };
    const std::string dir_a = (dir / "a").string();
    const std::string dir_b = (dir / "b").string();
    c.expect(run_once(dir_a) == 0, "first run failed");
    c.expect(run_once(dir_b) == 0, "second run failed");
    if (!c.ok) return;

    c.expect(slurp(dir_a + "/metrics.csv") == slurp(dir_b + "/metrics.csv"),
             "metrics CSVs differ");
    c.expect(slurp(dir_a + "/mlm_checkpoint.typh") == slurp(dir_b + "/mlm_checkpoint.typh"),
             "mlm checkpoints differ");
    c.expect(slurp(dir_a + "/sc_best_checkpoint.typh") == slurp(dir_b + "/sc_best_checkpoint.typh"),
             "sc checkpoints differ");
    c.expect(slurp(dir_a + "/typhoon_state.json") == slurp(dir_b + "/typhoon_state.json"),
             "typhoon states differ");
    std::filesystem::remove_all(dir);
}

} // namespace

int main() {
    if (!std::filesystem::exists("data/toy.cfg")) {
        std::cout << "FAIL  setup  (run from the repository root; data/toy.cfg not found)\n";
        return 1;
    }
    Harness harness;
    harness.run("1. gradient fidelity (finite differences, rel <= 1e-4, < 60s)",
                criterion_gradients);
    harness.run("2. rate conservation and [p/2, 2p] bounds over 1000 instances",
                criterion_conservation);
    harness.run("3. rate hand traces ([0.10,0.15,0.20] and [0.16,0.32])", criterion_rate_traces);
    harness.run("4. weight-update hand trace and EMA closed form", criterion_update_trace);
    harness.run("5. masking statistics (rate 0.15 +/- 0.005; spans never split)",
                criterion_masking_stats);
    harness.run("6. metric oracles (5000 random pairs to 1e-12)", criterion_metric_oracles);
    harness.run("7. end-to-end smoke (three strategies reach 0.95 accuracy, < 5 min)",
                criterion_smoke);
    harness.run("8. determinism (byte-identical CSVs and checkpoints)", criterion_determinism);
    harness.run("9. qualitative overfitting shape (early rise, late val-loss increase)",
                criterion_shape);

    if (harness.failures == 0) {
        std::cout << "all acceptance criteria passed\n";
        return 0;
    }
    std::cout << harness.failures << " criterion(s) failed\n";
    return 1;
}
