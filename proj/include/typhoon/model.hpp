#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "typhoon/errors.hpp"
#include "typhoon/masking.hpp"
#include "typhoon/rng.hpp"
#include "typhoon/vocab.hpp"

namespace typhoon {

struct Hyperparams {
    size_t hidden = 128;
    size_t layers = 2;
    size_t heads = 2;
    size_t ff = 512;
    size_t max_len = 128;
    size_t vocab_size = 0;
    size_t num_classes = 2;

    void validate() const {
        if (hidden == 0 || layers == 0 || heads == 0 || ff == 0 || max_len == 0 ||
            vocab_size == 0 || num_classes == 0) {
            throw ConfigError("model dimensions must all be positive");
        }
        if (hidden % heads != 0) {
            throw ConfigError("hidden size must be divisible by head count");
        }
    }

    bool operator==(const Hyperparams&) const = default;
};

// Row-major matrix of doubles. Biases and gain/shift vectors are 1 x n.
struct Mat {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(size_t i, size_t j) { return data[i * cols + j]; }
    double at(size_t i, size_t j) const { return data[i * cols + j]; }
    double* row(size_t i) { return data.data() + i * cols; }
    const double* row(size_t i) const { return data.data() + i * cols; }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

struct LayerParams {
    Mat wq, bq, wk, bk, wv, bv, wo, bo; // attention projections, H x H and 1 x H
    Mat ln1_gain, ln1_bias;             // 1 x H
    Mat ff_w1, ff_b1;                   // H x F, 1 x F
    Mat ff_w2, ff_b2;                   // F x H, 1 x H
    Mat ln2_gain, ln2_bias;             // 1 x H
};

struct ModelParams {
    Hyperparams hyper;
    Mat tok_emb; // T x H
    Mat pos_emb; // N x H
    std::vector<LayerParams> layers;
    Mat mlm_w, mlm_b; // H x T, 1 x T
    Mat sc_w, sc_b;   // H x C, 1 x C
};

// Visits every tensor in a fixed order shared by the optimizer, the
// checkpoint writer, and the gradient checks.
template <typename Params, typename Fn>
void for_each_tensor(Params& params, Fn&& fn) {
    fn("tok_emb", params.tok_emb);
    fn("pos_emb", params.pos_emb);
    for (size_t l = 0; l < params.layers.size(); ++l) {
        auto& layer = params.layers[l];
        const std::string prefix = "layer" + std::to_string(l) + ".";
        fn(prefix + "wq", layer.wq);
        fn(prefix + "bq", layer.bq);
        fn(prefix + "wk", layer.wk);
        fn(prefix + "bk", layer.bk);
        fn(prefix + "wv", layer.wv);
        fn(prefix + "bv", layer.bv);
        fn(prefix + "wo", layer.wo);
        fn(prefix + "bo", layer.bo);
        fn(prefix + "ln1.gain", layer.ln1_gain);
        fn(prefix + "ln1.bias", layer.ln1_bias);
        fn(prefix + "ff.w1", layer.ff_w1);
        fn(prefix + "ff.b1", layer.ff_b1);
        fn(prefix + "ff.w2", layer.ff_w2);
        fn(prefix + "ff.b2", layer.ff_b2);
        fn(prefix + "ln2.gain", layer.ln2_gain);
        fn(prefix + "ln2.bias", layer.ln2_bias);
    }
    fn("mlm.w", params.mlm_w);
    fn("mlm.b", params.mlm_b);
    fn("sc.w", params.sc_w);
    fn("sc.b", params.sc_b);
}

inline ModelParams make_shaped(const Hyperparams& hyper) {
    hyper.validate();
    ModelParams p;
    p.hyper = hyper;
    const size_t H = hyper.hidden, F = hyper.ff, T = hyper.vocab_size;
    p.tok_emb = Mat(T, H);
    p.pos_emb = Mat(hyper.max_len, H);
    p.layers.resize(hyper.layers);
    for (auto& layer : p.layers) {
        layer.wq = Mat(H, H);
        layer.bq = Mat(1, H);
        layer.wk = Mat(H, H);
        layer.bk = Mat(1, H);
        layer.wv = Mat(H, H);
        layer.bv = Mat(1, H);
        layer.wo = Mat(H, H);
        layer.bo = Mat(1, H);
        layer.ln1_gain = Mat(1, H);
        layer.ln1_bias = Mat(1, H);
        layer.ff_w1 = Mat(H, F);
        layer.ff_b1 = Mat(1, F);
        layer.ff_w2 = Mat(F, H);
        layer.ff_b2 = Mat(1, H);
        layer.ln2_gain = Mat(1, H);
        layer.ln2_bias = Mat(1, H);
    }
    p.mlm_w = Mat(H, T);
    p.mlm_b = Mat(1, T);
    p.sc_w = Mat(H, hyper.num_classes);
    p.sc_b = Mat(1, hyper.num_classes);
    return p;
}

inline ModelParams make_zero_like(const ModelParams& params) {
    return make_shaped(params.hyper);
}

// Weights ~ N(0, 0.02^2), biases zero, layer-norm gains one.
inline ModelParams init_params(const Hyperparams& hyper, uint64_t seed) {
    ModelParams p = make_shaped(hyper);
    Rng rng(seed);
    auto fill_normal = [&rng](Mat& m) {
        for (double& v : m.data) {
            v = rng.normal(0.0, 0.02);
        }
    };
    auto fill_ones = [](Mat& m) { std::fill(m.data.begin(), m.data.end(), 1.0); };

    fill_normal(p.tok_emb);
    fill_normal(p.pos_emb);
    for (auto& layer : p.layers) {
        fill_normal(layer.wq);
        fill_normal(layer.wk);
        fill_normal(layer.wv);
        fill_normal(layer.wo);
        fill_ones(layer.ln1_gain);
        fill_normal(layer.ff_w1);
        fill_normal(layer.ff_w2);
        fill_ones(layer.ln2_gain);
    }
    fill_normal(p.mlm_w);
    fill_normal(p.sc_w);
    return p;
}

// ---------------------------------------------------------------------------
// forward/backward primitives
// ---------------------------------------------------------------------------

// out[N x Co] = in[N x Ci] * w[Ci x Co] + b[1 x Co]
inline void linear_forward(const Mat& in, const Mat& w, const Mat& b, Mat& out) {
    out = Mat(in.rows, w.cols);
    for (size_t i = 0; i < in.rows; ++i) {
        const double* x = in.row(i);
        double* y = out.row(i);
        for (size_t o = 0; o < w.cols; ++o) {
            y[o] = b.data[o];
        }
        for (size_t c = 0; c < in.cols; ++c) {
            const double xv = x[c];
            if (xv == 0.0) continue;
            const double* wrow = w.row(c);
            for (size_t o = 0; o < w.cols; ++o) {
                y[o] += xv * wrow[o];
            }
        }
    }
}

inline void linear_backward(const Mat& in, const Mat& w, const Mat& dout, Mat& din, Mat& dw,
                            Mat& db) {
    for (size_t i = 0; i < in.rows; ++i) {
        const double* dy = dout.row(i);
        const double* x = in.row(i);
        double* dx = din.row(i);
        for (size_t o = 0; o < w.cols; ++o) {
            db.data[o] += dy[o];
        }
        for (size_t c = 0; c < in.cols; ++c) {
            const double* wrow = w.row(c);
            double* dwrow = dw.row(c);
            double acc = 0.0;
            const double xv = x[c];
            for (size_t o = 0; o < w.cols; ++o) {
                acc += wrow[o] * dy[o];
                dwrow[o] += xv * dy[o];
            }
            dx[c] += acc;
        }
    }
}

constexpr double kLayerNormEps = 1e-12;

// Per-row normalization over the feature axis, then gain/shift. Mean and
// reciprocal std are cached for the backward pass.
inline void layernorm_forward(const Mat& in, const Mat& gain, const Mat& bias, Mat& out,
                              std::vector<double>& means, std::vector<double>& rstds) {
    out = Mat(in.rows, in.cols);
    means.assign(in.rows, 0.0);
    rstds.assign(in.rows, 0.0);
    const double inv_n = 1.0 / static_cast<double>(in.cols);
    for (size_t i = 0; i < in.rows; ++i) {
        const double* x = in.row(i);
        double mean = 0.0;
        for (size_t c = 0; c < in.cols; ++c) {
            mean += x[c];
        }
        mean *= inv_n;
        double var = 0.0;
        for (size_t c = 0; c < in.cols; ++c) {
            const double d = x[c] - mean;
            var += d * d;
        }
        var *= inv_n;
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        double* y = out.row(i);
        for (size_t c = 0; c < in.cols; ++c) {
            y[c] = (x[c] - mean) * rstd * gain.data[c] + bias.data[c];
        }
        means[i] = mean;
        rstds[i] = rstd;
    }
}

inline void layernorm_backward(const Mat& in, const Mat& gain, const Mat& dout,
                               const std::vector<double>& means, const std::vector<double>& rstds,
                               Mat& din, Mat& dgain, Mat& dbias) {
    const double inv_n = 1.0 / static_cast<double>(in.cols);
    for (size_t i = 0; i < in.rows; ++i) {
        const double* x = in.row(i);
        const double* dy = dout.row(i);
        double* dx = din.row(i);
        const double mean = means[i];
        const double rstd = rstds[i];

        double dnorm_mean = 0.0;
        double dnorm_norm_mean = 0.0;
        for (size_t c = 0; c < in.cols; ++c) {
            const double norm = (x[c] - mean) * rstd;
            const double dnorm = gain.data[c] * dy[c];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean *= inv_n;
        dnorm_norm_mean *= inv_n;

        for (size_t c = 0; c < in.cols; ++c) {
            const double norm = (x[c] - mean) * rstd;
            const double dnorm = gain.data[c] * dy[c];
            dgain.data[c] += norm * dy[c];
            dbias.data[c] += dy[c];
            dx[c] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rstd;
        }
    }
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    const double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794;
    return cdf + x * pdf;
}

constexpr double kAttentionMaskBias = -1e9;

struct LayerCache {
    Mat x_in;
    Mat q, k, v;
    std::vector<Mat> att; // per head, N x N
    Mat ctx;
    Mat res1;
    std::vector<double> ln1_mean, ln1_rstd;
    Mat x1;
    Mat ff_pre, ff_act;
    Mat res2;
    std::vector<double> ln2_mean, ln2_rstd;
    Mat x_out;
};

// Everything the backward pass needs, valid for exactly one backward call.
struct ForwardCache {
    std::vector<TokenId> input_ids;    // ids the model consumed (x' for MLM)
    std::vector<TokenId> original_ids; // pre-mask ids x
    std::vector<uint8_t> attention;
    Mat h0;
    std::vector<LayerCache> layers;
    Mat logits;
    Mat probs;
    std::vector<uint8_t> loss_positions; // MLM only
    size_t loss_count = 0;
    int label = 0; // SC only
    bool is_sc = false;
    bool skip = false;
    bool consumed = false;
};

namespace detail {

inline void check_finite(const Mat& m, const std::string& where) {
    for (double v : m.data) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite activation in " + where);
        }
    }
}

// Encoder stack shared by the MLM and SC paths. PAD keys are excluded via
// an additive bias before the softmax.
inline Mat encoder_forward(const ModelParams& params, const std::vector<TokenId>& ids,
                           const std::vector<uint8_t>& attention, ForwardCache& cache,
                           const Mat* emb_offset) {
    const Hyperparams& hp = params.hyper;
    const size_t N = hp.max_len;
    const size_t H = hp.hidden;
    const size_t heads = hp.heads;
    const size_t dh = H / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    if (ids.size() != N || attention.size() != N) {
        throw ContractError("encoder input length does not match max_len");
    }

    cache.input_ids = ids;
    cache.attention = attention;

    cache.h0 = Mat(N, H);
    for (size_t j = 0; j < N; ++j) {
        const double* tok = params.tok_emb.row(static_cast<size_t>(ids[j]));
        const double* pos = params.pos_emb.row(j);
        double* h = cache.h0.row(j);
        for (size_t c = 0; c < H; ++c) {
            h[c] = tok[c] + pos[c];
        }
        if (emb_offset != nullptr) {
            const double* off = emb_offset->row(j);
            for (size_t c = 0; c < H; ++c) {
                h[c] += off[c];
            }
        }
    }

    cache.layers.assign(hp.layers, LayerCache{});
    Mat x = cache.h0;
    for (size_t l = 0; l < hp.layers; ++l) {
        LayerCache& lc = cache.layers[l];
        const LayerParams& lp = params.layers[l];
        lc.x_in = x;

        linear_forward(lc.x_in, lp.wq, lp.bq, lc.q);
        linear_forward(lc.x_in, lp.wk, lp.bk, lc.k);
        linear_forward(lc.x_in, lp.wv, lp.bv, lc.v);

        lc.att.assign(heads, Mat(N, N));
        lc.ctx = Mat(N, H);
        std::vector<double> scores(N);
        for (size_t a = 0; a < heads; ++a) {
            const size_t base = a * dh;
            Mat& att = lc.att[a];
            for (size_t j = 0; j < N; ++j) {
                const double* qj = lc.q.row(j) + base;
                double max_score = -std::numeric_limits<double>::infinity();
                for (size_t t = 0; t < N; ++t) {
                    const double* kt = lc.k.row(t) + base;
                    double s = 0.0;
                    for (size_t c = 0; c < dh; ++c) {
                        s += qj[c] * kt[c];
                    }
                    s = s * inv_sqrt_dh + (attention[t] ? 0.0 : kAttentionMaskBias);
                    scores[t] = s;
                    max_score = std::max(max_score, s);
                }
                double denom = 0.0;
                double* att_row = att.row(j);
                for (size_t t = 0; t < N; ++t) {
                    att_row[t] = std::exp(scores[t] - max_score);
                    denom += att_row[t];
                }
                const double inv_denom = 1.0 / denom;
                double* ctx_j = lc.ctx.row(j) + base;
                for (size_t t = 0; t < N; ++t) {
                    att_row[t] *= inv_denom;
                    if (att_row[t] != 0.0) {
                        const double* vt = lc.v.row(t) + base;
                        for (size_t c = 0; c < dh; ++c) {
                            ctx_j[c] += att_row[t] * vt[c];
                        }
                    }
                }
            }
        }

        Mat attn_out;
        linear_forward(lc.ctx, lp.wo, lp.bo, attn_out);
        lc.res1 = Mat(N, H);
        for (size_t i = 0; i < N * H; ++i) {
            lc.res1.data[i] = lc.x_in.data[i] + attn_out.data[i];
        }
        layernorm_forward(lc.res1, lp.ln1_gain, lp.ln1_bias, lc.x1, lc.ln1_mean, lc.ln1_rstd);

        linear_forward(lc.x1, lp.ff_w1, lp.ff_b1, lc.ff_pre);
        lc.ff_act = Mat(N, hp.ff);
        for (size_t i = 0; i < N * hp.ff; ++i) {
            lc.ff_act.data[i] = gelu(lc.ff_pre.data[i]);
        }
        Mat ff_out;
        linear_forward(lc.ff_act, lp.ff_w2, lp.ff_b2, ff_out);
        lc.res2 = Mat(N, H);
        for (size_t i = 0; i < N * H; ++i) {
            lc.res2.data[i] = lc.x1.data[i] + ff_out.data[i];
        }
        layernorm_forward(lc.res2, lp.ln2_gain, lp.ln2_bias, lc.x_out, lc.ln2_mean, lc.ln2_rstd);

        check_finite(lc.x_out, "encoder layer " + std::to_string(l));
        x = lc.x_out;
    }
    return x;
}

// Returns d(embedding input), i.e. the gradient arriving at h0.
inline Mat encoder_backward(const ModelParams& params, const ForwardCache& cache, const Mat& dx_out,
                            ModelParams& grads) {
    const Hyperparams& hp = params.hyper;
    const size_t N = hp.max_len;
    const size_t H = hp.hidden;
    const size_t heads = hp.heads;
    const size_t dh = H / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat dx = dx_out;
    for (size_t l = hp.layers; l-- > 0;) {
        const LayerCache& lc = cache.layers[l];
        const LayerParams& lp = params.layers[l];
        LayerParams& lg = grads.layers[l];

        // ln2
        Mat dres2(N, H);
        layernorm_backward(lc.res2, lp.ln2_gain, dx, lc.ln2_mean, lc.ln2_rstd, dres2, lg.ln2_gain,
                           lg.ln2_bias);

        // res2 = x1 + ff_out
        Mat dx1 = dres2;
        Mat dff_act(N, hp.ff);
        linear_backward(lc.ff_act, lp.ff_w2, dres2, dff_act, lg.ff_w2, lg.ff_b2);
        Mat dff_pre(N, hp.ff);
        for (size_t i = 0; i < N * hp.ff; ++i) {
            dff_pre.data[i] = dff_act.data[i] * gelu_grad(lc.ff_pre.data[i]);
        }
        linear_backward(lc.x1, lp.ff_w1, dff_pre, dx1, lg.ff_w1, lg.ff_b1);

        // ln1
        Mat dres1(N, H);
        layernorm_backward(lc.res1, lp.ln1_gain, dx1, lc.ln1_mean, lc.ln1_rstd, dres1, lg.ln1_gain,
                           lg.ln1_bias);

        // res1 = x_in + attn_out
        Mat dx_in = dres1;
        Mat dctx(N, H);
        linear_backward(lc.ctx, lp.wo, dres1, dctx, lg.wo, lg.bo);

        Mat dq(N, H), dk(N, H), dv(N, H);
        std::vector<double> datt(N);
        for (size_t a = 0; a < heads; ++a) {
            const size_t base = a * dh;
            const Mat& att = lc.att[a];
            for (size_t j = 0; j < N; ++j) {
                const double* att_row = att.row(j);
                const double* dctx_j = dctx.row(j) + base;
                double dot_sum = 0.0;
                for (size_t t = 0; t < N; ++t) {
                    if (att_row[t] != 0.0) {
                        const double* vt = lc.v.row(t) + base;
                        double d = 0.0;
                        for (size_t c = 0; c < dh; ++c) {
                            d += dctx_j[c] * vt[c];
                        }
                        datt[t] = d;
                        dot_sum += att_row[t] * d;
                        double* dvt = dv.row(t) + base;
                        for (size_t c = 0; c < dh; ++c) {
                            dvt[c] += att_row[t] * dctx_j[c];
                        }
                    } else {
                        datt[t] = 0.0;
                    }
                }
                double* dqj = dq.row(j) + base;
                const double* qj = lc.q.row(j) + base;
                for (size_t t = 0; t < N; ++t) {
                    const double dscore = att_row[t] * (datt[t] - dot_sum);
                    if (dscore == 0.0) continue;
                    const double* kt = lc.k.row(t) + base;
                    double* dkt = dk.row(t) + base;
                    const double scaled = dscore * inv_sqrt_dh;
                    for (size_t c = 0; c < dh; ++c) {
                        dqj[c] += scaled * kt[c];
                        dkt[c] += scaled * qj[c];
                    }
                }
            }
        }

        linear_backward(lc.x_in, lp.wq, dq, dx_in, lg.wq, lg.bq);
        linear_backward(lc.x_in, lp.wk, dk, dx_in, lg.wk, lg.bk);
        linear_backward(lc.x_in, lp.wv, dv, dx_in, lg.wv, lg.bv);

        dx = std::move(dx_in);
    }

    // embeddings: h0[j] = tok_emb[input_ids[j]] + pos_emb[j]
    for (size_t j = 0; j < N; ++j) {
        const double* d = dx.row(j);
        double* dtok = grads.tok_emb.row(static_cast<size_t>(cache.input_ids[j]));
        double* dpos = grads.pos_emb.row(j);
        for (size_t c = 0; c < H; ++c) {
            dtok[c] += d[c];
            dpos[c] += d[c];
        }
    }
    return dx;
}

// Stable log-softmax cross-entropy for one row; returns loss, fills probs.
inline double softmax_xent_row(const double* logits, size_t n, size_t target, double* probs) {
    double max_logit = logits[0];
    for (size_t i = 1; i < n; ++i) {
        max_logit = std::max(max_logit, logits[i]);
    }
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sum += std::exp(logits[i] - max_logit);
    }
    const double log_z = max_logit + std::log(sum);
    for (size_t i = 0; i < n; ++i) {
        probs[i] = std::exp(logits[i] - log_z);
    }
    return log_z - logits[target];
}

} // namespace detail

struct MlmResult {
    double loss = 0.0;
    Mat logits; // N x T
    ForwardCache cache;
};

// Loss is the mean cross-entropy over positions with a real label
// (y != MASK and y != PAD). A sequence with no such position yields loss 0
// and the skip flag; its cache must not be fed to mlm_backward.
inline MlmResult mlm_forward(const ModelParams& params, const MaskOutcome& outcome,
                             const std::vector<uint8_t>& attention,
                             const Mat* emb_offset = nullptr) {
    if (outcome.y_labels.size() != outcome.x_masked.size() ||
        outcome.b.size() != outcome.x_masked.size()) {
        throw ContractError("mask outcome vectors have inconsistent lengths");
    }
    MlmResult result;
    ForwardCache& cache = result.cache;
    const Mat x_final =
        detail::encoder_forward(params, outcome.x_masked, attention, cache, emb_offset);

    // recover original ids: masked positions keep theirs in y
    const size_t N = params.hyper.max_len;
    cache.original_ids.resize(N);
    for (size_t j = 0; j < N; ++j) {
        cache.original_ids[j] = outcome.b[j] ? outcome.y_labels[j] : outcome.x_masked[j];
    }

    linear_forward(x_final, params.mlm_w, params.mlm_b, cache.logits);
    detail::check_finite(cache.logits, "mlm head");

    const size_t T = params.hyper.vocab_size;
    cache.loss_positions.assign(N, 0);
    cache.probs = Mat(N, T);
    double loss_sum = 0.0;
    size_t count = 0;
    for (size_t j = 0; j < N; ++j) {
        const TokenId y = outcome.y_labels[j];
        if (y == Vocab::kMask || y == Vocab::kPad) {
            continue;
        }
        cache.loss_positions[j] = 1;
        loss_sum += detail::softmax_xent_row(cache.logits.row(j), T, static_cast<size_t>(y),
                                             cache.probs.row(j));
        ++count;
    }
    cache.loss_count = count;
    cache.skip = count == 0;
    result.loss = cache.skip ? 0.0 : loss_sum / static_cast<double>(count);
    if (!std::isfinite(result.loss)) {
        throw NumericError("non-finite mlm loss");
    }
    result.logits = cache.logits;
    return result;
}

struct MlmGrads {
    ModelParams params;              // same shapes as the model
    Mat emb_grad;                    // N x H gradient at the embedding input
    std::vector<double> input_grads; // g: per position, one-hot coordinate of the original id
};

inline MlmGrads mlm_backward(const ModelParams& params, ForwardCache& cache) {
    if (cache.consumed) {
        throw ContractError("forward cache already consumed by a backward pass");
    }
    if (cache.is_sc) {
        throw ContractError("mlm_backward called with a sequence-classification cache");
    }
    if (cache.skip) {
        throw ContractError("mlm_backward called on a skip-flagged cache (no masked position)");
    }
    cache.consumed = true;

    const Hyperparams& hp = params.hyper;
    const size_t N = hp.max_len;
    const size_t T = hp.vocab_size;

    MlmGrads out;
    out.params = make_zero_like(params);

    // d logits: (softmax - onehot) / count at loss positions
    Mat dlogits(N, T);
    const double inv_count = 1.0 / static_cast<double>(cache.loss_count);
    for (size_t j = 0; j < N; ++j) {
        if (!cache.loss_positions[j]) continue;
        const double* p = cache.probs.row(j);
        double* dl = dlogits.row(j);
        for (size_t t = 0; t < T; ++t) {
            dl[t] = p[t] * inv_count;
        }
        dl[static_cast<size_t>(cache.original_ids[j])] -= inv_count;
    }

    Mat dx_final(N, hp.hidden);
    const Mat& x_final = cache.layers.back().x_out;
    linear_backward(x_final, params.mlm_w, dlogits, dx_final, out.params.mlm_w, out.params.mlm_b);

    out.emb_grad = detail::encoder_backward(params, cache, dx_final, out.params);
    const Mat& demb = out.emb_grad;

    // g_j = <d h0[j], tok_emb[original id]>, the one-hot input gradient
    // component at the original token's coordinate.
    out.input_grads.assign(N, 0.0);
    for (size_t j = 0; j < N; ++j) {
        const double* d = demb.row(j);
        const double* e = params.tok_emb.row(static_cast<size_t>(cache.original_ids[j]));
        double g = 0.0;
        for (size_t c = 0; c < hp.hidden; ++c) {
            g += d[c] * e[c];
        }
        out.input_grads[j] = g;
    }
    return out;
}

struct ScResult {
    double loss = 0.0;
    std::vector<double> logits; // num_classes
    ForwardCache cache;
};

// Classification head reads the final hidden state at the CLS position.
inline ScResult sc_forward(const ModelParams& params, const std::vector<TokenId>& ids,
                           const std::vector<uint8_t>& attention, int label) {
    ScResult result;
    ForwardCache& cache = result.cache;
    cache.is_sc = true;
    cache.label = label;
    const Mat x_final = detail::encoder_forward(params, ids, attention, cache, nullptr);
    cache.original_ids = ids;

    const size_t C = params.hyper.num_classes;
    if (label < 0 || static_cast<size_t>(label) >= C) {
        throw ContractError("class label out of range");
    }

    Mat cls(1, params.hyper.hidden);
    std::memcpy(cls.row(0), x_final.row(0), params.hyper.hidden * sizeof(double));
    linear_forward(cls, params.sc_w, params.sc_b, cache.logits);
    detail::check_finite(cache.logits, "sc head");

    cache.probs = Mat(1, C);
    result.loss = detail::softmax_xent_row(cache.logits.row(0), C, static_cast<size_t>(label),
                                           cache.probs.row(0));
    if (!std::isfinite(result.loss)) {
        throw NumericError("non-finite sc loss");
    }
    result.logits.assign(cache.logits.row(0), cache.logits.row(0) + C);
    return result;
}

// Argmax prediction; ties break toward the lower class index.
inline int sc_predict(const std::vector<double>& class_logits) {
    size_t best = 0;
    for (size_t i = 1; i < class_logits.size(); ++i) {
        if (class_logits[i] > class_logits[best]) {
            best = i;
        }
    }
    return static_cast<int>(best);
}

inline ModelParams sc_backward(const ModelParams& params, ForwardCache& cache) {
    if (cache.consumed) {
        throw ContractError("forward cache already consumed by a backward pass");
    }
    if (!cache.is_sc) {
        throw ContractError("sc_backward called with an mlm cache");
    }
    cache.consumed = true;

    const Hyperparams& hp = params.hyper;
    const size_t C = hp.num_classes;

    ModelParams grads = make_zero_like(params);

    Mat dlogits(1, C);
    for (size_t t = 0; t < C; ++t) {
        dlogits.at(0, t) = cache.probs.at(0, t);
    }
    dlogits.at(0, static_cast<size_t>(cache.label)) -= 1.0;

    Mat cls(1, hp.hidden);
    std::memcpy(cls.row(0), cache.layers.back().x_out.row(0), hp.hidden * sizeof(double));
    Mat dcls(1, hp.hidden);
    linear_backward(cls, params.sc_w, dlogits, dcls, grads.sc_w, grads.sc_b);

    Mat dx_final(hp.max_len, hp.hidden);
    std::memcpy(dx_final.row(0), dcls.row(0), hp.hidden * sizeof(double));
    detail::encoder_backward(params, cache, dx_final, grads);
    return grads;
}

// Copies the embeddings and encoder stack into a fresh parameter set; the
// MLM head is not carried over and the SC head comes from the new seed.
inline ModelParams transfer_encoder(const ModelParams& mlm_params, const Hyperparams& hyper,
                                    uint64_t sc_seed) {
    if (!(mlm_params.hyper == hyper)) {
        throw ConfigError("transfer_encoder: hyperparameter mismatch");
    }
    ModelParams sc_params = init_params(hyper, sc_seed);
    sc_params.tok_emb = mlm_params.tok_emb;
    sc_params.pos_emb = mlm_params.pos_emb;
    sc_params.layers = mlm_params.layers;
    return sc_params;
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------
// Layout: magic "TYPH" | u32 version | u64 header length | JSON header
// (hyperparams + ordered tensor manifest with byte offsets into the data
// section) | raw little-endian IEEE-754 doubles, row-major.

constexpr uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
    nlohmann::json header;
    header["hyper"] = {{"hidden", params.hyper.hidden},   {"layers", params.hyper.layers},
                       {"heads", params.hyper.heads},     {"ff", params.hyper.ff},
                       {"max_len", params.hyper.max_len}, {"vocab_size", params.hyper.vocab_size},
                       {"num_classes", params.hyper.num_classes}};
    nlohmann::json manifest = nlohmann::json::array();
    uint64_t offset = 0;
    for_each_tensor(params, [&](const std::string& name, const Mat& m) {
        manifest.push_back({{"name", name}, {"shape", {m.rows, m.cols}}, {"offset", offset}});
        offset += m.data.size() * sizeof(double);
    });
    header["tensors"] = manifest;
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write checkpoint: " + path);
    }
    out.write("TYPH", 4);
    const uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for_each_tensor(params, [&](const std::string&, const Mat& m) {
        out.write(reinterpret_cast<const char*>(m.data.data()),
                  static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    });
    if (!out) {
        throw DataError("short write while saving checkpoint: " + path);
    }
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read checkpoint: " + path);
    }
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TYPH", 4) != 0) {
        throw DataError("bad checkpoint magic in " + path);
    }
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " +
                        path);
    }
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in) {
        throw DataError("truncated checkpoint header in " + path);
    }
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw DataError("truncated checkpoint header in " + path);
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint header in " + path + ": " + e.what());
    }

    Hyperparams hyper;
    const auto& h = header.at("hyper");
    hyper.hidden = h.at("hidden").get<size_t>();
    hyper.layers = h.at("layers").get<size_t>();
    hyper.heads = h.at("heads").get<size_t>();
    hyper.ff = h.at("ff").get<size_t>();
    hyper.max_len = h.at("max_len").get<size_t>();
    hyper.vocab_size = h.at("vocab_size").get<size_t>();
    hyper.num_classes = h.at("num_classes").get<size_t>();

    ModelParams params = make_shaped(hyper);
    size_t entry = 0;
    const auto& manifest = header.at("tensors");
    for_each_tensor(params, [&](const std::string& name, Mat& m) {
        if (entry >= manifest.size()) {
            throw DataError("checkpoint manifest missing tensor " + name + " in " + path);
        }
        const auto& rec = manifest[entry++];
        if (rec.at("name").get<std::string>() != name) {
            throw DataError("checkpoint tensor order mismatch at " + name + " in " + path);
        }
        const auto shape = rec.at("shape").get<std::vector<size_t>>();
        if (shape.size() != 2 || shape[0] != m.rows || shape[1] != m.cols) {
            throw DataError("checkpoint tensor " + name + " has unexpected shape in " + path);
        }
        in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size() * sizeof(double)));
        if (!in) {
            throw DataError("checkpoint truncated at tensor " + name + " in " + path);
        }
    });
    return params;
}

} // namespace typhoon
