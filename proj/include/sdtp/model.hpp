#pragma once

// Toy decoder-only transformer: pre-norm residual blocks, causal
// multi-head attention, GELU MLP, learned absolute positions. Two forward
// paths share the same kernels:
//   - a raw path (no tape) for inference, evaluation and equivalence
//     oracles, with optional per-stage constant key masks or progressive
//     physical token removal (prefill_pruned) and KV-cache decoding;
//   - a taped path for training and attribution, with optional
//     differentiable straight-through stage masks.
// Physically removed tokens keep their original position embedding, so
// masked and gathered runs see identical per-token inputs.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdtp/common.hpp"
#include "sdtp/kernels.hpp"
#include "sdtp/kv_policy.hpp"
#include "sdtp/schedule.hpp"
#include "sdtp/scorer.hpp"
#include "sdtp/tensor.hpp"

namespace sdtp {

inline constexpr double kAttnMaskValue = -1e9;

struct ModelConfig {
    int n_layers = 8;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int vocab_size = 256;
    int max_seq_len = 512;
    uint64_t seed = 1;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
            max_seq_len < 1)
            throw std::invalid_argument("model config: all sizes must be >= 1");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    }

    // MACs of the per-token linear work (projections + MLP + unembedding),
    // used for the scorer overhead budget. 2 FLOPs per MAC.
    double per_token_linear_flops() const {
        double d = d_model;
        double layer_macs = 4.0 * d * d + 2.0 * d * d_ff;
        return 2.0 * (layer_macs * n_layers + d * vocab_size);
    }
};

template <typename Real>
struct LayerParams {
    Mat<Real> ln1_g, ln1_b;
    Mat<Real> qkv_w;  // [d, 3d]
    Mat<Real> qkv_b;  // [1, 3d]
    Mat<Real> out_w;  // [d, d]
    Mat<Real> out_b;  // [1, d]
    Mat<Real> ln2_g, ln2_b;
    Mat<Real> mlp_w1;  // [d, d_ff]
    Mat<Real> mlp_b1;  // [1, d_ff]
    Mat<Real> mlp_w2;  // [d_ff, d]
    Mat<Real> mlp_b2;  // [1, d]
};

template <typename Real>
struct ModelParams {
    ModelConfig config;
    Mat<Real> embed;      // [V, d]
    Mat<Real> pos_embed;  // [max_seq_len, d]
    std::vector<LayerParams<Real>> layers;
    Mat<Real> lnf_g, lnf_b;
    Mat<Real> unembed;  // [d, V]
    bool frozen = true;

    template <typename F>
    void for_each_param(F&& fn) {
        fn("embed", embed);
        fn("pos_embed", pos_embed);
        for (size_t l = 0; l < layers.size(); l++) {
            std::string p = "layers." + std::to_string(l) + ".";
            auto& lp = layers[l];
            fn(p + "ln1_g", lp.ln1_g);
            fn(p + "ln1_b", lp.ln1_b);
            fn(p + "qkv_w", lp.qkv_w);
            fn(p + "qkv_b", lp.qkv_b);
            fn(p + "out_w", lp.out_w);
            fn(p + "out_b", lp.out_b);
            fn(p + "ln2_g", lp.ln2_g);
            fn(p + "ln2_b", lp.ln2_b);
            fn(p + "mlp_w1", lp.mlp_w1);
            fn(p + "mlp_b1", lp.mlp_b1);
            fn(p + "mlp_w2", lp.mlp_w2);
            fn(p + "mlp_b2", lp.mlp_b2);
        }
        fn("lnf_g", lnf_g);
        fn("lnf_b", lnf_b);
        fn("unembed", unembed);
    }
    template <typename F>
    void for_each_param(F&& fn) const {
        const_cast<ModelParams*>(this)->for_each_param(
            [&](const std::string& name, const Mat<Real>& m) { fn(name, m); });
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for_each_param([&](const std::string&, const Mat<Real>& m) {
            h = fnv1a64(m.data.data(), m.data.size() * sizeof(Real), h);
        });
        return h;
    }
};

template <typename Real>
ModelParams<Real> init_model(const ModelConfig& config) {
    config.validate();
    ModelParams<Real> p;
    p.config = config;
    int d = config.d_model;
    Rng root(config.seed);
    auto fill_normal = [&](Mat<Real>& m, const std::string& name, double std_dev) {
        Rng r = root.derive(name);
        for (auto& v : m.data) v = Real(r.normal() * std_dev);
    };
    auto ones = [](Mat<Real>& m) { std::fill(m.data.begin(), m.data.end(), Real(1)); };

    double resid_std = 0.02 / std::sqrt(2.0 * config.n_layers);
    p.embed = Mat<Real>(config.vocab_size, d);
    fill_normal(p.embed, "embed", 0.02);
    p.pos_embed = Mat<Real>(config.max_seq_len, d);
    fill_normal(p.pos_embed, "pos_embed", 0.02);
    for (int l = 0; l < config.n_layers; l++) {
        LayerParams<Real> lp;
        lp.ln1_g = Mat<Real>(1, d);
        ones(lp.ln1_g);
        lp.ln1_b = Mat<Real>(1, d);
        lp.ln2_g = Mat<Real>(1, d);
        ones(lp.ln2_g);
        lp.ln2_b = Mat<Real>(1, d);
        lp.qkv_w = Mat<Real>(d, 3 * d);
        fill_normal(lp.qkv_w, "qkv_w." + std::to_string(l), 0.02);
        lp.qkv_b = Mat<Real>(1, 3 * d);
        lp.out_w = Mat<Real>(d, d);
        fill_normal(lp.out_w, "out_w." + std::to_string(l), resid_std);
        lp.out_b = Mat<Real>(1, d);
        lp.mlp_w1 = Mat<Real>(d, config.d_ff);
        fill_normal(lp.mlp_w1, "mlp_w1." + std::to_string(l), 0.02);
        lp.mlp_b1 = Mat<Real>(1, config.d_ff);
        lp.mlp_w2 = Mat<Real>(config.d_ff, d);
        fill_normal(lp.mlp_w2, "mlp_w2." + std::to_string(l), resid_std);
        lp.mlp_b2 = Mat<Real>(1, d);
        p.layers.push_back(std::move(lp));
    }
    p.lnf_g = Mat<Real>(1, d);
    ones(p.lnf_g);
    p.lnf_b = Mat<Real>(1, d);
    p.unembed = Mat<Real>(d, config.vocab_size);
    fill_normal(p.unembed, "unembed", 0.02);
    return p;
}

// ---------------------------------------------------------------------------
// raw forward
// ---------------------------------------------------------------------------

struct ForwardOptions {
    const TokenMask* mask = nullptr;          // stage keep vectors over original indices
    const PruneSchedule* schedule = nullptr;  // required when mask is set
    std::vector<int> tap_layers;              // pre-block hidden states to return
};

template <typename Real>
struct ForwardResult {
    Mat<Real> logits;            // [N, vocab]
    std::vector<Mat<Real>> taps; // aligned with tap_layers
};

namespace detail {

// One transformer block on `x` (rows = live tokens). `key_allowed`
// selects which keys may be attended (nullptr: all). `positions` give
// each live row's original position. Optionally captures per-layer K/V.
template <typename Real>
void block_forward(const ModelConfig& cfg, const LayerParams<Real>& lp, Mat<Real>& x,
                   const std::vector<uint8_t>* key_allowed, Mat<Real>* k_out = nullptr,
                   Mat<Real>* v_out = nullptr) {
    int n = x.rows, d = cfg.d_model, dh = cfg.head_dim();
    Real inv_sqrt = Real(1.0 / std::sqrt(static_cast<double>(dh)));

    Mat<Real> h(n, d);
    for (int i = 0; i < n; i++) {
        kern::layer_norm_row(x.row(i), h.row(i), d);
        for (int j = 0; j < d; j++) h.at(i, j) = h.at(i, j) * lp.ln1_g.at(0, j) + lp.ln1_b.at(0, j);
    }
    Mat<Real> qkv(n, 3 * d);
    kern::gemm<Real>(false, false, n, 3 * d, d, Real(1), h.data.data(), d, lp.qkv_w.data.data(),
                     3 * d, Real(0), qkv.data.data(), 3 * d);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < 3 * d; j++) qkv.at(i, j) += lp.qkv_b.at(0, j);

    if (k_out) {
        *k_out = Mat<Real>(n, d);
        *v_out = Mat<Real>(n, d);
        for (int i = 0; i < n; i++) {
            std::copy(qkv.row(i) + d, qkv.row(i) + 2 * d, k_out->row(i));
            std::copy(qkv.row(i) + 2 * d, qkv.row(i) + 3 * d, v_out->row(i));
        }
    }

    Mat<Real> attn(n, d);
    Mat<Real> scores(n, n);
    for (int hd = 0; hd < cfg.n_heads; hd++) {
        const Real* q = qkv.data.data() + hd * dh;
        const Real* k = qkv.data.data() + d + hd * dh;
        const Real* v = qkv.data.data() + 2 * d + hd * dh;
        kern::gemm<Real>(false, true, n, n, dh, inv_sqrt, q, 3 * d, k, 3 * d, Real(0),
                         scores.data.data(), n);
        for (int i = 0; i < n; i++) {
            Real* row = scores.row(i);
            if (key_allowed) {
                for (int j = 0; j <= i; j++)
                    if (!(*key_allowed)[j]) row[j] += Real(kAttnMaskValue);
            }
            kern::softmax_inplace(row, i + 1);
            std::fill(row + i + 1, row + n, Real(0));
        }
        kern::gemm<Real>(false, false, n, dh, n, Real(1), scores.data.data(), n, v, 3 * d, Real(0),
                         attn.data.data() + hd * dh, d);
    }

    Mat<Real> proj(n, d);
    kern::gemm<Real>(false, false, n, d, d, Real(1), attn.data.data(), d, lp.out_w.data.data(), d,
                     Real(0), proj.data.data(), d);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < d; j++) x.at(i, j) += proj.at(i, j) + lp.out_b.at(0, j);

    Mat<Real> h2(n, d);
    for (int i = 0; i < n; i++) {
        kern::layer_norm_row(x.row(i), h2.row(i), d);
        for (int j = 0; j < d; j++)
            h2.at(i, j) = h2.at(i, j) * lp.ln2_g.at(0, j) + lp.ln2_b.at(0, j);
    }
    Mat<Real> m1(n, cfg.d_ff);
    kern::gemm<Real>(false, false, n, cfg.d_ff, d, Real(1), h2.data.data(), d,
                     lp.mlp_w1.data.data(), cfg.d_ff, Real(0), m1.data.data(), cfg.d_ff);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < cfg.d_ff; j++) m1.at(i, j) = kern::gelu(m1.at(i, j) + lp.mlp_b1.at(0, j));
    Mat<Real> m2(n, d);
    kern::gemm<Real>(false, false, n, d, cfg.d_ff, Real(1), m1.data.data(), cfg.d_ff,
                     lp.mlp_w2.data.data(), d, Real(0), m2.data.data(), d);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < d; j++) x.at(i, j) += m2.at(i, j) + lp.mlp_b2.at(0, j);
}

template <typename Real>
Mat<Real> embed_tokens(const ModelParams<Real>& p, std::span<const int> tokens,
                       std::span<const int> positions) {
    const auto& cfg = p.config;
    int n = static_cast<int>(tokens.size());
    Mat<Real> x(n, cfg.d_model);
    for (int i = 0; i < n; i++) {
        int tok = tokens[i];
        int pos = positions[i];
        if (tok < 0 || tok >= cfg.vocab_size)
            throw std::invalid_argument("forward: token id out of range");
        if (pos < 0 || pos >= cfg.max_seq_len)
            throw std::invalid_argument("forward: position exceeds max_seq_len");
        for (int j = 0; j < cfg.d_model; j++)
            x.at(i, j) = p.embed.at(tok, j) + p.pos_embed.at(pos, j);
    }
    return x;
}

template <typename Real>
void final_head(const ModelParams<Real>& p, const Mat<Real>& x, Mat<Real>& logits) {
    const auto& cfg = p.config;
    int n = x.rows, d = cfg.d_model;
    Mat<Real> h(n, d);
    for (int i = 0; i < n; i++) {
        kern::layer_norm_row(x.row(i), h.row(i), d);
        for (int j = 0; j < d; j++) h.at(i, j) = h.at(i, j) * p.lnf_g.at(0, j) + p.lnf_b.at(0, j);
    }
    logits = Mat<Real>(n, cfg.vocab_size);
    kern::gemm<Real>(false, false, n, cfg.vocab_size, d, Real(1), h.data.data(), d,
                     p.unembed.data.data(), cfg.vocab_size, Real(0), logits.data.data(),
                     cfg.vocab_size);
}

}  // namespace detail

template <typename Real>
ForwardResult<Real> forward(const ModelParams<Real>& p, std::span<const int> tokens,
                            const ForwardOptions& opts = {}) {
    const auto& cfg = p.config;
    int n = static_cast<int>(tokens.size());
    if (n == 0) throw std::invalid_argument("forward: empty token sequence");
    if (n > cfg.max_seq_len) throw std::invalid_argument("forward: sequence exceeds max_seq_len");
    if (opts.mask) {
        if (!opts.schedule) throw std::invalid_argument("forward: mask given without schedule");
        if (opts.mask->n != n) throw std::invalid_argument("forward: mask length does not match N");
        if (opts.mask->n_stages() > opts.schedule->n_stages())
            throw std::invalid_argument("forward: more mask stages than schedule stages");
    }

    std::vector<int> positions(n);
    for (int i = 0; i < n; i++) positions[i] = i;
    Mat<Real> x = detail::embed_tokens(p, tokens, positions);

    ForwardResult<Real> out;
    std::vector<uint8_t> key_allowed(n, 1);
    bool any_masked = false;
    for (int l = 0; l < cfg.n_layers; l++) {
        if (opts.mask) {
            int s = opts.schedule->stage_at_layer(l);
            if (s >= 0 && s < opts.mask->n_stages()) {
                key_allowed = opts.mask->stage_keep[s];
                any_masked = true;
            }
        }
        for (int tl : opts.tap_layers)
            if (tl == l) out.taps.push_back(x);
        detail::block_forward(cfg, p.layers[l], x, any_masked ? &key_allowed : nullptr);
    }
    detail::final_head(p, x, out.logits);
    return out;
}

// ---------------------------------------------------------------------------
// KV cache and decode
// ---------------------------------------------------------------------------

template <typename Real>
struct KVCache {
    struct Layer {
        Mat<Real> k;  // [entries, d_model]
        Mat<Real> v;
        std::vector<int> positions;   // original positions, strictly increasing
        std::vector<double> mass;     // accumulated attention mass (heavy hitters)
        int prefill_entries = 0;      // entry count when prefill finished
    };
    std::vector<Layer> layers;
    int next_position = 0;  // original position of the next appended token

    int entries(int layer) const { return static_cast<int>(layers[layer].positions.size()); }
};

template <typename Real>
struct PrefillResult {
    Mat<Real> logits;  // rows = surviving tokens, in original order
    std::vector<int> kept;  // original positions of surviving tokens
    KVCache<Real> cache;
    TokenMask mask;
};

// Hierarchical scored pruning with physical removal. Scorers must carry
// one stage per schedule stage.
template <typename Real>
PrefillResult<Real> prefill_pruned(const ModelParams<Real>& p, std::span<const int> tokens,
                                   const PruneSchedule& schedule, const ScorerSet<Real>& scorers) {
    const auto& cfg = p.config;
    int n = static_cast<int>(tokens.size());
    if (n == 0) throw std::invalid_argument("prefill_pruned: empty token sequence");
    schedule.validate(cfg.n_layers);
    if (scorers.stages.size() < static_cast<size_t>(schedule.n_stages()))
        throw std::invalid_argument("prefill_pruned: scorer stages do not cover the schedule");

    PrefillResult<Real> out;
    out.mask = TokenMask(n);
    out.mask.protected_idx = protected_set(n, schedule.sink_count, schedule.local_fraction);

    std::vector<int> live(n);
    for (int i = 0; i < n; i++) live[i] = i;
    Mat<Real> x = detail::embed_tokens(p, tokens, live);
    out.cache.layers.resize(cfg.n_layers);
    out.cache.next_position = n;

    std::vector<uint8_t> is_protected(n, 0);
    for (int i : out.mask.protected_idx) is_protected[i] = 1;

    for (int l = 0; l < cfg.n_layers; l++) {
        int s = schedule.stage_at_layer(l);
        if (s >= 0) {
            // score live tokens on the pre-block hidden state
            Mat<Real> pi = score_tokens(x, scorers.stages[s]);
            std::vector<double> margins = keep_margins(pi);
            std::vector<int> live_prot;
            for (size_t li = 0; li < live.size(); li++)
                if (is_protected[live[li]]) live_prot.push_back(static_cast<int>(li));
            int want = std::max(static_cast<int>(std::ceil(schedule.stages[s].keep_ratio * n)),
                                static_cast<int>(out.mask.protected_idx.size()));
            auto kept_sub = select_topk_count(margins, want, live_prot);

            std::vector<int> new_live;
            Mat<Real> nx(static_cast<int>(kept_sub.size()), cfg.d_model);
            for (size_t r = 0; r < kept_sub.size(); r++) {
                new_live.push_back(live[kept_sub[r]]);
                std::copy(x.row(kept_sub[r]), x.row(kept_sub[r]) + cfg.d_model,
                          nx.row(static_cast<int>(r)));
            }
            std::vector<uint8_t> stage_vec(n, 0);
            for (int i : new_live) stage_vec[i] = 1;
            propagate_mask(out.mask, stage_vec);
            live = std::move(new_live);
            x = std::move(nx);
        }
        Mat<Real> k, v;
        detail::block_forward(cfg, p.layers[l], x, nullptr, &k, &v);
        out.cache.layers[l].k = std::move(k);
        out.cache.layers[l].v = std::move(v);
        out.cache.layers[l].positions = live;
        out.cache.layers[l].mass.assign(live.size(), 0.0);
        out.cache.layers[l].prefill_entries = static_cast<int>(live.size());
    }
    detail::final_head(p, x, out.logits);
    out.kept = live;
    return out;
}

// One autoregressive step against the cache; applies the eviction policy
// (if any) after appending the new entry. Returns next-token logits.
template <typename Real>
Mat<Real> decode_step(const ModelParams<Real>& p, KVCache<Real>& cache, int token,
                      const KVCachePolicy* policy = nullptr) {
    const auto& cfg = p.config;
    if (static_cast<int>(cache.layers.size()) != cfg.n_layers)
        throw std::invalid_argument("decode_step: cache layer count mismatch (" +
                                    std::to_string(cache.layers.size()) + " vs " +
                                    std::to_string(cfg.n_layers) + ")");
    int d = cfg.d_model, dh = cfg.head_dim();
    int pos = cache.next_position;
    std::vector<int> toks{token}, poss{pos};
    Mat<Real> x = detail::embed_tokens(p, toks, poss);

    for (int l = 0; l < cfg.n_layers; l++) {
        auto& cl = cache.layers[l];
        const auto& lp = p.layers[l];
        Mat<Real> h(1, d);
        kern::layer_norm_row(x.row(0), h.row(0), d);
        for (int j = 0; j < d; j++) h.at(0, j) = h.at(0, j) * lp.ln1_g.at(0, j) + lp.ln1_b.at(0, j);
        Mat<Real> qkv(1, 3 * d);
        kern::gemm<Real>(false, false, 1, 3 * d, d, Real(1), h.data.data(), d,
                         lp.qkv_w.data.data(), 3 * d, Real(0), qkv.data.data(), 3 * d);
        for (int j = 0; j < 3 * d; j++) qkv.at(0, j) += lp.qkv_b.at(0, j);

        // append the new entry before attending so the token sees itself
        int n0 = cl.k.rows;
        cl.k.data.insert(cl.k.data.end(), qkv.row(0) + d, qkv.row(0) + 2 * d);
        cl.v.data.insert(cl.v.data.end(), qkv.row(0) + 2 * d, qkv.row(0) + 3 * d);
        cl.k.rows = n0 + 1;
        cl.k.cols = d;
        cl.v.rows = n0 + 1;
        cl.v.cols = d;
        cl.positions.push_back(pos);
        cl.mass.push_back(0.0);
        int ne = n0 + 1;

        Real inv_sqrt = Real(1.0 / std::sqrt(static_cast<double>(dh)));
        Mat<Real> attn(1, d);
        std::vector<Real> row(ne);
        std::vector<double> step_weights(ne, 0.0);
        for (int hd = 0; hd < cfg.n_heads; hd++) {
            const Real* q = qkv.data.data() + hd * dh;
            for (int e = 0; e < ne; e++) {
                const Real* k = cl.k.row(e) + hd * dh;
                Real acc = 0;
                for (int j = 0; j < dh; j++) acc += q[j] * k[j];
                row[e] = acc * inv_sqrt;
            }
            kern::softmax_inplace(row.data(), ne);
            for (int e = 0; e < ne; e++) step_weights[e] += static_cast<double>(row[e]);
            Real* dst = attn.data.data() + hd * dh;
            std::fill(dst, dst + dh, Real(0));
            for (int e = 0; e < ne; e++) {
                const Real* v = cl.v.row(e) + hd * dh;
                for (int j = 0; j < dh; j++) dst[j] += row[e] * v[j];
            }
        }
        accumulate_attention(cl.mass, step_weights);

        Mat<Real> proj(1, d);
        kern::gemm<Real>(false, false, 1, d, d, Real(1), attn.data.data(), d,
                         lp.out_w.data.data(), d, Real(0), proj.data.data(), d);
        for (int j = 0; j < d; j++) x.at(0, j) += proj.at(0, j) + lp.out_b.at(0, j);

        Mat<Real> h2(1, d);
        kern::layer_norm_row(x.row(0), h2.row(0), d);
        for (int j = 0; j < d; j++)
            h2.at(0, j) = h2.at(0, j) * lp.ln2_g.at(0, j) + lp.ln2_b.at(0, j);
        Mat<Real> m1(1, cfg.d_ff);
        kern::gemm<Real>(false, false, 1, cfg.d_ff, d, Real(1), h2.data.data(), d,
                         lp.mlp_w1.data.data(), cfg.d_ff, Real(0), m1.data.data(), cfg.d_ff);
        for (int j = 0; j < cfg.d_ff; j++) m1.at(0, j) = kern::gelu(m1.at(0, j) + lp.mlp_b1.at(0, j));
        Mat<Real> m2(1, d);
        kern::gemm<Real>(false, false, 1, d, cfg.d_ff, Real(1), m1.data.data(), cfg.d_ff,
                         lp.mlp_w2.data.data(), d, Real(0), m2.data.data(), d);
        for (int j = 0; j < d; j++) x.at(0, j) += m2.at(0, j) + lp.mlp_b2.at(0, j);
    }
    cache.next_position = pos + 1;

    if (policy && policy->kind != KVPolicyKind::kNone) {
        for (int l = 0; l < cfg.n_layers; l++) evict_cache_layer(*policy, cache, l);
    }

    Mat<Real> logits;
    detail::final_head(p, x, logits);
    return logits;
}

// Apply the policy to one cache layer. The budget is derived from the
// layer's post-pruning prefill entry count the first time eviction runs;
// callers that want a different base can pass it explicitly.
template <typename Real>
void evict_cache_layer(const KVCachePolicy& policy, KVCache<Real>& cache, int layer,
                       int budget_override = -1) {
    auto& cl = cache.layers[layer];
    int budget = budget_override > 0 ? budget_override : derive_budget(policy, cl.prefill_entries);
    int ne = static_cast<int>(cl.positions.size());
    if (ne <= budget) return;
    auto keep = evict_keep_set(policy, budget, cl.positions, cl.mass);
    int d = cl.k.cols;
    Mat<Real> nk(static_cast<int>(keep.size()), d), nv(static_cast<int>(keep.size()), d);
    std::vector<int> np;
    std::vector<double> nm;
    for (size_t r = 0; r < keep.size(); r++) {
        std::copy(cl.k.row(keep[r]), cl.k.row(keep[r]) + d, nk.row(static_cast<int>(r)));
        std::copy(cl.v.row(keep[r]), cl.v.row(keep[r]) + d, nv.row(static_cast<int>(r)));
        np.push_back(cl.positions[keep[r]]);
        nm.push_back(cl.mass[keep[r]]);
    }
    cl.k = std::move(nk);
    cl.v = std::move(nv);
    cl.positions = std::move(np);
    cl.mass = std::move(nm);
}

}  // namespace sdtp
