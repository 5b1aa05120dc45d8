#pragma once

// Tape-recorded transformer forward, mirroring the raw path in model.hpp
// op for op. Supports:
//   - plain forward (pretraining, attribution, gradient checks);
//   - straight-through Gumbel stage masks applied via attention masking,
//     i.e. dropped keys are excluded from the softmax normalization while
//     every token row keeps flowing (no physical removal during training).

#include <span>
#include <string>
#include <vector>

#include "sdtp/model.hpp"
#include "sdtp/scorer.hpp"
#include "sdtp/tensor.hpp"

namespace sdtp {

template <typename Real>
struct TapedStage {
    int layer = 0;
    ad::Tensor<Real> tap;        // pre-block hidden state [N, d]
    ad::Tensor<Real> pi;         // scorer logits [N, 2]
    ad::Tensor<Real> keep_prob;  // [N]
    ad::Tensor<Real> margin;     // keep-logit margin [N]
    ad::Tensor<Real> mask_st;    // hard straight-through stage sample [N]
    ad::Tensor<Real> cum_mask;   // product of stage samples so far [N]
    std::vector<uint8_t> alive_at_entry;  // hard cumulative mask before this stage
    std::vector<uint8_t> hard_keep;       // hard cumulative mask after this stage
};

template <typename Real>
struct TapedForward {
    ad::Tensor<Real> logits;
    std::vector<ad::Tensor<Real>> taps;  // one per requested tap layer
    std::vector<TapedStage<Real>> stages;
    std::vector<std::pair<std::string, ad::Tensor<Real>>> base_leaves;
    std::vector<ad::Tensor<Real>> scorer_leaves;  // w1,b1,w2,b2 per stage
};

struct TapedOptions {
    bool train_base = false;     // base parameters require grad
    bool train_scorers = false;  // scorer parameters require grad
    bool gumbel_mask = false;    // sample and apply straight-through stage masks
    double tau = 1.0;
    Rng* rng = nullptr;               // Gumbel noise source (required with gumbel_mask)
    std::vector<int> tap_layers;      // extra pre-block taps to expose
    bool want_tap_grads = false;      // make taps gradient roots (attribution)
};

template <typename Real>
TapedForward<Real> forward_taped(ad::Tape<Real>& tape, const ModelParams<Real>& p,
                                 std::span<const int> tokens, const PruneSchedule* schedule,
                                 const ScorerSet<Real>* scorers, const TapedOptions& opts) {
    const auto& cfg = p.config;
    int n = static_cast<int>(tokens.size());
    if (n == 0) throw std::invalid_argument("forward_taped: empty token sequence");
    if (n > cfg.max_seq_len)
        throw std::invalid_argument("forward_taped: sequence exceeds max_seq_len");
    if (opts.gumbel_mask && (!schedule || !scorers || !opts.rng))
        throw std::invalid_argument("forward_taped: gumbel masking needs schedule+scorers+rng");

    TapedForward<Real> out;
    int d = cfg.d_model, dh = cfg.head_dim();

    auto base = [&](const std::string& name, const Mat<Real>& m) -> ad::Tensor<Real> {
        ad::Shape shape = m.rows == 1 ? ad::Shape{m.cols} : ad::Shape{m.rows, m.cols};
        auto t = tape.leaf(shape, m.data, opts.train_base);
        out.base_leaves.emplace_back(name, t);
        return t;
    };

    auto embed_t = base("embed", p.embed);
    auto pos_t = base("pos_embed", p.pos_embed);
    std::vector<int> positions(n);
    for (int i = 0; i < n; i++) positions[i] = i;
    auto x = tape.add(tape.embedding_gather(embed_t, tokens),
                      tape.gather_rows(pos_t, positions));

    std::vector<uint8_t> prot(n, 0);
    std::vector<uint8_t> alive(n, 1);
    if (schedule) {
        for (int i : protected_set(n, schedule->sink_count, schedule->local_fraction)) prot[i] = 1;
    }
    ad::Tensor<Real> cum_mask;  // invalid until the first stage fires

    for (int l = 0; l < cfg.n_layers; l++) {
        for (int tl : opts.tap_layers) {
            if (tl == l) {
                if (opts.want_tap_grads) tape.want_grad(x);
                out.taps.push_back(x);
            }
        }
        if (opts.gumbel_mask) {
            int s = schedule->stage_at_layer(l);
            if (s >= 0) {
                TapedStage<Real> st;
                st.layer = l;
                st.tap = x;
                st.alive_at_entry = alive;
                st.pi = score_tokens_taped(tape, x, scorers->stages[s], opts.train_scorers,
                                           &out.scorer_leaves);
                st.keep_prob = tape.keep_prob(st.pi);
                st.margin = tape.keep_margin(st.pi);
                std::vector<Real> noise(static_cast<size_t>(n) * 2);
                for (auto& v : noise) v = Real(opts.rng->gumbel());
                st.mask_st = tape.gumbel_keep_st(st.pi, noise, opts.tau, prot);
                cum_mask = cum_mask.valid() ? tape.mul(cum_mask, st.mask_st) : st.mask_st;
                st.cum_mask = cum_mask;
                auto mv = tape.vals(cum_mask);
                st.hard_keep.assign(n, 0);
                for (int i = 0; i < n; i++) st.hard_keep[i] = mv[i] > Real(0.5) ? 1 : 0;
                alive = st.hard_keep;
                out.stages.push_back(std::move(st));
            }
        }

        const auto& lp = p.layers[l];
        std::string pref = "layers." + std::to_string(l) + ".";
        auto ln1_g = base(pref + "ln1_g", lp.ln1_g);
        auto ln1_b = base(pref + "ln1_b", lp.ln1_b);
        auto qkv_w = base(pref + "qkv_w", lp.qkv_w);
        auto qkv_b = base(pref + "qkv_b", lp.qkv_b);
        auto out_w = base(pref + "out_w", lp.out_w);
        auto out_b = base(pref + "out_b", lp.out_b);
        auto ln2_g = base(pref + "ln2_g", lp.ln2_g);
        auto ln2_b = base(pref + "ln2_b", lp.ln2_b);
        auto mlp_w1 = base(pref + "mlp_w1", lp.mlp_w1);
        auto mlp_b1 = base(pref + "mlp_b1", lp.mlp_b1);
        auto mlp_w2 = base(pref + "mlp_w2", lp.mlp_w2);
        auto mlp_b2 = base(pref + "mlp_b2", lp.mlp_b2);

        auto h = tape.add_rowvec(tape.mul_rowvec(tape.layer_norm(x), ln1_g), ln1_b);
        auto qkv = tape.add_rowvec(tape.matmul(h, qkv_w), qkv_b);
        std::vector<ad::Tensor<Real>> heads;
        for (int hd = 0; hd < cfg.n_heads; hd++) {
            auto q = tape.slice_cols(qkv, hd * dh, dh);
            auto k = tape.slice_cols(qkv, d + hd * dh, dh);
            auto v = tape.slice_cols(qkv, 2 * d + hd * dh, dh);
            auto scores = tape.scale(tape.matmul_nt(q, k), 1.0 / std::sqrt(double(dh)));
            ad::Tensor<Real> probs = cum_mask.valid()
                                         ? tape.softmax_rows_weighted_causal(scores, cum_mask)
                                         : tape.softmax_rows(scores, /*causal=*/true);
            heads.push_back(tape.matmul(probs, v));
        }
        auto ctx = tape.concat_cols(std::span<const ad::Tensor<Real>>(heads));
        x = tape.add(x, tape.add_rowvec(tape.matmul(ctx, out_w), out_b));
        auto h2 = tape.add_rowvec(tape.mul_rowvec(tape.layer_norm(x), ln2_g), ln2_b);
        auto m1 = tape.gelu(tape.add_rowvec(tape.matmul(h2, mlp_w1), mlp_b1));
        x = tape.add(x, tape.add_rowvec(tape.matmul(m1, mlp_w2), mlp_b2));
    }

    auto lnf_g = base("lnf_g", p.lnf_g);
    auto lnf_b = base("lnf_b", p.lnf_b);
    auto unembed = base("unembed", p.unembed);
    auto hf = tape.add_rowvec(tape.mul_rowvec(tape.layer_norm(x), lnf_g), lnf_b);
    out.logits = tape.matmul(hf, unembed);
    return out;
}

}  // namespace sdtp
