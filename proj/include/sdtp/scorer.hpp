#pragma once

// Per-stage token scorers: two-layer MLP (d_model -> d_hidden -> 2 logits,
// GELU in between). Column 0 is the keep logit, column 1 the drop logit.
// The keep score used for top-k selection is the logit margin, which is
// monotone in the keep probability.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "sdtp/common.hpp"
#include "sdtp/kernels.hpp"
#include "sdtp/tensor.hpp"

namespace sdtp {

template <typename Real>
struct StageScorer {
    Mat<Real> w1;  // [d_model, d_hidden]
    Mat<Real> b1;  // [1, d_hidden]
    Mat<Real> w2;  // [d_hidden, 2]
    Mat<Real> b2;  // [1, 2]
};

template <typename Real>
struct ScorerSet {
    int d_model = 0;
    int d_hidden = 0;
    std::vector<StageScorer<Real>> stages;

    // forward+backward cost of scoring one token, in FLOPs (2 per MAC)
    double flops_per_token() const {
        return 2.0 * (static_cast<double>(d_model) * d_hidden + static_cast<double>(d_hidden) * 2);
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& st : stages) {
            for (const Mat<Real>* m : {&st.w1, &st.b1, &st.w2, &st.b2})
                h = fnv1a64(m->data.data(), m->data.size() * sizeof(Real), h);
        }
        return h;
    }

    template <typename F>
    void for_each_param(F&& fn) {
        for (size_t s = 0; s < stages.size(); s++) {
            std::string p = "scorer." + std::to_string(s) + ".";
            fn(p + "w1", stages[s].w1);
            fn(p + "b1", stages[s].b1);
            fn(p + "w2", stages[s].w2);
            fn(p + "b2", stages[s].b2);
        }
    }
};

// Build scorers for `n_stages` stages. If model_flops_per_token > 0 the
// scorer budget rule (parameter FLOPs per token below 1% of the base
// model's per-token FLOPs) is enforced here, at construction.
template <typename Real>
ScorerSet<Real> init_scorers(int d_model, int n_stages, uint64_t seed,
                             double model_flops_per_token = 0.0, int d_hidden = 0) {
    if (d_model < 1 || n_stages < 0) throw std::invalid_argument("init_scorers: bad dimensions");
    ScorerSet<Real> out;
    out.d_model = d_model;
    out.d_hidden = d_hidden > 0 ? d_hidden : std::max(1, d_model / 2);
    if (model_flops_per_token > 0.0 &&
        out.flops_per_token() >= 0.01 * model_flops_per_token) {
        throw std::invalid_argument("init_scorers: scorer cost " +
                                    std::to_string(out.flops_per_token()) +
                                    " FLOPs/token breaches 1% of the model's " +
                                    std::to_string(model_flops_per_token));
    }
    Rng root(seed);
    for (int s = 0; s < n_stages; s++) {
        StageScorer<Real> st;
        st.w1 = Mat<Real>(d_model, out.d_hidden);
        st.b1 = Mat<Real>(1, out.d_hidden);
        st.w2 = Mat<Real>(out.d_hidden, 2);
        st.b2 = Mat<Real>(1, 2);
        Rng r1 = root.derive("scorer.w1", s);
        for (auto& v : st.w1.data) v = Real(r1.normal() * 0.02);
        Rng r2 = root.derive("scorer.w2", s);
        for (auto& v : st.w2.data) v = Real(r2.normal() * 0.02);
        out.stages.push_back(std::move(st));
    }
    return out;
}

// pi = MLP(GELU(MLP(x))) on raw hidden states; rejects non-finite input.
template <typename Real>
Mat<Real> score_tokens(const Mat<Real>& hidden, const StageScorer<Real>& sc) {
    for (Real v : hidden.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("score_tokens: non-finite hidden state");
    int n = hidden.rows;
    int dh = sc.w1.cols;
    Mat<Real> h(n, dh);
    kern::gemm<Real>(false, false, n, dh, hidden.cols, Real(1), hidden.data.data(), hidden.cols,
                     sc.w1.data.data(), dh, Real(0), h.data.data(), dh);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < dh; j++) h.at(i, j) = kern::gelu(h.at(i, j) + sc.b1.at(0, j));
    Mat<Real> pi(n, 2);
    kern::gemm<Real>(false, false, n, 2, dh, Real(1), h.data.data(), dh, sc.w2.data.data(), 2,
                     Real(0), pi.data.data(), 2);
    for (int i = 0; i < n; i++) {
        pi.at(i, 0) += sc.b2.at(0, 0);
        pi.at(i, 1) += sc.b2.at(0, 1);
    }
    return pi;
}

// Keep-logit margin per token (selection score at inference).
template <typename Real>
std::vector<double> keep_margins(const Mat<Real>& pi) {
    std::vector<double> out(pi.rows);
    for (int i = 0; i < pi.rows; i++)
        out[i] = static_cast<double>(pi.at(i, 0)) - static_cast<double>(pi.at(i, 1));
    return out;
}

// Taped scorer application; `leaves` receives the four parameter tensors
// in registration order so the trainer can build its optimizer over them.
template <typename Real>
ad::Tensor<Real> score_tokens_taped(ad::Tape<Real>& tape, const ad::Tensor<Real>& hidden,
                                    const StageScorer<Real>& sc, bool train_scorer,
                                    std::vector<ad::Tensor<Real>>* leaves = nullptr) {
    auto w1 = tape.leaf({sc.w1.rows, sc.w1.cols}, sc.w1.data, train_scorer);
    auto b1 = tape.leaf({sc.b1.cols}, sc.b1.data, train_scorer);
    auto w2 = tape.leaf({sc.w2.rows, sc.w2.cols}, sc.w2.data, train_scorer);
    auto b2 = tape.leaf({sc.b2.cols}, sc.b2.data, train_scorer);
    if (leaves) {
        leaves->push_back(w1);
        leaves->push_back(b1);
        leaves->push_back(w2);
        leaves->push_back(b2);
    }
    auto h = tape.gelu(tape.add_rowvec(tape.matmul(hidden, w1), b1));
    return tape.add_rowvec(tape.matmul(h, w2), b2);
}

// Hard straight-through Gumbel sample of a keep vector (raw, for
// inference-time statistics and unit tests; the taped twin lives on Tape).
template <typename Real>
std::vector<uint8_t> sample_mask(const Mat<Real>& pi, double temperature,
                                 std::span<const int> protected_idx, Rng& rng) {
    if (!(temperature > 0)) throw std::invalid_argument("sample_mask: temperature must be > 0");
    int n = pi.rows;
    std::vector<uint8_t> prot(n, 0);
    for (int i : protected_idx)
        if (i >= 0 && i < n) prot[i] = 1;
    std::vector<uint8_t> keep(n, 0);
    for (int i = 0; i < n; i++) {
        double a = static_cast<double>(pi.at(i, 0)) + rng.gumbel();
        double b = static_cast<double>(pi.at(i, 1)) + rng.gumbel();
        keep[i] = (prot[i] || a >= b) ? 1 : 0;
    }
    return keep;
}

}  // namespace sdtp
