#pragma once

// Gradient-times-input token attribution and the sparsity statistics
// derived from it. The attribution scalar is the summed (teacher-forced)
// next-token cross entropy of the sequence; per-stage scores reduce
// (d(loss)/d(hidden) * hidden) over the hidden dimension at each stage's
// tap point.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdtp/schedule.hpp"
#include "sdtp/taped_model.hpp"

namespace sdtp {

enum class SaliencyMode { kAbsDot, kDot, kL1 };

inline SaliencyMode parse_saliency_mode(const std::string& s) {
    if (s == "abs_dot") return SaliencyMode::kAbsDot;
    if (s == "dot") return SaliencyMode::kDot;
    if (s == "l1") return SaliencyMode::kL1;
    throw std::invalid_argument("saliency mode must be abs_dot|dot|l1, got '" + s + "'");
}

inline const char* saliency_mode_name(SaliencyMode m) {
    switch (m) {
        case SaliencyMode::kAbsDot: return "abs_dot";
        case SaliencyMode::kDot: return "dot";
        default: return "l1";
    }
}

struct SaliencyMap {
    int stage_layer = 0;
    SaliencyMode mode = SaliencyMode::kAbsDot;
    std::vector<double> scores;  // one per token
    bool normalized = false;
    bool degenerate = false;  // all scores equal (or all zero) before normalization
    double raw_min = 0.0;     // normalization metadata
    double raw_max = 0.0;
};

// Reduce per-token (grad, x) rows to a scalar importance score.
template <typename Real>
std::vector<double> token_scores(std::span<const Real> grad, std::span<const Real> x, int n, int d,
                                 SaliencyMode mode) {
    if (grad.size() != x.size() || grad.size() != static_cast<size_t>(n) * d)
        throw std::invalid_argument("token_scores: shape mismatch");
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < n; i++) {
        double acc = 0.0;
        for (int j = 0; j < d; j++) {
            double t = static_cast<double>(grad[static_cast<size_t>(i) * d + j]) *
                       static_cast<double>(x[static_cast<size_t>(i) * d + j]);
            acc += mode == SaliencyMode::kL1 ? std::abs(t) : t;
        }
        out[i] = mode == SaliencyMode::kAbsDot ? std::abs(acc) : acc;
    }
    return out;
}

// Per-sequence min-max normalization to [0, 1]. A constant map is flagged
// degenerate: constant nonzero maps collapse to 0.5, all-zero maps stay
// zero (the MSE target consumer substitutes uniform 0.5 either way).
SaliencyMap normalize(const SaliencyMap& map);

struct SparsityStats {
    double threshold_frac = 0.10;
    std::vector<int> stage_layers;
    std::vector<int64_t> important;
    std::vector<int64_t> redundant;
    // persistence[s][t]: fraction of stage-s redundant tokens still
    // redundant at stage t (NaN when stage s has none)
    std::vector<std::vector<double>> persistence;
};

SparsityStats sparsity_stats(std::span<const SaliencyMap> maps, double threshold_frac = 0.10);

// Full-sequence attribution: one taped forward (no masks), one backward
// from the summed next-token cross entropy, then a token_scores reduction
// at every schedule stage tap. labels[i] < 0 excludes position i.
template <typename Real>
std::vector<SaliencyMap> attribute(const ModelParams<Real>& params, std::span<const int> tokens,
                                   std::span<const int> labels, const PruneSchedule& schedule,
                                   SaliencyMode mode = SaliencyMode::kAbsDot) {
    if (tokens.size() != labels.size())
        throw std::invalid_argument("attribute: token/label length mismatch");
    int n = static_cast<int>(tokens.size());
    params.config.validate();
    schedule.validate(params.config.n_layers);

    ad::Tape<Real> tape;
    TapedOptions opts;
    for (const auto& st : schedule.stages) opts.tap_layers.push_back(st.layer);
    opts.want_tap_grads = true;
    auto fwd = forward_taped(tape, params, tokens, &schedule, nullptr, opts);

    std::vector<uint8_t> include(n, 1);
    auto loss = tape.cross_entropy_rows(fwd.logits, labels, include, /*mean=*/false);
    tape.backward(loss);

    std::vector<SaliencyMap> out;
    for (size_t s = 0; s < fwd.taps.size(); s++) {
        SaliencyMap m;
        m.stage_layer = schedule.stages[s].layer;
        m.mode = mode;
        m.scores = token_scores<Real>(fwd.taps[s].grad(), fwd.taps[s].values(), n,
                                      params.config.d_model, mode);
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace sdtp
