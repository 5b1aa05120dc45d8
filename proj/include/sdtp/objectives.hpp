#pragma once

// Training losses: MSE alignment of keep probabilities with saliency
// targets, pairwise logistic ranking loss (per stage and summed),
// language-model cross entropy, the weighted total, and the rate
// constraint used by the pruning-rate-only baseline.
//
// Every loss exists twice: a plain value-level function (the unit-test
// surface and documentation of the formula) and a taped builder used in
// training. Both share the pair-enumeration logic so they cannot drift.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdtp/common.hpp"
#include "sdtp/kernels.hpp"
#include "sdtp/tensor.hpp"

namespace sdtp {

struct LossReport {
    double cls = 0.0;
    double mse = 0.0;
    double rank = 0.0;
    std::optional<double> ratio;
    double total = 0.0;
    std::vector<double> rank_per_stage;
    std::vector<int64_t> pair_count_per_stage;
    bool mse_empty_warning = false;  // a stage had no supervisable positions
};

struct LossWeights {
    double cls = 1.0;
    double mse = 1.0;
    double rank = 1.0;
    double ratio = 1.0;  // only applied when the ratio term is enabled
};

// ---------------------------------------------------------------------------
// ranking pairs
// ---------------------------------------------------------------------------

struct RankPairSet {
    std::vector<ad::RankPair> pairs;  // possibly subsampled
    int64_t total_pairs = 0;          // non-tied pairs before subsampling
    double scale = 1.0;               // total / sampled (unbiasedness factor)
};

// Enumerate non-tied pairs (i < j, sign(target_i - target_j) != 0) over
// included positions; subsample uniformly to `budget` pairs when there
// are more, scaling the loss by total/budget to stay unbiased.
inline RankPairSet make_rank_pairs(std::span<const double> target,
                                   std::span<const uint8_t> include, int64_t budget, Rng* rng) {
    int n = static_cast<int>(target.size());
    RankPairSet out;
    for (int i = 0; i < n; i++) {
        if (!include.empty() && !include[i]) continue;
        for (int j = i + 1; j < n; j++) {
            if (!include.empty() && !include[j]) continue;
            double d = target[i] - target[j];
            if (d == 0.0) continue;  // ties carry no ordering information
            out.pairs.push_back({i, j, d > 0 ? 1 : -1});
        }
    }
    out.total_pairs = static_cast<int64_t>(out.pairs.size());
    if (budget > 0 && out.total_pairs > budget) {
        if (!rng) throw std::invalid_argument("make_rank_pairs: subsampling requires an rng");
        // partial Fisher-Yates: the first `budget` entries become a
        // uniform sample without replacement
        for (int64_t i = 0; i < budget; i++) {
            int64_t j = i + static_cast<int64_t>(rng->below(out.pairs.size() - i));
            std::swap(out.pairs[i], out.pairs[j]);
        }
        out.pairs.resize(budget);
        out.scale = static_cast<double>(out.total_pairs) / static_cast<double>(budget);
    }
    return out;
}

// ---------------------------------------------------------------------------
// value-level losses
// ---------------------------------------------------------------------------

// mean of (keep_prob - target)^2 over included positions; empty inclusion
// contributes 0 and sets `empty_flag` when provided.
inline double mse_loss(std::span<const double> keep_prob, std::span<const double> target,
                       std::span<const uint8_t> include = {}, bool* empty_flag = nullptr) {
    if (keep_prob.size() != target.size())
        throw std::invalid_argument("mse_loss: length mismatch");
    double acc = 0.0;
    int64_t cnt = 0;
    for (size_t i = 0; i < keep_prob.size(); i++) {
        if (!include.empty() && !include[i]) continue;
        double d = keep_prob[i] - target[i];
        acc += d * d;
        cnt++;
    }
    if (cnt == 0) {
        if (empty_flag) *empty_flag = true;
        return 0.0;
    }
    return acc / static_cast<double>(cnt);
}

// sum over non-tied pairs of log(1 + exp(-(s_i - s_j) * sign(t_i - t_j)))
inline double ranking_loss_stage(std::span<const double> scores, std::span<const double> target,
                                 std::span<const uint8_t> include = {}, int64_t pair_budget = 0,
                                 Rng* rng = nullptr, int64_t* pair_count = nullptr) {
    if (scores.size() != target.size())
        throw std::invalid_argument("ranking_loss_stage: length mismatch");
    auto ps = make_rank_pairs(target, include, pair_budget, rng);
    if (pair_count) *pair_count = ps.total_pairs;
    double acc = 0.0;
    for (const auto& pr : ps.pairs) {
        double z = (scores[pr.i] - scores[pr.j]) * pr.sign;
        acc += kern::log1p_exp(-z);
    }
    return acc * ps.scale;
}

inline double ranking_loss_total(std::span<const std::pair<std::vector<double>, std::vector<double>>>
                                     per_stage,
                                 int64_t pair_budget = 0, Rng* rng = nullptr) {
    double acc = 0.0;
    for (const auto& [scores, target] : per_stage)
        acc += ranking_loss_stage(scores, target, {}, pair_budget, rng);
    return acc;
}

// mean negative log likelihood over included positions
inline double lm_cross_entropy(const Mat<double>& logits, std::span<const int> labels,
                               std::span<const uint8_t> include = {}) {
    if (static_cast<int>(labels.size()) != logits.rows)
        throw std::invalid_argument("lm_cross_entropy: label length mismatch");
    double acc = 0.0;
    int64_t cnt = 0;
    std::vector<double> row(logits.cols);
    for (int i = 0; i < logits.rows; i++) {
        if (!include.empty() && !include[i]) continue;
        if (labels[i] < 0) continue;
        if (labels[i] >= logits.cols)
            throw std::invalid_argument("lm_cross_entropy: label out of range");
        const double* src = logits.row(i);
        double mx = src[0];
        for (int j = 1; j < logits.cols; j++) mx = std::max(mx, src[j]);
        double z = 0.0;
        for (int j = 0; j < logits.cols; j++) z += std::exp(src[j] - mx);
        acc += std::log(z) + mx - src[labels[i]];
        cnt++;
    }
    if (cnt == 0) throw std::invalid_argument("lm_cross_entropy: all positions excluded");
    return acc / static_cast<double>(cnt);
}

// Sum of squared gaps between the mean soft keep mask and the target
// cumulative ratio, per stage (the DynamicViT-style rate constraint).
inline double ratio_loss(std::span<const std::vector<double>> stage_keep_probs,
                         std::span<const double> target_ratios) {
    if (stage_keep_probs.size() != target_ratios.size())
        throw std::invalid_argument("ratio_loss: stage count mismatch");
    double acc = 0.0;
    for (size_t s = 0; s < stage_keep_probs.size(); s++) {
        const auto& probs = stage_keep_probs[s];
        if (probs.empty()) continue;
        double mean = 0.0;
        for (double p : probs) mean += p;
        mean /= static_cast<double>(probs.size());
        double d = mean - target_ratios[s];
        acc += d * d;
    }
    return acc;
}

inline double total_loss(double cls, double mse, double rank,
                         std::optional<double> ratio = std::nullopt,
                         const LossWeights& w = {}) {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v))
            throw std::invalid_argument(std::string("total_loss: non-finite component '") + name +
                                        "'");
    };
    check(cls, "cls");
    check(mse, "mse");
    check(rank, "rank");
    double t = w.cls * cls + w.mse * mse + w.rank * rank;
    if (ratio.has_value()) {
        check(*ratio, "ratio");
        t += w.ratio * *ratio;
    }
    return t;
}

// ---------------------------------------------------------------------------
// taped builders (share the pair logic above)
// ---------------------------------------------------------------------------

template <typename Real>
ad::Tensor<Real> taped_ranking_stage(ad::Tape<Real>& tape, const ad::Tensor<Real>& margins,
                                     std::span<const double> target,
                                     std::span<const uint8_t> include, int64_t pair_budget,
                                     Rng* rng, int64_t* pair_count = nullptr) {
    auto ps = make_rank_pairs(target, include, pair_budget, rng);
    if (pair_count) *pair_count = ps.total_pairs;
    return tape.pairwise_logistic(margins, ps.pairs, ps.scale);
}

// (mean(keep_prob) - target_ratio)^2 as a tape scalar
template <typename Real>
ad::Tensor<Real> taped_ratio_stage(ad::Tape<Real>& tape, const ad::Tensor<Real>& keep_probs,
                                   double target_ratio) {
    auto gap = tape.add_scalar_const(tape.mean_all(keep_probs), -target_ratio);
    return tape.mul(gap, gap);
}

}  // namespace sdtp
