#include "sdtp/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace sdtp {

void PruneSchedule::validate(int n_layers) const {
    int prev_layer = -1;
    double prev_ratio = 1.0 + 1e-12;
    for (const auto& st : stages) {
        if (st.layer <= prev_layer)
            throw std::invalid_argument("schedule: stage layers must be strictly increasing");
        if (st.layer >= n_layers)
            throw std::invalid_argument("schedule: stage layer " + std::to_string(st.layer) +
                                        " is beyond the last layer (" + std::to_string(n_layers - 1) +
                                        ")");
        if (!(st.keep_ratio > 0.0) || st.keep_ratio > 1.0)
            throw std::invalid_argument("schedule: keep ratio must lie in (0, 1]");
        if (st.keep_ratio >= prev_ratio && !(stages.size() == 1 && st.keep_ratio == 1.0))
            throw std::invalid_argument("schedule: cumulative keep ratios must strictly decrease");
        prev_layer = st.layer;
        prev_ratio = st.keep_ratio;
    }
    if (sink_count < 0) throw std::invalid_argument("schedule: sink_count must be >= 0");
    if (local_fraction < 0.0 || local_fraction > 1.0)
        throw std::invalid_argument("schedule: local_fraction must lie in [0, 1]");
}

PruneSchedule build_schedule(int S, double r, int start_layer, int layer_step, int n_layers,
                             int sink_count, double local_fraction) {
    if (S < 1) throw std::invalid_argument("build_schedule: S must be >= 1");
    if (!(r > 0.0) || r > 1.0) throw std::invalid_argument("build_schedule: r must lie in (0, 1]");
    if (start_layer < 0 || layer_step < 1)
        throw std::invalid_argument("build_schedule: invalid start layer or step");
    int last = start_layer + (S - 1) * layer_step;
    if (last >= n_layers) {
        int feasible = start_layer < n_layers ? (n_layers - 1 - start_layer) / layer_step + 1 : 0;
        throw std::invalid_argument(
            "build_schedule: stage layers overflow the network (last stage at layer " +
            std::to_string(last) + ", model has " + std::to_string(n_layers) +
            " layers); largest feasible S is " + std::to_string(feasible));
    }
    PruneSchedule sched;
    sched.sink_count = sink_count;
    sched.local_fraction = local_fraction;
    double ratio = 1.0;
    for (int i = 0; i < S; i++) {
        ratio *= r;
        sched.stages.push_back({start_layer + i * layer_step, ratio});
    }
    sched.validate(n_layers);
    return sched;
}

std::vector<int> protected_set(int n, int sink_count, double local_fraction) {
    if (n < 1) throw std::invalid_argument("protected_set: n must be >= 1");
    std::vector<uint8_t> keep(n, 0);
    for (int i = 0; i < std::min(sink_count, n); i++) keep[i] = 1;
    int local = static_cast<int>(std::ceil(local_fraction * n));
    for (int i = std::max(0, n - local); i < n; i++) keep[i] = 1;
    std::vector<int> out;
    for (int i = 0; i < n; i++)
        if (keep[i]) out.push_back(i);
    return out;
}

std::vector<int> select_topk_count(std::span<const double> keep_scores, int k,
                                   std::span<const int> protected_idx) {
    int n = static_cast<int>(keep_scores.size());
    for (double s : keep_scores)
        if (!std::isfinite(s)) throw std::invalid_argument("select_topk: non-finite score");
    std::vector<uint8_t> is_protected(n, 0);
    for (int i : protected_idx) {
        if (i < 0 || i >= n) throw std::invalid_argument("select_topk: protected index out of range");
        is_protected[i] = 1;
    }
    int n_protected = 0;
    for (uint8_t p : is_protected) n_protected += p;

    k = std::max(k, n_protected);
    k = std::min(k, n);

    std::vector<int> rest;
    rest.reserve(n - n_protected);
    for (int i = 0; i < n; i++)
        if (!is_protected[i]) rest.push_back(i);
    // higher score first; ties keep the earlier token
    std::stable_sort(rest.begin(), rest.end(),
                     [&](int a, int b) { return keep_scores[a] > keep_scores[b]; });

    std::vector<int> kept;
    kept.reserve(k);
    for (int i = 0; i < n; i++)
        if (is_protected[i]) kept.push_back(i);
    for (int i = 0; i < k - n_protected && i < static_cast<int>(rest.size()); i++)
        kept.push_back(rest[i]);
    std::sort(kept.begin(), kept.end());
    return kept;
}

std::vector<int> select_topk(std::span<const double> keep_scores, double cumulative_ratio,
                             std::span<const int> protected_idx) {
    int k = static_cast<int>(std::ceil(cumulative_ratio * static_cast<double>(keep_scores.size())));
    return select_topk_count(keep_scores, k, protected_idx);
}

void propagate_mask(TokenMask& mask, std::span<const uint8_t> stage_vector) {
    if (static_cast<int>(stage_vector.size()) != mask.n)
        throw std::invalid_argument("propagate_mask: length mismatch (" +
                                    std::to_string(stage_vector.size()) + " vs " +
                                    std::to_string(mask.n) + ")");
    std::vector<uint8_t> next(stage_vector.begin(), stage_vector.end());
    if (!mask.stage_keep.empty()) {
        const auto& prev = mask.stage_keep.back();
        for (int i = 0; i < mask.n; i++) next[i] = next[i] && prev[i];
    }
    for (int i : mask.protected_idx)
        if (i >= 0 && i < mask.n) next[i] = 1;
    mask.stage_keep.push_back(std::move(next));
}

}  // namespace sdtp
