#pragma once

// Pruning schedule, protected-token rules, token masks and top-k
// selection. Everything here is plain index arithmetic shared by the
// training path (attention masking) and the inference path (physical
// removal).

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sdtp/common.hpp"

namespace sdtp {

struct PruneStage {
    int layer = 0;           // stage fires at the input of this layer
    double keep_ratio = 1.0; // cumulative: fraction of ORIGINAL tokens kept from here on
};

struct PruneSchedule {
    std::vector<PruneStage> stages;
    int sink_count = 4;
    double local_fraction = 0.10;

    int n_stages() const { return static_cast<int>(stages.size()); }
    bool empty() const { return stages.empty(); }

    // Stage index firing at `layer`, or -1.
    int stage_at_layer(int layer) const {
        for (int s = 0; s < n_stages(); s++)
            if (stages[s].layer == layer) return s;
        return -1;
    }

    // Cumulative keep ratio in force at `layer` (1.0 before the first stage).
    double ratio_at_layer(int layer) const {
        double r = 1.0;
        for (const auto& st : stages)
            if (st.layer <= layer) r = st.keep_ratio;
        return r;
    }

    double final_keep_ratio() const { return stages.empty() ? 1.0 : stages.back().keep_ratio; }

    void validate(int n_layers) const;
};

// Geometric schedule: stage i at layer start_layer + i * layer_step with
// cumulative ratio r^(i+1).
PruneSchedule build_schedule(int S, double r, int start_layer, int layer_step, int n_layers,
                             int sink_count = 4, double local_fraction = 0.10);

// Sink tokens plus the most recent ceil(local_fraction * n) positions.
std::vector<int> protected_set(int n, int sink_count = 4, double local_fraction = 0.10);

// Keep k = max(ceil(ratio * n), |protected|) indices: protected first,
// then the highest-scoring unprotected tokens; score ties keep the lower
// index. Result is sorted ascending.
std::vector<int> select_topk(std::span<const double> keep_scores, double cumulative_ratio,
                             std::span<const int> protected_idx);

// Same rule with an explicit target count (used when the ratio refers to
// a longer original sequence than the currently live one).
std::vector<int> select_topk_count(std::span<const double> keep_scores, int k,
                                   std::span<const int> protected_idx);

// Per-token keep state across stages. Stage vectors are monotone:
// once dropped, always dropped.
struct TokenMask {
    int n = 0;
    std::vector<std::vector<uint8_t>> stage_keep;  // one keep vector per applied stage
    std::vector<int> protected_idx;

    explicit TokenMask(int n_tokens = 0) : n(n_tokens) {}

    bool empty() const { return stage_keep.empty(); }
    int n_stages() const { return static_cast<int>(stage_keep.size()); }

    const std::vector<uint8_t>& current() const { return stage_keep.back(); }

    std::vector<int> kept_indices(int stage) const {
        std::vector<int> out;
        for (int i = 0; i < n; i++)
            if (stage_keep[stage][i]) out.push_back(i);
        return out;
    }

    int kept_count(int stage) const {
        int c = 0;
        for (int i = 0; i < n; i++) c += stage_keep[stage][i] ? 1 : 0;
        return c;
    }
};

// AND the new stage vector with the previous stage and append it.
// A fresh mask (no stages) treats the previous stage as all-keep.
void propagate_mask(TokenMask& mask, std::span<const uint8_t> stage_vector);

}  // namespace sdtp
