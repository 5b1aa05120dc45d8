#pragma once

// Analytic FLOPs and memory model for transformer prefill/decode with and
// without a pruning schedule, plus a wall-clock micro benchmark for the
// toy model.
//
// Counting convention (reported in every FlopsReport): 2 FLOPs per
// multiply-accumulate; attention costs 2*n^2*d for the score matmuls plus
// 2*n^2*d for the value mix per layer, with no causal-masking discount.
// Linear work per token is the parameter count of the touched matrices.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sdtp/schedule.hpp"

namespace sdtp {

struct ArchProfile {
    std::string name;
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int n_kv_heads = 0;  // < n_heads for grouped-query attention
    int d_ff = 0;
    int vocab_size = 0;
    bool gated_mlp = false;       // 3 MLP matrices instead of 2
    bool tied_embedding = false;  // unembedding shares the input table
    double supplied_params = 0.0;  // from the model card; 0 = derive only

    int head_dim() const { return d_model / n_heads; }
    int d_kv() const { return head_dim() * n_kv_heads; }

    double derived_params() const;
    double params() const { return supplied_params > 0 ? supplied_params : derived_params(); }
    // per-layer linear MACs per token (q, kv, out, mlp)
    double layer_macs() const;
    void validate() const;
};

// Built-in profiles: "mistral-7b", "llama2-7b", "bloom-7b", "toy".
ArchProfile builtin_profile(const std::string& name);
std::vector<std::string> builtin_profile_names();

struct ScorerCost {
    int d_hidden = 0;  // 0 -> d_model / 2
    double macs_per_token(int d_model) const {
        int h = d_hidden > 0 ? d_hidden : d_model / 2;
        return static_cast<double>(d_model) * h + 2.0 * h;
    }
};

struct FlopsBreakdown {
    double linear = 0.0;
    double attention = 0.0;
    double unembed = 0.0;
    double scorer = 0.0;
    double total() const { return linear + attention + unembed + scorer; }
};

struct FlopsReport {
    std::string convention = "2 FLOPs/MAC; attention 4*n^2*d per layer; causal not discounted";
    int64_t seq_len = 0;
    int64_t gen_len = 0;
    FlopsBreakdown prefill_base;
    FlopsBreakdown prefill_sdtp;
    double decode_base = 0.0;
    double decode_sdtp = 0.0;
    double memory_base = 0.0;  // bytes
    double memory_sdtp = 0.0;

    double prefill_ratio() const { return prefill_sdtp.total() / prefill_base.total(); }
    double e2e_base() const { return prefill_base.total() + decode_base; }
    double e2e_sdtp() const { return prefill_sdtp.total() + decode_sdtp; }
    double e2e_ratio() const { return e2e_sdtp() / e2e_base(); }
    double memory_savings() const { return 1.0 - memory_sdtp / memory_base; }
};

// Cumulative keep ratio per layer from the schedule (no protection floor).
std::vector<double> expand_schedule_ratios(const PruneSchedule& schedule, int n_layers);

// Per-layer surviving token count: max(ceil(ratio*n), protected floor).
std::vector<int64_t> tokens_per_layer(const PruneSchedule& schedule, int n_layers, int64_t n);

double flops_prefill(const ArchProfile& profile, int64_t n, const PruneSchedule* schedule = nullptr,
                     const ScorerCost& scorer = {}, FlopsBreakdown* breakdown = nullptr);

double flops_end2end(const ArchProfile& profile, int64_t n, int64_t gen_len,
                     const PruneSchedule* schedule = nullptr, const ScorerCost& scorer = {},
                     std::optional<double> kv_budget_fraction = std::nullopt);

// weights + KV cache of the final kept tokens + a small activation
// high-water term (the peak sits before the first pruning stage, so the
// schedule does not shrink it).
double memory_estimate(const ArchProfile& profile, int64_t n, const PruneSchedule* schedule,
                       int precision_bytes);

FlopsReport profile_report(const ArchProfile& profile, int64_t n, int64_t gen_len,
                           const PruneSchedule& schedule, int precision_bytes = 2);

}  // namespace sdtp
