#pragma once

// KV-cache eviction policies for the decode phase. The heavy-hitter
// policy keeps sink entries, a recent window, and fills the remaining
// budget with the entries that accumulated the most attention mass.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sdtp {

enum class KVPolicyKind { kNone, kLocal, kHeavyHitter };

struct KVCachePolicy {
    KVPolicyKind kind = KVPolicyKind::kNone;
    double budget_fraction = 0.40;  // of the post-pruning prefill length
    double local_fraction = 0.10;   // recent share within the budget
    int sink_count = 4;

    static KVCachePolicy none() { return {}; }
    void validate() const;
};

KVCachePolicy parse_kv_policy(const std::string& text);  // "none" | "local:0.4" | "h2o:0.4"

// Absolute per-layer budget for a given prefill entry count. Throws when
// the derived budget cannot honor sink + most-recent retention.
int derive_budget(const KVCachePolicy& policy, int prefill_entries);

// Element-wise addition of one decode step's attention weights into the
// per-entry accumulated masses. Lengths must agree.
void accumulate_attention(std::vector<double>& mass, std::span<const double> weights);

// Indices (ascending) of the entries to KEEP, per the policy rule.
// `positions` are original token positions, strictly increasing.
std::vector<int> evict_keep_set(const KVCachePolicy& policy, int budget,
                                std::span<const int> positions, std::span<const double> mass);

}  // namespace sdtp
