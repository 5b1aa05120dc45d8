#include "sdtp/kv_policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sdtp {

void KVCachePolicy::validate() const {
    if (kind == KVPolicyKind::kNone) return;
    if (!(budget_fraction > 0.0) || budget_fraction > 1.0)
        throw std::invalid_argument("kv policy: budget fraction must lie in (0, 1]");
    if (local_fraction < 0.0 || local_fraction > 1.0)
        throw std::invalid_argument("kv policy: local fraction must lie in [0, 1]");
    if (sink_count < 0) throw std::invalid_argument("kv policy: sink count must be >= 0");
}

KVCachePolicy parse_kv_policy(const std::string& text) {
    KVCachePolicy p;
    if (text == "none" || text.empty()) return p;
    auto colon = text.find(':');
    std::string kind = text.substr(0, colon);
    if (kind == "local")
        p.kind = KVPolicyKind::kLocal;
    else if (kind == "h2o")
        p.kind = KVPolicyKind::kHeavyHitter;
    else
        throw std::invalid_argument("kv policy: unknown kind '" + kind + "' (none|local|h2o)");
    if (colon != std::string::npos) p.budget_fraction = std::stod(text.substr(colon + 1));
    p.validate();
    return p;
}

int derive_budget(const KVCachePolicy& policy, int prefill_entries) {
    policy.validate();
    int budget = static_cast<int>(std::ceil(policy.budget_fraction * prefill_entries));
    if (budget < policy.sink_count + 1)
        throw std::invalid_argument("kv policy: derived budget " + std::to_string(budget) +
                                    " is smaller than sink_count + 1 (" +
                                    std::to_string(policy.sink_count + 1) + ")");
    return budget;
}

void accumulate_attention(std::vector<double>& mass, std::span<const double> weights) {
    if (mass.size() != weights.size())
        throw std::invalid_argument("accumulate_attention: length mismatch (" +
                                    std::to_string(mass.size()) + " vs " +
                                    std::to_string(weights.size()) + ")");
    for (size_t i = 0; i < mass.size(); i++) mass[i] += weights[i];
}

std::vector<int> evict_keep_set(const KVCachePolicy& policy, int budget,
                                std::span<const int> positions, std::span<const double> mass) {
    int n = static_cast<int>(positions.size());
    if (policy.kind == KVPolicyKind::kNone || n <= budget) {
        std::vector<int> all(n);
        for (int i = 0; i < n; i++) all[i] = i;
        return all;
    }
    if (static_cast<int>(mass.size()) != n)
        throw std::invalid_argument("evict_keep_set: mass length mismatch");

    std::vector<uint8_t> keep(n, 0);
    int sink = std::min(policy.sink_count, n);
    for (int i = 0; i < sink; i++) keep[i] = 1;

    int recent = 0;
    if (policy.kind == KVPolicyKind::kLocal) {
        recent = budget - sink;
    } else {
        recent = static_cast<int>(std::ceil(policy.local_fraction * budget));
        recent = std::max(recent, 1);  // the most recent entry is never evicted
    }
    for (int i = std::max(0, n - recent); i < n; i++) keep[i] = 1;

    if (policy.kind == KVPolicyKind::kHeavyHitter) {
        int used = 0;
        for (uint8_t k : keep) used += k;
        int slots = budget - used;
        if (slots > 0) {
            std::vector<int> cand;
            for (int i = 0; i < n; i++)
                if (!keep[i]) cand.push_back(i);
            // highest accumulated mass first; mass ties favor the more
            // recent (larger position) entry
            std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
                if (mass[a] != mass[b]) return mass[a] > mass[b];
                return positions[a] > positions[b];
            });
            for (int i = 0; i < slots && i < static_cast<int>(cand.size()); i++) keep[cand[i]] = 1;
        }
    }

    std::vector<int> kept;
    for (int i = 0; i < n; i++)
        if (keep[i]) kept.push_back(i);
    return kept;
}

}  // namespace sdtp
