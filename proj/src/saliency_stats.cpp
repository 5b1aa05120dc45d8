#include "sdtp/saliency.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace sdtp {

SaliencyMap normalize(const SaliencyMap& map) {
    if (map.scores.empty()) throw std::invalid_argument("normalize: empty map");
    SaliencyMap out = map;
    if (map.normalized) return out;
    double mn = map.scores[0], mx = map.scores[0];
    for (double s : map.scores) {
        mn = std::min(mn, s);
        mx = std::max(mx, s);
    }
    out.raw_min = mn;
    out.raw_max = mx;
    out.normalized = true;
    if (mx == mn) {
        out.degenerate = true;
        double fill = mx == 0.0 ? 0.0 : 0.5;
        std::fill(out.scores.begin(), out.scores.end(), fill);
        return out;
    }
    for (double& s : out.scores) s = (s - mn) / (mx - mn);
    return out;
}

SparsityStats sparsity_stats(std::span<const SaliencyMap> maps, double threshold_frac) {
    if (maps.empty()) throw std::invalid_argument("sparsity_stats: no stages");
    size_t n = maps[0].scores.size();
    if (n == 0) throw std::invalid_argument("sparsity_stats: empty map");
    for (const auto& m : maps)
        if (m.scores.size() != n)
            throw std::invalid_argument("sparsity_stats: stage length mismatch");

    SparsityStats st;
    st.threshold_frac = threshold_frac;
    std::vector<std::vector<uint8_t>> redundant_mask;
    for (const auto& m : maps) {
        double mx = *std::max_element(m.scores.begin(), m.scores.end());
        double thr = threshold_frac * mx;
        std::vector<uint8_t> red(n, 0);
        int64_t imp = 0;
        for (size_t i = 0; i < n; i++) {
            if (m.scores[i] > thr)
                imp++;
            else
                red[i] = 1;
        }
        st.stage_layers.push_back(m.stage_layer);
        st.important.push_back(imp);
        st.redundant.push_back(static_cast<int64_t>(n) - imp);
        redundant_mask.push_back(std::move(red));
    }
    size_t S = maps.size();
    st.persistence.assign(S, std::vector<double>(S, std::numeric_limits<double>::quiet_NaN()));
    for (size_t s = 0; s < S; s++) {
        if (st.redundant[s] == 0) continue;  // undefined, reported as null downstream
        for (size_t t = 0; t < S; t++) {
            int64_t both = 0;
            for (size_t i = 0; i < n; i++)
                both += (redundant_mask[s][i] && redundant_mask[t][i]) ? 1 : 0;
            st.persistence[s][t] = static_cast<double>(both) / static_cast<double>(st.redundant[s]);
        }
    }
    return st;
}

}  // namespace sdtp
