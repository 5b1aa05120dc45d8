#include "sdtp/profiler.hpp"

#include <cmath>
#include <stdexcept>

namespace sdtp {

void ArchProfile::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1)
        throw std::invalid_argument("profile: all sizes must be >= 1");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("profile: d_model must divide by n_heads");
    if (n_kv_heads < 1 || n_kv_heads > n_heads)
        throw std::invalid_argument("profile: n_kv_heads must lie in [1, n_heads]");
    if (supplied_params > 0) {
        double rel = std::abs(derived_params() - supplied_params) / supplied_params;
        if (rel > 0.05)
            throw std::invalid_argument("profile '" + name + "': derived parameter count " +
                                        std::to_string(derived_params()) + " deviates " +
                                        std::to_string(rel * 100) + "% from the supplied " +
                                        std::to_string(supplied_params));
    }
}

double ArchProfile::layer_macs() const {
    double d = d_model;
    double attn = d * d            // q
                  + 2.0 * d * d_kv()  // k, v
                  + d * d;         // out
    double mlp = (gated_mlp ? 3.0 : 2.0) * d * d_ff;
    return attn + mlp;
}

double ArchProfile::derived_params() const {
    double embed = static_cast<double>(vocab_size) * d_model * (tied_embedding ? 1.0 : 2.0);
    return layer_macs() * n_layers + embed;
}

ArchProfile builtin_profile(const std::string& name) {
    ArchProfile p;
    p.name = name;
    if (name == "mistral-7b") {
        p.n_layers = 32;
        p.d_model = 4096;
        p.n_heads = 32;
        p.n_kv_heads = 8;
        p.d_ff = 14336;
        p.vocab_size = 32000;
        p.gated_mlp = true;
        p.supplied_params = 7.24e9;
    } else if (name == "llama2-7b") {
        p.n_layers = 32;
        p.d_model = 4096;
        p.n_heads = 32;
        p.n_kv_heads = 32;
        p.d_ff = 11008;
        p.vocab_size = 32000;
        p.gated_mlp = true;
        p.supplied_params = 6.74e9;
    } else if (name == "bloom-7b") {
        p.n_layers = 30;
        p.d_model = 4096;
        p.n_heads = 32;
        p.n_kv_heads = 32;
        p.d_ff = 16384;
        p.vocab_size = 250880;
        p.gated_mlp = false;
        p.tied_embedding = true;
        p.supplied_params = 7.07e9;
    } else if (name == "toy") {
        p.n_layers = 8;
        p.d_model = 128;
        p.n_heads = 4;
        p.n_kv_heads = 4;
        p.d_ff = 512;
        p.vocab_size = 256;
        p.gated_mlp = false;
    } else {
        throw std::invalid_argument("unknown profile '" + name +
                                    "'; available: mistral-7b, llama2-7b, bloom-7b, toy");
    }
    p.validate();
    return p;
}

std::vector<std::string> builtin_profile_names() {
    return {"mistral-7b", "llama2-7b", "bloom-7b", "toy"};
}

std::vector<double> expand_schedule_ratios(const PruneSchedule& schedule, int n_layers) {
    std::vector<double> out(n_layers, 1.0);
    double r = 1.0;
    for (int l = 0; l < n_layers; l++) {
        int s = schedule.stage_at_layer(l);
        if (s >= 0) r = schedule.stages[s].keep_ratio;
        out[l] = r;
    }
    return out;
}

std::vector<int64_t> tokens_per_layer(const PruneSchedule& schedule, int n_layers, int64_t n) {
    auto ratios = expand_schedule_ratios(schedule, n_layers);
    int64_t floor_prot = std::min<int64_t>(
        n, schedule.sink_count + static_cast<int64_t>(std::ceil(schedule.local_fraction * n)));
    std::vector<int64_t> out(n_layers);
    for (int l = 0; l < n_layers; l++) {
        auto kept = static_cast<int64_t>(std::ceil(ratios[l] * static_cast<double>(n)));
        out[l] = std::max(kept, floor_prot);
    }
    return out;
}

namespace {

// tokens scored at each stage = tokens alive entering it
double scorer_flops(const ArchProfile& profile, const PruneSchedule& schedule, int64_t n,
                    const ScorerCost& scorer) {
    double macs = scorer.macs_per_token(profile.d_model);
    double total = 0.0;
    double prev_ratio = 1.0;
    int64_t floor_prot = std::min<int64_t>(
        n, schedule.sink_count + static_cast<int64_t>(std::ceil(schedule.local_fraction * n)));
    for (const auto& st : schedule.stages) {
        auto alive = std::max(static_cast<int64_t>(std::ceil(prev_ratio * static_cast<double>(n))),
                              floor_prot);
        total += 2.0 * macs * static_cast<double>(alive);
        prev_ratio = st.keep_ratio;
    }
    return total;
}

}  // namespace

double flops_prefill(const ArchProfile& profile, int64_t n, const PruneSchedule* schedule,
                     const ScorerCost& scorer, FlopsBreakdown* breakdown) {
    profile.validate();
    if (n < 1) throw std::invalid_argument("flops_prefill: n must be >= 1");
    FlopsBreakdown b;
    double layer_macs = profile.layer_macs();
    if (schedule && !schedule->empty()) {
        schedule->validate(profile.n_layers);
        auto toks = tokens_per_layer(*schedule, profile.n_layers, n);
        int64_t final_kept = toks.back();
        for (int l = 0; l < profile.n_layers; l++) {
            double nl = static_cast<double>(toks[l]);
            b.linear += 2.0 * nl * layer_macs;
            b.attention += 4.0 * nl * nl * profile.d_model;
        }
        b.unembed = 2.0 * static_cast<double>(final_kept) * profile.d_model * profile.vocab_size;
        b.scorer = scorer_flops(profile, *schedule, n, scorer);
    } else {
        double nd = static_cast<double>(n);
        b.linear = 2.0 * nd * layer_macs * profile.n_layers;
        b.attention = 4.0 * nd * nd * profile.d_model * profile.n_layers;
        b.unembed = 2.0 * nd * profile.d_model * profile.vocab_size;
    }
    if (breakdown) *breakdown = b;
    return b.total();
}

double flops_end2end(const ArchProfile& profile, int64_t n, int64_t gen_len,
                     const PruneSchedule* schedule, const ScorerCost& scorer,
                     std::optional<double> kv_budget_fraction) {
    if (gen_len < 0) throw std::invalid_argument("flops_end2end: gen_len must be >= 0");
    double total = flops_prefill(profile, n, schedule, scorer);
    int64_t context = n;
    if (schedule && !schedule->empty())
        context = tokens_per_layer(*schedule, profile.n_layers, n).back();
    double layer_macs = profile.layer_macs();
    for (int64_t t = 0; t < gen_len; t++) {
        double ctx = static_cast<double>(context + t);
        if (kv_budget_fraction)
            ctx = std::min(ctx, std::ceil(*kv_budget_fraction * context) + static_cast<double>(t));
        total += 2.0 * layer_macs * profile.n_layers;                   // linear work, 1 token
        total += 4.0 * ctx * profile.d_model * profile.n_layers;       // attention vs context
        total += 2.0 * static_cast<double>(profile.d_model) * profile.vocab_size;  // unembed
    }
    return total;
}

double memory_estimate(const ArchProfile& profile, int64_t n, const PruneSchedule* schedule,
                       int precision_bytes) {
    profile.validate();
    double weights = profile.params() * precision_bytes;
    int64_t kept = n;
    if (schedule && !schedule->empty())
        kept = tokens_per_layer(*schedule, profile.n_layers, n).back();
    double kv = 2.0 * profile.n_layers * static_cast<double>(kept) * profile.d_kv() *
                precision_bytes;
    // activation high-water: a couple of live hidden-state buffers at the
    // (unpruned) early layers
    double act = 2.0 * static_cast<double>(n) * profile.d_model * precision_bytes;
    return weights + kv + act;
}

FlopsReport profile_report(const ArchProfile& profile, int64_t n, int64_t gen_len,
                           const PruneSchedule& schedule, int precision_bytes) {
    FlopsReport r;
    r.seq_len = n;
    r.gen_len = gen_len;
    flops_prefill(profile, n, nullptr, {}, &r.prefill_base);
    flops_prefill(profile, n, &schedule, {}, &r.prefill_sdtp);
    r.decode_base = flops_end2end(profile, n, gen_len) - r.prefill_base.total();
    r.decode_sdtp = flops_end2end(profile, n, gen_len, &schedule) - r.prefill_sdtp.total();
    r.memory_base = memory_estimate(profile, n, nullptr, precision_bytes);
    r.memory_sdtp = memory_estimate(profile, n, &schedule, precision_bytes);
    return r;
}

}  // namespace sdtp
