#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "skiplab/model.hpp"
#include "skiplab/probe.hpp"

namespace skiplab {

// Greedy threshold policy over the similarity list. tau above 1 makes every
// block ineligible, which is the documented way to force an empty skip set.
struct SkipPolicyConfig {
    double tau = 0.95;
    int n_max = 2;
    bool allow_consecutive = false;
};

// Greedy pass over block indices sorted by similarity descending, ties broken
// by lower index. A block is accepted when its similarity clears tau and,
// unless consecutive skips are allowed, neither neighbour has been accepted;
// selection stops at n_max. SimilarityList entry ell already names block ell
// (the pair H_{ell-1}, H_ell), so no post-hoc index shift is needed.
inline SkipSet select_skip_layers(const SimilarityList& sims, const SkipPolicyConfig& cfg) {
    const int L = sims.num_layers();
    if (L < 1) throw InputError("similarity list is empty");
    if (cfg.n_max > L) throw ConfigError("n_max exceeds layer count");
    if (cfg.n_max <= 0) return SkipSet();

    std::vector<int> order(L);
    std::iota(order.begin(), order.end(), 1);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return sims.at_block(a) > sims.at_block(b);
    });

    std::vector<bool> accepted(L + 2, false);
    std::vector<int> chosen;
    for (int l : order) {
        if (sims.at_block(l) < cfg.tau) continue;
        if (accepted[l]) continue;
        if (!cfg.allow_consecutive && (accepted[l - 1] || accepted[l + 1])) continue;
        accepted[l] = true;
        chosen.push_back(l);
        if (static_cast<int>(chosen.size()) >= cfg.n_max) break;
    }
    return SkipSet(std::move(chosen));
}

struct FlopsReport {
    int total_blocks = 0;
    int skipped = 0;
    double block_fraction = 0.0;  // k / L, the headline number

    // Detailed mode, matmul madds counted as 2 FLOPs for a single forward at
    // a given sequence length. Norms, softmax and embedding lookups are not
    // counted.
    double attention_flops_per_block = 0.0;
    double mlp_flops_per_block = 0.0;
    double head_flops = 0.0;
    double detailed_fraction = 0.0;  // skipped block FLOPs / total forward FLOPs
};

// Headline block-fraction reduction, exact as k / L.
inline double flops_reduction(const SkipSet& skip, int num_blocks) {
    if (num_blocks < 1) throw ConfigError("block count must be positive");
    skip.validate(num_blocks);
    return static_cast<double>(skip.size()) / static_cast<double>(num_blocks);
}

inline FlopsReport flops_report(const SkipSet& skip, const ModelConfig& cfg, int seq_len) {
    skip.validate(cfg.num_blocks);
    if (seq_len < 1) throw InputError("sequence length must be positive");
    FlopsReport r;
    r.total_blocks = cfg.num_blocks;
    r.skipped = static_cast<int>(skip.size());
    r.block_fraction = static_cast<double>(r.skipped) / r.total_blocks;
    const double s = seq_len, d = cfg.d_model, f = cfg.d_ff, V = cfg.vocab_size;
    r.attention_flops_per_block = 4 * 2 * s * d * d + 2 * 2 * s * s * d;
    r.mlp_flops_per_block = 2 * 2 * s * d * f;
    r.head_flops = 2 * s * d * V;
    const double per_block = r.attention_flops_per_block + r.mlp_flops_per_block;
    const double total = per_block * cfg.num_blocks + r.head_flops;
    r.detailed_fraction = per_block * r.skipped / total;
    return r;
}

// Per-block-index selection frequency across prompts (the Fig. 7 style
// distribution).
struct SkipDistribution {
    std::vector<double> probability;  // index ell-1 holds P(block ell skipped)

    int num_layers() const { return static_cast<int>(probability.size()); }
};

inline SkipDistribution aggregate_skip_distribution(const std::vector<SkipSet>& sets,
                                                    int num_blocks) {
    if (sets.empty()) throw InputError("no skip sets to aggregate");
    SkipDistribution dist;
    dist.probability.assign(num_blocks, 0.0);
    for (const SkipSet& s : sets) {
        s.validate(num_blocks);
        for (int b : s.blocks()) dist.probability[b - 1] += 1.0;
    }
    for (double& p : dist.probability) p /= sets.size();
    return dist;
}

}  // namespace skiplab
