#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "selection_oracle.hpp"
#include "skiplab/rng.hpp"
#include "skiplab/skip_policy.hpp"

using namespace skiplab;

namespace {

SimilarityList sims_of(std::vector<double> v) { return SimilarityList{std::move(v)}; }

}  // namespace

TEST_CASE("selector returns nothing below threshold") {
    SkipPolicyConfig cfg;
    cfg.tau = 0.95;
    cfg.n_max = 4;
    REQUIRE(select_skip_layers(sims_of({0.1, 0.5, 0.9, 0.94}), cfg).empty());
}

TEST_CASE("worked four-entry selection") {
    SimilarityList sims = sims_of({0.99, 0.97, 0.50, 0.98});
    SkipPolicyConfig cfg;
    cfg.tau = 0.95;
    cfg.n_max = 2;
    cfg.allow_consecutive = false;
    REQUIRE(select_skip_layers(sims, cfg).blocks() == std::vector<int>{1, 4});
    REQUIRE(testutil::oracle_select(sims, cfg).blocks() == std::vector<int>{1, 4});

    cfg.allow_consecutive = true;
    cfg.n_max = 3;
    REQUIRE(select_skip_layers(sims, cfg).blocks() == std::vector<int>{1, 2, 4});
    REQUIRE(testutil::oracle_select(sims, cfg).blocks() == std::vector<int>{1, 2, 4});
}

TEST_CASE("ties break toward the lower index") {
    SimilarityList sims = sims_of({0.96, 0.96});
    SkipPolicyConfig cfg;
    cfg.tau = 0.95;
    cfg.n_max = 1;
    REQUIRE(select_skip_layers(sims, cfg).blocks() == std::vector<int>{1});
    // without a pinned tie-break the outcome is genuinely ambiguous
    auto outcomes = testutil::oracle_outcomes_over_tie_orders(sims, cfg);
    REQUIRE(outcomes.size() == 2);
    REQUIRE(outcomes.count({1}));
    REQUIRE(outcomes.count({2}));
}

TEST_CASE("selector agrees with the oracle on a small exhaustive grid") {
    const std::vector<double> grid{0.90, 0.94, 0.95, 0.96, 1.0};
    for (int len = 1; len <= 5; ++len) {
        std::vector<int> idx(len, 0);
        while (true) {
            std::vector<double> v(len);
            for (int i = 0; i < len; ++i) v[i] = grid[idx[i]];
            SimilarityList sims = sims_of(v);
            for (bool allow : {false, true})
                for (int n_max = 0; n_max <= 3; ++n_max) {
                    SkipPolicyConfig cfg;
                    cfg.tau = 0.95;
                    cfg.n_max = n_max;
                    cfg.allow_consecutive = allow;
                    if (n_max > len) {
                        // both routes refuse over-budget requests alike
                        REQUIRE_THROWS_AS(select_skip_layers(sims, cfg), ConfigError);
                        REQUIRE_THROWS_AS(testutil::oracle_select(sims, cfg), ConfigError);
                        continue;
                    }
                    REQUIRE(select_skip_layers(sims, cfg) == testutil::oracle_select(sims, cfg));
                }
            int d = len - 1;
            while (d >= 0 && idx[d] == 4) idx[d--] = 0;
            if (d < 0) break;
            ++idx[d];
        }
    }
}

TEST_CASE("selected sets satisfy every structural invariant") {
    SeededRng rng(99);
    for (int it = 0; it < 2000; ++it) {
        int L = 1 + static_cast<int>(rng.uniform_below(12));
        std::vector<double> v(L);
        for (double& x : v) x = rng.uniform();
        SkipPolicyConfig cfg;
        cfg.tau = rng.uniform();
        cfg.n_max = static_cast<int>(rng.uniform_below(L + 1));
        cfg.allow_consecutive = rng.uniform() < 0.5;
        SimilarityList sims = sims_of(v);
        SkipSet s = select_skip_layers(sims, cfg);
        REQUIRE(static_cast<int>(s.size()) <= cfg.n_max);
        for (int b : s.blocks()) REQUIRE(sims.at_block(b) >= cfg.tau);
        if (!cfg.allow_consecutive) REQUIRE_FALSE(s.has_adjacent_pair());

        // raising tau never admits a new block
        SkipPolicyConfig higher = cfg;
        higher.tau = cfg.tau + (1.0 - cfg.tau) * rng.uniform();
        SkipSet s2 = select_skip_layers(sims, higher);
        for (int b : s2.blocks()) REQUIRE(sims.at_block(b) >= higher.tau);
        REQUIRE(s2.size() <= s.size());
    }
}

TEST_CASE("selector configuration errors") {
    SkipPolicyConfig cfg;
    cfg.n_max = 5;
    REQUIRE_THROWS_AS(select_skip_layers(sims_of({1.0, 1.0}), cfg), ConfigError);
    REQUIRE_THROWS_AS(select_skip_layers(sims_of({}), cfg), InputError);
}

TEST_CASE("flops reduction reproduces the published arithmetic") {
    REQUIRE(flops_reduction(SkipSet({1, 3, 5, 7, 9, 11}), 32) == Catch::Approx(0.1875));
    REQUIRE(flops_reduction(SkipSet({2, 6}), 28) == Catch::Approx(0.0714).margin(0.0001));
    REQUIRE(flops_reduction(SkipSet({1, 3, 5, 7, 9, 11, 13, 15}), 32) == Catch::Approx(0.25));
    // exact rational and linear in the set size
    for (int k = 0; k <= 8; ++k) {
        std::vector<int> blocks;
        for (int i = 0; i < k; ++i) blocks.push_back(2 * i + 1);
        REQUIRE(flops_reduction(SkipSet(blocks), 16) == static_cast<double>(k) / 16.0);
    }
}

TEST_CASE("detailed flops report stays consistent with the headline number") {
    ModelConfig cfg;
    cfg.num_blocks = 8;
    cfg.d_model = 64;
    cfg.num_heads = 4;
    cfg.d_ff = 256;
    cfg.vocab_size = 16;
    cfg.max_seq_len = 32;
    FlopsReport r = flops_report(SkipSet({1, 3}), cfg, 16);
    REQUIRE(r.skipped == 2);
    REQUIRE(r.block_fraction == Catch::Approx(0.25));
    REQUIRE(r.detailed_fraction > 0.0);
    REQUIRE(r.detailed_fraction < r.block_fraction);  // head FLOPs are never skipped
    REQUIRE(r.attention_flops_per_block > 0.0);
    REQUIRE(r.mlp_flops_per_block > 0.0);
}

TEST_CASE("skip distribution counts selections per index") {
    SkipDistribution d1 = aggregate_skip_distribution({SkipSet({1, 4})}, 8);
    REQUIRE(d1.probability == std::vector<double>{1, 0, 0, 1, 0, 0, 0, 0});

    SkipDistribution d2 = aggregate_skip_distribution({SkipSet({1, 4}), SkipSet({2, 4})}, 8);
    REQUIRE(d2.probability[0] == 0.5);
    REQUIRE(d2.probability[1] == 0.5);
    REQUIRE(d2.probability[3] == 1.0);
    REQUIRE(d2.probability[5] == 0.0);

    REQUIRE_THROWS_AS(aggregate_skip_distribution({}, 8), InputError);
}
