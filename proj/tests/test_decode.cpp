#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "skiplab/decode.hpp"

using namespace skiplab;

namespace {

ModelConfig decode_model(AttentionMode mode) {
    ModelConfig cfg;
    cfg.num_blocks = 4;
    cfg.d_model = 16;
    cfg.num_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 24;
    cfg.attention_mode = mode;
    return cfg;
}

Checkpoint decode_ckpt(AttentionMode mode, std::uint64_t seed = 17) {
    SeededRng rng(seed);
    return init_checkpoint(decode_model(mode), rng);
}

DecodeConfig ar_cfg(int n = 6) {
    DecodeConfig c;
    c.mode = DecodeMode::kAr;
    c.max_new_tokens = n;
    return c;
}

DecodeConfig diff_cfg(int gen, int t) {
    DecodeConfig c;
    c.mode = DecodeMode::kDiffusion;
    c.max_new_tokens = gen;
    c.denoising_steps = t;
    return c;
}

bool same_generation(const GenerationResult& a, const GenerationResult& b) {
    if (a.tokens != b.tokens || a.logprobs.size() != b.logprobs.size()) return false;
    for (std::size_t i = 0; i < a.logprobs.size(); ++i)
        if (a.logprobs[i] != b.logprobs[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("greedy AR decode is deterministic and matches a naive loop") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kCausal);
    std::vector<int> prompt{1, 5, 3};
    GenerationResult a = ar_decode(ckpt, prompt, SkipSet(), ar_cfg());
    GenerationResult b = ar_decode(ckpt, prompt, SkipSet(), ar_cfg());
    REQUIRE(same_generation(a, b));
    REQUIRE(a.steps == 6);

    // reference loop recomputing logits from scratch each step
    std::vector<int> seq = prompt;
    for (int step = 0; step < 6; ++step) {
        Tensor logits = forward(ckpt, seq).logits;
        auto row = logits.row(logits.rows() - 1);
        int tok = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        REQUIRE(tok == a.tokens[step]);
        double lse = log_sum_exp(row);
        for (int j = 0; j < logits.cols(); ++j)
            REQUIRE(a.logprobs[step][j] == Catch::Approx(row[j] - lse).margin(1e-14));
        seq.push_back(tok);
    }
}

TEST_CASE("nucleus sampling with full mass and vanishing temperature is greedy") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kCausal);
    std::vector<int> prompt{2, 9};
    DecodeConfig nuc = ar_cfg();
    nuc.sampler = SamplerKind::kNucleus;
    nuc.top_p = 1.0;
    nuc.temperature = 1e-13;
    nuc.seed = 7;
    GenerationResult g = ar_decode(ckpt, prompt, SkipSet(), ar_cfg());
    GenerationResult n = ar_decode(ckpt, prompt, SkipSet(), nuc);
    REQUIRE(g.tokens == n.tokens);
}

TEST_CASE("nucleus sampling is reproducible under a fixed seed") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kCausal);
    DecodeConfig nuc = ar_cfg(8);
    nuc.sampler = SamplerKind::kNucleus;
    nuc.top_p = 0.9;
    nuc.temperature = 1.3;
    nuc.seed = 99;
    GenerationResult a = ar_decode(ckpt, {4, 4, 1}, SkipSet(), nuc);
    GenerationResult b = ar_decode(ckpt, {4, 4, 1}, SkipSet(), nuc);
    REQUIRE(same_generation(a, b));
}

TEST_CASE("AR decode respects the stop token") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kCausal);
    DecodeConfig c = ar_cfg(10);
    GenerationResult free_run = ar_decode(ckpt, {1, 2}, SkipSet(), c);
    // pick a token whose first appearance is not at step 0
    std::size_t target = 0;
    for (std::size_t j = 1; j < free_run.tokens.size() && !target; ++j) {
        bool seen = false;
        for (std::size_t i = 0; i < j; ++i) seen = seen || free_run.tokens[i] == free_run.tokens[j];
        if (!seen) target = j;
    }
    if (target != 0) {
        c.stop_token = free_run.tokens[target];
        GenerationResult stopped = ar_decode(ckpt, {1, 2}, SkipSet(), c);
        REQUIRE(stopped.tokens.size() == target + 1);
        REQUIRE(stopped.tokens.back() == c.stop_token);
    }
    // a token that never appears leaves the budget untouched
    c.stop_token = -2;
    REQUIRE(ar_decode(ckpt, {1, 2}, SkipSet(), c).tokens.size() == 10);
}

TEST_CASE("AR decode rejects non-causal checkpoints") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kBidirectional);
    REQUIRE_THROWS_AS(ar_decode(ckpt, {1}, SkipSet(), ar_cfg()), ConfigError);
    DecodeConfig wrong = diff_cfg(4, 2);
    Checkpoint causal = decode_ckpt(AttentionMode::kCausal);
    REQUIRE_THROWS_AS(ar_decode(causal, {1}, SkipSet(), wrong), ConfigError);
}

TEST_CASE("diffusion decode schedules finalization counts") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kBidirectional);
    const int mask = ckpt.config.mask_id();

    // T=1 finalizes everything in one step
    GenerationResult one = diffusion_decode(ckpt, {3, 2, 1}, SkipSet(), diff_cfg(5, 1));
    REQUIRE(one.steps == 1);
    for (int t : one.tokens) REQUIRE(t != mask);

    // T = gen_length finalizes exactly one token per step
    GenerationResult stepwise = diffusion_decode(ckpt, {3, 2, 1}, SkipSet(), diff_cfg(5, 5));
    REQUIRE(stepwise.steps == 5);
    for (int t : stepwise.tokens) REQUIRE(t != mask);

    // T beyond gen_length just stops once everything is finalized
    GenerationResult over = diffusion_decode(ckpt, {3, 2, 1}, SkipSet(), diff_cfg(2, 8));
    REQUIRE(over.steps == 2);
    for (int t : over.tokens) REQUIRE(t != mask);
}

TEST_CASE("diffusion decode exhausts masks across the (T, gen) grid") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kBidirectional);
    const int mask = ckpt.config.mask_id();
    for (int T : {1, 2, 4, 8})
        for (int gen : {1, 3, 7, 12}) {
            GenerationResult g = diffusion_decode(ckpt, {5, 6}, SkipSet(), diff_cfg(gen, T));
            REQUIRE(static_cast<int>(g.tokens.size()) == gen);
            for (int t : g.tokens) REQUIRE(t != mask);
            for (const auto& lp : g.logprobs) REQUIRE(lp.size() == 12);
        }
}

TEST_CASE("diffusion decode is bit-identical across reruns") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kBidirectional);
    DecodeConfig c = diff_cfg(6, 4);
    c.seed = 31;
    c.capture_traces = true;
    GenerationResult a = diffusion_decode(ckpt, {7, 1, 2}, SkipSet(), c);
    GenerationResult b = diffusion_decode(ckpt, {7, 1, 2}, SkipSet(), c);
    REQUIRE(same_generation(a, b));
    REQUIRE(a.traces.size() == b.traces.size());
    for (std::size_t t = 0; t < a.traces.size(); ++t)
        for (std::size_t ell = 0; ell < a.traces[t].states.size(); ++ell)
            REQUIRE(bitwise_equal(a.traces[t].states[ell], b.traces[t].states[ell]));
}

TEST_CASE("finalized positions never change afterwards") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kBidirectional);
    DecodeConfig c = diff_cfg(6, 6);
    c.capture_traces = true;
    std::vector<int> prompt{2, 3};
    GenerationResult g = diffusion_decode(ckpt, prompt, SkipSet(), c);
    // A position's post-embedding row changes exactly when its token does;
    // each response position may change at most once (MASK -> final token).
    const int p = static_cast<int>(prompt.size());
    for (int pos = p; pos < p + 6; ++pos) {
        int changes = 0;
        for (std::size_t t = 1; t < g.traces.size(); ++t) {
            std::span<const double> prev = g.traces[t - 1].states[0].row(pos);
            std::span<const double> cur = g.traces[t].states[0].row(pos);
            bool same = true;
            for (std::size_t j = 0; j < prev.size(); ++j) same = same && prev[j] == cur[j];
            if (!same) ++changes;
        }
        REQUIRE(changes <= 1);
    }
}

TEST_CASE("diffusion decode validates its inputs") {
    Checkpoint bidir = decode_ckpt(AttentionMode::kBidirectional);
    Checkpoint causal = decode_ckpt(AttentionMode::kCausal);
    REQUIRE_THROWS_AS(diffusion_decode(causal, {1}, SkipSet(), diff_cfg(3, 2)), ConfigError);
    REQUIRE_THROWS_AS(diffusion_decode(bidir, {1}, SkipSet(), diff_cfg(0, 2)), InputError);
    REQUIRE_THROWS_AS(diffusion_decode(bidir, {}, SkipSet(), diff_cfg(3, 2)), InputError);
    DecodeConfig bad = diff_cfg(3, 0);
    REQUIRE_THROWS_AS(diffusion_decode(bidir, {1}, SkipSet(), bad), ConfigError);
}

TEST_CASE("calibration with unreachable threshold keeps the baseline") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kBidirectional);
    SkipPolicyConfig pol;
    pol.tau = 1.01;
    pol.n_max = 4;
    SkipSet skip = calibrate_skip_set(ckpt, {1, 2, 3}, pol, 4);
    REQUIRE(skip.empty());
    GenerationResult with = diffusion_decode(ckpt, {1, 2, 3}, skip, diff_cfg(4, 2));
    GenerationResult base = diffusion_decode(ckpt, {1, 2, 3}, SkipSet(), diff_cfg(4, 2));
    REQUIRE(same_generation(with, base));
}

TEST_CASE("calibration under a permissive policy returns a non-adjacent pair") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kCausal);
    SkipPolicyConfig pol;
    pol.tau = 0.0;
    pol.n_max = 2;
    SkipSet skip = calibrate_skip_set(ckpt, {4, 2, 7, 1}, pol);
    REQUIRE(skip.size() == 2);
    REQUIRE_FALSE(skip.has_adjacent_pair());
    // the set recorded in the result is the calibrated one
    GenerationResult g = ar_decode(ckpt, {4, 2, 7, 1}, skip, ar_cfg(3));
    REQUIRE(g.skip == skip);
}

TEST_CASE("token_kl is zero on identical results and matches a direct formula") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kCausal);
    GenerationResult g = ar_decode(ckpt, {1, 2, 3}, SkipSet(), ar_cfg(4));
    REQUIRE(token_kl(g, g) == 0.0);

    GenerationResult p, q;
    p.prompt = q.prompt = {1};
    p.tokens = q.tokens = {0, 0};
    auto logs = [](std::vector<double> probs) {
        std::vector<double> out;
        for (double v : probs) out.push_back(std::log(v));
        return out;
    };
    // q holds the full-depth rows, p the skipped ones
    q.logprobs = {logs({0.2, 0.5, 0.3}), logs({0.6, 0.3, 0.1})};
    p.logprobs = {logs({0.3, 0.4, 0.3}), logs({0.5, 0.25, 0.25})};
    double expected = 0.0;
    for (int pos = 0; pos < 2; ++pos) {
        double kl = 0.0;
        for (int j = 0; j < 3; ++j) {
            double pf = std::exp(q.logprobs[pos][j]);
            kl += pf * (q.logprobs[pos][j] - p.logprobs[pos][j]);
        }
        expected += kl;
    }
    expected /= 2.0;
    REQUIRE(token_kl(p, q) == Catch::Approx(expected).margin(1e-14));

    GenerationResult r = p;
    r.logprobs.pop_back();
    REQUIRE_THROWS_AS(token_kl(r, q), InputError);
    GenerationResult other = p;
    other.prompt = {2};
    REQUIRE_THROWS_AS(token_kl(other, q), InputError);
}

TEST_CASE("skip set is applied at every decode step") {
    Checkpoint ckpt = decode_ckpt(AttentionMode::kCausal);
    SkipSet skip({1, 3});
    GenerationResult with = ar_decode(ckpt, {3, 3, 3}, skip, ar_cfg(4));
    GenerationResult without = ar_decode(ckpt, {3, 3, 3}, SkipSet(), ar_cfg(4));
    REQUIRE(with.skip == skip);
    // different depth actually changes the distributions
    bool logprobs_differ = false;
    for (std::size_t i = 0; i < with.logprobs.size() && !logprobs_differ; ++i)
        logprobs_differ = with.logprobs[i] != without.logprobs[i];
    REQUIRE(logprobs_differ);
}
