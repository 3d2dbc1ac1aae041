#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <vector>

#include "skiplab/model.hpp"
#include "skiplab/probe.hpp"
#include "skiplab/rng.hpp"
#include "skiplab/skip_policy.hpp"

namespace skiplab {

enum class DecodeMode { kAr, kDiffusion };

inline const char* to_string(DecodeMode m) { return m == DecodeMode::kAr ? "ar" : "diffusion"; }

enum class SamplerKind { kGreedy, kNucleus };

struct DecodeConfig {
    DecodeMode mode = DecodeMode::kAr;
    int max_new_tokens = 16;  // AR budget; diffusion generation length
    SamplerKind sampler = SamplerKind::kGreedy;
    double top_p = 0.95;
    double temperature = 1.0;
    int denoising_steps = 8;  // T
    std::uint64_t seed = 0;
    int stop_token = -1;  // AR early stop; -1 disables
    bool capture_traces = false;

    void validate() const {
        if (max_new_tokens < 1) throw InputError("generation length must be >= 1");
        if (mode == DecodeMode::kDiffusion && denoising_steps < 1)
            throw ConfigError("diffusion decode needs T >= 1");
        if (sampler == SamplerKind::kNucleus && (top_p <= 0.0 || top_p > 1.0))
            throw ConfigError("top_p must be in (0, 1]");
        if (temperature < 0.0) throw ConfigError("temperature must be non-negative");
    }
};

struct GenerationResult {
    std::vector<int> prompt;
    std::vector<int> tokens;  // response region, in position order
    // One full-vocabulary log-probability row per response position, taken
    // from the raw logits at the step the position was finalized.
    std::vector<std::vector<double>> logprobs;
    std::vector<HiddenStateTrace> traces;  // when capture_traces
    SkipSet skip;
    int steps = 0;
    std::vector<double> step_seconds;
};

namespace detail {

inline std::vector<double> log_softmax_row(std::span<const double> logits) {
    double lse = log_sum_exp(logits);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

inline int argmax_row(std::span<const double> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Draws a token. Greedy ignores the rng; nucleus applies temperature, keeps
// the smallest prefix of the sorted distribution reaching top_p, renormalizes
// and samples.
inline int sample_token(std::span<const double> logits, const DecodeConfig& cfg, SeededRng& rng) {
    if (cfg.sampler == SamplerKind::kGreedy) return argmax_row(logits);
    const int V = static_cast<int>(logits.size());
    std::vector<double> scaled(V);
    if (cfg.temperature <= 1e-12) return argmax_row(logits);
    for (int i = 0; i < V; ++i) scaled[i] = logits[i] / cfg.temperature;
    Tensor probs = softmax(Tensor::row_vector(std::move(scaled)));
    std::vector<int> order(V);
    for (int i = 0; i < V; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[a] > probs[b]; });
    double cum = 0.0, kept = 0.0;
    std::size_t n_keep = 0;
    for (int i : order) {
        cum += probs[i];
        kept = cum;
        ++n_keep;
        if (cum >= cfg.top_p) break;
    }
    double u = rng.uniform() * kept;
    double acc = 0.0;
    for (std::size_t j = 0; j < n_keep; ++j) {
        acc += probs[order[j]];
        if (u < acc) return order[j];
    }
    return order[n_keep - 1];
}

struct StepTimer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double lap() {
        auto t1 = std::chrono::steady_clock::now();
        double s = std::chrono::duration<double>(t1 - t0).count();
        t0 = t1;
        return s;
    }
};

}  // namespace detail

// One full-depth forward over the prompt (plus a fully masked response region
// for diffusion checkpoints), prompt-window similarity, then the greedy
// selector. The returned set stays fixed for the whole generation.
inline SkipSet calibrate_skip_set(const Checkpoint& ckpt, const std::vector<int>& prompt,
                                  const SkipPolicyConfig& policy, int gen_length = 0) {
    if (prompt.empty()) throw InputError("empty prompt");
    std::vector<int> seq = prompt;
    if (ckpt.config.attention_mode == AttentionMode::kBidirectional)
        seq.insert(seq.end(), static_cast<std::size_t>(std::max(0, gen_length)),
                   ckpt.config.mask_id());
    ForwardResult fr = forward(ckpt, seq, SkipSet(), /*capture=*/true);
    SimilarityList sims = layerwise_similarity(*fr.trace, TokenWindow::kPromptOnly,
                                               static_cast<int>(prompt.size()));
    return select_skip_layers(sims, policy);
}

inline GenerationResult ar_decode(const Checkpoint& ckpt, const std::vector<int>& prompt,
                                  const SkipSet& skip, const DecodeConfig& cfg) {
    cfg.validate();
    if (cfg.mode != DecodeMode::kAr) throw ConfigError("ar_decode called with non-AR config");
    if (ckpt.config.attention_mode != AttentionMode::kCausal)
        throw ConfigError("ar_decode needs a causal checkpoint");
    if (prompt.empty()) throw InputError("empty prompt");
    skip.validate(ckpt.config.num_blocks);

    SeededRng rng(cfg.seed);
    GenerationResult res;
    res.prompt = prompt;
    res.skip = skip;
    std::vector<int> seq = prompt;
    detail::StepTimer timer;
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        if (static_cast<int>(seq.size()) >= ckpt.config.max_seq_len) break;
        ForwardResult fr = forward(ckpt, seq, skip, cfg.capture_traces, /*trace_step=*/0);
        auto row = fr.logits.row(fr.logits.rows() - 1);
        int tok = detail::sample_token(row, cfg, rng);
        res.tokens.push_back(tok);
        res.logprobs.push_back(detail::log_softmax_row(row));
        if (cfg.capture_traces) res.traces.push_back(std::move(*fr.trace));
        res.step_seconds.push_back(timer.lap());
        ++res.steps;
        seq.push_back(tok);
        if (tok == cfg.stop_token) break;
    }
    return res;
}

// Iterative unmasking with the low-confidence-last schedule: every step
// finalizes the ceil(remaining / steps_left) masked positions whose rows have
// the highest max softmax probability. Finalized tokens are never re-masked.
inline GenerationResult diffusion_decode(const Checkpoint& ckpt, const std::vector<int>& prompt,
                                         const SkipSet& skip, const DecodeConfig& cfg) {
    cfg.validate();
    if (cfg.mode != DecodeMode::kDiffusion)
        throw ConfigError("diffusion_decode called with non-diffusion config");
    if (ckpt.config.attention_mode != AttentionMode::kBidirectional)
        throw ConfigError("diffusion_decode needs a bidirectional checkpoint");
    if (prompt.empty()) throw InputError("empty prompt");
    skip.validate(ckpt.config.num_blocks);
    const int gen_length = cfg.max_new_tokens;
    const int p = static_cast<int>(prompt.size());
    if (p + gen_length > ckpt.config.max_seq_len)
        throw InputError("prompt plus generation length exceeds max_seq_len");

    SeededRng rng(cfg.seed);
    const int mask_id = ckpt.config.mask_id();
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), gen_length, mask_id);

    GenerationResult res;
    res.prompt = prompt;
    res.skip = skip;
    res.tokens.assign(gen_length, mask_id);
    res.logprobs.assign(gen_length, {});

    int remaining = gen_length;
    detail::StepTimer timer;
    for (int t = 1; t <= cfg.denoising_steps && remaining > 0; ++t) {
        ForwardResult fr = forward(ckpt, seq, skip, cfg.capture_traces, /*trace_step=*/t);
        const int steps_left = cfg.denoising_steps - t + 1;
        const int finalize_now = (remaining + steps_left - 1) / steps_left;

        // Unmasking must produce a real token, so MASK is struck from every
        // candidate row before confidence, sampling and the stored
        // distribution.
        auto masked_row = [&](int pos) {
            std::vector<double> row(fr.logits.row(pos).begin(), fr.logits.row(pos).end());
            row[mask_id] = -1e30;
            return row;
        };

        std::vector<std::pair<double, int>> ranked;  // (-confidence, position)
        for (int i = p; i < p + gen_length; ++i) {
            if (seq[i] != mask_id) continue;
            Tensor probs = softmax(Tensor::row_vector(masked_row(i)));
            double conf = *std::max_element(probs.vec().begin(), probs.vec().end());
            ranked.emplace_back(-conf, i);
        }
        std::sort(ranked.begin(), ranked.end());
        ranked.resize(std::min<std::size_t>(ranked.size(), finalize_now));
        std::vector<int> positions;
        for (auto& [negconf, pos] : ranked) positions.push_back(pos);
        std::sort(positions.begin(), positions.end());

        for (int pos : positions) {
            std::vector<double> row = masked_row(pos);
            int tok = detail::sample_token(row, cfg, rng);
            seq[pos] = tok;
            res.tokens[pos - p] = tok;
            res.logprobs[pos - p] = detail::log_softmax_row(row);
            --remaining;
        }
        if (cfg.capture_traces) res.traces.push_back(std::move(*fr.trace));
        res.step_seconds.push_back(timer.lap());
        ++res.steps;
    }
    return res;
}

inline GenerationResult decode(const Checkpoint& ckpt, const std::vector<int>& prompt,
                               const SkipSet& skip, const DecodeConfig& cfg) {
    return cfg.mode == DecodeMode::kAr ? ar_decode(ckpt, prompt, skip, cfg)
                                       : diffusion_decode(ckpt, prompt, skip, cfg);
}

// Mean over response positions of KL(full-depth || skipped), from the stored
// finalization-time log-probabilities.
inline double token_kl(const GenerationResult& result_skip, const GenerationResult& result_full) {
    if (result_skip.prompt != result_full.prompt)
        throw InputError("token_kl results come from different prompts");
    if (result_skip.logprobs.size() != result_full.logprobs.size())
        throw InputError("token_kl position mismatch");
    if (result_skip.logprobs.empty()) throw InputError("token_kl over no positions");
    double total = 0.0;
    for (std::size_t i = 0; i < result_full.logprobs.size(); ++i) {
        const auto& lp_full = result_full.logprobs[i];
        const auto& lp_skip = result_skip.logprobs[i];
        if (lp_full.size() != lp_skip.size()) throw InputError("token_kl vocabulary mismatch");
        double kl = 0.0;
        for (std::size_t j = 0; j < lp_full.size(); ++j)
            kl += std::exp(lp_full[j]) * (lp_full[j] - lp_skip[j]);
        total += kl;
    }
    return total / result_full.logprobs.size();
}

}  // namespace skiplab
