#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "skiplab/model.hpp"
#include "skiplab/tasks.hpp"

namespace skiplab {

enum class Objective { kArNtp, kMaskedDiffusion };

inline const char* to_string(Objective o) {
    return o == Objective::kArNtp ? "ar-ntp" : "masked-diffusion";
}

inline Objective objective_from_string(const std::string& s) {
    if (s == "ar-ntp") return Objective::kArNtp;
    if (s == "masked-diffusion") return Objective::kMaskedDiffusion;
    throw ConfigError("unknown objective: " + s);
}

struct TrainConfig {
    Objective objective = Objective::kArNtp;
    ModelConfig model;
    int steps = 500;
    int batch_size = 8;
    double learning_rate = 1e-3;
    std::string lr_schedule = "constant";  // constant | cosine
    int warmup_steps = 20;
    std::uint64_t seed = 1;
    std::uint64_t data_seed = 0;  // 0: reuse seed
    std::optional<Checkpoint> init_from;
    int log_every = 25;
    std::string log_path;  // optional CSV (step, loss, eval_acc)

    void validate() const {
        model.validate();
        if (steps < 0 || batch_size < 1) throw ConfigError("bad training budget");
        if (learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
        if (lr_schedule != "constant" && lr_schedule != "cosine")
            throw ConfigError("unknown lr schedule: " + lr_schedule);
        // Objective and attention mode are coupled: denoising sees the whole
        // sequence, next-token prediction must not.
        if (objective == Objective::kMaskedDiffusion &&
            model.attention_mode != AttentionMode::kBidirectional)
            throw ConfigError("masked-diffusion requires bidirectional attention");
        if (objective == Objective::kArNtp && model.attention_mode != AttentionMode::kCausal)
            throw ConfigError("ar-ntp requires causal attention");
        if (init_from && !init_from->config.same_arch(model))
            throw ConfigError("init_from architecture differs from training config");
    }
};

struct TrainLogRow {
    int step;
    double loss;
    double eval_acc;  // NaN when not evaluated at this step
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
};

namespace detail {

struct BatchGraphs {
    Tape::Id loss = -1;
    std::vector<ForwardGraph> graphs;  // one per contributing example
};

// Next-token cross-entropy over response positions: logits row i predicts
// token i+1, so masked-in rows run from the SEP position to one before the
// final token.
inline BatchGraphs build_ar_loss(Tape& tape, const Checkpoint& ckpt,
                                 std::span<const Example> batch) {
    if (ckpt.config.attention_mode != AttentionMode::kCausal)
        throw ConfigError("ar_loss needs a causal checkpoint");
    if (batch.empty()) throw DegenerateBatchError("empty batch");
    BatchGraphs out;
    std::vector<Tape::Id> losses;
    for (const Example& ex : batch) {
        if (ex.response.empty()) throw InputError("example with empty response");
        std::vector<int> seq = ex.full();
        const int len = static_cast<int>(seq.size());
        const int resp0 = static_cast<int>(ex.prompt.size());
        ForwardGraph g = build_forward(tape, ckpt, seq, SkipSet());
        std::vector<int> targets(len, 0);
        std::vector<bool> mask(len, false);
        for (int i = resp0; i < len; ++i) {
            targets[i - 1] = seq[i];
            mask[i - 1] = true;
        }
        losses.push_back(tape.cross_entropy(g.logits, std::move(targets), std::move(mask)));
        out.graphs.push_back(std::move(g));
    }
    out.loss = tape.mean_scalars(losses);
    return out;
}

// One example's corruption: mask ratio t and the per-response-token mask.
struct MaskDraw {
    double t = 1.0;
    std::vector<bool> masked;
};

// Masked denoising loss over explicit draws: response tokens flagged in the
// draw are replaced by MASK, the per-example mean cross-entropy over masked
// positions is weighted by 1/t, and examples with nothing masked contribute
// nothing. Prompt tokens are never masked. A batch with zero masked tokens
// overall is degenerate.
inline BatchGraphs build_diffusion_loss_with_draws(Tape& tape, const Checkpoint& ckpt,
                                                   std::span<const Example> batch,
                                                   std::span<const MaskDraw> draws) {
    if (ckpt.config.attention_mode != AttentionMode::kBidirectional)
        throw ConfigError("diffusion_loss needs a bidirectional checkpoint");
    if (batch.empty()) throw DegenerateBatchError("empty batch");
    if (draws.size() != batch.size()) throw InputError("one mask draw per example required");
    const int mask_id = ckpt.config.mask_id();

    BatchGraphs out;
    std::vector<Tape::Id> losses;
    for (std::size_t e = 0; e < batch.size(); ++e) {
        const Example& ex = batch[e];
        if (ex.response.empty()) throw InputError("example with empty response");
        const MaskDraw& d = draws[e];
        if (d.masked.size() != ex.response.size())
            throw InputError("mask draw length mismatch");
        bool any = false;
        for (bool b : d.masked) any = any || b;
        if (!any) continue;

        std::vector<int> seq = ex.full();
        const int resp0 = static_cast<int>(ex.prompt.size());
        const int len = static_cast<int>(seq.size());
        std::vector<int> targets(len, 0);
        std::vector<bool> mask(len, false);
        for (std::size_t i = 0; i < ex.response.size(); ++i) {
            if (!d.masked[i]) continue;
            int pos = resp0 + static_cast<int>(i);
            targets[pos] = seq[pos];
            seq[pos] = mask_id;
            mask[pos] = true;
        }
        ForwardGraph g = build_forward(tape, ckpt, seq, SkipSet());
        Tape::Id ce = tape.cross_entropy(g.logits, std::move(targets), std::move(mask));
        losses.push_back(tape.scale(ce, 1.0 / d.t));
        out.graphs.push_back(std::move(g));
    }
    if (losses.empty())
        throw DegenerateBatchError("no response token masked in this batch");
    out.loss = tape.mean_scalars(losses);
    return out;
}

// Draws t ~ U(0,1] per example and the independent per-token masks; an empty
// first draw is resampled once, a still-empty batch is left for the loss
// builder to reject.
inline std::vector<MaskDraw> draw_diffusion_masks(std::span<const Example> batch,
                                                  SeededRng& rng) {
    std::vector<MaskDraw> draws(batch.size());
    auto redraw = [&] {
        int total = 0;
        for (std::size_t e = 0; e < batch.size(); ++e) {
            draws[e].t = rng.uniform_open0();
            draws[e].masked.assign(batch[e].response.size(), false);
            for (std::size_t i = 0; i < batch[e].response.size(); ++i)
                if (rng.uniform() < draws[e].t) {
                    draws[e].masked[i] = true;
                    ++total;
                }
        }
        return total;
    };
    if (redraw() == 0) redraw();
    return draws;
}

inline BatchGraphs build_diffusion_loss(Tape& tape, const Checkpoint& ckpt,
                                        std::span<const Example> batch, SeededRng& rng) {
    std::vector<MaskDraw> draws = draw_diffusion_masks(batch, rng);
    return build_diffusion_loss_with_draws(tape, ckpt, batch, draws);
}

}  // namespace detail

inline double ar_loss(const Checkpoint& ckpt, std::span<const Example> batch) {
    Tape tape(/*recording=*/false);
    return tape.value(detail::build_ar_loss(tape, ckpt, batch).loss)[0];
}

inline double diffusion_loss(const Checkpoint& ckpt, std::span<const Example> batch,
                             SeededRng& rng) {
    Tape tape(/*recording=*/false);
    return tape.value(detail::build_diffusion_loss(tape, ckpt, batch, rng).loss)[0];
}

// Cheap progress metric for the training log: fraction of response tokens the
// model gets right under teacher forcing (causal) or single-step full
// denoising (bidirectional).
inline double teacher_forced_accuracy(const Checkpoint& ckpt, std::span<const Example> examples) {
    if (examples.empty()) throw InputError("no examples to score");
    long correct = 0, total = 0;
    for (const Example& ex : examples) {
        std::vector<int> seq = ex.full();
        const int resp0 = static_cast<int>(ex.prompt.size());
        const int len = static_cast<int>(seq.size());
        if (ckpt.config.attention_mode == AttentionMode::kCausal) {
            Tensor logits = forward(ckpt, seq).logits;
            for (int i = resp0; i < len; ++i) {
                auto row = logits.row(i - 1);
                int best = static_cast<int>(
                    std::max_element(row.begin(), row.end()) - row.begin());
                correct += best == seq[i] ? 1 : 0;
                ++total;
            }
        } else {
            std::vector<int> corrupted = seq;
            for (int i = resp0; i < len; ++i) corrupted[i] = ckpt.config.mask_id();
            Tensor logits = forward(ckpt, corrupted).logits;
            for (int i = resp0; i < len; ++i) {
                auto row = logits.row(i);
                int best = static_cast<int>(
                    std::max_element(row.begin(), row.end()) - row.begin());
                correct += best == seq[i] ? 1 : 0;
                ++total;
            }
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// Adam with fixed (0.9, 0.999, 1e-8) moments; optional warmup and cosine
// decay on top of the base rate.
inline Checkpoint train(const TrainConfig& config, const TaskSpec& spec, TrainLog* log = nullptr) {
    config.validate();
    spec.validate();
    if (spec.vocab_size != config.model.vocab_size)
        throw ConfigError("task vocab_size must match model vocab_size");
    if (spec.max_sequence_len() > config.model.max_seq_len)
        throw ConfigError("task sequences exceed model max_seq_len");

    Dataset ds = generate_dataset(spec, config.data_seed ? config.data_seed : config.seed);

    SeededRng rng(config.seed);
    Checkpoint ckpt;
    if (config.init_from) {
        ckpt = *config.init_from;
        ckpt.config.attention_mode = config.model.attention_mode;
    } else {
        ckpt = init_checkpoint(config.model, rng);
    }
    if (config.objective == Objective::kArNtp) {
        ckpt.regime = Regime::kNativeAr;
    } else {
        ckpt.regime = (config.init_from && config.init_from->regime == Regime::kNativeAr)
                          ? Regime::kArInitDiffusion
                          : Regime::kNativeDiffusion;
    }
    ckpt.train_seed = config.seed;

    std::map<std::string, Tensor> m, v;
    for (const auto& [name, t] : ckpt.params) {
        m[name] = Tensor::zeros(t.shape());
        v[name] = Tensor::zeros(t.shape());
    }
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    const std::size_t n_eval = std::min<std::size_t>(ds.eval.size(), 32);
    std::span<const Example> eval_probe(ds.eval.data(), n_eval);

    for (int step = 0; step < config.steps; ++step) {
        std::vector<Example> batch;
        batch.reserve(config.batch_size);
        for (int i = 0; i < config.batch_size; ++i)
            batch.push_back(ds.train[rng.uniform_below(ds.train.size())]);

        double loss = 0.0;
        std::map<std::string, Tensor> grads;
        try {
            Tape tape(/*recording=*/true);
            detail::BatchGraphs bg =
                config.objective == Objective::kArNtp
                    ? detail::build_ar_loss(tape, ckpt, batch)
                    : detail::build_diffusion_loss(tape, ckpt, batch, rng);
            loss = tape.value(bg.loss)[0];
            if (!std::isfinite(loss))
                throw DivergenceError("non-finite training loss", step);
            tape.backward(bg.loss);
            for (const auto& g : bg.graphs)
                for (const auto& [name, id] : g.param_ids) {
                    Tensor gt = tape.grad(id);
                    auto it = grads.find(name);
                    if (it == grads.end())
                        grads.emplace(name, std::move(gt));
                    else
                        for (std::size_t k = 0; k < gt.size(); ++k) it->second[k] += gt[k];
                }
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("training diverged: ") + e.what(), step);
        }

        double lr = config.learning_rate;
        if (config.warmup_steps > 0 && step < config.warmup_steps)
            lr *= static_cast<double>(step + 1) / config.warmup_steps;
        else if (config.lr_schedule == "cosine" && config.steps > 1)
            lr *= 0.5 * (1.0 + std::cos(3.141592653589793 * step / (config.steps - 1)));

        const double bc1 = 1.0 - std::pow(beta1, step + 1);
        const double bc2 = 1.0 - std::pow(beta2, step + 1);
        for (auto& [name, grad] : grads) {
            Tensor& pm = m[name];
            Tensor& pv = v[name];
            Tensor& pp = ckpt.params[name];
            for (std::size_t k = 0; k < grad.size(); ++k) {
                pm[k] = beta1 * pm[k] + (1.0 - beta1) * grad[k];
                pv[k] = beta2 * pv[k] + (1.0 - beta2) * grad[k] * grad[k];
                pp[k] -= lr * (pm[k] / bc1) / (std::sqrt(pv[k] / bc2) + eps);
            }
        }

        if (log) {
            bool do_eval = config.log_every > 0 &&
                           (step % config.log_every == 0 || step == config.steps - 1);
            double acc = do_eval ? teacher_forced_accuracy(ckpt, eval_probe)
                                 : std::numeric_limits<double>::quiet_NaN();
            log->rows.push_back({step, loss, acc});
        }
    }

    if (log && !config.log_path.empty()) {
        std::ofstream os(config.log_path);
        os << "step,loss,eval_acc\n";
        for (const auto& r : log->rows) {
            os << r.step << ',' << r.loss << ',';
            if (std::isnan(r.eval_acc))
                os << "";
            else
                os << r.eval_acc;
            os << '\n';
        }
    }
    return ckpt;
}

}  // namespace skiplab
