#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "skiplab/decode.hpp"
#include "skiplab/harness.hpp"
#include "skiplab/training.hpp"

using namespace skiplab;

namespace {

ModelConfig tiny_model(AttentionMode mode) {
    ModelConfig cfg;
    cfg.num_blocks = 2;
    cfg.d_model = 16;
    cfg.num_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 16;
    cfg.attention_mode = mode;
    return cfg;
}

TaskSpec tiny_task(TaskKind kind = TaskKind::kCopy) {
    TaskSpec s;
    s.kind = kind;
    s.min_len = 3;
    s.max_len = 5;
    s.alphabet_size = 7;
    s.vocab_size = 12;
    s.num_train = 64;
    s.num_eval = 24;
    return s;
}

Checkpoint tiny_ckpt(AttentionMode mode, std::uint64_t seed = 3) {
    SeededRng rng(seed);
    return init_checkpoint(tiny_model(mode), rng);
}

}  // namespace

TEST_CASE("ar_loss of a uniform-logit model is ln V") {
    Checkpoint ckpt = tiny_ckpt(AttentionMode::kCausal);
    ckpt.params["head.w"] = Tensor::zeros({16, 12});
    ckpt.params["head.b"] = Tensor::zeros({12});
    Dataset ds = generate_dataset(tiny_task(), 1);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 3);
    REQUIRE(ar_loss(ckpt, batch) == Catch::Approx(std::log(12.0)).margin(1e-12));
}

TEST_CASE("ar_loss matches a direct cross-entropy computation") {
    Checkpoint ckpt = tiny_ckpt(AttentionMode::kCausal);
    Dataset ds = generate_dataset(tiny_task(), 2);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 2);
    double expected = 0.0;
    for (const Example& ex : batch) {
        std::vector<int> seq = ex.full();
        Tensor logits = forward(ckpt, seq).logits;
        std::vector<int> targets(seq.size(), 0);
        std::vector<bool> mask(seq.size(), false);
        for (std::size_t i = ex.prompt.size(); i < seq.size(); ++i) {
            targets[i - 1] = seq[i];
            mask[i - 1] = true;
        }
        expected += cross_entropy(logits, targets, mask);
    }
    expected /= batch.size();
    REQUIRE(ar_loss(ckpt, batch) == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("loss objectives reject mismatched attention modes") {
    Checkpoint bidir = tiny_ckpt(AttentionMode::kBidirectional);
    Checkpoint causal = tiny_ckpt(AttentionMode::kCausal);
    Dataset ds = generate_dataset(tiny_task(), 3);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 2);
    SeededRng rng(4);
    REQUIRE_THROWS_AS(ar_loss(bidir, batch), ConfigError);
    REQUIRE_THROWS_AS(diffusion_loss(causal, batch, rng), ConfigError);
}

TEST_CASE("diffusion loss with everything masked equals full-response cross entropy") {
    Checkpoint ckpt = tiny_ckpt(AttentionMode::kBidirectional);
    Dataset ds = generate_dataset(tiny_task(), 4);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 1);
    const Example& ex = batch[0];

    detail::MaskDraw draw;
    draw.t = 1.0;
    draw.masked.assign(ex.response.size(), true);
    Tape tape(false);
    std::vector<detail::MaskDraw> draws{draw};
    double loss =
        tape.value(detail::build_diffusion_loss_with_draws(tape, ckpt, batch, draws).loss)[0];

    // direct route: corrupt every response token, score those positions
    std::vector<int> seq = ex.full();
    std::vector<int> targets(seq.size(), 0);
    std::vector<bool> mask(seq.size(), false);
    for (std::size_t i = ex.prompt.size(); i < seq.size(); ++i) {
        targets[i] = seq[i];
        mask[i] = true;
        seq[i] = ckpt.config.mask_id();
    }
    double expected = cross_entropy(forward(ckpt, seq).logits, targets, mask);
    REQUIRE(loss == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("diffusion loss reproduces a hand-built masked case with 1/t weight") {
    Checkpoint ckpt = tiny_ckpt(AttentionMode::kBidirectional);
    Dataset ds = generate_dataset(tiny_task(), 5);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 1);
    const Example& ex = batch[0];
    REQUIRE(ex.response.size() >= 2);

    detail::MaskDraw draw;
    draw.t = 0.5;
    draw.masked.assign(ex.response.size(), false);
    draw.masked[0] = true;
    Tape tape(false);
    std::vector<detail::MaskDraw> draws{draw};
    double loss =
        tape.value(detail::build_diffusion_loss_with_draws(tape, ckpt, batch, draws).loss)[0];

    std::vector<int> seq = ex.full();
    const int pos = static_cast<int>(ex.prompt.size());
    std::vector<int> targets(seq.size(), 0);
    std::vector<bool> mask(seq.size(), false);
    targets[pos] = seq[pos];
    mask[pos] = true;
    seq[pos] = ckpt.config.mask_id();
    double expected = 2.0 * cross_entropy(forward(ckpt, seq).logits, targets, mask);
    REQUIRE(loss == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("a batch with nothing masked is degenerate") {
    Checkpoint ckpt = tiny_ckpt(AttentionMode::kBidirectional);
    Dataset ds = generate_dataset(tiny_task(), 6);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 1);
    detail::MaskDraw draw;
    draw.t = 0.01;
    draw.masked.assign(batch[0].response.size(), false);
    Tape tape(false);
    std::vector<detail::MaskDraw> draws{draw};
    REQUIRE_THROWS_AS(detail::build_diffusion_loss_with_draws(tape, ckpt, batch, draws),
                      DegenerateBatchError);
}

TEST_CASE("empty first draw is resampled once") {
    // find a seed whose first draw masks nothing for a 2-token response but
    // whose second masks something, by replaying the generator's stream
    Dataset ds = generate_dataset(tiny_task(), 7);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 1);
    const std::size_t n = batch[0].response.size();
    std::uint64_t found = 0;
    bool ok = false;
    for (std::uint64_t seed = 1; seed < 4000 && !ok; ++seed) {
        SeededRng probe(seed);
        double t1 = probe.uniform_open0();
        bool first_empty = true;
        for (std::size_t i = 0; i < n; ++i)
            if (probe.uniform() < t1) first_empty = false;
        if (!first_empty) continue;
        double t2 = probe.uniform_open0();
        for (std::size_t i = 0; i < n; ++i)
            if (probe.uniform() < t2) {
                ok = true;
                found = seed;
            }
    }
    REQUIRE(ok);
    SeededRng rng(found);
    auto draws = detail::draw_diffusion_masks(batch, rng);
    int total = 0;
    for (bool b : draws[0].masked) total += b ? 1 : 0;
    REQUIRE(total > 0);
}

TEST_CASE("diffusion gradient flows only through masked logit rows") {
    Checkpoint ckpt = tiny_ckpt(AttentionMode::kBidirectional);
    Dataset ds = generate_dataset(tiny_task(), 8);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 1);
    detail::MaskDraw draw;
    draw.t = 0.7;
    draw.masked.assign(batch[0].response.size(), false);
    draw.masked[0] = true;

    Tape tape(true);
    std::vector<detail::MaskDraw> draws{draw};
    detail::BatchGraphs bg = detail::build_diffusion_loss_with_draws(tape, ckpt, batch, draws);
    tape.backward(bg.loss);
    Tensor gl = tape.grad(bg.graphs[0].logits);
    const int masked_row = static_cast<int>(batch[0].prompt.size());
    for (int i = 0; i < gl.rows(); ++i) {
        double rownorm = 0.0;
        for (int j = 0; j < gl.cols(); ++j) rownorm += std::fabs(gl.at(i, j));
        if (i == masked_row)
            REQUIRE(rownorm > 0.0);
        else
            REQUIRE(rownorm == 0.0);
    }
}

TEST_CASE("training loss decreases over the pinned first steps") {
    TrainConfig tc;
    tc.objective = Objective::kArNtp;
    tc.model = tiny_model(AttentionMode::kCausal);
    tc.steps = 60;
    tc.batch_size = 4;
    tc.learning_rate = 3e-3;
    tc.seed = 21;
    tc.log_every = 1;
    TrainLog log;
    train(tc, tiny_task(), &log);
    REQUIRE(log.rows.size() == 60);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 5; ++i) {
        head += log.rows[i].loss;
        tail += log.rows[log.rows.size() - 1 - i].loss;
    }
    REQUIRE(tail / 5.0 < head / 5.0);
}

TEST_CASE("zero-step training with init_from returns the initializer bitwise") {
    SeededRng rng(31);
    Checkpoint init = init_checkpoint(tiny_model(AttentionMode::kCausal), rng);
    init.regime = Regime::kNativeAr;
    TrainConfig tc;
    tc.objective = Objective::kMaskedDiffusion;
    tc.model = tiny_model(AttentionMode::kBidirectional);
    tc.steps = 0;
    tc.seed = 32;
    tc.init_from = init;
    Checkpoint out = train(tc, tiny_task());
    REQUIRE(out.params.size() == init.params.size());
    for (const auto& [name, t] : init.params) REQUIRE(bitwise_equal(t, out.param(name)));
}

TEST_CASE("regime tags follow objective and initialization") {
    TrainConfig ar;
    ar.objective = Objective::kArNtp;
    ar.model = tiny_model(AttentionMode::kCausal);
    ar.steps = 1;
    ar.batch_size = 2;
    ar.seed = 41;
    Checkpoint ar_ckpt = train(ar, tiny_task());
    REQUIRE(ar_ckpt.regime == Regime::kNativeAr);

    TrainConfig diff = ar;
    diff.objective = Objective::kMaskedDiffusion;
    diff.model = tiny_model(AttentionMode::kBidirectional);
    Checkpoint diff_ckpt = train(diff, tiny_task());
    REQUIRE(diff_ckpt.regime == Regime::kNativeDiffusion);

    TrainConfig adopted = diff;
    adopted.init_from = ar_ckpt;
    Checkpoint adopted_ckpt = train(adopted, tiny_task());
    REQUIRE(adopted_ckpt.regime == Regime::kArInitDiffusion);
}

TEST_CASE("training validation errors") {
    TrainConfig tc;
    tc.objective = Objective::kMaskedDiffusion;
    tc.model = tiny_model(AttentionMode::kCausal);  // wrong mode for objective
    REQUIRE_THROWS_AS(tc.validate(), ConfigError);

    tc.objective = Objective::kArNtp;
    tc.model = tiny_model(AttentionMode::kCausal);
    SeededRng rng(1);
    ModelConfig other = tiny_model(AttentionMode::kCausal);
    other.d_model = 32;
    other.num_heads = 4;
    tc.init_from = init_checkpoint(other, rng);
    REQUIRE_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("diverging training reports the failing step") {
    TrainConfig tc;
    tc.objective = Objective::kArNtp;
    tc.model = tiny_model(AttentionMode::kCausal);
    tc.steps = 40;
    tc.batch_size = 2;
    // layer norm keeps merely-large weights finite; this rate overflows the
    // attention scores on the first few steps
    tc.learning_rate = 1e160;
    tc.warmup_steps = 0;
    tc.seed = 51;
    REQUIRE_THROWS_AS(train(tc, tiny_task()), DivergenceError);
}

TEST_CASE("native-ar copy model reaches the pinned exact-match bar") {
    // The budget below was calibrated once; the bar itself comes from the
    // task being fully learnable at this scale.
    TaskSpec task;
    task.kind = TaskKind::kCopy;
    task.min_len = 5;
    task.max_len = 5;
    task.alphabet_size = 8;
    task.vocab_size = 16;
    task.num_train = 1024;
    task.num_eval = 40;

    TrainConfig tc;
    tc.objective = Objective::kArNtp;
    tc.model.num_blocks = 8;
    tc.model.d_model = 64;
    tc.model.num_heads = 4;
    tc.model.d_ff = 256;
    tc.model.vocab_size = 16;
    tc.model.max_seq_len = 16;
    tc.model.attention_mode = AttentionMode::kCausal;
    tc.steps = 300;
    tc.batch_size = 8;
    tc.learning_rate = 1e-3;
    tc.seed = 61;
    Checkpoint ckpt = train(tc, task);

    Dataset ds = generate_dataset(task, 61);
    DecodeConfig dc;
    dc.mode = DecodeMode::kAr;
    double em = evaluate(ckpt, SkipSet(), ds.eval, dc);
    REQUIRE(em >= 0.95);

    // a (near) perfect teacher-forced predictor has near-zero loss
    std::vector<Example> probe(ds.eval.begin(), ds.eval.begin() + 8);
    REQUIRE(ar_loss(ckpt, probe) < 0.25);
}
