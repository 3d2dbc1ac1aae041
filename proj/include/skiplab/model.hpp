#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "skiplab/autodiff.hpp"
#include "skiplab/rng.hpp"
#include "skiplab/tensor.hpp"

namespace skiplab {

enum class AttentionMode { kCausal, kBidirectional };

inline const char* to_string(AttentionMode m) {
    return m == AttentionMode::kCausal ? "causal" : "bidirectional";
}

enum class Regime { kNativeAr, kNativeDiffusion, kArInitDiffusion };

inline const char* to_string(Regime r) {
    switch (r) {
        case Regime::kNativeAr: return "native-ar";
        case Regime::kNativeDiffusion: return "native-diffusion";
        case Regime::kArInitDiffusion: return "ar-init-diffusion";
    }
    return "?";
}

inline Regime regime_from_string(const std::string& s) {
    if (s == "native-ar") return Regime::kNativeAr;
    if (s == "native-diffusion") return Regime::kNativeDiffusion;
    if (s == "ar-init-diffusion") return Regime::kArInitDiffusion;
    throw ConfigError("unknown regime tag: " + s);
}

struct ModelConfig {
    int num_blocks = 8;
    int d_model = 64;
    int num_heads = 4;
    int d_ff = 256;
    int vocab_size = 64;   // includes the reserved MASK id
    int max_seq_len = 64;
    int mask_token = -1;   // -1 resolves to vocab_size - 1
    AttentionMode attention_mode = AttentionMode::kCausal;

    void validate() const {
        if (num_blocks < 2) throw ConfigError("num_blocks must be >= 2");
        if (d_model <= 0 || num_heads <= 0 || d_model % num_heads != 0)
            throw ConfigError("d_model must be divisible by num_heads");
        if (d_ff <= 0 || vocab_size <= 1 || max_seq_len <= 0)
            throw ConfigError("invalid model dimensions");
        if (mask_id() < 0 || mask_id() >= vocab_size)
            throw ConfigError("MASK id must be < vocab_size");
    }

    int mask_id() const { return mask_token < 0 ? vocab_size - 1 : mask_token; }
    int head_dim() const { return d_model / num_heads; }

    bool same_arch(const ModelConfig& o) const {
        return num_blocks == o.num_blocks && d_model == o.d_model && num_heads == o.num_heads &&
               d_ff == o.d_ff && vocab_size == o.vocab_size && max_seq_len == o.max_seq_len &&
               mask_id() == o.mask_id();
    }
};

// Block indices bypassed at inference, kept sorted and unique. Indices are
// 1-based: block ell consumes H_{ell-1} and produces H_ell.
class SkipSet {
  public:
    SkipSet() = default;
    explicit SkipSet(std::vector<int> blocks) : blocks_(std::move(blocks)) {
        std::sort(blocks_.begin(), blocks_.end());
        blocks_.erase(std::unique(blocks_.begin(), blocks_.end()), blocks_.end());
    }

    const std::vector<int>& blocks() const { return blocks_; }
    std::size_t size() const { return blocks_.size(); }
    bool empty() const { return blocks_.empty(); }
    bool contains(int b) const {
        return std::binary_search(blocks_.begin(), blocks_.end(), b);
    }

    bool has_adjacent_pair() const {
        for (std::size_t i = 1; i < blocks_.size(); ++i)
            if (blocks_[i] - blocks_[i - 1] == 1) return true;
        return false;
    }

    void validate(int num_blocks) const {
        for (int b : blocks_)
            if (b < 1 || b > num_blocks)
                throw ConfigError("skip index " + std::to_string(b) + " outside 1.." +
                                  std::to_string(num_blocks));
    }

    bool operator==(const SkipSet& o) const { return blocks_ == o.blocks_; }

    std::string str() const {
        std::string s = "{";
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(blocks_[i]);
        }
        return s + "}";
    }

  private:
    std::vector<int> blocks_;
};

// H_0 is the post-embedding state, H_ell the output of block ell; length is
// always num_blocks + 1. A bypassed block contributes a state equal to its
// input.
struct HiddenStateTrace {
    std::vector<Tensor> states;
    int step = 0;  // denoising step; 0 for AR decode steps

    int num_blocks() const { return static_cast<int>(states.size()) - 1; }
};

struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor> params;
    Regime regime = Regime::kNativeAr;
    std::uint64_t train_seed = 0;

    const Tensor& param(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("checkpoint missing parameter: " + name);
        return it->second;
    }
};

inline std::string block_prefix(int block) { return "block" + std::to_string(block) + "."; }

// Fresh random initialization: N(0, 0.02) weights, zero biases, unit gains.
inline Checkpoint init_checkpoint(const ModelConfig& cfg, SeededRng& rng) {
    cfg.validate();
    auto randn = [&rng](std::vector<int> shape) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (double& v : t.vec()) v = 0.02 * rng.normal();
        return t;
    };
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.train_seed = rng.seed();
    auto& p = ckpt.params;
    p["tok_emb"] = randn({cfg.vocab_size, cfg.d_model});
    p["pos_emb"] = randn({cfg.max_seq_len, cfg.d_model});
    for (int b = 1; b <= cfg.num_blocks; ++b) {
        std::string pre = block_prefix(b);
        p[pre + "ln1.gain"] = Tensor::full({cfg.d_model}, 1.0);
        p[pre + "ln1.bias"] = Tensor::zeros({cfg.d_model});
        p[pre + "attn.wq"] = randn({cfg.d_model, cfg.d_model});
        p[pre + "attn.bq"] = Tensor::zeros({cfg.d_model});
        p[pre + "attn.wk"] = randn({cfg.d_model, cfg.d_model});
        p[pre + "attn.bk"] = Tensor::zeros({cfg.d_model});
        p[pre + "attn.wv"] = randn({cfg.d_model, cfg.d_model});
        p[pre + "attn.bv"] = Tensor::zeros({cfg.d_model});
        p[pre + "attn.wo"] = randn({cfg.d_model, cfg.d_model});
        p[pre + "attn.bo"] = Tensor::zeros({cfg.d_model});
        p[pre + "ln2.gain"] = Tensor::full({cfg.d_model}, 1.0);
        p[pre + "ln2.bias"] = Tensor::zeros({cfg.d_model});
        p[pre + "mlp.w1"] = randn({cfg.d_model, cfg.d_ff});
        p[pre + "mlp.b1"] = Tensor::zeros({cfg.d_ff});
        p[pre + "mlp.w2"] = randn({cfg.d_ff, cfg.d_model});
        p[pre + "mlp.b2"] = Tensor::zeros({cfg.d_model});
    }
    p["ln_f.gain"] = Tensor::full({cfg.d_model}, 1.0);
    p["ln_f.bias"] = Tensor::zeros({cfg.d_model});
    p["head.w"] = randn({cfg.d_model, cfg.vocab_size});
    p["head.b"] = Tensor::zeros({cfg.vocab_size});
    return ckpt;
}

// Ids of every parameter leaf plus the graph outputs, for training code that
// needs to read gradients back out of the tape.
struct ForwardGraph {
    Tape::Id logits = -1;
    std::vector<Tape::Id> states;  // H_0 .. H_L
    std::map<std::string, Tape::Id> param_ids;
};

namespace detail {

inline Tensor attention_mask(int n, AttentionMode mode) {
    Tensor m = Tensor::zeros({n, n});
    if (mode == AttentionMode::kCausal) {
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) m.at(i, j) = -1e30;
    }
    return m;
}

struct BlockIds {
    Tape::Id ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2;
};

inline Tape::Id block_forward_on_tape(Tape& tape, const BlockIds& w, Tape::Id h,
                                      const ModelConfig& cfg, Tape::Id mask) {
    const int hd = cfg.head_dim();
    Tape::Id n1 = tape.layer_norm(h, w.ln1g, w.ln1b);
    Tape::Id q = tape.add_rowvec(tape.matmul(n1, w.wq), w.bq);
    Tape::Id k = tape.add_rowvec(tape.matmul(n1, w.wk), w.bk);
    Tape::Id v = tape.add_rowvec(tape.matmul(n1, w.wv), w.bv);
    std::vector<Tape::Id> ctx;
    ctx.reserve(cfg.num_heads);
    for (int head = 0; head < cfg.num_heads; ++head) {
        const int c0 = head * hd, c1 = (head + 1) * hd;
        Tape::Id qh = tape.slice_cols(q, c0, c1);
        Tape::Id kh = tape.slice_cols(k, c0, c1);
        Tape::Id vh = tape.slice_cols(v, c0, c1);
        Tape::Id scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / std::sqrt(hd));
        scores = tape.add(scores, mask);
        Tape::Id attn = tape.softmax_rows(scores);
        ctx.push_back(tape.matmul(attn, vh));
    }
    Tape::Id merged = tape.concat_cols(ctx);
    Tape::Id attn_out = tape.add_rowvec(tape.matmul(merged, w.wo), w.bo);
    Tape::Id a = tape.add(h, attn_out);
    Tape::Id n2 = tape.layer_norm(a, w.ln2g, w.ln2b);
    Tape::Id m = tape.add_rowvec(tape.matmul(n2, w.w1), w.b1);
    m = tape.gelu(m);
    m = tape.add_rowvec(tape.matmul(m, w.w2), w.b2);
    return tape.add(a, m);
}

}  // namespace detail

// Builds the full forward graph on the given tape. Blocks in `skip` are not
// evaluated at all; their state id aliases the previous one.
inline ForwardGraph build_forward(Tape& tape, const Checkpoint& ckpt,
                                  const std::vector<int>& tokens, const SkipSet& skip) {
    const ModelConfig& cfg = ckpt.config;
    cfg.validate();
    skip.validate(cfg.num_blocks);
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw InputError("empty token sequence");
    if (n > cfg.max_seq_len) throw InputError("sequence longer than max_seq_len");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw InputError("token id outside vocabulary");

    ForwardGraph g;
    auto pid = [&](const std::string& name) {
        Tape::Id id = tape.external(&ckpt.param(name));
        g.param_ids[name] = id;
        return id;
    };

    Tape::Id tok_emb = pid("tok_emb");
    Tape::Id pos_emb = pid("pos_emb");
    Tape::Id h = tape.add(tape.gather_rows(tok_emb, tokens),
                          tape.slice_rows(pos_emb, 0, n));
    g.states.push_back(h);

    Tape::Id mask = tape.leaf(detail::attention_mask(n, cfg.attention_mode));
    for (int b = 1; b <= cfg.num_blocks; ++b) {
        std::string pre = block_prefix(b);
        detail::BlockIds w{
            pid(pre + "ln1.gain"), pid(pre + "ln1.bias"), pid(pre + "attn.wq"),
            pid(pre + "attn.bq"),  pid(pre + "attn.wk"),  pid(pre + "attn.bk"),
            pid(pre + "attn.wv"),  pid(pre + "attn.bv"),  pid(pre + "attn.wo"),
            pid(pre + "attn.bo"),  pid(pre + "ln2.gain"), pid(pre + "ln2.bias"),
            pid(pre + "mlp.w1"),   pid(pre + "mlp.b1"),   pid(pre + "mlp.w2"),
            pid(pre + "mlp.b2")};
        if (skip.contains(b)) {
            g.states.push_back(h);  // bypass: H_b == H_{b-1}
            continue;
        }
        h = detail::block_forward_on_tape(tape, w, h, cfg, mask);
        g.states.push_back(h);
    }

    Tape::Id hn = tape.layer_norm(h, pid("ln_f.gain"), pid("ln_f.bias"));
    g.logits = tape.add_rowvec(tape.matmul(hn, pid("head.w")), pid("head.b"));
    return g;
}

struct ForwardResult {
    Tensor logits;
    std::optional<HiddenStateTrace> trace;
};

inline ForwardResult forward(const Checkpoint& ckpt, const std::vector<int>& tokens,
                             const SkipSet& skip = SkipSet(), bool capture = false,
                             int trace_step = 0) {
    Tape tape(/*recording=*/false);
    ForwardGraph g = build_forward(tape, ckpt, tokens, skip);
    ForwardResult out;
    out.logits = tape.value(g.logits);
    if (capture) {
        HiddenStateTrace trace;
        trace.step = trace_step;
        trace.states.reserve(g.states.size());
        for (Tape::Id id : g.states) trace.states.push_back(tape.value(id));
        out.trace = std::move(trace);
    }
    return out;
}

// Single block applied to an explicit hidden state; used by tests probing
// block behaviour in isolation.
inline Tensor block_forward(const Checkpoint& ckpt, int block, const Tensor& h) {
    const ModelConfig& cfg = ckpt.config;
    if (block < 1 || block > cfg.num_blocks) throw ConfigError("block index out of range");
    if (h.dim() != 2 || h.cols() != cfg.d_model)
        throw ShapeError("block_forward expects (seq x d_model)");
    Tape tape(/*recording=*/false);
    std::string pre = block_prefix(block);
    auto pid = [&](const std::string& name) { return tape.external(&ckpt.param(name)); };
    detail::BlockIds w{
        pid(pre + "ln1.gain"), pid(pre + "ln1.bias"), pid(pre + "attn.wq"),
        pid(pre + "attn.bq"),  pid(pre + "attn.wk"),  pid(pre + "attn.bk"),
        pid(pre + "attn.wv"),  pid(pre + "attn.bv"),  pid(pre + "attn.wo"),
        pid(pre + "attn.bo"),  pid(pre + "ln2.gain"), pid(pre + "ln2.bias"),
        pid(pre + "mlp.w1"),   pid(pre + "mlp.b1"),   pid(pre + "mlp.w2"),
        pid(pre + "mlp.b2")};
    Tape::Id hid = tape.leaf(h);
    Tape::Id mask = tape.leaf(detail::attention_mask(h.rows(), cfg.attention_mode));
    return tape.value(detail::block_forward_on_tape(tape, w, hid, cfg, mask));
}

// Physically removes the given blocks and renumbers the rest; reference model
// for the skip/assembly equivalence checks.
inline Checkpoint drop_blocks(const Checkpoint& ckpt, const SkipSet& skip) {
    skip.validate(ckpt.config.num_blocks);
    Checkpoint out;
    out.config = ckpt.config;
    out.config.num_blocks = ckpt.config.num_blocks - static_cast<int>(skip.size());
    out.regime = ckpt.regime;
    out.train_seed = ckpt.train_seed;
    for (const auto& [name, tensor] : ckpt.params)
        if (name.rfind("block", 0) != 0) out.params[name] = tensor;
    int dst = 1;
    for (int b = 1; b <= ckpt.config.num_blocks; ++b) {
        if (skip.contains(b)) continue;
        std::string src_pre = block_prefix(b);
        std::string dst_pre = block_prefix(dst++);
        for (const auto& [name, tensor] : ckpt.params)
            if (name.rfind(src_pre, 0) == 0)
                out.params[dst_pre + name.substr(src_pre.size())] = tensor;
    }
    return out;
}

}  // namespace skiplab
