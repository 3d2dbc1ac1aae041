#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "skiplab/model.hpp"
#include "skiplab/tensor.hpp"

namespace skiplab {

enum class TokenWindow { kPromptOnly, kAll };

// Entry ell (1-indexed) is the mean per-token cosine between H_{ell-1} and
// H_ell, i.e. how little block ell transforms its input. A bypassed block
// scores exactly 1.
struct SimilarityList {
    std::vector<double> values;  // length L

    int num_layers() const { return static_cast<int>(values.size()); }
    double at_block(int ell) const { return values.at(ell - 1); }
};

// Rows: block 1..L. Columns: denoising steps (a single column for AR).
struct LayerStepMatrix {
    std::vector<std::vector<double>> cells;  // cells[layer-1][step-1]

    int num_layers() const { return static_cast<int>(cells.size()); }
    int num_steps() const { return cells.empty() ? 0 : static_cast<int>(cells[0].size()); }
};

// Cosine between consecutive token positions within one captured state.
struct TokenSimilaritySeries {
    int layer = 0;               // state index 0..L (0 = post-embedding)
    std::vector<double> values;  // length seq_len - 1
};

struct AvgTokenProfile {
    std::vector<double> mean;    // per block output 1..L
    std::vector<double> stddev;  // across denoising steps
};

struct NormProfile {
    // One entry per captured state 0..L.
    std::vector<double> mean_norm;
    std::vector<double> median_norm;
    std::vector<double> max_norm;
    std::vector<std::vector<bool>> sink;  // sink[layer][position]
};

inline SimilarityList layerwise_similarity(const HiddenStateTrace& trace, TokenWindow window,
                                           int prompt_len = 0) {
    const int L = trace.num_blocks();
    if (L < 1) throw InputError("trace has no block states");
    const int seq = trace.states[0].rows();
    int lo = 0, hi = seq;
    if (window == TokenWindow::kPromptOnly) {
        if (prompt_len < 1) throw InputError("prompt-only window needs prompt length >= 1");
        hi = std::min(prompt_len, seq);
    }
    if (hi <= lo) throw InputError("empty token window");
    SimilarityList out;
    out.values.resize(L);
    for (int ell = 1; ell <= L; ++ell) {
        const Tensor& prev = trace.states[ell - 1];
        const Tensor& cur = trace.states[ell];
        double sum = 0.0;
        for (int i = lo; i < hi; ++i) sum += cosine(prev.row(i), cur.row(i));
        out.values[ell - 1] = sum / (hi - lo);
    }
    return out;
}

inline TokenSimilaritySeries tokenwise_similarity(const HiddenStateTrace& trace, int layer) {
    if (layer < 0 || layer > trace.num_blocks()) throw InputError("layer index out of trace");
    const Tensor& h = trace.states[layer];
    if (h.rows() < 2) throw InputError("token-wise similarity needs at least two positions");
    TokenSimilaritySeries s;
    s.layer = layer;
    s.values.resize(h.rows() - 1);
    for (int i = 0; i + 1 < h.rows(); ++i) s.values[i] = cosine(h.row(i), h.row(i + 1));
    return s;
}

// Which consecutive-token pairs enter the averaged profile. Response-only is
// the default: pair i covers positions (i, i+1), kept when i >= prompt_len.
enum class PairWindow { kResponseOnly, kAll };

// Mean/std across denoising steps of the per-layer mean token-wise
// similarity. Profiles cover block outputs 1..L.
inline AvgTokenProfile avg_tokenwise_profile(const std::vector<HiddenStateTrace>& traces,
                                             PairWindow window = PairWindow::kResponseOnly,
                                             int prompt_len = 0) {
    if (traces.empty()) throw InputError("no traces");
    const int L = traces[0].num_blocks();
    for (const auto& t : traces)
        if (t.num_blocks() != L) throw InputError("traces disagree on layer count");

    AvgTokenProfile prof;
    prof.mean.assign(L, 0.0);
    prof.stddev.assign(L, 0.0);
    std::vector<std::vector<double>> per_step(L);
    for (const auto& trace : traces) {
        const int seq = trace.states[0].rows();
        const int first = window == PairWindow::kResponseOnly ? std::max(0, prompt_len) : 0;
        const int last = seq - 1;  // pair i covers (i, i+1)
        if (first >= last) throw InputError("window leaves no token pairs");
        for (int ell = 1; ell <= L; ++ell) {
            const Tensor& h = trace.states[ell];
            double sum = 0.0;
            for (int i = first; i < last; ++i) sum += cosine(h.row(i), h.row(i + 1));
            per_step[ell - 1].push_back(sum / (last - first));
        }
    }
    const int T = static_cast<int>(traces.size());
    for (int ell = 0; ell < L; ++ell) {
        double mu = 0.0;
        for (double v : per_step[ell]) mu += v;
        mu /= T;
        double var = 0.0;
        for (double v : per_step[ell]) var += (v - mu) * (v - mu);
        prof.mean[ell] = mu;
        prof.stddev[ell] = std::sqrt(var / T);
    }
    return prof;
}

inline NormProfile norm_profile(const HiddenStateTrace& trace, double sink_ratio = 50.0) {
    if (sink_ratio <= 1.0) throw InputError("sink_ratio must exceed 1");
    NormProfile prof;
    const int states = static_cast<int>(trace.states.size());
    prof.mean_norm.resize(states);
    prof.median_norm.resize(states);
    prof.max_norm.resize(states);
    prof.sink.resize(states);
    for (int ell = 0; ell < states; ++ell) {
        const Tensor& h = trace.states[ell];
        const int n = h.rows();
        std::vector<double> norms(n);
        for (int i = 0; i < n; ++i) norms[i] = l2_norm(h.row(i));
        double mean = 0.0, mx = 0.0;
        for (double v : norms) {
            mean += v;
            mx = std::max(mx, v);
        }
        mean /= n;
        std::vector<double> sorted = norms;
        std::sort(sorted.begin(), sorted.end());
        double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        prof.mean_norm[ell] = mean;
        prof.median_norm[ell] = median;
        prof.max_norm[ell] = mx;
        prof.sink[ell].resize(n);
        for (int i = 0; i < n; ++i) prof.sink[ell][i] = norms[i] >= sink_ratio * median;
    }
    return prof;
}

// 1 - mean consecutive-token similarity: 0 means the representation does not
// move as tokens advance, larger means stronger per-token change.
inline double recency_bias_score(const TokenSimilaritySeries& series) {
    if (series.values.empty()) throw InputError("empty similarity series");
    double mu = 0.0;
    for (double v : series.values) mu += v;
    mu /= series.values.size();
    return 1.0 - mu;
}

inline double profile_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InputError("profile length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline LayerStepMatrix make_layer_step_matrix(const std::vector<SimilarityList>& per_step) {
    if (per_step.empty()) throw InputError("no similarity columns");
    const int L = per_step[0].num_layers();
    for (const auto& s : per_step)
        if (s.num_layers() != L) throw InputError("similarity lists disagree on layer count");
    LayerStepMatrix m;
    m.cells.assign(L, std::vector<double>(per_step.size()));
    for (std::size_t t = 0; t < per_step.size(); ++t)
        for (int ell = 0; ell < L; ++ell) m.cells[ell][t] = per_step[t].values[ell];
    return m;
}

}  // namespace skiplab
