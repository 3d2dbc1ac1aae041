#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "skiplab/errors.hpp"
#include "skiplab/rng.hpp"

namespace skiplab {

// Exact-match-scorable toy tasks. Token id layout, counted down from the
// vocabulary top so symbol ids always start at 0:
//   V-1  MASK  (reserved by the model config)
//   V-2  SEP   (end of prompt)
//   V-3  HOLE  (blanked-out position, span-infill prompts)
//   V-4  PLUS  (operand separator, modular-sum prompts)
// A vocabulary must fit alphabet_size symbols below the special ids.
enum class TaskKind { kCopy, kReverse, kSortDigits, kModularSum, kSpanInfill };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::kCopy: return "copy";
        case TaskKind::kReverse: return "reverse";
        case TaskKind::kSortDigits: return "sort-digits";
        case TaskKind::kModularSum: return "modular-sum";
        case TaskKind::kSpanInfill: return "span-infill";
    }
    return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::kCopy;
    if (s == "reverse") return TaskKind::kReverse;
    if (s == "sort-digits") return TaskKind::kSortDigits;
    if (s == "modular-sum") return TaskKind::kModularSum;
    if (s == "span-infill") return TaskKind::kSpanInfill;
    throw ConfigError("unknown task kind: " + s);
}

struct TaskSpec {
    TaskKind kind = TaskKind::kCopy;
    int min_len = 4;   // content symbols per example
    int max_len = 8;
    int alphabet_size = 10;
    int vocab_size = 16;      // must cover alphabet + special ids
    double hole_ratio = 0.25;  // span-infill: fraction of positions blanked
    int num_train = 512;
    int num_eval = 128;

    int sep_id() const { return vocab_size - 2; }
    int hole_id() const { return vocab_size - 3; }
    int plus_id() const { return vocab_size - 4; }

    void validate() const {
        if (min_len < 1 || max_len < min_len) throw ConfigError("bad task length bounds");
        if (alphabet_size < 2) throw ConfigError("alphabet too small");
        if (vocab_size < alphabet_size + 4)
            throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                              " cannot hold alphabet " + std::to_string(alphabet_size) +
                              " plus special tokens");
        if (hole_ratio <= 0.0 || hole_ratio >= 1.0) throw ConfigError("hole_ratio must be in (0,1)");
        if (num_train < 1 || num_eval < 1) throw ConfigError("dataset sizes must be positive");
    }

    // Longest prompt+response sequence this spec can emit.
    int max_sequence_len() const {
        switch (kind) {
            case TaskKind::kCopy:
            case TaskKind::kReverse:
            case TaskKind::kSortDigits: return 2 * max_len + 1;
            case TaskKind::kModularSum: return 2 * max_len + 1;  // k symbols, k-1 pluses, sep, answer
            case TaskKind::kSpanInfill: return max_len + 1 + num_holes(max_len);
        }
        return 0;
    }

    int num_holes(int n) const {
        int h = static_cast<int>(n * hole_ratio + 0.5);
        return std::max(1, std::min(h, n));
    }
};

struct Example {
    std::vector<int> prompt;
    std::vector<int> response;

    std::vector<int> full() const {
        std::vector<int> s = prompt;
        s.insert(s.end(), response.begin(), response.end());
        return s;
    }
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> eval;
};

namespace detail {

inline Example make_example(const TaskSpec& spec, SeededRng& rng) {
    const int n = rng.uniform_int(spec.min_len, spec.max_len);
    std::vector<int> src(n);
    for (int& s : src) s = static_cast<int>(rng.uniform_below(spec.alphabet_size));

    Example ex;
    switch (spec.kind) {
        case TaskKind::kCopy:
            ex.prompt = src;
            ex.prompt.push_back(spec.sep_id());
            ex.response = src;
            break;
        case TaskKind::kReverse:
            ex.prompt = src;
            ex.prompt.push_back(spec.sep_id());
            ex.response.assign(src.rbegin(), src.rend());
            break;
        case TaskKind::kSortDigits: {
            ex.prompt = src;
            ex.prompt.push_back(spec.sep_id());
            ex.response = src;
            std::sort(ex.response.begin(), ex.response.end());
            break;
        }
        case TaskKind::kModularSum: {
            long sum = 0;
            for (std::size_t i = 0; i < src.size(); ++i) {
                if (i) ex.prompt.push_back(spec.plus_id());
                ex.prompt.push_back(src[i]);
                sum += src[i];
            }
            ex.prompt.push_back(spec.sep_id());
            ex.response = {static_cast<int>(sum % spec.alphabet_size)};
            break;
        }
        case TaskKind::kSpanInfill: {
            const int holes = spec.num_holes(n);
            std::vector<int> positions(n);
            for (int i = 0; i < n; ++i) positions[i] = i;
            rng.shuffle(positions);
            positions.resize(holes);
            std::sort(positions.begin(), positions.end());
            ex.prompt = src;
            for (int p : positions) ex.prompt[p] = spec.hole_id();
            ex.prompt.push_back(spec.sep_id());
            for (int p : positions) ex.response.push_back(src[p]);
            break;
        }
    }
    return ex;
}

}  // namespace detail

// Deterministic in (spec, seed). Prompts are unique across the whole dataset,
// which makes the train/eval split disjoint by construction.
inline Dataset generate_dataset(const TaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    SeededRng rng(seed ^ 0x7461736b732d6474ULL);
    const int wanted = spec.num_train + spec.num_eval;
    Dataset ds;
    std::set<std::vector<int>> seen;
    int attempts = 0;
    const int max_attempts = wanted * 200;
    std::vector<Example> all;
    while (static_cast<int>(all.size()) < wanted) {
        if (++attempts > max_attempts)
            throw ConfigError("task space too small for requested dataset size");
        Example ex = detail::make_example(spec, rng);
        if (!seen.insert(ex.prompt).second) continue;
        all.push_back(std::move(ex));
    }
    ds.train.assign(all.begin(), all.begin() + spec.num_train);
    ds.eval.assign(all.begin() + spec.num_train, all.end());
    return ds;
}

}  // namespace skiplab
