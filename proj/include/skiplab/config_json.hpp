#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "skiplab/decode.hpp"
#include "skiplab/serialize.hpp"
#include "skiplab/skip_policy.hpp"
#include "skiplab/tasks.hpp"
#include "skiplab/training.hpp"

namespace skiplab {

// JSON (de)serialization for every configurable struct. All fields are
// explicit in the emitted form so a stored config is self-describing.

inline nlohmann::json to_json(const ModelConfig& c) { return detail::config_to_json(c); }

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    return detail::config_from_json(j);
}

inline nlohmann::json to_json(const TaskSpec& t) {
    return {{"kind", to_string(t.kind)},
            {"min_len", t.min_len},
            {"max_len", t.max_len},
            {"alphabet_size", t.alphabet_size},
            {"vocab_size", t.vocab_size},
            {"hole_ratio", t.hole_ratio},
            {"num_train", t.num_train},
            {"num_eval", t.num_eval}};
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
    TaskSpec t;
    t.kind = task_kind_from_string(j.at("kind").get<std::string>());
    t.min_len = j.at("min_len").get<int>();
    t.max_len = j.at("max_len").get<int>();
    t.alphabet_size = j.at("alphabet_size").get<int>();
    t.vocab_size = j.at("vocab_size").get<int>();
    t.hole_ratio = j.value("hole_ratio", 0.25);
    t.num_train = j.value("num_train", 512);
    t.num_eval = j.value("num_eval", 128);
    return t;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j{{"objective", to_string(c.objective)},
                     {"model", to_json(c.model)},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"lr_schedule", c.lr_schedule},
                     {"warmup_steps", c.warmup_steps},
                     {"seed", c.seed},
                     {"data_seed", c.data_seed},
                     {"log_every", c.log_every}};
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.objective = objective_from_string(j.at("objective").get<std::string>());
    c.model = model_config_from_json(j.at("model"));
    c.steps = j.at("steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.lr_schedule = j.value("lr_schedule", "constant");
    c.warmup_steps = j.value("warmup_steps", 20);
    c.seed = j.at("seed").get<std::uint64_t>();
    c.data_seed = j.value("data_seed", std::uint64_t{0});
    c.log_every = j.value("log_every", 25);
    return c;
}

inline nlohmann::json to_json(const DecodeConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"max_new_tokens", c.max_new_tokens},
            {"sampler", c.sampler == SamplerKind::kGreedy ? "greedy" : "nucleus"},
            {"top_p", c.top_p},
            {"temperature", c.temperature},
            {"denoising_steps", c.denoising_steps},
            {"seed", c.seed},
            {"stop_token", c.stop_token}};
}

inline DecodeConfig decode_config_from_json(const nlohmann::json& j) {
    DecodeConfig c;
    std::string mode = j.value("mode", "ar");
    if (mode == "ar")
        c.mode = DecodeMode::kAr;
    else if (mode == "diffusion")
        c.mode = DecodeMode::kDiffusion;
    else
        throw ConfigError("unknown decode mode: " + mode);
    c.max_new_tokens = j.value("max_new_tokens", 16);
    std::string sampler = j.value("sampler", "greedy");
    if (sampler == "greedy")
        c.sampler = SamplerKind::kGreedy;
    else if (sampler == "nucleus")
        c.sampler = SamplerKind::kNucleus;
    else
        throw ConfigError("unknown sampler: " + sampler);
    c.top_p = j.value("top_p", 0.95);
    c.temperature = j.value("temperature", 1.0);
    c.denoising_steps = j.value("denoising_steps", 8);
    c.seed = j.value("seed", std::uint64_t{0});
    c.stop_token = j.value("stop_token", -1);
    return c;
}

inline nlohmann::json to_json(const SkipPolicyConfig& c) {
    return {{"tau", c.tau}, {"n_max", c.n_max}, {"allow_consecutive", c.allow_consecutive}};
}

inline SkipPolicyConfig skip_policy_from_json(const nlohmann::json& j) {
    SkipPolicyConfig c;
    c.tau = j.value("tau", 0.95);
    c.n_max = j.value("n_max", 2);
    c.allow_consecutive = j.value("allow_consecutive", false);
    return c;
}

}  // namespace skiplab
