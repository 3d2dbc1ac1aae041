#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "skiplab/model.hpp"

namespace skiplab {

// Checkpoint file = one JSON manifest line (config, regime, tensor shapes,
// declared little-endian byte order) followed by the raw float64 payload in
// manifest order. Round trips are bit-exact.

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_f64_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline double read_f64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"num_blocks", c.num_blocks},   {"d_model", c.d_model},
            {"num_heads", c.num_heads},     {"d_ff", c.d_ff},
            {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
            {"mask_token", c.mask_id()},    {"attention_mode", to_string(c.attention_mode)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_blocks = j.at("num_blocks").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.mask_token = j.at("mask_token").get<int>();
    std::string mode = j.at("attention_mode").get<std::string>();
    if (mode == "causal")
        c.attention_mode = AttentionMode::kCausal;
    else if (mode == "bidirectional")
        c.attention_mode = AttentionMode::kBidirectional;
    else
        throw ConfigError("unknown attention_mode: " + mode);
    return c;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["format"] = "skiplab-checkpoint";
    manifest["version"] = kCheckpointVersion;
    manifest["endianness"] = "little";
    manifest["config"] = detail::config_to_json(ckpt.config);
    manifest["regime"] = to_string(ckpt.regime);
    manifest["train_seed"] = ckpt.train_seed;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : ckpt.params)
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"count", t.size()}});
    manifest["tensors"] = tensors;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open checkpoint file for writing: " + path);
    os << manifest.dump() << '\n';
    for (const auto& [name, t] : ckpt.params)
        for (double v : t.vec()) detail::write_f64_le(os, v);
    if (!os) throw InputError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint file: " + path);
    std::string header;
    if (!std::getline(is, header)) throw InputError("checkpoint missing manifest line: " + path);
    nlohmann::json manifest = nlohmann::json::parse(header);
    if (manifest.value("format", "") != "skiplab-checkpoint")
        throw InputError("not a skiplab checkpoint: " + path);
    if (manifest.value("version", 0) != kCheckpointVersion)
        throw InputError("unsupported checkpoint version in " + path);
    if (manifest.value("endianness", "") != "little")
        throw InputError("unsupported byte order in " + path);

    Checkpoint ckpt;
    ckpt.config = detail::config_from_json(manifest.at("config"));
    ckpt.regime = regime_from_string(manifest.at("regime").get<std::string>());
    ckpt.train_seed = manifest.at("train_seed").get<std::uint64_t>();
    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        std::size_t count = entry.at("count").get<std::size_t>();
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = detail::read_f64_le(is);
        if (!is) throw InputError("truncated checkpoint payload: " + path);
        ckpt.params.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return ckpt;
}

}  // namespace skiplab
