#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tc/coder.hpp"
#include "tc/model.hpp"

namespace fx {

inline tc::ModelConfig tiny_config(std::size_t layers = 2, std::size_t heads = 2, std::size_t d_model = 8,
                                   std::size_t d_mlp = 16, std::size_t vocab = 20, std::size_t context = 8,
                                   tc::Activation act = tc::Activation::relu) {
    tc::ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d_model;
    c.d_head = d_model / heads;
    c.d_mlp = d_mlp;
    c.vocab_size = vocab;
    c.context_len = context;
    c.activation = act;
    return c;
}

// Random weights with non-trivial LayerNorm gains and biases and MLP biases.
inline tc::ModelParams random_model(const tc::ModelConfig& cfg, std::uint64_t seed, float scale = 0.5f) {
    tc::ModelParams p = tc::ModelParams::random(cfg, seed, scale);
    std::mt19937_64 rng(seed * 7 + 1);
    std::normal_distribution<float> n(0.0f, 1.0f);
    auto jitter = [&](tc::LayerNormParams& ln) {
        for (auto& g : ln.gain) g = 1.0f + 0.3f * n(rng);
        for (auto& b : ln.bias) b = 0.2f * n(rng);
    };
    for (auto& b : p.blocks) {
        jitter(b.ln1);
        jitter(b.ln2);
        for (auto& v : b.b_in) v = 0.2f * n(rng);
        for (auto& v : b.b_out) v = 0.2f * n(rng);
    }
    jitter(p.ln_final);
    return p;
}

inline tc::Coder random_transcoder(std::size_t layer, std::size_t d_model, std::size_t d_features, std::uint64_t seed,
                                   float scale = 0.5f) {
    tc::Coder c = tc::Coder::zeros(tc::CoderKind::transcoder, layer, d_model, d_model, d_features);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (auto& w : c.W_enc.data) w = scale * n(rng);
    for (auto& w : c.W_dec.data) w = scale * n(rng);
    for (auto& b : c.b_enc) b = 0.3f * n(rng);
    for (auto& b : c.b_dec) b = 0.2f * n(rng);
    return c;
}

inline std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> u(0, static_cast<int>(vocab) - 1);
    std::vector<int> t(n);
    for (auto& x : t) x = u(rng);
    return t;
}

// A fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / ("tc-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

} // namespace fx
