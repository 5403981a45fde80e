#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tc/coder.hpp"
#include "tc/corpus.hpp"
#include "tc/model.hpp"

namespace tc {

// Defaults mirror the reference training setup: Adam at 2e-5, batches of
// 4096 activations, 128-token contexts, 32x expansion, seed 42.
struct TrainConfig {
    float lambda1 = 0.0f;
    float learning_rate = 2e-5f;
    std::size_t batch_size = 4096;
    std::size_t context_len = 128;
    std::uint64_t total_tokens = 60'000'000;
    std::uint64_t seed = 42;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    std::size_t d_features_multiplier = 32;
    bool shuffle = true;

    void validate() const;
};

struct PairProvenance {
    std::uint32_t prompt;
    std::uint32_t token;
    bool operator==(const PairProvenance&) const = default;
};

// (MLP input after LayerNorm, MLP output) pairs from one layer in corpus order.
struct ActivationPairStream {
    std::size_t layer = 0;
    std::size_t d_model = 0;
    std::vector<float> inputs;  // [n, d_model]
    std::vector<float> outputs; // [n, d_model]
    std::vector<PairProvenance> provenance;

    std::size_t size() const { return provenance.size(); }
    std::span<const float> input(std::size_t i) const { return {inputs.data() + i * d_model, d_model}; }
    std::span<const float> output(std::size_t i) const { return {outputs.data() + i * d_model, d_model}; }
};

/// InputError on an empty corpus; ConfigError for a bad layer. Prompts longer
/// than the model context are truncated.
ActivationPairStream harvest(const ModelParams& params, const Corpus& corpus, std::size_t layer, std::size_t limit);

// Activation pairs stored as a TCW1 file of kind "pairs".
void save_pairs(const ActivationPairStream& stream, const std::filesystem::path& path);
ActivationPairStream load_pairs(const std::filesystem::path& path);

struct TrainLogRow {
    std::size_t step;
    double faithfulness; // batch mean ||target - reconstruction||^2
    double sparsity_l1;  // batch mean ||z||_1 (unweighted)
    double l0;           // batch mean count of z_i > 0
    bool operator==(const TrainLogRow&) const = default;
};

struct TrainResult {
    Coder coder;
    std::vector<TrainLogRow> log;
};

/// Adam on faithfulness + lambda1 * L1. `init` (optional) replaces the random
/// initialization. TrainingError on a non-finite loss.
TrainResult train_coder(const TrainConfig& config, const ActivationPairStream& stream, CoderKind kind,
                        const Coder* init = nullptr);

struct CoderGradient {
    Matrix W_enc, W_dec;
    Vec b_enc, b_dec;
};

/// Gradient of ||target - reconstruction||^2 + lambda1 ||z||_1 for one
/// example, the same code path the optimizer uses. SAEs need target == x.
CoderGradient coder_loss_gradient(const Coder& coder, std::span<const float> x, std::span<const float> target,
                                  float lambda1);

// Uniform Kaiming-style init (bound 1/sqrt(fan_in)), zero biases.
Coder init_coder(CoderKind kind, std::size_t layer, std::size_t d_model, std::size_t d_features, std::uint64_t seed);

struct SweepRow {
    float lambda1 = 0.0f;
    CoderKind kind = CoderKind::transcoder;
    double mean_l0 = 0.0;
    double ce_original = 0.0;
    double ce_replaced = 0.0;
    double ce_mean_ablated = 0.0;
    std::optional<std::string> error;
    std::optional<Coder> coder;
};

struct SweepResult {
    std::vector<SweepRow> runs; // sorted by (lambda1, kind)
    double ce_original = 0.0;
    double ce_mean_ablated = 0.0;

    // lambda1,kind,mean_l0,ce_original,ce_replaced,ce_mean_ablated with the
    // original-model and mean-ablation reference rows last.
    std::string to_csv() const;
};

/// Needs at least two lambda1 values (UsageError). A failing run is recorded
/// in its row and the sweep carries on.
SweepResult sweep(const TrainConfig& base, const std::vector<float>& lambdas, const ActivationPairStream& stream,
                  const std::vector<CoderKind>& kinds, const ModelParams& params, const Corpus& eval_corpus);

std::string training_log_csv(const std::vector<TrainLogRow>& log);

} // namespace tc
