#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tc/coder.hpp"
#include "tc/corpus.hpp"
#include "tc/model.hpp"

namespace tc {

struct EvalReport {
    double mean_l0 = 0.0;
    double ce_original = 0.0;
    double ce_replaced = 0.0;
    double ce_mean_ablated = 0.0;
    std::size_t tokens_evaluated = 0;
    // ce_original <= ce_replaced <= ce_mean_ablated; informational only
    bool ordering_ok = false;

    std::string to_csv() const;
};

// Prompts clipped to the model context, in corpus order.
std::vector<std::vector<int>> clip_prompts(const Corpus& corpus, std::size_t context_len);

/// Dataset mean of the layer's MLP output over every corpus token. InputError on an empty corpus.
Vec mean_mlp_output(const ModelParams& params, const Corpus& corpus, std::size_t layer);

// Mean over rows of the number of strictly positive entries.
double mean_l0(const std::vector<Vec>& z_rows);

/// Cross entropy of the original model, the model with `coder` substituted at
/// its layer, and the model with that layer mean-ablated. `mean` defaults to
/// mean_mlp_output over the same corpus.
EvalReport evaluate(const ModelParams& params, const Coder& coder, const Corpus& corpus,
                    const std::optional<Vec>& mean = std::nullopt);

// Mean next-token cross entropy of a forward pass with the given interventions.
double corpus_cross_entropy(const ModelParams& params, const Corpus& corpus,
                            const std::vector<MlpIntervention>& interventions);

struct ActivatingExample {
    std::size_t prompt = 0;
    std::size_t token = 0;
    float activation = 0.0f;
    std::optional<std::vector<std::string>> window; // tokens around the position; absent when redacted
    std::size_t window_start = 0;
};

/// Top-k positions by the feature's activation across the corpus, ties by
/// (prompt, token). Only positive activations are returned.
std::vector<ActivatingExample> top_activating(const ModelParams& params, const Coder& coder, std::size_t feature,
                                              const Corpus& corpus, std::size_t k, bool redact,
                                              const Vocab* vocab = nullptr);

/// Softmax restricted to `year_tokens`, then mass above the input year minus
/// mass at or below it. InputError if the index is out of range.
double probability_difference(std::span<const float> logits, const std::vector<int>& year_tokens,
                              std::size_t input_year_index);

// The 100 "from 17 YY to 17" prompts with their year token ids.
struct YearTask {
    std::vector<std::vector<int>> prompts;
    std::vector<int> year_tokens; // "00".."99"

    static YearTask standard(const Vocab& vocab);
};

double mean_probability_difference(const ModelParams& params, const YearTask& task,
                                   const std::vector<MlpIntervention>& interventions = {});

enum class AblationUnit { transcoder_features, mlp_neurons };

std::string to_string(AblationUnit unit);
AblationUnit ablation_unit_from_string(const std::string& s);

struct AblationCurve {
    AblationUnit unit = AblationUnit::transcoder_features;
    std::size_t layer = 0;
    std::vector<std::size_t> ks; // clamped to the unit count
    std::vector<double> prob_diff;
    double original = 0.0;       // unmodified model
    double full_reference = 0.0; // every unit kept (transcoder substituted, or the plain MLP)
    double zero_floor = 0.0;     // every unit zeroed

    // k,prob_diff,unit
    std::string to_csv() const;
};

// Population variance of each unit's activation at the final token over the task prompts.
std::vector<double> unit_variances(const ModelParams& params, const YearTask& task, AblationUnit unit,
                                   std::size_t layer, const Coder* coder);

/// Keeps the k highest-variance units (ties by index), zeroes the rest, and
/// reports the mean probability difference per k. `coder` is required for
/// transcoder features. UsageError if ks is not ascending.
AblationCurve topk_ablation_curve(const ModelParams& params, const YearTask& task, AblationUnit unit,
                                  std::size_t layer, const Coder* coder, const std::vector<std::size_t>& ks);

struct Connection {
    std::size_t feature = 0;
    double weight = 0.0;
};

/// Weights-only connection of every `lower` feature to an upper transcoder
/// feature through one head's OV circuit: f_dec . W_OV^T (g2 * f_enc) with the
/// head's LN1 gain folded in. Sorted by descending weight, ties by index.
std::vector<Connection> ov_connections(const ModelParams& params, const Coder& upper, std::size_t upper_feature,
                                       std::size_t head_layer, std::size_t head, const Coder& lower);

/// Sum over the top_m connections of weight * (W_E f_enc), one score per token.
std::vector<double> weighted_deembedding_scores(const ModelParams& params, const Coder& upper,
                                                std::size_t upper_feature, std::size_t head_layer, std::size_t head,
                                                const Coder& lower, std::size_t top_m);

// rank,token_id,token_text,score for a ranked list.
std::string scores_csv(const std::vector<std::pair<int, double>>& ranked, const Vocab* vocab);

} // namespace tc
