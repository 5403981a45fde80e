#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tc/corpus.hpp"
#include "tc/model.hpp"

namespace tc {

struct ModelTrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 32; // prompts per step
    float learning_rate = 3e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float init_scale = 0.02f;
    float weight_decay = 0.1f; // decoupled, applied to weight matrices only
    bool linear_decay = false; // learning rate falls linearly to zero over the run
    std::uint64_t seed = 42;
};

struct ModelTrainStep {
    std::size_t step;
    double loss;
};

// Gradient of the mean next-token cross entropy over `prompts` w.r.t. every
// parameter, laid out like ModelParams. Returns the mean loss.
double model_loss_and_grad(const ModelParams& params, const std::vector<std::vector<int>>& prompts, ModelParams& grad);

// Adam on the language-modeling loss; prompts are sampled uniformly with the
// run seed. `on_step` (optional) sees every logged step.
ModelParams train_model(const ModelConfig& config, const Corpus& corpus, const ModelTrainConfig& train,
                        std::vector<ModelTrainStep>* log = nullptr,
                        const std::function<void(const ModelTrainStep&)>& on_step = {});

} // namespace tc
