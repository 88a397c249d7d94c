#pragma once

// Training on the synthetic corpus: AdamW with decoupled weight decay,
// cross-entropy on answer positions only, checkpointing, and the accuracy
// trajectory that exposes when memorization and generalization arrive.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dms/corpus.hpp"
#include "dms/model.hpp"

namespace dms::training {

struct TrainConfig {
    int steps = 4000;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 0.1;
    int checkpoint_every = 250;
    uint64_t seed = 0x7247A1ULL;

    // Linear warmup to learning_rate, then cosine decay to
    // learning_rate * lr_final_factor at the last step.
    int warmup_steps = 200;
    double lr_final_factor = 1.0;
    // Global gradient-norm clip; 0 disables.
    double clip_norm = 1.0;
    // Sampling weight for fact and contaminated items. They are a small
    // slice of the corpus but can only be learned by rote, so each epoch
    // visits them this many times.
    int memo_boost = 1;

    // Item counts for the per-checkpoint accuracy probes (0 = all items).
    int eval_train_items = 512;
    int eval_heldout_items = 256;

    void validate() const;
};

struct TraceRow {
    int step = 0;
    double loss = 0.0;
    double train_acc = 0.0;
    double heldout_acc = 0.0;
    double fact_acc = 0.0;
};

struct TrainTrace {
    std::vector<TraceRow> rows;

    void save_jsonl(const std::filesystem::path& path) const;
    static TrainTrace load_jsonl(const std::filesystem::path& path);

    // Earliest logged step with train_acc >= train_min while heldout_acc <
    // heldout_max: the memorization-phase model used as the contrastive
    // amateur. Empty if the trajectory never shows that phase.
    std::optional<int> amateur_step(double train_min = 0.9, double heldout_max = 0.5) const;
    std::optional<int> first_step_reaching(double train_acc_min) const;
    std::optional<int> first_heldout_step_reaching(double heldout_acc_min) const;
};

struct TrainResult {
    model::Weights weights;
    TrainTrace trace;
    std::vector<int> checkpoint_steps;
};

// Decoupled-weight-decay Adam. Decay applies to weight matrices and
// embeddings only, never to biases or normalization parameters.
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(model::Weights& weights, const model::Weights& grads, double lr, double weight_decay);
    int64_t steps_taken() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// Zero-initialized gradient buffers with the same shapes as `like`.
model::Weights make_grad_buffer(const model::Weights& like);

// Warmup-then-cosine learning rate at `step` (0-based).
double scheduled_lr(const TrainConfig& config, int step);

// Cross-entropy of the answer tokens given the prompt, summed over answer
// positions; gradients accumulate into `grads`. Returns (loss_sum, n_tokens).
std::pair<double, int> answer_loss_and_grad(const model::Weights& weights,
                                            std::span<const int> prompt,
                                            std::span<const int> answer, model::Weights& grads);

// Loss only (no gradient), same forward path as answer_loss_and_grad.
std::pair<double, int> answer_loss(const model::Weights& weights, std::span<const int> prompt,
                                   std::span<const int> answer);

// Fraction of items whose greedy-decoded answer exactly matches the target
// (rule_correct_answer for contaminated items, stored answer otherwise).
double eval_accuracy(const model::Weights& weights, std::span<const corpus::Item* const> items);

// Trains starting from `weights`. Checkpoints are written to checkpoint_dir
// (if non-empty) as ckpt_<step>.dms at the configured cadence plus the final
// step; the trace is evaluated at the same steps.
TrainResult train(model::Weights weights, const corpus::Corpus& corpus, const TrainConfig& config,
                  const std::filesystem::path& checkpoint_dir);

}  // namespace dms::training
