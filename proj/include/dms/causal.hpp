#pragma once

// Activation patching: swap residual-stream activations between a clean run
// (held-out rule prompt answered correctly) and a corrupted run (contaminated
// prompt answered with its memorized wrong answer) to find the layer whose
// clean activation flips the corrupted output. That layer, l*, is where the
// probe and the steering vector live.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dms/corpus.hpp"
#include "dms/model.hpp"

namespace dms::causal {

struct PatchPair {
    std::vector<int> clean_prompt;
    std::vector<int> corr_prompt;
    std::vector<int> correct_answer;    // greedy answer of the clean prompt
    std::vector<int> memorized_answer;  // greedy answer of the corrupted prompt
    std::string clean_id;
    std::string corr_id;
};

struct MiningReport {
    int n_contam_checked = 0;
    int n_contam_memorized = 0;   // greedy output equals the stored wrong answer
    int n_heldout_checked = 0;
    int n_heldout_correct = 0;    // greedy output equals the rule answer
    std::string diagnostic;       // set when no pairs could be mined
};

// Pairs contaminated prompts the model actually answers with the memorized
// wrong answer against held-out prompts it answers correctly. Prompts of
// unequal length are rejected (positions must align one-to-one). Returns an
// empty vector with a diagnostic in the report when the behavioral
// preconditions cannot be satisfied.
std::vector<PatchPair> mine_patch_pairs(const model::Weights& weights,
                                        const corpus::Corpus& corpus, int max_pairs,
                                        MiningReport* report = nullptr);

// Full residual-stream caches (all layers, all prompt positions) for both
// inputs of a pair.
std::pair<model::ActivationCache, model::ActivationCache> cache_runs(const model::Weights& weights,
                                                                     const PatchPair& pair);

enum class DeltaMetric { FIRST_TOKEN, ANSWER_SUM };

struct PatchOutcome {
    std::vector<int> greedy_answer;
    double delta_logprob = 0.0;  // vs the unpatched corrupted run
    bool flipped = false;        // greedy answer equals correct_answer
};

// Runs the corrupted prompt with the clean cache patched in at `layer`
// (all prompt positions, every decoding step) and reports the post-patch
// answer plus the change in log P(correct answer) against the unpatched run.
PatchOutcome patch_layer(const model::Weights& weights, std::span<const int> corr_prompt,
                         const model::ActivationCache& cache_clean, int layer,
                         std::span<const int> correct_answer,
                         DeltaMetric metric = DeltaMetric::FIRST_TOKEN);

// Same, patching a set of layers simultaneously (used by the full-patch
// control, which must reproduce the clean answer).
PatchOutcome patch_layers(const model::Weights& weights, std::span<const int> corr_prompt,
                          const model::ActivationCache& cache_clean, std::span<const int> layers,
                          std::span<const int> correct_answer,
                          DeltaMetric metric = DeltaMetric::FIRST_TOKEN);

struct PatchRecord {
    std::string pair_id;
    int layer = 0;
    double delta_logprob = 0.0;
    bool flipped = false;
};

struct PatchReport {
    std::vector<PatchRecord> records;        // one per (pair, layer)
    std::vector<double> flip_rate;           // per layer
    std::vector<double> mean_delta_logprob;  // per layer
    int n_pairs = 0;
    int selected_layer = -1;
};

// Sweeps every layer over every pair and selects l*: the layer with the
// highest flip rate, ties broken by larger mean delta log-probability, then
// by the lower layer index. Throws if every flip rate is zero.
PatchReport run_patch_sweep(const model::Weights& weights, std::span<const PatchPair> pairs,
                            DeltaMetric metric = DeltaMetric::FIRST_TOKEN);

// Selection rule alone, exposed for reports built elsewhere.
int select_causal_layer(const PatchReport& report);

void save_patch_report(const PatchReport& report, const std::filesystem::path& path);
PatchReport load_patch_report(const std::filesystem::path& path);

}  // namespace dms::causal
