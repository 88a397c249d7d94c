#pragma once

// Mode identification: label prompts as memorizing/generalizing from the
// diversity of repeated nucleus samples, record residual-stream activations
// at the final prompt position, and fit a logistic-regression probe that
// turns an activation into a memorization score m in (0,1).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dms/model.hpp"

namespace dms::modeid {

struct DiversityConfig {
    int n_samples = 50;
    double top_p = 0.9;
    double temperature = 0.8;
    double tau_low = 0.15;   // 0.05 * answer_len at the default answer_len=3
    double tau_high = 1.5;   // 0.50 * answer_len
    uint64_t rng_seed = 0x5EEDF00DULL;

    void validate() const;
};

// Threshold defaults scale with the answer length.
DiversityConfig default_diversity_config(int answer_len, uint64_t rng_seed);

// Unit-cost Levenshtein distance over token ids.
int edit_distance(std::span<const int> a, std::span<const int> b);

// Mean Levenshtein distance over all unordered pairs; requires >= 2 outputs.
double avg_pairwise_edit_distance(const std::vector<std::vector<int>>& outputs);

// N nucleus samples of max_new tokens; sample i uses the rng stream derived
// from (cfg.rng_seed, i).
std::vector<std::vector<int>> sample_outputs(const model::Weights& weights,
                                             std::span<const int> prompt,
                                             const DiversityConfig& cfg, int max_new);

struct LabeledActivation {
    std::vector<float> activation;
    int is_memorizing = 0;
    std::string prompt_id;
    double diversity_score = 0.0;
};

struct LabeledDataset {
    int layer = -1;
    std::vector<LabeledActivation> rows;
};

struct LabelingReport {
    int kept_memorizing = 0;
    int discarded_memorizing = 0;
    int kept_generalizing = 0;
    int discarded_generalizing = 0;
    // Diversity histograms per class over [0, answer_len], 16 bins.
    std::vector<double> hist_memorizing;
    std::vector<double> hist_generalizing;
    // Mass shared between the two normalized histograms, in [0, 1].
    double overlap = 0.0;
};

struct Prompt {
    std::vector<int> tokens;
    std::string id;
};

// Labels every prompt by output diversity and records phi at the final
// prompt position of each requested layer. The returned datasets share one
// labeling pass (labels do not depend on the layer); dataset k corresponds
// to layers[k]. Throws if either retained class ends up empty.
std::vector<LabeledDataset> build_labeled_dataset_layers(
    const model::Weights& weights, std::span<const Prompt> memorization_prompts,
    std::span<const Prompt> generalization_prompts, const DiversityConfig& cfg,
    std::span<const int> layers, int max_new, LabelingReport* report = nullptr);

// Single-layer convenience wrapper.
LabeledDataset build_labeled_dataset(const model::Weights& weights,
                                     std::span<const Prompt> memorization_prompts,
                                     std::span<const Prompt> generalization_prompts,
                                     const DiversityConfig& cfg, int layer, int max_new,
                                     LabelingReport* report = nullptr);

// Errors if the two diversity histograms overlap by more than half: the
// thresholds cannot produce a clean training signal on such data.
void check_calibration(const LabelingReport& report, double max_overlap = 0.5);

struct Probe {
    std::vector<float> w;
    float b = 0.0f;
    int train_layer = -1;
};

struct ProbeFitReport {
    bool converged = false;
    double grad_norm = 0.0;
    int iterations = 0;
    double final_loss = 0.0;
};

// L2-regularized logistic regression, full-batch gradient descent with
// backtracking line search, run to grad-norm < 1e-6 or the iteration cap.
Probe train_probe(const LabeledDataset& dataset, double regularization,
                  ProbeFitReport* report = nullptr);

double probe_score(const Probe& probe, std::span<const float> activation);

// Fraction of rows whose thresholded score matches the label.
double probe_accuracy(const Probe& probe, const LabeledDataset& dataset);

// Deterministic split for held-out probe evaluation.
std::pair<LabeledDataset, LabeledDataset> split_dataset(const LabeledDataset& dataset,
                                                        double holdout_fraction, uint64_t seed);

void save_labeled_datasets(std::span<const LabeledDataset> datasets,
                           const std::filesystem::path& path);
std::vector<LabeledDataset> load_labeled_datasets(const std::filesystem::path& path);

void save_probe(const Probe& probe, const std::filesystem::path& path);
Probe load_probe(const std::filesystem::path& path);

}  // namespace dms::modeid
