#pragma once

// Declarative run configuration: a flat, sectioned key=value text format.
// Every field has a default; unknown sections or keys are rejected, both in
// files and in DMS_SECTION_KEY environment overrides (which win over the
// file). parse(serialize(c)) == c.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dms/corpus.hpp"
#include "dms/model.hpp"
#include "dms/modeid.hpp"
#include "dms/steering.hpp"
#include "dms/training.hpp"

namespace dms::runconfig {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    // [run]
    uint64_t seed = 20260807;
    // [corpus]
    int modulus = 97;
    int n_fact_keys = 500;
    double contamination_fraction = 0.05;
    int answer_len = 3;
    double rule_holdout_fraction = 0.1;
    int vocab_size = 120;
    // [model]
    int n_layers = 8;
    int d_model = 128;
    int n_heads = 4;
    int context_len = 16;
    // [train]
    int steps = 4000;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 0.1;
    int checkpoint_every = 250;
    int warmup_steps = 200;
    double lr_final_factor = 1.0;
    double clip_norm = 1.0;
    int memo_boost = 1;
    int eval_train_items = 512;
    int eval_heldout_items = 256;
    // [label]
    int n_samples = 50;
    double label_top_p = 0.9;
    double label_temperature = 0.8;
    double tau_low = 0.0;   // 0 = 0.05 * answer_len
    double tau_high = 0.0;  // 0 = 0.50 * answer_len
    int n_prompts_per_class = 128;
    double contam_share = 0.5;  // share of contaminated prompts in the memorization set
    double probe_holdout_fraction = 0.25;
    double probe_regularization = 1e-3;
    // [patch]
    int max_pairs = 64;
    std::string delta_metric = "first_token";  // or "answer_sum"
    // [steer]
    double alpha = 1.4;
    double lambda = 1.0;
    std::string steer_mode = "dynamic";  // dynamic | static | off
    // [eval]
    double eval_top_p = 0.9;
    double eval_temperature = 0.8;
    double plausibility = 0.1;
    int eval_max_items = 0;  // 0 = all
    // [sweep]
    std::vector<double> alpha_grid{0.0, 0.35, 0.7, 1.05, 1.4, 2.1, 2.8, 4.2};
    int sweep_max_items = 0;
    // [ib]
    int ib_components = 4;
    int ib_bins = 8;
    int ib_sample_items = 2048;

    corpus::TaskConfig task_config() const;
    model::ModelConfig model_config() const;
    training::TrainConfig train_config() const;
    modeid::DiversityConfig diversity_config() const;
    steering::SteerParams steer_params() const;

    double effective_tau_low() const;
    double effective_tau_high() const;

    void validate() const;  // throws ConfigError
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& config);

// Applies DMS_SECTION_KEY environment overrides; rejects unknown DMS_ names.
void apply_env_overrides(RunConfig& config);

}  // namespace dms::runconfig
