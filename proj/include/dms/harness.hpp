#pragma once

// Experiment harness: the decoding methods evaluated on the synthetic
// splits, plus the intervention-layer and steering-strength sweeps. Reports
// carry per-item records, the full parameter snapshot, the seed, and the
// checkpoint content hash, so any number in them can be reproduced.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dms/corpus.hpp"
#include "dms/model.hpp"
#include "dms/modeid.hpp"
#include "dms/steering.hpp"

namespace dms::harness {

enum class Method { GREEDY, NUCLEUS, CONTRASTIVE, DMS, SELF_CONTRASTIVE };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct EvalParams {
    // nucleus
    double top_p = 0.9;
    double temperature = 0.8;
    // contrastive: candidate tokens need p_expert >= plausibility * max p_expert
    double plausibility = 0.1;
    const model::Weights* amateur = nullptr;
    // dms / self-contrastive
    const modeid::Probe* probe = nullptr;
    const steering::SteerVector* steer = nullptr;
    steering::SteerParams steer_params;
};

struct ItemRecord {
    std::string prompt_id;
    std::vector<int> output;
    bool correct = false;
    std::optional<double> mean_m;
};

struct EvalReport {
    Method method = Method::GREEDY;
    std::string split;
    double exact_match = 0.0;
    int n_items = 0;
    std::vector<ItemRecord> items;
    std::string config_snapshot;  // JSON text of the parameters used
    uint64_t seed = 0;
    std::string checkpoint_hash;
};

// Evaluates every item of `split` with exact-match scoring against the item
// eval target (rule answer for contaminated items). Items may be capped for
// sweeps via max_items (0 = all).
EvalReport run_eval(const model::Weights& weights, const corpus::Corpus& corpus,
                    corpus::Split split, Method method, const EvalParams& params, uint64_t seed,
                    int max_items = 0, const std::string& checkpoint_hash = "");

struct SweepPoint {
    double value = 0.0;
    double exact_match = 0.0;
    int n_items = 0;
    bool ok = false;
    std::string reason;  // set when the point is absent
};

struct SweepReport {
    std::string axis;  // "LAYER" or "ALPHA"
    std::vector<SweepPoint> points;
    std::string config_snapshot;
};

// Per layer: retrain the probe and the steering vector from that layer's
// labeled activations, then run the DMS evaluation. Failed layers become
// absent points with a reason.
SweepReport layer_sweep(const model::Weights& weights, const corpus::Corpus& corpus,
                        std::span<const modeid::LabeledDataset> datasets_by_layer,
                        corpus::Split split, const steering::SteerParams& steer_params,
                        double probe_regularization, uint64_t seed, int max_items = 0,
                        const std::string& checkpoint_hash = "");

// DMS evaluation per alpha over a grid that must include 0.
SweepReport alpha_sweep(const model::Weights& weights, const corpus::Corpus& corpus,
                        const modeid::Probe& probe, const steering::SteerVector& steer,
                        std::span<const double> alpha_grid, corpus::Split split,
                        const steering::SteerParams& base_params, uint64_t seed,
                        int max_items = 0, const std::string& checkpoint_hash = "");

void save_eval_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_eval_report(const std::filesystem::path& path);
void save_sweep_report(const SweepReport& report, const std::filesystem::path& jsonl_path,
                       const std::filesystem::path& csv_path);
SweepReport load_sweep_report(const std::filesystem::path& jsonl_path);

}  // namespace dms::harness
