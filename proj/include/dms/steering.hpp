#pragma once

// Mode control: the generalization-steering vector (difference of labeled
// class means at the causal layer) and steered decoding. Each generated
// token re-reads the probe, so the intervention strength alpha * m tracks
// the model's instantaneous reliance on memorization.

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dms/model.hpp"
#include "dms/modeid.hpp"

namespace dms::steering {

struct SteerVector {
    std::vector<float> v_g;   // mu_g - mu_m
    std::vector<float> mu_g;  // mean activation of the generalizing class
    std::vector<float> mu_m;  // mean activation of the memorizing class
    int layer = -1;
    double norm = 0.0;        // ||v_g||, > 0

    std::vector<float> unit_direction() const;
};

enum class SteerMode { DYNAMIC, STATIC, OFF };

struct SteerParams {
    double alpha = 1.4;
    double lambda = 1.0;  // self-contrastive interpolation weight
    SteerMode mode = SteerMode::DYNAMIC;
    // Diagnostic override of the probe output (tests and ablations).
    std::optional<double> forced_m;

    void validate() const;
};

// Class means over the labeled dataset at `layer`; label 0 is generalizing,
// label 1 memorizing. Throws on an empty class, a layer mismatch, or a
// degenerate direction (norm < 1e-8).
SteerVector compute_steering_vector(const modeid::LabeledDataset& dataset, int layer);

// phi <- phi + alpha * m * v_g/||v_g|| with m = probe_score(probe, phi)
// taken before the shift. Returns m. Pure helper, shared by the model hook
// path and the geometry tests.
double apply_steering(std::span<float> phi, const modeid::Probe& probe, const SteerVector& sv,
                      const SteerParams& params);

struct SteeredStep {
    std::vector<double> probs;  // next-token distribution
    double m = 0.0;
};

// One decoding step over `context` with the probe-then-steer hook at the
// vector's layer, applied at the current generation position.
SteeredStep steered_step(const model::Weights& weights, std::span<const int> context,
                         const modeid::Probe& probe, const SteerVector& sv,
                         const SteerParams& params);

struct SteeredDecode {
    std::vector<int> tokens;
    std::vector<double> m_trace;  // probe score per generated token
};

// Greedy decoding over steered steps.
SteeredDecode dms_decode(const model::Weights& weights, std::span<const int> prompt,
                         const modeid::Probe& probe, const SteerVector& sv,
                         const SteerParams& params, int max_new);

// Per step, combines default logits z_d and steered logits z_s as
// (1 - lambda) * z_d + lambda * z_s before greedy selection.
SteeredDecode self_contrastive_decode(const model::Weights& weights, std::span<const int> prompt,
                                      const modeid::Probe& probe, const SteerVector& sv,
                                      const SteerParams& params, int max_new);

void save_steer_vector(const SteerVector& sv, const std::filesystem::path& path);
SteerVector load_steer_vector(const std::filesystem::path& path);

}  // namespace dms::steering
