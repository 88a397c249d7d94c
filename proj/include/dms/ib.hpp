#pragma once

// Information-bottleneck diagnostics: plug-in entropy and mutual information
// over discretized activations, information-plane coordinates per layer, the
// chain-rule decomposition I(X;Z) = I(Z;Y) + I(X;Z|Y) as an exactly testable
// identity, the IB Lagrangian, and the within/between-class variance ratio.
//
// All information quantities are in bits. Plug-in values are reported raw
// (no small-sample correction): the decomposition identity holds exactly
// only for raw plug-in estimates on a shared discretization.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dms/corpus.hpp"
#include "dms/model.hpp"

namespace dms::ib {

struct DiscreteJoint {
    int na = 0;
    int nb = 0;
    std::vector<double> p;  // row-major [na, nb], nonnegative, sums to 1

    void validate(double tol = 1e-9) const;
    std::vector<double> marginal_a() const;
    std::vector<double> marginal_b() const;
};

double entropy_bits(std::span<const double> dist);
double mutual_information_bits(const DiscreteJoint& joint);

// Plug-in MI between two paired integer label sequences.
double mi_from_samples_bits(std::span<const int> a, std::span<const int> b);
// I(A;B|C) = sum_c p(c) I(A;B | C=c).
double conditional_mi_from_samples_bits(std::span<const int> a, std::span<const int> b,
                                        std::span<const int> c);

struct BinningSpec {
    int n_components = 4;
    int n_bins = 8;
    std::vector<float> mean;                // [d]
    std::vector<std::vector<float>> basis;  // n_components rows, orthonormal
    std::vector<std::vector<float>> edges;  // per component, strictly increasing

    int n_cells() const;
};

struct BinningFitReport {
    int requested_components = 0;
    int used_components = 0;  // reduced when the data is rank-deficient
    std::vector<double> eigenvalues;
};

// Orthonormal projection onto the top principal directions plus per-dimension
// quantile bin edges. Requires at least n_bins * n_components samples.
BinningSpec fit_binning(const std::vector<std::vector<float>>& activations, int n_components,
                        int n_bins, BinningFitReport* report = nullptr);

// Mixed-radix cell id of the per-component bin indices.
int discretize(std::span<const float> activation, const BinningSpec& spec);

struct InfoPlanePoint {
    int layer = -1;
    double i_xz = 0.0;          // X = instance identity
    double i_zy = 0.0;          // Y = answer class
    double i_xz_given_y = 0.0;
    int64_t step = 0;           // checkpoint step the weights came from
    int n_samples = 0;
};

// Per requested layer: record phi_l at the final prompt position for every
// item, fit a binning on those activations, and compute the plug-in
// information-plane coordinates with X = item index and Y = target answer
// class.
std::vector<InfoPlanePoint> info_plane(const model::Weights& weights,
                                       std::span<const corpus::Item* const> sample,
                                       std::span<const int> layers, int n_components, int n_bins,
                                       int64_t step);

// I(X;Z) - I(Z;Y) - I(X;Z|Y); an algebraic identity (< 1e-9 bits) for
// plug-in estimates over one shared discretization.
double mi_decomposition_residual(const InfoPlanePoint& point);

// I(Z;Y) - beta * I(X;Z).
double ib_lagrangian(double i_zy, double i_xz, double beta);
// Equivalent form (1 - beta) * I(Z;Y) - beta * I(X;Z|Y), exact when the
// decomposition residual vanishes.
double ib_lagrangian_decomposed(double i_zy, double i_xz_given_y, double beta);

// trace(within-class scatter) / trace(between-class scatter).
double within_class_variance_ratio(const std::vector<std::vector<float>>& activations,
                                   std::span<const int> labels);

void save_info_plane(std::span<const InfoPlanePoint> points, const std::filesystem::path& path,
                     bool append = false);
std::vector<InfoPlanePoint> load_info_plane(const std::filesystem::path& path);

}  // namespace dms::ib
