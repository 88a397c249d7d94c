#include "dms/ib.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "dms/parallel.hpp"
#include "dms/vecmath.hpp"

namespace dms::ib {

using json = nlohmann::json;

namespace {

constexpr double kLog2 = 0.6931471805599453;  // ln 2

double xlogx(double p) {
    return p > 0.0 ? p * std::log(p) : 0.0;
}

}  // namespace

void DiscreteJoint::validate(double tol) const {
    if (na < 1 || nb < 1 || p.size() != static_cast<size_t>(na) * static_cast<size_t>(nb)) {
        throw std::invalid_argument("joint: shape mismatch");
    }
    double total = 0.0;
    for (double x : p) {
        if (x < 0.0 || !std::isfinite(x)) {
            throw std::invalid_argument("joint: entries must be finite and nonnegative");
        }
        total += x;
    }
    if (std::abs(total - 1.0) > tol) {
        throw std::invalid_argument("joint: probabilities sum to " + std::to_string(total) +
                                    ", not 1");
    }
}

std::vector<double> DiscreteJoint::marginal_a() const {
    std::vector<double> out(static_cast<size_t>(na), 0.0);
    for (int i = 0; i < na; ++i) {
        for (int j = 0; j < nb; ++j) {
            out[static_cast<size_t>(i)] += p[static_cast<size_t>(i) * nb + j];
        }
    }
    return out;
}

std::vector<double> DiscreteJoint::marginal_b() const {
    std::vector<double> out(static_cast<size_t>(nb), 0.0);
    for (int i = 0; i < na; ++i) {
        for (int j = 0; j < nb; ++j) {
            out[static_cast<size_t>(j)] += p[static_cast<size_t>(i) * nb + j];
        }
    }
    return out;
}

double entropy_bits(std::span<const double> dist) {
    double total = 0.0;
    for (double x : dist) {
        if (x < 0.0 || !std::isfinite(x)) {
            throw std::invalid_argument("entropy: entries must be finite and nonnegative");
        }
        total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("entropy: distribution sums to " + std::to_string(total));
    }
    double h = 0.0;
    for (double x : dist) {
        h -= xlogx(x);
    }
    return h / kLog2;
}

double mutual_information_bits(const DiscreteJoint& joint) {
    joint.validate();
    const auto pa = joint.marginal_a();
    const auto pb = joint.marginal_b();
    double mi = 0.0;
    for (int i = 0; i < joint.na; ++i) {
        for (int j = 0; j < joint.nb; ++j) {
            const double pij = joint.p[static_cast<size_t>(i) * joint.nb + j];
            if (pij > 0.0) {
                mi += pij * std::log(pij / (pa[static_cast<size_t>(i)] *
                                            pb[static_cast<size_t>(j)]));
            }
        }
    }
    // Clamp tiny negative float noise; MI is nonnegative.
    return std::max(0.0, mi / kLog2);
}

double mi_from_samples_bits(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size() || a.empty()) {
        throw std::invalid_argument("mi: paired nonempty sequences required");
    }
    const double n = static_cast<double>(a.size());
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> pa, pb;
    for (size_t i = 0; i < a.size(); ++i) {
        joint[{a[i], b[i]}] += 1.0;
        pa[a[i]] += 1.0;
        pb[b[i]] += 1.0;
    }
    double mi = 0.0;
    for (const auto& [key, cnt] : joint) {
        const double pij = cnt / n;
        const double pi = pa[key.first] / n;
        const double pj = pb[key.second] / n;
        mi += pij * std::log(pij / (pi * pj));
    }
    return std::max(0.0, mi / kLog2);
}

double conditional_mi_from_samples_bits(std::span<const int> a, std::span<const int> b,
                                        std::span<const int> c) {
    if (a.size() != b.size() || b.size() != c.size() || a.empty()) {
        throw std::invalid_argument("cmi: paired nonempty sequences required");
    }
    std::map<int, std::vector<size_t>> groups;
    for (size_t i = 0; i < c.size(); ++i) {
        groups[c[i]].push_back(i);
    }
    double cmi = 0.0;
    for (const auto& [cls, idx] : groups) {
        std::vector<int> ga(idx.size()), gb(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) {
            ga[k] = a[idx[k]];
            gb[k] = b[idx[k]];
        }
        const double pc = static_cast<double>(idx.size()) / static_cast<double>(a.size());
        cmi += pc * mi_from_samples_bits(ga, gb);
    }
    return cmi;
}

int BinningSpec::n_cells() const {
    int cells = 1;
    for (const auto& e : edges) {
        cells *= static_cast<int>(e.size()) + 1;
    }
    return cells;
}

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix, descending
// eigenvalues, deterministic eigenvector signs.
void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        eigvecs[static_cast<size_t>(i) * n + i] = 1.0;
    }
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) {
                off += a[static_cast<size_t>(i) * n + j] * a[static_cast<size_t>(i) * n + j];
            }
        }
        if (off < 1e-24) {
            break;
        }
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p) * n + q];
                if (std::abs(apq) < 1e-30) {
                    continue;
                }
                const double app = a[static_cast<size_t>(p) * n + p];
                const double aqq = a[static_cast<size_t>(q) * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a[static_cast<size_t>(k) * n + p];
                    const double akq = a[static_cast<size_t>(k) * n + q];
                    a[static_cast<size_t>(k) * n + p] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[static_cast<size_t>(p) * n + k];
                    const double aqk = a[static_cast<size_t>(q) * n + k];
                    a[static_cast<size_t>(p) * n + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = eigvecs[static_cast<size_t>(k) * n + p];
                    const double vkq = eigvecs[static_cast<size_t>(k) * n + q];
                    eigvecs[static_cast<size_t>(k) * n + p] = c * vkp - s * vkq;
                    eigvecs[static_cast<size_t>(k) * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    eigvals.resize(static_cast<size_t>(n));
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        eigvals[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * n + i];
        order[static_cast<size_t>(i)] = i;
    }
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        if (eigvals[static_cast<size_t>(x)] != eigvals[static_cast<size_t>(y)]) {
            return eigvals[static_cast<size_t>(x)] > eigvals[static_cast<size_t>(y)];
        }
        return x < y;
    });
    std::vector<double> vals_sorted(static_cast<size_t>(n));
    std::vector<double> vecs_sorted(static_cast<size_t>(n) * n);
    for (int rank = 0; rank < n; ++rank) {
        const int src = order[static_cast<size_t>(rank)];
        vals_sorted[static_cast<size_t>(rank)] = eigvals[static_cast<size_t>(src)];
        // column src -> row rank, sign fixed by the largest-magnitude entry
        int arg = 0;
        double best = 0.0;
        for (int k = 0; k < n; ++k) {
            const double v = eigvecs[static_cast<size_t>(k) * n + src];
            if (std::abs(v) > std::abs(best)) {
                best = v;
                arg = k;
            }
        }
        (void)arg;
        const double sign = best < 0.0 ? -1.0 : 1.0;
        for (int k = 0; k < n; ++k) {
            vecs_sorted[static_cast<size_t>(rank) * n + k] =
                sign * eigvecs[static_cast<size_t>(k) * n + src];
        }
    }
    eigvals.swap(vals_sorted);
    eigvecs.swap(vecs_sorted);
}

}  // namespace

BinningSpec fit_binning(const std::vector<std::vector<float>>& activations, int n_components,
                        int n_bins, BinningFitReport* report) {
    if (n_components < 1 || n_bins < 2) {
        throw std::invalid_argument("binning: need n_components >= 1 and n_bins >= 2");
    }
    const size_t n = activations.size();
    if (n < static_cast<size_t>(n_bins) * static_cast<size_t>(n_components)) {
        throw std::invalid_argument("binning: sample too small for the requested grid");
    }
    const int d = static_cast<int>(activations.front().size());
    for (const auto& a : activations) {
        if (static_cast<int>(a.size()) != d) {
            throw std::invalid_argument("binning: ragged activations");
        }
    }

    BinningSpec spec;
    spec.n_bins = n_bins;
    spec.mean.assign(static_cast<size_t>(d), 0.0f);
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (const auto& a : activations) {
        for (int j = 0; j < d; ++j) {
            mean[static_cast<size_t>(j)] += a[static_cast<size_t>(j)];
        }
    }
    for (int j = 0; j < d; ++j) {
        mean[static_cast<size_t>(j)] /= static_cast<double>(n);
        spec.mean[static_cast<size_t>(j)] = static_cast<float>(mean[static_cast<size_t>(j)]);
    }

    std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
    std::vector<double> centered(static_cast<size_t>(d));
    for (const auto& a : activations) {
        for (int j = 0; j < d; ++j) {
            centered[static_cast<size_t>(j)] = a[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)];
        }
        for (int i = 0; i < d; ++i) {
            const double ci = centered[static_cast<size_t>(i)];
            for (int j = i; j < d; ++j) {
                cov[static_cast<size_t>(i) * d + j] += ci * centered[static_cast<size_t>(j)];
            }
        }
    }
    for (int i = 0; i < d; ++i) {
        for (int j = i; j < d; ++j) {
            const double v = cov[static_cast<size_t>(i) * d + j] / static_cast<double>(n);
            cov[static_cast<size_t>(i) * d + j] = v;
            cov[static_cast<size_t>(j) * d + i] = v;
        }
    }

    std::vector<double> eigvals, eigvecs;
    jacobi_eigen(cov, d, eigvals, eigvecs);

    const double lead = std::max(eigvals.empty() ? 0.0 : eigvals.front(), 0.0);
    int usable = 0;
    for (int k = 0; k < std::min(n_components, d); ++k) {
        if (eigvals[static_cast<size_t>(k)] > std::max(1e-12, lead * 1e-9)) {
            ++usable;
        }
    }
    if (usable == 0) {
        usable = 1;  // constant data still gets one (degenerate) component
    }
    spec.n_components = usable;

    if (report) {
        report->requested_components = n_components;
        report->used_components = usable;
        report->eigenvalues.assign(eigvals.begin(),
                                   eigvals.begin() + std::min<size_t>(eigvals.size(), 16));
    }

    spec.basis.resize(static_cast<size_t>(usable));
    for (int k = 0; k < usable; ++k) {
        spec.basis[static_cast<size_t>(k)].resize(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) {
            spec.basis[static_cast<size_t>(k)][static_cast<size_t>(j)] =
                static_cast<float>(eigvecs[static_cast<size_t>(k) * d + j]);
        }
    }

    // Quantile edges per component, deduplicated to stay strictly increasing.
    spec.edges.resize(static_cast<size_t>(usable));
    std::vector<float> projected(n);
    for (int k = 0; k < usable; ++k) {
        for (size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) {
                acc += (activations[i][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) *
                       spec.basis[static_cast<size_t>(k)][static_cast<size_t>(j)];
            }
            projected[i] = static_cast<float>(acc);
        }
        std::sort(projected.begin(), projected.end());
        std::vector<float>& edges = spec.edges[static_cast<size_t>(k)];
        for (int b = 1; b < n_bins; ++b) {
            const size_t rank = std::min(n - 1, b * n / static_cast<size_t>(n_bins));
            const float edge = projected[rank];
            if (edges.empty() || edge > edges.back()) {
                edges.push_back(edge);
            }
        }
    }
    return spec;
}

int discretize(std::span<const float> activation, const BinningSpec& spec) {
    if (activation.size() != spec.mean.size()) {
        throw std::invalid_argument("binning: activation dimension mismatch");
    }
    int cell = 0;
    for (size_t k = 0; k < spec.basis.size(); ++k) {
        double acc = 0.0;
        for (size_t j = 0; j < activation.size(); ++j) {
            acc += (activation[j] - spec.mean[j]) * spec.basis[k][j];
        }
        const float x = static_cast<float>(acc);
        const auto& edges = spec.edges[k];
        const int bin = static_cast<int>(std::upper_bound(edges.begin(), edges.end(), x) -
                                         edges.begin());
        cell = cell * (static_cast<int>(edges.size()) + 1) + bin;
    }
    return cell;
}

std::vector<InfoPlanePoint> info_plane(const model::Weights& weights,
                                       std::span<const corpus::Item* const> sample,
                                       std::span<const int> layers, int n_components, int n_bins,
                                       int64_t step) {
    if (sample.empty()) {
        throw std::invalid_argument("info_plane: empty sample");
    }
    if (layers.empty()) {
        throw std::invalid_argument("info_plane: no layers requested");
    }

    // One recording pass per item covers all layers.
    const size_t n = sample.size();
    const int d = weights.config.d_model;
    std::vector<std::vector<std::vector<float>>> acts(
        layers.size(), std::vector<std::vector<float>>(n, std::vector<float>()));
    std::vector<int> y(n);
    {
        std::map<std::vector<int>, int> class_ids;
        for (size_t i = 0; i < n; ++i) {
            const auto& target = sample[i]->eval_target();
            auto [it, inserted] = class_ids.emplace(target, static_cast<int>(class_ids.size()));
            y[i] = it->second;
        }
    }
    std::vector<model::HookSpec> hooks;
    for (int l : layers) {
        hooks.push_back(model::record_hook(l));
    }
    parallel_for(n, [&](size_t i) {
        const model::ForwardResult fr = model::forward(weights, sample[i]->prompt, hooks);
        const int last = static_cast<int>(sample[i]->prompt.size()) - 1;
        for (size_t k = 0; k < layers.size(); ++k) {
            const auto phi = fr.cache->at(layers[k], last);
            acts[k][i].assign(phi.begin(), phi.end());
        }
    });
    (void)d;

    std::vector<InfoPlanePoint> points;
    points.reserve(layers.size());
    std::vector<int> x(n), z(n);
    for (size_t i = 0; i < n; ++i) {
        x[i] = static_cast<int>(i);
    }
    for (size_t k = 0; k < layers.size(); ++k) {
        const BinningSpec spec = fit_binning(acts[k], n_components, n_bins);
        for (size_t i = 0; i < n; ++i) {
            z[i] = discretize(acts[k][i], spec);
        }
        InfoPlanePoint pt;
        pt.layer = layers[k];
        pt.step = step;
        pt.n_samples = static_cast<int>(n);
        pt.i_xz = mi_from_samples_bits(x, z);
        pt.i_zy = mi_from_samples_bits(z, y);
        pt.i_xz_given_y = conditional_mi_from_samples_bits(x, z, y);
        points.push_back(pt);
    }
    return points;
}

double mi_decomposition_residual(const InfoPlanePoint& point) {
    return point.i_xz - point.i_zy - point.i_xz_given_y;
}

double ib_lagrangian(double i_zy, double i_xz, double beta) {
    if (beta < 0.0) {
        throw std::invalid_argument("ib: beta must be >= 0");
    }
    return i_zy - beta * i_xz;
}

double ib_lagrangian_decomposed(double i_zy, double i_xz_given_y, double beta) {
    if (beta < 0.0) {
        throw std::invalid_argument("ib: beta must be >= 0");
    }
    return (1.0 - beta) * i_zy - beta * i_xz_given_y;
}

double within_class_variance_ratio(const std::vector<std::vector<float>>& activations,
                                   std::span<const int> labels) {
    if (activations.size() != labels.size() || activations.empty()) {
        throw std::invalid_argument("variance ratio: paired nonempty inputs required");
    }
    std::map<int, std::vector<size_t>> classes;
    for (size_t i = 0; i < labels.size(); ++i) {
        classes[labels[i]].push_back(i);
    }
    if (classes.size() < 2) {
        throw std::invalid_argument("variance ratio: need at least two classes");
    }
    for (const auto& [cls, idx] : classes) {
        if (idx.size() < 2) {
            throw std::invalid_argument("variance ratio: class " + std::to_string(cls) +
                                        " has fewer than two samples");
        }
    }
    const size_t d = activations.front().size();
    std::vector<double> grand(d, 0.0);
    for (const auto& a : activations) {
        if (a.size() != d) {
            throw std::invalid_argument("variance ratio: ragged activations");
        }
        for (size_t j = 0; j < d; ++j) {
            grand[j] += a[j];
        }
    }
    for (size_t j = 0; j < d; ++j) {
        grand[j] /= static_cast<double>(activations.size());
    }

    double within = 0.0;
    double between = 0.0;
    for (const auto& [cls, idx] : classes) {
        std::vector<double> mean(d, 0.0);
        for (size_t i : idx) {
            for (size_t j = 0; j < d; ++j) {
                mean[j] += activations[i][j];
            }
        }
        for (size_t j = 0; j < d; ++j) {
            mean[j] /= static_cast<double>(idx.size());
        }
        for (size_t i : idx) {
            for (size_t j = 0; j < d; ++j) {
                const double delta = activations[i][j] - mean[j];
                within += delta * delta;
            }
        }
        for (size_t j = 0; j < d; ++j) {
            const double delta = mean[j] - grand[j];
            between += static_cast<double>(idx.size()) * delta * delta;
        }
    }
    if (between < 1e-12) {
        throw std::runtime_error("variance ratio: degenerate between-class scatter");
    }
    return within / between;
}

void save_info_plane(std::span<const InfoPlanePoint> points, const std::filesystem::path& path,
                     bool append) {
    std::ofstream out(path, append ? (std::ios::binary | std::ios::app) : std::ios::binary);
    if (!out) {
        throw std::runtime_error("ib: cannot write " + path.string());
    }
    for (const InfoPlanePoint& pt : points) {
        json j{{"step", pt.step},
               {"layer", pt.layer},
               {"I_xz", pt.i_xz},
               {"I_zy", pt.i_zy},
               {"I_xz_given_y", pt.i_xz_given_y},
               {"n_samples", pt.n_samples}};
        out << j.dump() << "\n";
    }
}

std::vector<InfoPlanePoint> load_info_plane(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("ib: cannot read " + path.string());
    }
    std::vector<InfoPlanePoint> points;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        InfoPlanePoint pt;
        pt.step = j.at("step").get<int64_t>();
        pt.layer = j.at("layer").get<int>();
        pt.i_xz = j.at("I_xz").get<double>();
        pt.i_zy = j.at("I_zy").get<double>();
        pt.i_xz_given_y = j.at("I_xz_given_y").get<double>();
        pt.n_samples = j.at("n_samples").get<int>();
        points.push_back(pt);
    }
    return points;
}

}  // namespace dms::ib
