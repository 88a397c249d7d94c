#include "dms/modeid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dms/parallel.hpp"
#include "dms/rng.hpp"
#include "dms/vecmath.hpp"

namespace dms::modeid {

using json = nlohmann::json;

void DiversityConfig::validate() const {
    if (n_samples < 2) {
        throw std::invalid_argument("modeid: n_samples must be >= 2");
    }
    if (!(tau_low > 0.0) || !(tau_low < tau_high)) {
        throw std::invalid_argument("modeid: need 0 < tau_low < tau_high");
    }
    if (top_p <= 0.0 || top_p > 1.0 || temperature <= 0.0) {
        throw std::invalid_argument("modeid: bad sampling parameters");
    }
}

DiversityConfig default_diversity_config(int answer_len, uint64_t rng_seed) {
    DiversityConfig cfg;
    cfg.tau_low = 0.05 * answer_len;
    cfg.tau_high = 0.5 * answer_len;
    cfg.rng_seed = rng_seed;
    return cfg;
}

int edit_distance(std::span<const int> a, std::span<const int> b) {
    const size_t n = a.size();
    const size_t m = b.size();
    if (n == 0) {
        return static_cast<int>(m);
    }
    if (m == 0) {
        return static_cast<int>(n);
    }
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) {
        prev[j] = static_cast<int>(j);
    }
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double avg_pairwise_edit_distance(const std::vector<std::vector<int>>& outputs) {
    const size_t n = outputs.size();
    if (n < 2) {
        throw std::invalid_argument("diversity: need at least two outputs");
    }
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            total += edit_distance(outputs[i], outputs[j]);
        }
    }
    return total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

std::vector<std::vector<int>> sample_outputs(const model::Weights& weights,
                                             std::span<const int> prompt,
                                             const DiversityConfig& cfg, int max_new) {
    cfg.validate();
    std::vector<std::vector<int>> outputs(static_cast<size_t>(cfg.n_samples));
    for (int i = 0; i < cfg.n_samples; ++i) {
        outputs[static_cast<size_t>(i)] =
            model::nucleus_sample(weights, prompt, max_new, cfg.top_p, cfg.temperature,
                                  mix_seed(cfg.rng_seed, static_cast<uint64_t>(i)));
    }
    return outputs;
}

namespace {

constexpr int kHistBins = 16;

struct PromptVerdict {
    bool keep = false;
    int label = 0;
    double diversity = 0.0;
    std::vector<std::vector<float>> per_layer;  // activation per requested layer
};

PromptVerdict judge_prompt(const model::Weights& weights, const Prompt& prompt, bool memo_class,
                           const DiversityConfig& cfg, std::span<const int> layers, int max_new,
                           uint64_t stream) {
    DiversityConfig local = cfg;
    local.rng_seed = stream;
    const auto outputs = sample_outputs(weights, prompt.tokens, local, max_new);
    PromptVerdict v;
    v.diversity = avg_pairwise_edit_distance(outputs);
    v.label = memo_class ? 1 : 0;
    v.keep = memo_class ? v.diversity < cfg.tau_low : v.diversity > cfg.tau_high;
    if (!v.keep) {
        return v;
    }
    std::vector<model::HookSpec> hooks;
    hooks.reserve(layers.size());
    for (int l : layers) {
        hooks.push_back(model::record_hook(l));
    }
    const model::ForwardResult fr = model::forward(weights, prompt.tokens, hooks);
    const int last = static_cast<int>(prompt.tokens.size()) - 1;
    v.per_layer.reserve(layers.size());
    for (int l : layers) {
        const auto phi = fr.cache->at(l, last);
        v.per_layer.emplace_back(phi.begin(), phi.end());
    }
    return v;
}

}  // namespace

std::vector<LabeledDataset> build_labeled_dataset_layers(
    const model::Weights& weights, std::span<const Prompt> memorization_prompts,
    std::span<const Prompt> generalization_prompts, const DiversityConfig& cfg,
    std::span<const int> layers, int max_new, LabelingReport* report) {
    cfg.validate();
    if (memorization_prompts.empty() || generalization_prompts.empty()) {
        throw std::invalid_argument("modeid: both prompt sets must be nonempty");
    }
    if (layers.empty()) {
        throw std::invalid_argument("modeid: no layers requested");
    }
    for (int l : layers) {
        if (l < 0 || l >= weights.config.n_layers) {
            throw std::invalid_argument("modeid: layer out of range");
        }
    }

    const size_t n_m = memorization_prompts.size();
    const size_t n_total = n_m + generalization_prompts.size();
    std::vector<PromptVerdict> verdicts(n_total);
    parallel_for(n_total, [&](size_t i) {
        const bool memo = i < n_m;
        const Prompt& p =
            memo ? memorization_prompts[i] : generalization_prompts[i - n_m];
        verdicts[i] = judge_prompt(weights, p, memo, cfg, layers, max_new,
                                   mix_seed(cfg.rng_seed, static_cast<uint64_t>(i)));
    });

    LabelingReport rep;
    rep.hist_memorizing.assign(kHistBins, 0.0);
    rep.hist_generalizing.assign(kHistBins, 0.0);
    const double hist_max = static_cast<double>(max_new);

    std::vector<LabeledDataset> datasets(layers.size());
    for (size_t k = 0; k < layers.size(); ++k) {
        datasets[k].layer = layers[k];
    }

    for (size_t i = 0; i < n_total; ++i) {
        const bool memo = i < n_m;
        const Prompt& p =
            memo ? memorization_prompts[i] : generalization_prompts[i - n_m];
        PromptVerdict& v = verdicts[i];
        const int bin = std::min(kHistBins - 1,
                                 static_cast<int>(v.diversity / std::max(1e-12, hist_max) *
                                                  kHistBins));
        (memo ? rep.hist_memorizing : rep.hist_generalizing)[static_cast<size_t>(bin)] += 1.0;
        if (!v.keep) {
            (memo ? rep.discarded_memorizing : rep.discarded_generalizing) += 1;
            continue;
        }
        (memo ? rep.kept_memorizing : rep.kept_generalizing) += 1;
        for (size_t k = 0; k < layers.size(); ++k) {
            LabeledActivation row;
            row.activation = std::move(v.per_layer[k]);
            row.is_memorizing = v.label;
            row.prompt_id = p.id;
            row.diversity_score = v.diversity;
            datasets[k].rows.push_back(std::move(row));
        }
    }

    // Normalize histograms and compute their shared mass.
    auto normalize = [](std::vector<double>& h) {
        double total = 0.0;
        for (double x : h) {
            total += x;
        }
        if (total > 0.0) {
            for (double& x : h) {
                x /= total;
            }
        }
    };
    normalize(rep.hist_memorizing);
    normalize(rep.hist_generalizing);
    rep.overlap = 0.0;
    for (int b = 0; b < kHistBins; ++b) {
        rep.overlap += std::min(rep.hist_memorizing[static_cast<size_t>(b)],
                                rep.hist_generalizing[static_cast<size_t>(b)]);
    }
    if (report) {
        *report = rep;
    }

    if (rep.kept_memorizing == 0 || rep.kept_generalizing == 0) {
        throw std::runtime_error(
            "modeid: a retained class is empty (kept memorizing=" +
            std::to_string(rep.kept_memorizing) +
            ", generalizing=" + std::to_string(rep.kept_generalizing) +
            "); thresholds too strict for this model/corpus");
    }
    return datasets;
}

LabeledDataset build_labeled_dataset(const model::Weights& weights,
                                     std::span<const Prompt> memorization_prompts,
                                     std::span<const Prompt> generalization_prompts,
                                     const DiversityConfig& cfg, int layer, int max_new,
                                     LabelingReport* report) {
    const int layers[1] = {layer};
    auto datasets = build_labeled_dataset_layers(weights, memorization_prompts,
                                                 generalization_prompts, cfg, layers, max_new,
                                                 report);
    return std::move(datasets.front());
}

void check_calibration(const LabelingReport& report, double max_overlap) {
    if (report.overlap > max_overlap) {
        throw std::runtime_error(
            "modeid: diversity histograms of the two classes overlap by " +
            std::to_string(report.overlap) + " (> " + std::to_string(max_overlap) +
            "); tau thresholds cannot separate them");
    }
}

Probe train_probe(const LabeledDataset& dataset, double regularization, ProbeFitReport* report) {
    if (dataset.rows.empty()) {
        throw std::invalid_argument("probe: empty dataset");
    }
    bool has0 = false, has1 = false;
    for (const LabeledActivation& r : dataset.rows) {
        (r.is_memorizing ? has1 : has0) = true;
    }
    if (!has0 || !has1) {
        throw std::invalid_argument("probe: both labels must be present");
    }
    const size_t d = dataset.rows.front().activation.size();
    for (const LabeledActivation& r : dataset.rows) {
        if (r.activation.size() != d) {
            throw std::invalid_argument("probe: inconsistent activation dimensions");
        }
    }
    const size_t n = dataset.rows.size();

    // Standardize features for the optimizer's benefit; the returned probe is
    // mapped back to raw activation coordinates. The L2 penalty applies to
    // the standardized weights.
    std::vector<double> mu(d, 0.0), sigma(d, 0.0);
    for (const LabeledActivation& r : dataset.rows) {
        for (size_t j = 0; j < d; ++j) {
            mu[j] += r.activation[j];
        }
    }
    for (size_t j = 0; j < d; ++j) {
        mu[j] /= static_cast<double>(n);
    }
    for (const LabeledActivation& r : dataset.rows) {
        for (size_t j = 0; j < d; ++j) {
            const double delta = r.activation[j] - mu[j];
            sigma[j] += delta * delta;
        }
    }
    for (size_t j = 0; j < d; ++j) {
        sigma[j] = std::sqrt(sigma[j] / static_cast<double>(n));
        if (sigma[j] < 1e-8) {
            sigma[j] = 1.0;  // constant feature: leave unscaled
        }
    }
    std::vector<double> feat(n * d);
    for (size_t i = 0; i < n; ++i) {
        const auto& a = dataset.rows[i].activation;
        for (size_t j = 0; j < d; ++j) {
            feat[i * d + j] = (a[j] - mu[j]) / sigma[j];
        }
    }

    std::vector<double> w(d, 0.0);
    double b = 0.0;

    // loss(w, b) = mean_i log(1 + exp(-y_i z_i)) + reg/2 ||w||^2, y in {-1, +1}
    auto loss_grad = [&](const std::vector<double>& wv, double bv, std::vector<double>& gw,
                         double& gb) {
        std::fill(gw.begin(), gw.end(), 0.0);
        gb = 0.0;
        double loss = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double* x = feat.data() + i * d;
            double z = bv;
            for (size_t j = 0; j < d; ++j) {
                z += wv[j] * x[j];
            }
            const double y = dataset.rows[i].is_memorizing ? 1.0 : -1.0;
            const double yz = y * z;
            // log(1 + exp(-yz)), stable
            loss += yz > 0.0 ? std::log1p(std::exp(-yz)) : -yz + std::log1p(std::exp(yz));
            const double s = -y * sigmoid(-yz);  // d loss_i / d z
            for (size_t j = 0; j < d; ++j) {
                gw[j] += s * x[j];
            }
            gb += s;
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        loss *= inv_n;
        gb *= inv_n;
        for (size_t j = 0; j < d; ++j) {
            gw[j] = gw[j] * inv_n + regularization * wv[j];
            loss += 0.5 * regularization * wv[j] * wv[j];
        }
        return loss;
    };

    std::vector<double> gw(d, 0.0), gw_next(d, 0.0), w_next(d, 0.0);
    double gb = 0.0, gb_next = 0.0;
    double loss = loss_grad(w, b, gw, gb);

    const int max_iters = 5000;
    const double tol = 1e-6;
    int iter = 0;
    double gnorm = 0.0;
    for (; iter < max_iters; ++iter) {
        gnorm = 0.0;
        for (double g : gw) {
            gnorm += g * g;
        }
        gnorm += gb * gb;
        gnorm = std::sqrt(gnorm);
        if (gnorm < tol) {
            break;
        }
        // Backtracking line search along the negative gradient.
        double step = 4.0;
        bool accepted = false;
        for (int half = 0; half < 60; ++half) {
            for (size_t j = 0; j < d; ++j) {
                w_next[j] = w[j] - step * gw[j];
            }
            const double b_next = b - step * gb;
            const double loss_next = loss_grad(w_next, b_next, gw_next, gb_next);
            if (loss_next <= loss - 1e-4 * step * gnorm * gnorm) {
                w.swap(w_next);
                b = b_next;
                gw.swap(gw_next);
                gb = gb_next;
                loss = loss_next;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            break;  // step underflow: numerically converged
        }
    }

    if (report) {
        report->converged = gnorm < tol;
        report->grad_norm = gnorm;
        report->iterations = iter;
        report->final_loss = loss;
    }

    // Map back to raw activation coordinates:
    // w'.(phi - mu)/sigma + b' = (w'/sigma).phi + (b' - w'.mu/sigma)
    Probe probe;
    probe.w.resize(d);
    double b_raw = b;
    for (size_t j = 0; j < d; ++j) {
        const double wj = w[j] / sigma[j];
        probe.w[j] = static_cast<float>(wj);
        b_raw -= wj * mu[j];
    }
    probe.b = static_cast<float>(b_raw);
    probe.train_layer = dataset.layer;
    return probe;
}

double probe_score(const Probe& probe, std::span<const float> activation) {
    if (activation.size() != probe.w.size()) {
        throw std::invalid_argument("probe: activation dimension mismatch");
    }
    return sigmoid(dot_f64(probe.w, activation) + probe.b);
}

double probe_accuracy(const Probe& probe, const LabeledDataset& dataset) {
    if (dataset.rows.empty()) {
        throw std::invalid_argument("probe: empty dataset");
    }
    size_t ok = 0;
    for (const LabeledActivation& r : dataset.rows) {
        const int pred = probe_score(probe, r.activation) > 0.5 ? 1 : 0;
        ok += pred == r.is_memorizing ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(dataset.rows.size());
}

std::pair<LabeledDataset, LabeledDataset> split_dataset(const LabeledDataset& dataset,
                                                        double holdout_fraction, uint64_t seed) {
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
        throw std::invalid_argument("probe: holdout_fraction must be in [0, 1)");
    }
    std::vector<size_t> idx(dataset.rows.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    Rng rng(seed);
    rng.shuffle(idx);
    const size_t n_hold = static_cast<size_t>(holdout_fraction * static_cast<double>(idx.size()));
    LabeledDataset train, hold;
    train.layer = dataset.layer;
    hold.layer = dataset.layer;
    for (size_t i = 0; i < idx.size(); ++i) {
        (i < n_hold ? hold : train).rows.push_back(dataset.rows[idx[i]]);
    }
    return {std::move(train), std::move(hold)};
}

void save_labeled_datasets(std::span<const LabeledDataset> datasets,
                           const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("modeid: cannot write " + path.string());
    }
    for (const LabeledDataset& ds : datasets) {
        for (const LabeledActivation& r : ds.rows) {
            json j{{"prompt_id", r.prompt_id},
                   {"label", r.is_memorizing},
                   {"diversity_score", r.diversity_score},
                   {"layer", ds.layer},
                   {"activation", r.activation}};
            out << j.dump() << "\n";
        }
    }
}

std::vector<LabeledDataset> load_labeled_datasets(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("modeid: cannot read " + path.string());
    }
    std::vector<LabeledDataset> datasets;
    auto dataset_for = [&](int layer) -> LabeledDataset& {
        for (LabeledDataset& ds : datasets) {
            if (ds.layer == layer) {
                return ds;
            }
        }
        datasets.emplace_back();
        datasets.back().layer = layer;
        return datasets.back();
    };
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        LabeledActivation r;
        r.prompt_id = j.at("prompt_id").get<std::string>();
        r.is_memorizing = j.at("label").get<int>();
        r.diversity_score = j.at("diversity_score").get<double>();
        r.activation = j.at("activation").get<std::vector<float>>();
        dataset_for(j.at("layer").get<int>()).rows.push_back(std::move(r));
    }
    return datasets;
}

void save_probe(const Probe& probe, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("probe: cannot write " + path.string());
    }
    json j{{"layer", probe.train_layer}, {"b", probe.b}, {"w", probe.w}};
    out << j.dump() << "\n";
}

Probe load_probe(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("probe: cannot read " + path.string());
    }
    json j;
    in >> j;
    Probe probe;
    probe.train_layer = j.at("layer").get<int>();
    probe.b = j.at("b").get<float>();
    probe.w = j.at("w").get<std::vector<float>>();
    return probe;
}

}  // namespace dms::modeid
