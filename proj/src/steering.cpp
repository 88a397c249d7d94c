#include "dms/steering.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dms/vecmath.hpp"

namespace dms::steering {

using json = nlohmann::json;

void SteerParams::validate() const {
    if (alpha < 0.0) {
        throw std::invalid_argument("steering: alpha must be >= 0");
    }
    if (lambda < 0.0 || lambda > 1.0) {
        throw std::invalid_argument("steering: lambda must be in [0, 1]");
    }
    if (forced_m.has_value() && (*forced_m < 0.0 || *forced_m > 1.0)) {
        throw std::invalid_argument("steering: forced_m must be in [0, 1]");
    }
}

std::vector<float> SteerVector::unit_direction() const {
    if (norm <= 0.0) {
        throw std::invalid_argument("steering: degenerate vector");
    }
    std::vector<float> unit(v_g.size());
    for (size_t i = 0; i < v_g.size(); ++i) {
        unit[i] = static_cast<float>(v_g[i] / norm);
    }
    return unit;
}

SteerVector compute_steering_vector(const modeid::LabeledDataset& dataset, int layer) {
    if (dataset.layer != layer) {
        throw std::invalid_argument("steering: dataset was recorded at layer " +
                                    std::to_string(dataset.layer) + ", not " +
                                    std::to_string(layer));
    }
    std::vector<std::vector<float>> gen, memo;
    for (const modeid::LabeledActivation& r : dataset.rows) {
        (r.is_memorizing ? memo : gen).push_back(r.activation);
    }
    if (gen.empty() || memo.empty()) {
        throw std::invalid_argument("steering: both classes must be nonempty at the layer");
    }

    SteerVector sv;
    sv.layer = layer;
    sv.mu_g = mean_rows(gen);
    sv.mu_m = mean_rows(memo);
    sv.v_g.resize(sv.mu_g.size());
    for (size_t i = 0; i < sv.v_g.size(); ++i) {
        sv.v_g[i] = sv.mu_g[i] - sv.mu_m[i];
    }
    sv.norm = norm_l2(sv.v_g);
    if (sv.norm < 1e-8) {
        throw std::runtime_error("steering: degenerate direction, ||mu_g - mu_m|| < 1e-8");
    }
    return sv;
}

namespace {

void check_compatible(const modeid::Probe& probe, const SteerVector& sv) {
    if (probe.train_layer != sv.layer) {
        throw std::invalid_argument("steering: probe layer " + std::to_string(probe.train_layer) +
                                    " does not match vector layer " + std::to_string(sv.layer));
    }
    if (probe.w.size() != sv.v_g.size()) {
        throw std::invalid_argument("steering: probe/vector dimension mismatch");
    }
}

model::HookSpec make_steer_hook(const modeid::Probe& probe, const SteerVector& sv,
                                const SteerParams& params) {
    model::HookSpec h;
    h.layer = sv.layer;
    h.scope = model::PositionScope::LAST_TOKEN;
    h.action = model::HookAction::PROBE_THEN_STEER;
    h.direction = sv.unit_direction();
    h.probe_w = probe.w;
    h.probe_b = probe.b;
    h.alpha = static_cast<float>(params.alpha);
    if (params.mode == SteerMode::STATIC) {
        h.forced_m = 1.0f;
    } else if (params.forced_m.has_value()) {
        h.forced_m = static_cast<float>(*params.forced_m);
    }
    return h;
}

}  // namespace

double apply_steering(std::span<float> phi, const modeid::Probe& probe, const SteerVector& sv,
                      const SteerParams& params) {
    params.validate();
    check_compatible(probe, sv);
    if (phi.size() != sv.v_g.size()) {
        throw std::invalid_argument("steering: activation dimension mismatch");
    }
    if (params.mode == SteerMode::OFF) {
        return 0.0;
    }
    double m = modeid::probe_score(probe, std::span<const float>(phi.data(), phi.size()));
    if (params.mode == SteerMode::STATIC) {
        m = 1.0;
    } else if (params.forced_m.has_value()) {
        m = *params.forced_m;
    }
    const float eff = static_cast<float>(params.alpha * m);
    if (eff != 0.0f) {
        const std::vector<float> unit = sv.unit_direction();
        for (size_t i = 0; i < phi.size(); ++i) {
            phi[i] += eff * unit[i];
        }
    }
    return m;
}

SteeredStep steered_step(const model::Weights& weights, std::span<const int> context,
                         const modeid::Probe& probe, const SteerVector& sv,
                         const SteerParams& params) {
    params.validate();
    check_compatible(probe, sv);
    SteeredStep out;
    if (params.mode == SteerMode::OFF) {
        const model::ForwardResult fr = model::forward(weights, context, {});
        out.probs = model::softmax_f64(fr.logits_at(fr.seq_len - 1));
        out.m = 0.0;
        return out;
    }
    const model::HookSpec hook = make_steer_hook(probe, sv, params);
    const model::ForwardResult fr = model::forward(weights, context, {&hook, 1});
    out.probs = model::softmax_f64(fr.logits_at(fr.seq_len - 1));
    out.m = fr.probe_scores.empty() ? 0.0 : fr.probe_scores.front();
    return out;
}

SteeredDecode dms_decode(const model::Weights& weights, std::span<const int> prompt,
                         const modeid::Probe& probe, const SteerVector& sv,
                         const SteerParams& params, int max_new) {
    params.validate();
    check_compatible(probe, sv);
    if (prompt.empty()) {
        throw std::invalid_argument("decode: empty prompt");
    }
    if (static_cast<int>(prompt.size()) + max_new > weights.config.context_len) {
        throw std::invalid_argument("decode: prompt + max_new exceeds context_len");
    }

    SteeredDecode out;
    if (params.mode == SteerMode::OFF) {
        out.tokens = model::greedy_decode(weights, prompt, max_new);
        out.m_trace.assign(static_cast<size_t>(max_new), 0.0);
        return out;
    }

    const model::HookSpec hook = make_steer_hook(probe, sv, params);
    std::vector<int> seq(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new; ++step) {
        const model::ForwardResult fr = model::forward(weights, seq, {&hook, 1});
        out.m_trace.push_back(fr.probe_scores.empty() ? 0.0 : fr.probe_scores.front());
        const int next = model::argmax_token(fr.logits_at(fr.seq_len - 1));
        out.tokens.push_back(next);
        seq.push_back(next);
    }
    return out;
}

SteeredDecode self_contrastive_decode(const model::Weights& weights, std::span<const int> prompt,
                                      const modeid::Probe& probe, const SteerVector& sv,
                                      const SteerParams& params, int max_new) {
    params.validate();
    check_compatible(probe, sv);
    if (prompt.empty()) {
        throw std::invalid_argument("decode: empty prompt");
    }
    if (static_cast<int>(prompt.size()) + max_new > weights.config.context_len) {
        throw std::invalid_argument("decode: prompt + max_new exceeds context_len");
    }

    const model::HookSpec hook = make_steer_hook(probe, sv, params);
    const double lambda = params.lambda;
    SteeredDecode out;
    std::vector<int> seq(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new; ++step) {
        const model::ForwardResult plain = model::forward(weights, seq, {});
        const auto z_d = plain.logits_at(plain.seq_len - 1);

        int next;
        if (params.mode == SteerMode::OFF || lambda == 0.0) {
            if (params.mode != SteerMode::OFF) {
                // still log m for the trace
                const model::ForwardResult st = model::forward(weights, seq, {&hook, 1});
                out.m_trace.push_back(st.probe_scores.empty() ? 0.0 : st.probe_scores.front());
            } else {
                out.m_trace.push_back(0.0);
            }
            next = model::argmax_token(z_d);
        } else {
            const model::ForwardResult st = model::forward(weights, seq, {&hook, 1});
            const auto z_s = st.logits_at(st.seq_len - 1);
            out.m_trace.push_back(st.probe_scores.empty() ? 0.0 : st.probe_scores.front());
            int best = 0;
            double best_v = -1e300;
            for (size_t i = 0; i < z_d.size(); ++i) {
                const double v = (1.0 - lambda) * static_cast<double>(z_d[i]) +
                                 lambda * static_cast<double>(z_s[i]);
                if (v > best_v) {
                    best_v = v;
                    best = static_cast<int>(i);
                }
            }
            next = best;
        }
        out.tokens.push_back(next);
        seq.push_back(next);
    }
    return out;
}

void save_steer_vector(const SteerVector& sv, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("steering: cannot write " + path.string());
    }
    json j{{"layer", sv.layer},
           {"norm", sv.norm},
           {"mu_g", sv.mu_g},
           {"mu_m", sv.mu_m},
           {"v_g", sv.v_g}};
    out << j.dump() << "\n";
}

SteerVector load_steer_vector(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("steering: cannot read " + path.string());
    }
    json j;
    in >> j;
    SteerVector sv;
    sv.layer = j.at("layer").get<int>();
    sv.norm = j.at("norm").get<double>();
    sv.mu_g = j.at("mu_g").get<std::vector<float>>();
    sv.mu_m = j.at("mu_m").get<std::vector<float>>();
    sv.v_g = j.at("v_g").get<std::vector<float>>();
    return sv;
}

}  // namespace dms::steering
