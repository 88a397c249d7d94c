#include "dms/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dms/rng.hpp"
#include "dms/vecmath.hpp"
#include "kernels.hpp"

namespace dms::model {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swaps");

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 2 || context_len < 1) {
        throw std::invalid_argument("model: all config counts must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model: d_model must be divisible by n_heads");
    }
}

size_t Weights::n_params() const {
    size_t n = 0;
    visit_tensors([&](const std::string&, const std::vector<float>& t, bool) { n += t.size(); });
    return n;
}

bool Weights::all_finite() const {
    bool ok = true;
    visit_tensors([&](const std::string&, const std::vector<float>& t, bool) {
        for (float v : t) {
            if (!std::isfinite(v)) {
                ok = false;
                return;
            }
        }
    });
    return ok;
}

Weights init_weights(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    const int m = 4 * d;

    Weights w;
    w.config = config;
    Rng rng(config.seed);

    auto normals = [&](size_t n, double std_dev) {
        std::vector<float> t(n);
        for (float& v : t) {
            v = static_cast<float>(rng.next_normal() * std_dev);
        }
        return t;
    };

    const double base_std = 0.02;
    // Residual-output projections are scaled down with depth, the usual
    // small-GPT recipe.
    const double proj_std = base_std / std::sqrt(2.0 * config.n_layers);

    w.tok_emb = normals(static_cast<size_t>(config.vocab_size) * d, base_std);
    w.pos_emb = normals(static_cast<size_t>(config.context_len) * d, base_std);
    w.layers.resize(static_cast<size_t>(config.n_layers));
    for (LayerWeights& lw : w.layers) {
        lw.ln1_gain.assign(static_cast<size_t>(d), 1.0f);
        lw.ln1_bias.assign(static_cast<size_t>(d), 0.0f);
        lw.wq = normals(static_cast<size_t>(d) * d, base_std);
        lw.bq.assign(static_cast<size_t>(d), 0.0f);
        lw.wk = normals(static_cast<size_t>(d) * d, base_std);
        lw.bk.assign(static_cast<size_t>(d), 0.0f);
        lw.wv = normals(static_cast<size_t>(d) * d, base_std);
        lw.bv.assign(static_cast<size_t>(d), 0.0f);
        lw.wo = normals(static_cast<size_t>(d) * d, proj_std);
        lw.bo.assign(static_cast<size_t>(d), 0.0f);
        lw.ln2_gain.assign(static_cast<size_t>(d), 1.0f);
        lw.ln2_bias.assign(static_cast<size_t>(d), 0.0f);
        lw.w1 = normals(static_cast<size_t>(m) * d, base_std);
        lw.b1.assign(static_cast<size_t>(m), 0.0f);
        lw.w2 = normals(static_cast<size_t>(d) * m, proj_std);
        lw.b2.assign(static_cast<size_t>(d), 0.0f);
    }
    w.lnf_gain.assign(static_cast<size_t>(d), 1.0f);
    w.lnf_bias.assign(static_cast<size_t>(d), 0.0f);
    w.unembed = normals(static_cast<size_t>(config.vocab_size) * d, base_std);
    return w;
}

std::span<const float> ActivationCache::at(int layer, int pos) const {
    if (layer < 0 || layer >= n_layers || pos < 0 || pos >= seq_len) {
        throw std::out_of_range("activation cache: index out of range");
    }
    return std::span<const float>(
        data.data() + (static_cast<size_t>(layer) * seq_len + pos) * d_model,
        static_cast<size_t>(d_model));
}

std::span<float> ActivationCache::at_mut(int layer, int pos) {
    if (layer < 0 || layer >= n_layers || pos < 0 || pos >= seq_len) {
        throw std::out_of_range("activation cache: index out of range");
    }
    return std::span<float>(data.data() + (static_cast<size_t>(layer) * seq_len + pos) * d_model,
                            static_cast<size_t>(d_model));
}

HookSpec record_hook(int layer) {
    HookSpec h;
    h.layer = layer;
    h.scope = PositionScope::ALL;
    h.action = HookAction::RECORD;
    return h;
}

HookSpec patch_hook(int layer, const ActivationCache& source, PositionScope scope) {
    HookSpec h;
    h.layer = layer;
    h.scope = scope;
    h.action = HookAction::PATCH;
    h.patch_rows.assign(source.data.begin() + static_cast<ptrdiff_t>(static_cast<size_t>(layer) *
                                                                     source.seq_len * source.d_model),
                        source.data.begin() + static_cast<ptrdiff_t>(static_cast<size_t>(layer + 1) *
                                                                     source.seq_len * source.d_model));
    return h;
}

HookSpec steer_hook(int layer, std::vector<float> direction, float magnitude, PositionScope scope) {
    HookSpec h;
    h.layer = layer;
    h.scope = scope;
    h.action = HookAction::STEER;
    h.direction = std::move(direction);
    h.magnitude = magnitude;
    return h;
}

std::span<const float> ForwardResult::logits_at(int pos) const {
    if (pos < 0 || pos >= seq_len) {
        throw std::out_of_range("logits_at: position out of range");
    }
    return std::span<const float>(logits.data() + static_cast<size_t>(pos) * vocab_size,
                                  static_cast<size_t>(vocab_size));
}

namespace {

void validate_hooks(const ModelConfig& config, std::span<const HookSpec> hooks) {
    const size_t d = static_cast<size_t>(config.d_model);
    for (const HookSpec& h : hooks) {
        if (h.layer < 0 || h.layer >= config.n_layers) {
            throw std::invalid_argument("hook: layer out of range: " + std::to_string(h.layer));
        }
        switch (h.action) {
            case HookAction::RECORD:
                break;
            case HookAction::PATCH:
                if (h.patch_rows.empty() || h.patch_rows.size() % d != 0) {
                    throw std::invalid_argument("hook: PATCH replacement dimension mismatch");
                }
                break;
            case HookAction::STEER:
                if (h.direction.size() != d) {
                    throw std::invalid_argument("hook: STEER direction dimension mismatch");
                }
                break;
            case HookAction::PROBE_THEN_STEER:
                if (h.direction.size() != d || h.probe_w.size() != d) {
                    throw std::invalid_argument("hook: PROBE_THEN_STEER dimension mismatch");
                }
                if (h.scope != PositionScope::LAST_TOKEN) {
                    throw std::invalid_argument(
                        "hook: PROBE_THEN_STEER applies to the generation position only");
                }
                break;
        }
    }
}

}  // namespace

ForwardResult forward(const Weights& weights, std::span<const int> tokens,
                      std::span<const HookSpec> hooks, const ForwardOptions& options) {
    const ModelConfig& cfg = weights.config;
    const int T = static_cast<int>(tokens.size());
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int Dh = cfg.head_dim();
    const int M = 4 * D;
    const int V = cfg.vocab_size;

    if (T == 0) {
        throw std::invalid_argument("forward: empty token sequence");
    }
    if (T > cfg.context_len) {
        throw std::invalid_argument("forward: sequence longer than context_len");
    }
    for (int t : tokens) {
        if (t < 0 || t >= V) {
            throw std::invalid_argument("forward: token id out of range: " + std::to_string(t));
        }
    }
    validate_hooks(cfg, hooks);

    bool wants_cache = options.record_all_layers;
    for (const HookSpec& h : hooks) {
        wants_cache = wants_cache || h.action == HookAction::RECORD;
    }

    ForwardResult result;
    result.seq_len = T;
    result.vocab_size = V;
    if (wants_cache) {
        ActivationCache cache;
        cache.n_layers = cfg.n_layers;
        cache.seq_len = T;
        cache.d_model = D;
        cache.tokens.assign(tokens.begin(), tokens.end());
        cache.data.assign(static_cast<size_t>(cfg.n_layers) * T * D, 0.0f);
        result.cache = std::move(cache);
    }
    if (options.record_attention) {
        result.attn_probs.assign(
            static_cast<size_t>(cfg.n_layers),
            std::vector<std::vector<float>>(static_cast<size_t>(H),
                                            std::vector<float>(static_cast<size_t>(T) * T, 0.0f)));
    }

    // Scratch reused across calls within a thread; every cell consumed below
    // is rewritten first.
    struct Scratch {
        std::vector<float> x, xn, q, k, v, att, proj, h1;
        std::vector<double> srow;
        size_t td = 0, tm = 0;
        void ensure(size_t want_td, size_t want_tm, size_t want_t) {
            if (want_td > td) {
                td = want_td;
                x.resize(td);
                xn.resize(td);
                q.resize(td);
                k.resize(td);
                v.resize(td);
                att.resize(td);
                proj.resize(td);
            }
            if (want_tm > tm) {
                tm = want_tm;
                h1.resize(tm);
            }
            if (want_t > srow.size()) {
                srow.resize(want_t);
            }
        }
    };
    thread_local Scratch sc;
    sc.ensure(static_cast<size_t>(T) * D, static_cast<size_t>(T) * M, static_cast<size_t>(T));
    std::vector<float>& x = sc.x;
    std::vector<float>& xn = sc.xn;
    std::vector<float>& q = sc.q;
    std::vector<float>& k = sc.k;
    std::vector<float>& v = sc.v;
    std::vector<float>& att = sc.att;
    std::vector<float>& proj = sc.proj;
    std::vector<float>& h1 = sc.h1;
    std::vector<double>& srow = sc.srow;

    for (int t = 0; t < T; ++t) {
        const float* te = weights.tok_emb.data() + static_cast<size_t>(tokens[t]) * D;
        const float* pe = weights.pos_emb.data() + static_cast<size_t>(t) * D;
        float* row = x.data() + static_cast<size_t>(t) * D;
        for (int i = 0; i < D; ++i) {
            row[i] = te[i] + pe[i];
        }
    }
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(Dh));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = weights.layers[static_cast<size_t>(l)];

        // Attention sublayer.
        for (int t = 0; t < T; ++t) {
            kern::layernorm_forward(x.data() + static_cast<size_t>(t) * D, lw.ln1_gain.data(),
                                    lw.ln1_bias.data(), xn.data() + static_cast<size_t>(t) * D, D);
        }
        kern::matmul(lw.wq.data(), xn.data(), lw.bq.data(), q.data(), T, D, D);
        kern::matmul(lw.wk.data(), xn.data(), lw.bk.data(), k.data(), T, D, D);
        kern::matmul(lw.wv.data(), xn.data(), lw.bv.data(), v.data(), T, D, D);
        for (int h = 0; h < H; ++h) {
            const int off = h * Dh;
            for (int t = 0; t < T; ++t) {
                const float* qt = q.data() + static_cast<size_t>(t) * D + off;
                double max_s = -1e300;
                for (int j = 0; j <= t; ++j) {
                    const float s =
                        kern::dot(qt, k.data() + static_cast<size_t>(j) * D + off, Dh) * inv_sqrt_dh;
                    srow[static_cast<size_t>(j)] = s;
                    max_s = std::max(max_s, static_cast<double>(s));
                }
                double z = 0.0;
                for (int j = 0; j <= t; ++j) {
                    srow[static_cast<size_t>(j)] = std::exp(srow[static_cast<size_t>(j)] - max_s);
                    z += srow[static_cast<size_t>(j)];
                }
                float* out = att.data() + static_cast<size_t>(t) * D + off;
                std::fill(out, out + Dh, 0.0f);
                for (int j = 0; j <= t; ++j) {
                    const float p = static_cast<float>(srow[static_cast<size_t>(j)] / z);
                    kern::axpy(p, v.data() + static_cast<size_t>(j) * D + off, out, Dh);
                    if (options.record_attention) {
                        result.attn_probs[static_cast<size_t>(l)][static_cast<size_t>(h)]
                                         [static_cast<size_t>(t) * T + j] = p;
                    }
                }
            }
        }
        kern::matmul(lw.wo.data(), att.data(), lw.bo.data(), proj.data(), T, D, D);
        for (size_t i = 0; i < static_cast<size_t>(T) * D; ++i) {
            x[i] += proj[i];
        }

        // MLP sublayer.
        for (int t = 0; t < T; ++t) {
            kern::layernorm_forward(x.data() + static_cast<size_t>(t) * D, lw.ln2_gain.data(),
                                    lw.ln2_bias.data(), xn.data() + static_cast<size_t>(t) * D, D);
        }
        kern::matmul(lw.w1.data(), xn.data(), lw.b1.data(), h1.data(), T, M, D);
        for (size_t i = 0; i < static_cast<size_t>(T) * M; ++i) {
            h1[i] = kern::gelu(h1[i]);
        }
        kern::matmul(lw.w2.data(), h1.data(), lw.b2.data(), proj.data(), T, D, M);
        for (size_t i = 0; i < static_cast<size_t>(T) * D; ++i) {
            x[i] += proj[i];
        }

        // Post-block hook site for layer l, hooks applied in list order.
        for (const HookSpec& h : hooks) {
            if (h.layer != l) {
                continue;
            }
            switch (h.action) {
                case HookAction::RECORD: {
                    ActivationCache& cache = *result.cache;
                    if (h.scope == PositionScope::ALL) {
                        std::memcpy(cache.at_mut(l, 0).data(), x.data(),
                                    static_cast<size_t>(T) * D * sizeof(float));
                    } else {
                        std::memcpy(cache.at_mut(l, T - 1).data(),
                                    x.data() + static_cast<size_t>(T - 1) * D,
                                    static_cast<size_t>(D) * sizeof(float));
                    }
                    break;
                }
                case HookAction::PATCH: {
                    const int rows = static_cast<int>(h.patch_rows.size() / static_cast<size_t>(D));
                    if (h.scope == PositionScope::ALL) {
                        const int n = std::min(rows, T);
                        std::memcpy(x.data(), h.patch_rows.data(),
                                    static_cast<size_t>(n) * D * sizeof(float));
                    } else {
                        std::memcpy(x.data() + static_cast<size_t>(T - 1) * D,
                                    h.patch_rows.data() + static_cast<size_t>(rows - 1) * D,
                                    static_cast<size_t>(D) * sizeof(float));
                    }
                    break;
                }
                case HookAction::STEER: {
                    if (h.magnitude != 0.0f) {
                        if (h.scope == PositionScope::ALL) {
                            for (int t = 0; t < T; ++t) {
                                kern::axpy(h.magnitude, h.direction.data(),
                                           x.data() + static_cast<size_t>(t) * D, D);
                            }
                        } else {
                            kern::axpy(h.magnitude, h.direction.data(),
                                       x.data() + static_cast<size_t>(T - 1) * D, D);
                        }
                    }
                    break;
                }
                case HookAction::PROBE_THEN_STEER: {
                    float* row = x.data() + static_cast<size_t>(T - 1) * D;
                    const double z = dot_f64(std::span<const float>(h.probe_w.data(),
                                                                    static_cast<size_t>(D)),
                                             std::span<const float>(row, static_cast<size_t>(D))) +
                                     h.probe_b;
                    double m = sigmoid(z);
                    if (h.forced_m.has_value()) {
                        m = *h.forced_m;
                    }
                    const float eff = static_cast<float>(h.alpha * m);
                    if (eff != 0.0f) {
                        kern::axpy(eff, h.direction.data(), row, D);
                    }
                    result.probe_scores.push_back(m);
                    break;
                }
            }
        }

        // The cache mirrors what the next block will see.
        if (options.record_all_layers) {
            std::memcpy(result.cache->at_mut(l, 0).data(), x.data(),
                        static_cast<size_t>(T) * D * sizeof(float));
        }
    }

    result.logits.assign(static_cast<size_t>(T) * V, 0.0f);
    for (int t = 0; t < T; ++t) {
        kern::layernorm_forward(x.data() + static_cast<size_t>(t) * D, weights.lnf_gain.data(),
                                weights.lnf_bias.data(), xn.data() + static_cast<size_t>(t) * D, D);
    }
    kern::matmul(weights.unembed.data(), xn.data(), nullptr, result.logits.data(), T, V, D);
    return result;
}

std::vector<double> softmax_f64(std::span<const float> logits, double temperature) {
    if (logits.empty()) {
        throw std::invalid_argument("softmax: empty logits");
    }
    if (temperature <= 0.0) {
        throw std::invalid_argument("softmax: temperature must be positive");
    }
    double max_l = -1e300;
    for (float l : logits) {
        max_l = std::max(max_l, static_cast<double>(l));
    }
    std::vector<double> probs(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp((logits[i] - max_l) / temperature);
        z += probs[i];
    }
    for (double& p : probs) {
        p /= z;
    }
    return probs;
}

std::vector<std::pair<int, double>> nucleus_set(std::span<const double> probs, double top_p) {
    if (top_p <= 0.0 || top_p > 1.0) {
        throw std::invalid_argument("nucleus: top_p must be in (0, 1]");
    }
    std::vector<std::pair<int, double>> sorted(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) {
        sorted[i] = {static_cast<int>(i), probs[i]};
    }
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    double cum = 0.0;
    size_t n = sorted.size();
    for (size_t i = 0; i < sorted.size(); ++i) {
        cum += sorted[i].second;
        if (cum >= top_p) {
            n = i + 1;
            break;
        }
    }
    sorted.resize(n);
    double z = 0.0;
    for (const auto& [id, p] : sorted) {
        z += p;
    }
    for (auto& [id, p] : sorted) {
        p /= z;
    }
    return sorted;
}

int argmax_token(std::span<const float> logits) {
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = static_cast<int>(i);
        }
    }
    return best;
}

DecodeResult greedy_decode_full(const Weights& weights, std::span<const int> prompt, int max_new,
                                std::span<const HookSpec> hooks) {
    if (prompt.empty()) {
        throw std::invalid_argument("decode: empty prompt");
    }
    if (static_cast<int>(prompt.size()) + max_new > weights.config.context_len) {
        throw std::invalid_argument("decode: prompt + max_new exceeds context_len");
    }
    DecodeResult out;
    std::vector<int> seq(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new; ++step) {
        ForwardResult fr = forward(weights, seq, hooks);
        for (double m : fr.probe_scores) {
            out.probe_m.push_back(m);
        }
        const int next = argmax_token(fr.logits_at(fr.seq_len - 1));
        out.tokens.push_back(next);
        seq.push_back(next);
    }
    return out;
}

std::vector<int> greedy_decode(const Weights& weights, std::span<const int> prompt, int max_new,
                               std::span<const HookSpec> hooks) {
    return greedy_decode_full(weights, prompt, max_new, hooks).tokens;
}

std::vector<int> nucleus_sample(const Weights& weights, std::span<const int> prompt, int max_new,
                                double top_p, double temperature, uint64_t rng_seed,
                                std::span<const HookSpec> hooks) {
    if (prompt.empty()) {
        throw std::invalid_argument("decode: empty prompt");
    }
    if (top_p <= 0.0 || top_p > 1.0) {
        throw std::invalid_argument("nucleus: top_p must be in (0, 1]");
    }
    if (temperature <= 0.0) {
        throw std::invalid_argument("nucleus: temperature must be positive");
    }
    if (static_cast<int>(prompt.size()) + max_new > weights.config.context_len) {
        throw std::invalid_argument("decode: prompt + max_new exceeds context_len");
    }
    Rng rng(rng_seed);
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        ForwardResult fr = forward(weights, seq, hooks);
        const std::vector<double> probs = softmax_f64(fr.logits_at(fr.seq_len - 1), temperature);
        const auto nucleus = nucleus_set(probs, top_p);
        const double u = rng.next_unit();
        double cum = 0.0;
        int pick = nucleus.back().first;
        for (const auto& [id, p] : nucleus) {
            cum += p;
            if (u < cum) {
                pick = id;
                break;
            }
        }
        out.push_back(pick);
        seq.push_back(pick);
    }
    return out;
}

void save_checkpoint(const Weights& weights, int64_t step, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("checkpoint: cannot write " + path.string());
    }
    const ModelConfig& c = weights.config;
    std::ostringstream meta;
    meta << "n_layers=" << c.n_layers << "\n"
         << "d_model=" << c.d_model << "\n"
         << "n_heads=" << c.n_heads << "\n"
         << "vocab_size=" << c.vocab_size << "\n"
         << "context_len=" << c.context_len << "\n"
         << "seed=" << c.seed << "\n"
         << "step=" << step << "\n";
    const std::string meta_str = meta.str();
    out.write("DMS1", 4);
    const uint32_t len = static_cast<uint32_t>(meta_str.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    weights.visit_tensors([&](const std::string&, const std::vector<float>& t, bool) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(float)));
    });
    if (!out) {
        throw std::runtime_error("checkpoint: write failed: " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("checkpoint: cannot read " + path.string());
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "DMS1", 4) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    }
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1u << 20)) {
        throw std::runtime_error("checkpoint: bad metadata length in " + path.string());
    }
    std::string meta_str(len, '\0');
    in.read(meta_str.data(), len);
    if (!in) {
        throw std::runtime_error("checkpoint: truncated metadata in " + path.string());
    }

    ModelConfig config;
    int64_t step = 0;
    {
        std::istringstream meta(meta_str);
        std::string line;
        while (std::getline(meta, line)) {
            if (line.empty()) {
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw std::runtime_error("checkpoint: bad metadata line '" + line + "'");
            }
            const std::string key = line.substr(0, eq);
            const std::string val = line.substr(eq + 1);
            if (key == "n_layers") config.n_layers = std::stoi(val);
            else if (key == "d_model") config.d_model = std::stoi(val);
            else if (key == "n_heads") config.n_heads = std::stoi(val);
            else if (key == "vocab_size") config.vocab_size = std::stoi(val);
            else if (key == "context_len") config.context_len = std::stoi(val);
            else if (key == "seed") config.seed = std::stoull(val);
            else if (key == "step") step = std::stoll(val);
            else throw std::runtime_error("checkpoint: unknown metadata key '" + key + "'");
        }
    }
    config.validate();

    Checkpoint ckpt;
    ckpt.step = step;
    ckpt.weights = init_weights(config);  // allocates the right shapes
    ckpt.weights.visit_tensors([&](const std::string& name, std::vector<float>& t, bool) {
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!in) {
            throw std::runtime_error("checkpoint: truncated tensor '" + name + "' in " +
                                     path.string());
        }
    });
    in.peek();
    if (!in.eof()) {
        throw std::runtime_error("checkpoint: trailing bytes in " + path.string());
    }
    if (!ckpt.weights.all_finite()) {
        throw std::runtime_error("checkpoint: non-finite parameter in " + path.string());
    }
    return ckpt;
}

}  // namespace dms::model
