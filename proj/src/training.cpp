#include "dms/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dms/parallel.hpp"
#include "dms/rng.hpp"
#include "kernels.hpp"

namespace dms::training {

using model::ModelConfig;
using model::Weights;
using json = nlohmann::json;

void TrainConfig::validate() const {
    if (steps < 1 || batch_size < 1 || checkpoint_every < 1) {
        throw std::invalid_argument("train: steps, batch_size, checkpoint_every must be positive");
    }
    if (learning_rate < 0.0 || weight_decay < 0.0) {
        throw std::invalid_argument("train: learning_rate and weight_decay must be >= 0");
    }
    if (checkpoint_every > steps) {
        throw std::invalid_argument("train: checkpoint_every must be <= steps");
    }
    if (warmup_steps < 0 || lr_final_factor < 0.0 || lr_final_factor > 1.0 || clip_norm < 0.0) {
        throw std::invalid_argument("train: bad schedule or clip settings");
    }
    if (memo_boost < 1) {
        throw std::invalid_argument("train: memo_boost must be >= 1");
    }
}

double scheduled_lr(const TrainConfig& config, int step) {
    const double base = config.learning_rate;
    if (step < config.warmup_steps) {
        return base * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
    }
    if (config.lr_final_factor >= 1.0 || config.steps <= config.warmup_steps) {
        return base;
    }
    const double progress = static_cast<double>(step - config.warmup_steps) /
                            static_cast<double>(config.steps - config.warmup_steps);
    const double floor = base * config.lr_final_factor;
    return floor + 0.5 * (base - floor) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void TrainTrace::save_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("trace: cannot write " + path.string());
    }
    for (const TraceRow& r : rows) {
        json j{{"step", r.step},
               {"loss", r.loss},
               {"train_acc", r.train_acc},
               {"heldout_acc", r.heldout_acc},
               {"fact_acc", r.fact_acc}};
        out << j.dump() << "\n";
    }
}

TrainTrace TrainTrace::load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("trace: cannot read " + path.string());
    }
    TrainTrace trace;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        TraceRow r;
        r.step = j.at("step").get<int>();
        r.loss = j.at("loss").get<double>();
        r.train_acc = j.at("train_acc").get<double>();
        r.heldout_acc = j.at("heldout_acc").get<double>();
        r.fact_acc = j.at("fact_acc").get<double>();
        trace.rows.push_back(r);
    }
    return trace;
}

std::optional<int> TrainTrace::amateur_step(double train_min, double heldout_max) const {
    for (const TraceRow& r : rows) {
        if (r.step > 0 && r.train_acc >= train_min && r.heldout_acc < heldout_max) {
            return r.step;
        }
    }
    return std::nullopt;
}

std::optional<int> TrainTrace::first_step_reaching(double train_acc_min) const {
    for (const TraceRow& r : rows) {
        if (r.train_acc >= train_acc_min) {
            return r.step;
        }
    }
    return std::nullopt;
}

std::optional<int> TrainTrace::first_heldout_step_reaching(double heldout_acc_min) const {
    for (const TraceRow& r : rows) {
        if (r.heldout_acc >= heldout_acc_min) {
            return r.step;
        }
    }
    return std::nullopt;
}

AdamW::AdamW(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(Weights& weights, const Weights& grads, double lr, double weight_decay) {
    std::vector<std::vector<float>*> w_tensors;
    std::vector<const std::vector<float>*> g_tensors;
    std::vector<bool> is_matrix;
    weights.visit_tensors([&](const std::string&, std::vector<float>& t, bool m) {
        w_tensors.push_back(&t);
        is_matrix.push_back(m);
    });
    grads.visit_tensors([&](const std::string&, const std::vector<float>& t, bool) {
        g_tensors.push_back(&t);
    });
    if (w_tensors.size() != g_tensors.size()) {
        throw std::invalid_argument("adamw: weight/gradient structure mismatch");
    }
    if (m_.empty()) {
        for (const auto* t : w_tensors) {
            m_.emplace_back(t->size(), 0.0f);
            v_.emplace_back(t->size(), 0.0f);
        }
    }
    t_ += 1;
    const float b1 = static_cast<float>(beta1_);
    const float b2 = static_cast<float>(beta2_);
    const float inv_bc1 = static_cast<float>(1.0 / (1.0 - std::pow(beta1_, static_cast<double>(t_))));
    const float inv_bc2 = static_cast<float>(1.0 / (1.0 - std::pow(beta2_, static_cast<double>(t_))));
    const float lrf = static_cast<float>(lr);
    const float epsf = static_cast<float>(eps_);
    for (size_t i = 0; i < w_tensors.size(); ++i) {
        std::vector<float>& w = *w_tensors[i];
        const std::vector<float>& g = *g_tensors[i];
        if (w.size() != g.size()) {
            throw std::invalid_argument("adamw: tensor size mismatch");
        }
        float* wp = w.data();
        const float* gp = g.data();
        float* mp = m_[i].data();
        float* vp = v_[i].data();
        const float decay = is_matrix[i] ? static_cast<float>(lr * weight_decay) : 0.0f;
        const int n = static_cast<int>(w.size());
#pragma omp simd
        for (int j = 0; j < n; ++j) {
            const float gj = gp[j];
            const float mj = b1 * mp[j] + (1.0f - b1) * gj;
            const float vj = b2 * vp[j] + (1.0f - b2) * gj * gj;
            mp[j] = mj;
            vp[j] = vj;
            wp[j] -= lrf * (mj * inv_bc1) / (std::sqrt(vj * inv_bc2) + epsf) + decay * wp[j];
        }
    }
}

Weights make_grad_buffer(const Weights& like) {
    Weights g;
    g.config = like.config;
    g.tok_emb.assign(like.tok_emb.size(), 0.0f);
    g.pos_emb.assign(like.pos_emb.size(), 0.0f);
    g.layers.resize(like.layers.size());
    for (size_t l = 0; l < like.layers.size(); ++l) {
        const model::LayerWeights& s = like.layers[l];
        model::LayerWeights& d = g.layers[l];
        d.ln1_gain.assign(s.ln1_gain.size(), 0.0f);
        d.ln1_bias.assign(s.ln1_bias.size(), 0.0f);
        d.wq.assign(s.wq.size(), 0.0f);
        d.bq.assign(s.bq.size(), 0.0f);
        d.wk.assign(s.wk.size(), 0.0f);
        d.bk.assign(s.bk.size(), 0.0f);
        d.wv.assign(s.wv.size(), 0.0f);
        d.bv.assign(s.bv.size(), 0.0f);
        d.wo.assign(s.wo.size(), 0.0f);
        d.bo.assign(s.bo.size(), 0.0f);
        d.ln2_gain.assign(s.ln2_gain.size(), 0.0f);
        d.ln2_bias.assign(s.ln2_bias.size(), 0.0f);
        d.w1.assign(s.w1.size(), 0.0f);
        d.b1.assign(s.b1.size(), 0.0f);
        d.w2.assign(s.w2.size(), 0.0f);
        d.b2.assign(s.b2.size(), 0.0f);
    }
    g.lnf_gain.assign(like.lnf_gain.size(), 0.0f);
    g.lnf_bias.assign(like.lnf_bias.size(), 0.0f);
    g.unembed.assign(like.unembed.size(), 0.0f);
    return g;
}

namespace {

void zero_grads(Weights& g) {
    g.visit_tensors([](const std::string&, std::vector<float>& t, bool) {
        std::fill(t.begin(), t.end(), 0.0f);
    });
}

// Per-sequence forward state kept for the backward pass. Buffers are sized
// once per (config, T) and reused; every value read by the backward pass is
// rewritten by each forward call.
struct TrainActs {
    int T = -1;
    int L = 0, D = 0, M = 0, V = 0, H = 0;
    std::vector<std::vector<float>> a_in;              // (L+1) x T*D residual per layer
    std::vector<std::vector<float>> xn1, xn2;          // L x T*D
    std::vector<std::vector<kern::LnStats>> st1, st2;  // L x T
    std::vector<std::vector<float>> q, k, v, att;      // L x T*D
    std::vector<std::vector<float>> probs;             // L x H*T*T (lower triangle valid)
    std::vector<std::vector<float>> m_in;              // L x T*D
    std::vector<std::vector<float>> h_pre, h_act;      // L x T*M
    std::vector<float> xnf;                            // T*D
    std::vector<kern::LnStats> stf;                    // T
    std::vector<float> logits;                         // T*V

    void resize(const ModelConfig& c, int t_len) {
        if (T == t_len && L == c.n_layers && D == c.d_model && V == c.vocab_size) {
            return;
        }
        T = t_len;
        L = c.n_layers;
        D = c.d_model;
        M = 4 * c.d_model;
        V = c.vocab_size;
        H = c.n_heads;
        const size_t Ls = static_cast<size_t>(L);
        const size_t TD = static_cast<size_t>(T) * D;
        const size_t TM = static_cast<size_t>(T) * M;
        const size_t HTT = static_cast<size_t>(H) * T * T;
        a_in.assign(Ls + 1, std::vector<float>(TD));
        xn1.assign(Ls, std::vector<float>(TD));
        xn2.assign(Ls, std::vector<float>(TD));
        st1.assign(Ls, std::vector<kern::LnStats>(static_cast<size_t>(T)));
        st2.assign(Ls, std::vector<kern::LnStats>(static_cast<size_t>(T)));
        q.assign(Ls, std::vector<float>(TD));
        k.assign(Ls, std::vector<float>(TD));
        v.assign(Ls, std::vector<float>(TD));
        att.assign(Ls, std::vector<float>(TD));
        probs.assign(Ls, std::vector<float>(HTT, 0.0f));
        m_in.assign(Ls, std::vector<float>(TD));
        h_pre.assign(Ls, std::vector<float>(TM));
        h_act.assign(Ls, std::vector<float>(TM));
        xnf.assign(TD, 0.0f);
        stf.assign(static_cast<size_t>(T), {0.0, 0.0});
        logits.assign(static_cast<size_t>(T) * V, 0.0f);
    }
};

struct BwdScratch {
    int T = -1, D = 0, M = 0;
    std::vector<float> dlogits;             // T*V
    std::vector<float> dx, dxn, dq, dk, dv, datt;  // T*D
    std::vector<float> dh_act, dh_pre;      // T*M
    std::vector<double> dsrow;              // T

    void resize(const ModelConfig& c, int t_len) {
        if (T == t_len && D == c.d_model) {
            return;
        }
        T = t_len;
        D = c.d_model;
        M = 4 * c.d_model;
        const size_t TD = static_cast<size_t>(T) * D;
        dlogits.assign(static_cast<size_t>(T) * c.vocab_size, 0.0f);
        dx.assign(TD, 0.0f);
        dxn.assign(TD, 0.0f);
        dq.assign(TD, 0.0f);
        dk.assign(TD, 0.0f);
        dv.assign(TD, 0.0f);
        datt.assign(TD, 0.0f);
        dh_act.assign(static_cast<size_t>(T) * M, 0.0f);
        dh_pre.assign(static_cast<size_t>(T) * M, 0.0f);
        dsrow.assign(static_cast<size_t>(T), 0.0);
    }
};

void train_forward(const Weights& w, std::span<const int> tokens, TrainActs& acts) {
    const ModelConfig& cfg = w.config;
    const int T = static_cast<int>(tokens.size());
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int Dh = cfg.head_dim();
    const int M = 4 * D;
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(Dh));

    acts.resize(cfg, T);

    for (int t = 0; t < T; ++t) {
        const float* te = w.tok_emb.data() + static_cast<size_t>(tokens[t]) * D;
        const float* pe = w.pos_emb.data() + static_cast<size_t>(t) * D;
        float* row = acts.a_in[0].data() + static_cast<size_t>(t) * D;
        for (int i = 0; i < D; ++i) {
            row[i] = te[i] + pe[i];
        }
    }

    std::vector<double> srow(static_cast<size_t>(T));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const model::LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        const size_t sl = static_cast<size_t>(l);
        const float* x = acts.a_in[sl].data();

        for (int t = 0; t < T; ++t) {
            acts.st1[sl][static_cast<size_t>(t)] = kern::layernorm_forward(
                x + static_cast<size_t>(t) * D, lw.ln1_gain.data(), lw.ln1_bias.data(),
                acts.xn1[sl].data() + static_cast<size_t>(t) * D, D);
        }
        kern::matmul(lw.wq.data(), acts.xn1[sl].data(), lw.bq.data(), acts.q[sl].data(), T, D, D);
        kern::matmul(lw.wk.data(), acts.xn1[sl].data(), lw.bk.data(), acts.k[sl].data(), T, D, D);
        kern::matmul(lw.wv.data(), acts.xn1[sl].data(), lw.bv.data(), acts.v[sl].data(), T, D, D);

        for (int h = 0; h < H; ++h) {
            const int off = h * Dh;
            for (int t = 0; t < T; ++t) {
                const float* qt = acts.q[sl].data() + static_cast<size_t>(t) * D + off;
                double max_s = -1e300;
                for (int j = 0; j <= t; ++j) {
                    const float s =
                        kern::dot(qt, acts.k[sl].data() + static_cast<size_t>(j) * D + off, Dh) *
                        inv_sqrt_dh;
                    srow[static_cast<size_t>(j)] = s;
                    max_s = std::max(max_s, static_cast<double>(s));
                }
                double z = 0.0;
                for (int j = 0; j <= t; ++j) {
                    srow[static_cast<size_t>(j)] = std::exp(srow[static_cast<size_t>(j)] - max_s);
                    z += srow[static_cast<size_t>(j)];
                }
                float* out = acts.att[sl].data() + static_cast<size_t>(t) * D + off;
                std::fill(out, out + Dh, 0.0f);
                float* prow = acts.probs[sl].data() + (static_cast<size_t>(h) * T + t) * T;
                for (int j = 0; j <= t; ++j) {
                    const float p = static_cast<float>(srow[static_cast<size_t>(j)] / z);
                    prow[j] = p;
                    kern::axpy(p, acts.v[sl].data() + static_cast<size_t>(j) * D + off, out, Dh);
                }
            }
        }

        kern::matmul(lw.wo.data(), acts.att[sl].data(), lw.bo.data(), acts.m_in[sl].data(), T, D, D);
        for (size_t i = 0; i < static_cast<size_t>(T) * D; ++i) {
            acts.m_in[sl][i] += x[i];
        }

        for (int t = 0; t < T; ++t) {
            acts.st2[sl][static_cast<size_t>(t)] = kern::layernorm_forward(
                acts.m_in[sl].data() + static_cast<size_t>(t) * D, lw.ln2_gain.data(),
                lw.ln2_bias.data(), acts.xn2[sl].data() + static_cast<size_t>(t) * D, D);
        }
        kern::matmul(lw.w1.data(), acts.xn2[sl].data(), lw.b1.data(), acts.h_pre[sl].data(), T, M, D);
        for (size_t i = 0; i < static_cast<size_t>(T) * M; ++i) {
            acts.h_act[sl][i] = kern::gelu(acts.h_pre[sl][i]);
        }
        kern::matmul(lw.w2.data(), acts.h_act[sl].data(), lw.b2.data(), acts.a_in[sl + 1].data(), T,
                     D, M);
        for (size_t i = 0; i < static_cast<size_t>(T) * D; ++i) {
            acts.a_in[sl + 1][i] += acts.m_in[sl][i];
        }
    }

    const size_t L = static_cast<size_t>(cfg.n_layers);
    for (int t = 0; t < T; ++t) {
        acts.stf[static_cast<size_t>(t)] = kern::layernorm_forward(
            acts.a_in[L].data() + static_cast<size_t>(t) * D, w.lnf_gain.data(), w.lnf_bias.data(),
            acts.xnf.data() + static_cast<size_t>(t) * D, D);
    }
    kern::matmul(w.unembed.data(), acts.xnf.data(), nullptr, acts.logits.data(), T,
                 cfg.vocab_size, D);
}

// Loss over answer positions given filled acts; fills dlogits (T*V) with the
// gradient of the summed loss. Positions outside the answer stay zero.
double answer_loss_from_acts(const TrainActs& acts, const ModelConfig& cfg, int prompt_len,
                             std::span<const int> answer, std::vector<float>* dlogits) {
    const int V = cfg.vocab_size;
    if (dlogits) {
        std::fill(dlogits->begin(), dlogits->end(), 0.0f);
    }
    double loss = 0.0;
    for (size_t i = 0; i < answer.size(); ++i) {
        const int pos = prompt_len - 1 + static_cast<int>(i);
        const int target = answer[i];
        const float* lrow = acts.logits.data() + static_cast<size_t>(pos) * V;
        double max_l = -1e300;
        for (int j = 0; j < V; ++j) {
            max_l = std::max(max_l, static_cast<double>(lrow[j]));
        }
        double z = 0.0;
        for (int j = 0; j < V; ++j) {
            z += std::exp(lrow[j] - max_l);
        }
        const double logz = std::log(z) + max_l;
        loss += logz - lrow[target];
        if (dlogits) {
            float* drow = dlogits->data() + static_cast<size_t>(pos) * V;
            for (int j = 0; j < V; ++j) {
                drow[j] = static_cast<float>(std::exp(lrow[j] - logz));
            }
            drow[target] -= 1.0f;
        }
    }
    return loss;
}

void backward_from_dlogits(const Weights& w, std::span<const int> tokens, const TrainActs& acts,
                           BwdScratch& s, Weights& g) {
    const ModelConfig& cfg = w.config;
    const int T = static_cast<int>(tokens.size());
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int Dh = cfg.head_dim();
    const int M = 4 * D;
    const int V = cfg.vocab_size;
    const size_t L = static_cast<size_t>(cfg.n_layers);
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(Dh));
    const size_t TD = static_cast<size_t>(T) * D;

    std::fill(s.dx.begin(), s.dx.end(), 0.0f);
    std::fill(s.dxn.begin(), s.dxn.end(), 0.0f);

    kern::matmul_at_acc(s.dlogits.data(), acts.xnf.data(), g.unembed.data(), T, V, D);
    kern::matmul_t_acc(w.unembed.data(), s.dlogits.data(), s.dxn.data(), T, V, D);
    for (int t = 0; t < T; ++t) {
        kern::layernorm_backward(acts.a_in[L].data() + static_cast<size_t>(t) * D,
                                 w.lnf_gain.data(), s.dxn.data() + static_cast<size_t>(t) * D,
                                 acts.stf[static_cast<size_t>(t)],
                                 s.dx.data() + static_cast<size_t>(t) * D, g.lnf_gain.data(),
                                 g.lnf_bias.data(), D);
    }

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const size_t sl = static_cast<size_t>(l);
        const model::LayerWeights& lw = w.layers[sl];
        model::LayerWeights& gl = g.layers[sl];

        // MLP backward: dx holds d(block output).
        kern::matmul_at_acc(s.dx.data(), acts.h_act[sl].data(), gl.w2.data(), T, D, M);
        kern::bias_acc(s.dx.data(), gl.b2.data(), T, D);
        std::fill(s.dh_act.begin(), s.dh_act.end(), 0.0f);
        kern::matmul_t_acc(lw.w2.data(), s.dx.data(), s.dh_act.data(), T, D, M);
        for (size_t i = 0; i < static_cast<size_t>(T) * M; ++i) {
            s.dh_pre[i] = s.dh_act[i] * kern::gelu_grad(acts.h_pre[sl][i]);
        }
        kern::matmul_at_acc(s.dh_pre.data(), acts.xn2[sl].data(), gl.w1.data(), T, M, D);
        kern::bias_acc(s.dh_pre.data(), gl.b1.data(), T, M);
        std::fill(s.dxn.begin(), s.dxn.end(), 0.0f);
        kern::matmul_t_acc(lw.w1.data(), s.dh_pre.data(), s.dxn.data(), T, M, D);
        for (int t = 0; t < T; ++t) {
            kern::layernorm_backward(acts.m_in[sl].data() + static_cast<size_t>(t) * D,
                                     lw.ln2_gain.data(), s.dxn.data() + static_cast<size_t>(t) * D,
                                     acts.st2[sl][static_cast<size_t>(t)],
                                     s.dx.data() + static_cast<size_t>(t) * D, gl.ln2_gain.data(),
                                     gl.ln2_bias.data(), D);
        }

        // Attention backward: dx now holds d(m_in).
        kern::matmul_at_acc(s.dx.data(), acts.att[sl].data(), gl.wo.data(), T, D, D);
        kern::bias_acc(s.dx.data(), gl.bo.data(), T, D);
        std::fill(s.datt.begin(), s.datt.end(), 0.0f);
        kern::matmul_t_acc(lw.wo.data(), s.dx.data(), s.datt.data(), T, D, D);

        std::fill(s.dq.begin(), s.dq.end(), 0.0f);
        std::fill(s.dk.begin(), s.dk.end(), 0.0f);
        std::fill(s.dv.begin(), s.dv.end(), 0.0f);
        for (int h = 0; h < H; ++h) {
            const int off = h * Dh;
            for (int t = 0; t < T; ++t) {
                const float* dat = s.datt.data() + static_cast<size_t>(t) * D + off;
                const float* prow = acts.probs[sl].data() + (static_cast<size_t>(h) * T + t) * T;
                double dsum = 0.0;
                for (int j = 0; j <= t; ++j) {
                    const float dp =
                        kern::dot(dat, acts.v[sl].data() + static_cast<size_t>(j) * D + off, Dh);
                    kern::axpy(prow[j], dat, s.dv.data() + static_cast<size_t>(j) * D + off, Dh);
                    s.dsrow[static_cast<size_t>(j)] = dp;
                    dsum += static_cast<double>(prow[j]) * dp;
                }
                for (int j = 0; j <= t; ++j) {
                    const float ds =
                        prow[j] * static_cast<float>(s.dsrow[static_cast<size_t>(j)] - dsum) *
                        inv_sqrt_dh;
                    kern::axpy(ds, acts.k[sl].data() + static_cast<size_t>(j) * D + off,
                               s.dq.data() + static_cast<size_t>(t) * D + off, Dh);
                    kern::axpy(ds, acts.q[sl].data() + static_cast<size_t>(t) * D + off,
                               s.dk.data() + static_cast<size_t>(j) * D + off, Dh);
                }
            }
        }

        kern::matmul_at_acc(s.dq.data(), acts.xn1[sl].data(), gl.wq.data(), T, D, D);
        kern::matmul_at_acc(s.dk.data(), acts.xn1[sl].data(), gl.wk.data(), T, D, D);
        kern::matmul_at_acc(s.dv.data(), acts.xn1[sl].data(), gl.wv.data(), T, D, D);
        kern::bias_acc(s.dq.data(), gl.bq.data(), T, D);
        kern::bias_acc(s.dk.data(), gl.bk.data(), T, D);
        kern::bias_acc(s.dv.data(), gl.bv.data(), T, D);
        std::fill(s.dxn.begin(), s.dxn.end(), 0.0f);
        kern::matmul_t_acc(lw.wq.data(), s.dq.data(), s.dxn.data(), T, D, D);
        kern::matmul_t_acc(lw.wk.data(), s.dk.data(), s.dxn.data(), T, D, D);
        kern::matmul_t_acc(lw.wv.data(), s.dv.data(), s.dxn.data(), T, D, D);
        for (int t = 0; t < T; ++t) {
            kern::layernorm_backward(acts.a_in[sl].data() + static_cast<size_t>(t) * D,
                                     lw.ln1_gain.data(), s.dxn.data() + static_cast<size_t>(t) * D,
                                     acts.st1[sl][static_cast<size_t>(t)],
                                     s.dx.data() + static_cast<size_t>(t) * D, gl.ln1_gain.data(),
                                     gl.ln1_bias.data(), D);
        }
    }

    (void)TD;
    for (int t = 0; t < T; ++t) {
        const float* dxt = s.dx.data() + static_cast<size_t>(t) * D;
        kern::axpy(1.0f, dxt, g.tok_emb.data() + static_cast<size_t>(tokens[t]) * D, D);
        kern::axpy(1.0f, dxt, g.pos_emb.data() + static_cast<size_t>(t) * D, D);
    }
}

double stored_answer_accuracy(const Weights& weights,
                              std::span<const corpus::Item* const> items) {
    if (items.empty()) {
        throw std::invalid_argument("accuracy: empty item set");
    }
    std::vector<char> ok(items.size(), 0);
    parallel_for(items.size(), [&](size_t i) {
        const corpus::Item& item = *items[i];
        const std::vector<int> out =
            model::greedy_decode(weights, item.prompt, static_cast<int>(item.answer.size()));
        ok[i] = out == item.answer ? 1 : 0;
    });
    size_t n_ok = 0;
    for (char c : ok) {
        n_ok += static_cast<size_t>(c);
    }
    return static_cast<double>(n_ok) / static_cast<double>(items.size());
}

}  // namespace

std::pair<double, int> answer_loss_and_grad(const Weights& weights, std::span<const int> prompt,
                                            std::span<const int> answer, Weights& grads) {
    if (prompt.empty() || answer.empty()) {
        throw std::invalid_argument("loss: empty prompt or answer");
    }
    std::vector<int> tokens(prompt.begin(), prompt.end());
    tokens.insert(tokens.end(), answer.begin(), answer.end());
    if (static_cast<int>(tokens.size()) > weights.config.context_len) {
        throw std::invalid_argument("loss: sequence longer than context_len");
    }
    TrainActs acts;
    BwdScratch scratch;
    train_forward(weights, tokens, acts);
    scratch.resize(weights.config, static_cast<int>(tokens.size()));
    const double loss = answer_loss_from_acts(acts, weights.config,
                                              static_cast<int>(prompt.size()), answer, &scratch.dlogits);
    backward_from_dlogits(weights, tokens, acts, scratch, grads);
    return {loss, static_cast<int>(answer.size())};
}

std::pair<double, int> answer_loss(const Weights& weights, std::span<const int> prompt,
                                   std::span<const int> answer) {
    if (prompt.empty() || answer.empty()) {
        throw std::invalid_argument("loss: empty prompt or answer");
    }
    std::vector<int> tokens(prompt.begin(), prompt.end());
    tokens.insert(tokens.end(), answer.begin(), answer.end());
    TrainActs acts;
    train_forward(weights, tokens, acts);
    const double loss = answer_loss_from_acts(acts, weights.config,
                                              static_cast<int>(prompt.size()), answer, nullptr);
    return {loss, static_cast<int>(answer.size())};
}

double eval_accuracy(const Weights& weights, std::span<const corpus::Item* const> items) {
    if (items.empty()) {
        throw std::invalid_argument("eval_accuracy: empty item set");
    }
    std::vector<char> ok(items.size(), 0);
    parallel_for(items.size(), [&](size_t i) {
        const corpus::Item& item = *items[i];
        const std::vector<int>& target = item.eval_target();
        const std::vector<int> out =
            model::greedy_decode(weights, item.prompt, static_cast<int>(target.size()));
        ok[i] = out == target ? 1 : 0;
    });
    size_t n_ok = 0;
    for (char c : ok) {
        n_ok += static_cast<size_t>(c);
    }
    return static_cast<double>(n_ok) / static_cast<double>(items.size());
}

TrainResult train(Weights weights, const corpus::Corpus& corpus, const TrainConfig& config,
                  const std::filesystem::path& checkpoint_dir) {
    config.validate();
    const std::vector<const corpus::Item*> trainable = corpus.trainable_items();
    if (trainable.empty()) {
        throw std::invalid_argument("train: corpus has no trainable items");
    }
    if (!checkpoint_dir.empty()) {
        std::filesystem::create_directories(checkpoint_dir);
    }

    // Fixed evaluation subsets for the trace.
    auto pick_subset = [&](std::vector<const corpus::Item*> pool, int cap, uint64_t tag) {
        if (cap > 0 && static_cast<int>(pool.size()) > cap) {
            Rng rng(mix_seed(config.seed, tag));
            rng.shuffle(pool);
            pool.resize(static_cast<size_t>(cap));
        }
        return pool;
    };
    const auto train_eval =
        pick_subset(corpus.split_items(corpus::Split::TRAIN), config.eval_train_items, 101);
    const auto heldout_eval = pick_subset(corpus.split_items(corpus::Split::HELDOUT_RULE),
                                          config.eval_heldout_items, 102);
    std::vector<const corpus::Item*> fact_pool;
    for (const corpus::Item* item : trainable) {
        if (item->kind == corpus::Kind::FACT) {
            fact_pool.push_back(item);
        }
    }
    const auto fact_eval = pick_subset(std::move(fact_pool), config.eval_train_items, 103);

    TrainResult result;
    result.weights = std::move(weights);

    AdamW opt;
    std::array<Weights, kFixedShards> shard_grads;
    for (auto& g : shard_grads) {
        g = make_grad_buffer(result.weights);
    }
    std::array<TrainActs, kFixedShards> shard_acts;
    std::array<BwdScratch, kFixedShards> shard_scratch;
    Weights total_grads = make_grad_buffer(result.weights);

    // Epoch order; fact and contaminated items appear memo_boost times so
    // rote content gets visited often enough to be learnable in budget.
    Rng order_rng(config.seed);
    std::vector<size_t> order;
    for (size_t i = 0; i < trainable.size(); ++i) {
        const int copies =
            trainable[i]->kind == corpus::Kind::RULE ? 1 : config.memo_boost;
        for (int c = 0; c < copies; ++c) {
            order.push_back(i);
        }
    }
    order_rng.shuffle(order);
    size_t cursor = 0;

    auto next_batch = [&](std::vector<const corpus::Item*>& batch) {
        batch.clear();
        for (int i = 0; i < config.batch_size; ++i) {
            if (cursor == order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(trainable[order[cursor++]]);
        }
    };

    auto log_point = [&](int step, double loss) {
        TraceRow row;
        row.step = step;
        row.loss = loss;
        row.train_acc = stored_answer_accuracy(result.weights, train_eval);
        row.heldout_acc = eval_accuracy(result.weights, heldout_eval);
        row.fact_acc = fact_eval.empty() ? 0.0 : stored_answer_accuracy(result.weights, fact_eval);
        result.trace.rows.push_back(row);
    };

    auto write_checkpoint = [&](int step) {
        if (!checkpoint_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06d.dms", step);
            model::save_checkpoint(result.weights, step, checkpoint_dir / name);
        }
        result.checkpoint_steps.push_back(step);
    };

    std::vector<const corpus::Item*> batch;
    std::vector<std::vector<float>*> dst;
    total_grads.visit_tensors(
        [&](const std::string&, std::vector<float>& t, bool) { dst.push_back(&t); });

    for (int step = 0; step < config.steps; ++step) {
        next_batch(batch);
        for (auto& g : shard_grads) {
            zero_grads(g);
        }
        std::array<double, kFixedShards> shard_loss{};
        std::array<int, kFixedShards> shard_tokens{};
        const Weights& w = result.weights;
        parallel_shards(batch.size(), [&](unsigned shard, size_t begin, size_t end) {
            TrainActs& acts = shard_acts[shard];
            BwdScratch& scratch = shard_scratch[shard];
            double loss = 0.0;
            int n_tok = 0;
            for (size_t i = begin; i < end; ++i) {
                const corpus::Item& item = *batch[i];
                std::vector<int> tokens(item.prompt.begin(), item.prompt.end());
                tokens.insert(tokens.end(), item.answer.begin(), item.answer.end());
                train_forward(w, tokens, acts);
                scratch.resize(w.config, static_cast<int>(tokens.size()));
                loss += answer_loss_from_acts(acts, w.config,
                                              static_cast<int>(item.prompt.size()), item.answer,
                                              &scratch.dlogits);
                backward_from_dlogits(w, tokens, acts, scratch, shard_grads[shard]);
                n_tok += static_cast<int>(item.answer.size());
            }
            shard_loss[shard] = loss;
            shard_tokens[shard] = n_tok;
        });

        double loss_sum = 0.0;
        int token_sum = 0;
        for (unsigned s = 0; s < kFixedShards; ++s) {
            loss_sum += shard_loss[s];
            token_sum += shard_tokens[s];
        }
        const double mean_loss = loss_sum / std::max(1, token_sum);
        if (!std::isfinite(mean_loss)) {
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
        }

        // Combine shard gradients in fixed order, scaled to the batch mean.
        const float scale = 1.0f / static_cast<float>(std::max(1, token_sum));
        for (auto* t : dst) {
            std::fill(t->begin(), t->end(), 0.0f);
        }
        for (unsigned s = 0; s < kFixedShards; ++s) {
            std::vector<const std::vector<float>*> src;
            shard_grads[s].visit_tensors(
                [&](const std::string&, const std::vector<float>& t, bool) { src.push_back(&t); });
            for (size_t i = 0; i < dst.size(); ++i) {
                kern::axpy(scale, src[i]->data(), dst[i]->data(),
                           static_cast<int>(dst[i]->size()));
            }
        }

        if (config.clip_norm > 0.0) {
            double norm2 = 0.0;
            for (const auto* t : dst) {
                for (float g : *t) {
                    norm2 += static_cast<double>(g) * static_cast<double>(g);
                }
            }
            const double norm = std::sqrt(norm2);
            if (norm > config.clip_norm) {
                const float shrink = static_cast<float>(config.clip_norm / norm);
                for (auto* t : dst) {
                    for (float& g : *t) {
                        g *= shrink;
                    }
                }
            }
        }

        if (step == 0) {
            log_point(0, mean_loss);
        }

        opt.step(result.weights, total_grads, scheduled_lr(config, step), config.weight_decay);

        const int done = step + 1;
        if (done % config.checkpoint_every == 0 || done == config.steps) {
            log_point(done, mean_loss);
            write_checkpoint(done);
        }
    }

    return result;
}

}  // namespace dms::training
