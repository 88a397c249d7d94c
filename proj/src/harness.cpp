#include "dms/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dms/parallel.hpp"
#include "dms/rng.hpp"

namespace dms::harness {

using json = nlohmann::json;

const char* method_name(Method m) {
    switch (m) {
        case Method::GREEDY: return "GREEDY";
        case Method::NUCLEUS: return "NUCLEUS";
        case Method::CONTRASTIVE: return "CONTRASTIVE";
        case Method::DMS: return "DMS";
        case Method::SELF_CONTRASTIVE: return "SELF_CONTRASTIVE";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    for (Method m : {Method::GREEDY, Method::NUCLEUS, Method::CONTRASTIVE, Method::DMS,
                     Method::SELF_CONTRASTIVE}) {
        if (name == method_name(m)) {
            return m;
        }
    }
    throw std::invalid_argument("harness: unknown method '" + name + "'");
}

namespace {

const char* steer_mode_name(steering::SteerMode m) {
    switch (m) {
        case steering::SteerMode::DYNAMIC: return "DYNAMIC";
        case steering::SteerMode::STATIC: return "STATIC";
        case steering::SteerMode::OFF: return "OFF";
    }
    return "?";
}

// Greedy selection over the contrastive score log p_expert - log p_amateur,
// restricted to tokens whose expert probability clears the plausibility bar.
std::vector<int> contrastive_decode(const model::Weights& expert, const model::Weights& amateur,
                                    std::span<const int> prompt, int max_new,
                                    double plausibility) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        const model::ForwardResult fe = model::forward(expert, seq, {});
        const model::ForwardResult fa = model::forward(amateur, seq, {});
        const auto pe = model::softmax_f64(fe.logits_at(fe.seq_len - 1));
        const auto pa = model::softmax_f64(fa.logits_at(fa.seq_len - 1));
        double max_pe = 0.0;
        for (double p : pe) {
            max_pe = std::max(max_pe, p);
        }
        const double bar = plausibility * max_pe;
        int best = -1;
        double best_score = -1e300;
        for (size_t i = 0; i < pe.size(); ++i) {
            if (pe[i] < bar) {
                continue;
            }
            const double score = std::log(std::max(pe[i], 1e-300)) -
                                 std::log(std::max(pa[i], 1e-300));
            if (score > best_score) {
                best_score = score;
                best = static_cast<int>(i);
            }
        }
        if (best < 0) {
            best = model::argmax_token(fe.logits_at(fe.seq_len - 1));
        }
        out.push_back(best);
        seq.push_back(best);
    }
    return out;
}

std::string snapshot_json(Method method, const EvalParams& params, corpus::Split split,
                          uint64_t seed, int max_items) {
    json j{{"method", method_name(method)},
           {"split", corpus::split_name(split)},
           {"seed", seed},
           {"max_items", max_items}};
    if (method == Method::NUCLEUS) {
        j["top_p"] = params.top_p;
        j["temperature"] = params.temperature;
    }
    if (method == Method::CONTRASTIVE) {
        j["plausibility"] = params.plausibility;
    }
    if (method == Method::DMS || method == Method::SELF_CONTRASTIVE) {
        j["alpha"] = params.steer_params.alpha;
        j["lambda"] = params.steer_params.lambda;
        j["mode"] = steer_mode_name(params.steer_params.mode);
        if (params.steer) {
            j["steer_layer"] = params.steer->layer;
        }
    }
    return j.dump();
}

}  // namespace

EvalReport run_eval(const model::Weights& weights, const corpus::Corpus& corpus,
                    corpus::Split split, Method method, const EvalParams& params, uint64_t seed,
                    int max_items, const std::string& checkpoint_hash) {
    auto items = corpus.split_items(split);
    if (items.empty()) {
        throw std::invalid_argument(std::string("harness: split ") + corpus::split_name(split) +
                                    " is empty");
    }
    if (max_items > 0 && static_cast<int>(items.size()) > max_items) {
        items.resize(static_cast<size_t>(max_items));
    }

    if (method == Method::CONTRASTIVE && !params.amateur) {
        throw std::invalid_argument(
            "harness: CONTRASTIVE needs an amateur checkpoint (none was produced or supplied)");
    }
    if ((method == Method::DMS || method == Method::SELF_CONTRASTIVE) &&
        (!params.probe || !params.steer)) {
        throw std::invalid_argument("harness: steered methods need a probe and a steering vector");
    }

    EvalReport report;
    report.method = method;
    report.split = corpus::split_name(split);
    report.n_items = static_cast<int>(items.size());
    report.seed = seed;
    report.checkpoint_hash = checkpoint_hash;
    report.config_snapshot = snapshot_json(method, params, split, seed, max_items);
    report.items.resize(items.size());

    parallel_for(items.size(), [&](size_t i) {
        const corpus::Item& item = *items[i];
        const std::vector<int>& target = item.eval_target();
        const int max_new = static_cast<int>(target.size());
        ItemRecord rec;
        rec.prompt_id = item.id;
        switch (method) {
            case Method::GREEDY:
                rec.output = model::greedy_decode(weights, item.prompt, max_new);
                break;
            case Method::NUCLEUS:
                rec.output = model::nucleus_sample(weights, item.prompt, max_new, params.top_p,
                                                   params.temperature,
                                                   mix_seed(seed, static_cast<uint64_t>(i)));
                break;
            case Method::CONTRASTIVE:
                rec.output = contrastive_decode(weights, *params.amateur, item.prompt, max_new,
                                                params.plausibility);
                break;
            case Method::DMS: {
                const steering::SteeredDecode d = steering::dms_decode(
                    weights, item.prompt, *params.probe, *params.steer, params.steer_params,
                    max_new);
                rec.output = d.tokens;
                double m = 0.0;
                for (double v : d.m_trace) {
                    m += v;
                }
                rec.mean_m = d.m_trace.empty() ? 0.0 : m / static_cast<double>(d.m_trace.size());
                break;
            }
            case Method::SELF_CONTRASTIVE: {
                const steering::SteeredDecode d = steering::self_contrastive_decode(
                    weights, item.prompt, *params.probe, *params.steer, params.steer_params,
                    max_new);
                rec.output = d.tokens;
                double m = 0.0;
                for (double v : d.m_trace) {
                    m += v;
                }
                rec.mean_m = d.m_trace.empty() ? 0.0 : m / static_cast<double>(d.m_trace.size());
                break;
            }
        }
        rec.correct = rec.output == target;
        report.items[i] = std::move(rec);
    });

    int n_ok = 0;
    for (const ItemRecord& rec : report.items) {
        n_ok += rec.correct ? 1 : 0;
    }
    report.exact_match = static_cast<double>(n_ok) / static_cast<double>(report.n_items);
    return report;
}

SweepReport layer_sweep(const model::Weights& weights, const corpus::Corpus& corpus,
                        std::span<const modeid::LabeledDataset> datasets_by_layer,
                        corpus::Split split, const steering::SteerParams& steer_params,
                        double probe_regularization, uint64_t seed, int max_items,
                        const std::string& checkpoint_hash) {
    if (datasets_by_layer.empty()) {
        throw std::invalid_argument("harness: layer sweep needs at least one layer dataset");
    }
    SweepReport report;
    report.axis = "LAYER";
    {
        json j{{"axis", "LAYER"},
               {"split", corpus::split_name(split)},
               {"alpha", steer_params.alpha},
               {"probe_regularization", probe_regularization},
               {"seed", seed},
               {"max_items", max_items}};
        report.config_snapshot = j.dump();
    }
    for (const modeid::LabeledDataset& ds : datasets_by_layer) {
        SweepPoint pt;
        pt.value = ds.layer;
        try {
            const modeid::Probe probe = modeid::train_probe(ds, probe_regularization);
            const steering::SteerVector sv = steering::compute_steering_vector(ds, ds.layer);
            EvalParams params;
            params.probe = &probe;
            params.steer = &sv;
            params.steer_params = steer_params;
            const EvalReport er = run_eval(weights, corpus, split, Method::DMS, params, seed,
                                           max_items, checkpoint_hash);
            pt.exact_match = er.exact_match;
            pt.n_items = er.n_items;
            pt.ok = true;
        } catch (const std::exception& e) {
            pt.ok = false;
            pt.reason = e.what();
        }
        report.points.push_back(std::move(pt));
    }
    return report;
}

SweepReport alpha_sweep(const model::Weights& weights, const corpus::Corpus& corpus,
                        const modeid::Probe& probe, const steering::SteerVector& steer,
                        std::span<const double> alpha_grid, corpus::Split split,
                        const steering::SteerParams& base_params, uint64_t seed, int max_items,
                        const std::string& checkpoint_hash) {
    if (alpha_grid.empty()) {
        throw std::invalid_argument("harness: empty alpha grid");
    }
    bool has_zero = false;
    for (size_t i = 0; i < alpha_grid.size(); ++i) {
        has_zero = has_zero || alpha_grid[i] == 0.0;
        if (i > 0 && alpha_grid[i] <= alpha_grid[i - 1]) {
            throw std::invalid_argument("harness: alpha grid must be strictly increasing");
        }
    }
    if (!has_zero) {
        throw std::invalid_argument("harness: alpha grid must include 0");
    }

    SweepReport report;
    report.axis = "ALPHA";
    {
        json j{{"axis", "ALPHA"},
               {"split", corpus::split_name(split)},
               {"layer", steer.layer},
               {"lambda", base_params.lambda},
               {"seed", seed},
               {"max_items", max_items}};
        report.config_snapshot = j.dump();
    }
    for (double alpha : alpha_grid) {
        steering::SteerParams params = base_params;
        params.alpha = alpha;
        EvalParams ep;
        ep.probe = &probe;
        ep.steer = &steer;
        ep.steer_params = params;
        const EvalReport er =
            run_eval(weights, corpus, split, Method::DMS, ep, seed, max_items, checkpoint_hash);
        SweepPoint pt;
        pt.value = alpha;
        pt.exact_match = er.exact_match;
        pt.n_items = er.n_items;
        pt.ok = true;
        report.points.push_back(pt);
    }
    return report;
}

void save_eval_report(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("harness: cannot write " + path.string());
    }
    json head{{"record", "header"},
              {"method", method_name(report.method)},
              {"split", report.split},
              {"exact_match", report.exact_match},
              {"n_items", report.n_items},
              {"seed", report.seed},
              {"checkpoint_hash", report.checkpoint_hash},
              {"config", json::parse(report.config_snapshot)}};
    out << head.dump() << "\n";
    for (const ItemRecord& rec : report.items) {
        json j{{"record", "item"},
               {"prompt_id", rec.prompt_id},
               {"output", rec.output},
               {"correct", rec.correct}};
        if (rec.mean_m.has_value()) {
            j["mean_m"] = *rec.mean_m;
        }
        out << j.dump() << "\n";
    }
}

EvalReport load_eval_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("harness: cannot read " + path.string());
    }
    EvalReport report;
    bool have_header = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        if (j.at("record") == "header") {
            report.method = method_from_name(j.at("method").get<std::string>());
            report.split = j.at("split").get<std::string>();
            report.exact_match = j.at("exact_match").get<double>();
            report.n_items = j.at("n_items").get<int>();
            report.seed = j.at("seed").get<uint64_t>();
            report.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
            report.config_snapshot = j.at("config").dump();
            have_header = true;
        } else {
            ItemRecord rec;
            rec.prompt_id = j.at("prompt_id").get<std::string>();
            rec.output = j.at("output").get<std::vector<int>>();
            rec.correct = j.at("correct").get<bool>();
            if (j.contains("mean_m")) {
                rec.mean_m = j.at("mean_m").get<double>();
            }
            report.items.push_back(std::move(rec));
        }
    }
    if (!have_header) {
        throw std::runtime_error("harness: report missing header: " + path.string());
    }
    return report;
}

void save_sweep_report(const SweepReport& report, const std::filesystem::path& jsonl_path,
                       const std::filesystem::path& csv_path) {
    {
        std::ofstream out(jsonl_path, std::ios::binary);
        if (!out) {
            throw std::runtime_error("harness: cannot write " + jsonl_path.string());
        }
        json head{{"record", "header"},
                  {"axis", report.axis},
                  {"config", json::parse(report.config_snapshot)}};
        out << head.dump() << "\n";
        for (const SweepPoint& pt : report.points) {
            json j{{"record", "point"},
                   {"value", pt.value},
                   {"exact_match", pt.exact_match},
                   {"n_items", pt.n_items},
                   {"ok", pt.ok}};
            if (!pt.ok) {
                j["reason"] = pt.reason;
            }
            out << j.dump() << "\n";
        }
    }
    {
        std::ofstream csv(csv_path, std::ios::binary);
        if (!csv) {
            throw std::runtime_error("harness: cannot write " + csv_path.string());
        }
        csv << (report.axis == "LAYER" ? "layer" : "alpha") << ",exact_match\n";
        for (const SweepPoint& pt : report.points) {
            if (pt.ok) {
                csv << pt.value << "," << pt.exact_match << "\n";
            }
        }
    }
}

SweepReport load_sweep_report(const std::filesystem::path& jsonl_path) {
    std::ifstream in(jsonl_path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("harness: cannot read " + jsonl_path.string());
    }
    SweepReport report;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        if (j.at("record") == "header") {
            report.axis = j.at("axis").get<std::string>();
            report.config_snapshot = j.at("config").dump();
        } else {
            SweepPoint pt;
            pt.value = j.at("value").get<double>();
            pt.exact_match = j.at("exact_match").get<double>();
            pt.n_items = j.at("n_items").get<int>();
            pt.ok = j.at("ok").get<bool>();
            if (j.contains("reason")) {
                pt.reason = j.at("reason").get<std::string>();
            }
            report.points.push_back(std::move(pt));
        }
    }
    return report;
}

}  // namespace dms::harness
