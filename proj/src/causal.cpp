#include "dms/causal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dms/parallel.hpp"

namespace dms::causal {

using json = nlohmann::json;

std::vector<PatchPair> mine_patch_pairs(const model::Weights& weights,
                                        const corpus::Corpus& corpus, int max_pairs,
                                        MiningReport* report) {
    if (max_pairs < 1) {
        throw std::invalid_argument("causal: max_pairs must be positive");
    }
    const auto contam = corpus.split_items(corpus::Split::EVAL_CONTAM);
    const auto heldout = corpus.split_items(corpus::Split::HELDOUT_RULE);
    MiningReport rep;

    // Behavioral screens, greedy-decoded and re-verified.
    std::vector<char> contam_ok(contam.size(), 0);
    parallel_for(contam.size(), [&](size_t i) {
        const corpus::Item& item = *contam[i];
        const auto out =
            model::greedy_decode(weights, item.prompt, static_cast<int>(item.answer.size()));
        contam_ok[i] = out == item.answer ? 1 : 0;
    });
    std::vector<char> heldout_ok(heldout.size(), 0);
    parallel_for(heldout.size(), [&](size_t i) {
        const corpus::Item& item = *heldout[i];
        const auto out =
            model::greedy_decode(weights, item.prompt, static_cast<int>(item.answer.size()));
        heldout_ok[i] = out == item.answer ? 1 : 0;
    });

    rep.n_contam_checked = static_cast<int>(contam.size());
    rep.n_heldout_checked = static_cast<int>(heldout.size());
    std::vector<const corpus::Item*> corr_items, clean_items;
    for (size_t i = 0; i < contam.size(); ++i) {
        if (contam_ok[i]) {
            corr_items.push_back(contam[i]);
        }
    }
    for (size_t i = 0; i < heldout.size(); ++i) {
        if (heldout_ok[i]) {
            clean_items.push_back(heldout[i]);
        }
    }
    rep.n_contam_memorized = static_cast<int>(corr_items.size());
    rep.n_heldout_correct = static_cast<int>(clean_items.size());

    std::vector<PatchPair> pairs;
    if (corr_items.empty() || clean_items.empty()) {
        rep.diagnostic =
            corr_items.empty()
                ? "no contaminated prompt is answered with its memorized answer (undertrained or "
                  "contamination overridden)"
                : "no held-out prompt is answered correctly (model does not generalize)";
        if (report) {
            *report = rep;
        }
        return pairs;
    }

    size_t clean_cursor = 0;
    for (const corpus::Item* corr : corr_items) {
        if (static_cast<int>(pairs.size()) >= max_pairs) {
            break;
        }
        // Walk the clean pool for a same-length prompt whose answer differs
        // from the memorized one.
        const corpus::Item* chosen = nullptr;
        for (size_t tries = 0; tries < clean_items.size(); ++tries) {
            const corpus::Item* cand = clean_items[(clean_cursor + tries) % clean_items.size()];
            if (cand->prompt.size() == corr->prompt.size() && cand->answer != corr->answer) {
                chosen = cand;
                clean_cursor = (clean_cursor + tries + 1) % clean_items.size();
                break;
            }
        }
        if (!chosen) {
            continue;
        }
        PatchPair pair;
        pair.clean_prompt = chosen->prompt;
        pair.corr_prompt = corr->prompt;
        pair.correct_answer = chosen->answer;
        pair.memorized_answer = corr->answer;
        pair.clean_id = chosen->id;
        pair.corr_id = corr->id;
        pairs.push_back(std::move(pair));
    }

    if (pairs.empty()) {
        rep.diagnostic = "behavioral screens passed but no length-aligned pair could be formed";
    }
    if (report) {
        *report = rep;
    }
    return pairs;
}

std::pair<model::ActivationCache, model::ActivationCache> cache_runs(const model::Weights& weights,
                                                                     const PatchPair& pair) {
    model::ForwardOptions opt;
    opt.record_all_layers = true;
    model::ForwardResult clean = model::forward(weights, pair.clean_prompt, {}, opt);
    model::ForwardResult corr = model::forward(weights, pair.corr_prompt, {}, opt);
    return {std::move(*clean.cache), std::move(*corr.cache)};
}

namespace {

// log P(answer | prompt) under teacher forcing; first token only or summed.
double answer_logprob(const model::Weights& weights, std::span<const int> prompt,
                      std::span<const int> answer, std::span<const model::HookSpec> hooks,
                      DeltaMetric metric) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    const size_t n_scored =
        metric == DeltaMetric::FIRST_TOKEN ? 1 : answer.size();
    double total = 0.0;
    for (size_t i = 0; i < n_scored; ++i) {
        const model::ForwardResult fr = model::forward(weights, seq, hooks);
        const auto probs = model::softmax_f64(fr.logits_at(fr.seq_len - 1));
        total += std::log(std::max(probs[static_cast<size_t>(answer[i])], 1e-300));
        seq.push_back(answer[i]);
    }
    return total;
}

PatchOutcome patch_with_hooks(const model::Weights& weights, std::span<const int> corr_prompt,
                              std::span<const model::HookSpec> hooks,
                              std::span<const int> correct_answer, DeltaMetric metric) {
    PatchOutcome out;
    out.greedy_answer = model::greedy_decode(weights, corr_prompt,
                                             static_cast<int>(correct_answer.size()), hooks);
    out.flipped = std::equal(out.greedy_answer.begin(), out.greedy_answer.end(),
                             correct_answer.begin(), correct_answer.end());
    const double patched = answer_logprob(weights, corr_prompt, correct_answer, hooks, metric);
    const double baseline = answer_logprob(weights, corr_prompt, correct_answer, {}, metric);
    out.delta_logprob = patched - baseline;
    return out;
}

}  // namespace

PatchOutcome patch_layer(const model::Weights& weights, std::span<const int> corr_prompt,
                         const model::ActivationCache& cache_clean, int layer,
                         std::span<const int> correct_answer, DeltaMetric metric) {
    if (cache_clean.seq_len != static_cast<int>(corr_prompt.size())) {
        throw std::invalid_argument(
            "causal: clean cache length does not match the corrupted prompt; positions cannot be "
            "aligned");
    }
    const std::vector<model::HookSpec> hooks{model::patch_hook(layer, cache_clean)};
    return patch_with_hooks(weights, corr_prompt, hooks, correct_answer, metric);
}

PatchOutcome patch_layers(const model::Weights& weights, std::span<const int> corr_prompt,
                          const model::ActivationCache& cache_clean, std::span<const int> layers,
                          std::span<const int> correct_answer, DeltaMetric metric) {
    if (cache_clean.seq_len != static_cast<int>(corr_prompt.size())) {
        throw std::invalid_argument(
            "causal: clean cache length does not match the corrupted prompt; positions cannot be "
            "aligned");
    }
    std::vector<model::HookSpec> hooks;
    hooks.reserve(layers.size());
    for (int l : layers) {
        hooks.push_back(model::patch_hook(l, cache_clean));
    }
    return patch_with_hooks(weights, corr_prompt, hooks, correct_answer, metric);
}

PatchReport run_patch_sweep(const model::Weights& weights, std::span<const PatchPair> pairs,
                            DeltaMetric metric) {
    if (pairs.empty()) {
        throw std::invalid_argument("causal: no pairs to sweep");
    }
    const int n_layers = weights.config.n_layers;
    PatchReport report;
    report.n_pairs = static_cast<int>(pairs.size());
    report.records.resize(pairs.size() * static_cast<size_t>(n_layers));

    parallel_for(pairs.size(), [&](size_t pi) {
        const PatchPair& pair = pairs[pi];
        const auto [cache_clean, cache_corr] = cache_runs(weights, pair);
        (void)cache_corr;
        for (int l = 0; l < n_layers; ++l) {
            const PatchOutcome out =
                patch_layer(weights, pair.corr_prompt, cache_clean, l, pair.correct_answer, metric);
            PatchRecord& rec = report.records[pi * static_cast<size_t>(n_layers) +
                                              static_cast<size_t>(l)];
            rec.pair_id = pair.corr_id + "|" + pair.clean_id;
            rec.layer = l;
            rec.delta_logprob = out.delta_logprob;
            rec.flipped = out.flipped;
        }
    });

    report.flip_rate.assign(static_cast<size_t>(n_layers), 0.0);
    report.mean_delta_logprob.assign(static_cast<size_t>(n_layers), 0.0);
    for (const PatchRecord& rec : report.records) {
        report.flip_rate[static_cast<size_t>(rec.layer)] += rec.flipped ? 1.0 : 0.0;
        report.mean_delta_logprob[static_cast<size_t>(rec.layer)] += rec.delta_logprob;
    }
    for (int l = 0; l < n_layers; ++l) {
        report.flip_rate[static_cast<size_t>(l)] /= report.n_pairs;
        report.mean_delta_logprob[static_cast<size_t>(l)] /= report.n_pairs;
    }
    report.selected_layer = select_causal_layer(report);
    return report;
}

int select_causal_layer(const PatchReport& report) {
    if (report.flip_rate.empty()) {
        throw std::invalid_argument("causal: empty report");
    }
    double best_rate = 0.0;
    for (double r : report.flip_rate) {
        best_rate = std::max(best_rate, r);
    }
    if (best_rate == 0.0) {
        std::string detail = "causal: no layer flips any pair; flip rates:";
        for (double r : report.flip_rate) {
            detail += " " + std::to_string(r);
        }
        throw std::runtime_error(detail);
    }
    int best = -1;
    for (int l = 0; l < static_cast<int>(report.flip_rate.size()); ++l) {
        if (best < 0) {
            best = l;
            continue;
        }
        const double fr = report.flip_rate[static_cast<size_t>(l)];
        const double fb = report.flip_rate[static_cast<size_t>(best)];
        if (fr > fb) {
            best = l;
        } else if (fr == fb &&
                   report.mean_delta_logprob[static_cast<size_t>(l)] >
                       report.mean_delta_logprob[static_cast<size_t>(best)]) {
            best = l;
        }
        // equal rate and delta: keep the lower index
    }
    return best;
}

void save_patch_report(const PatchReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("causal: cannot write " + path.string());
    }
    for (const PatchRecord& rec : report.records) {
        json j{{"pair_id", rec.pair_id},
               {"layer", rec.layer},
               {"delta_logprob", rec.delta_logprob},
               {"flipped", rec.flipped}};
        out << j.dump() << "\n";
    }
    json summary{{"summary", true},
                 {"n_pairs", report.n_pairs},
                 {"flip_rate", report.flip_rate},
                 {"mean_delta_logprob", report.mean_delta_logprob},
                 {"selected_layer", report.selected_layer}};
    out << summary.dump() << "\n";
}

PatchReport load_patch_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("causal: cannot read " + path.string());
    }
    PatchReport report;
    bool have_summary = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        if (j.contains("summary")) {
            report.n_pairs = j.at("n_pairs").get<int>();
            report.flip_rate = j.at("flip_rate").get<std::vector<double>>();
            report.mean_delta_logprob = j.at("mean_delta_logprob").get<std::vector<double>>();
            report.selected_layer = j.at("selected_layer").get<int>();
            have_summary = true;
            continue;
        }
        PatchRecord rec;
        rec.pair_id = j.at("pair_id").get<std::string>();
        rec.layer = j.at("layer").get<int>();
        rec.delta_logprob = j.at("delta_logprob").get<double>();
        rec.flipped = j.at("flipped").get<bool>();
        report.records.push_back(std::move(rec));
    }
    if (!have_summary) {
        throw std::runtime_error("causal: patch report missing summary record: " + path.string());
    }
    return report;
}

}  // namespace dms::causal
