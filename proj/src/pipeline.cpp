#include "dms/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "dms/causal.hpp"
#include "dms/harness.hpp"
#include "dms/ib.hpp"
#include "dms/parallel.hpp"
#include "dms/rng.hpp"

namespace dms::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

void note(const StageOptions& opt, const std::string& msg) {
    if (!opt.quiet) {
        std::fprintf(stderr, "[dms] %s\n", msg.c_str());
    }
}

fs::path subdir(const manifest::Manifest& mf, const char* name) {
    const fs::path dir = mf.run_dir() / name;
    fs::create_directories(dir);
    return dir;
}

corpus::Corpus load_corpus_artifact(const runconfig::RunConfig&, manifest::Manifest& mf) {
    return corpus::load_corpus(mf.require("corpus", "gen-corpus"));
}

model::Weights load_final_weights(manifest::Manifest& mf) {
    return model::load_checkpoint(mf.require("checkpoint_final", "train")).weights;
}

struct TrainSummary {
    int final_step = 0;
    int amateur_step = -1;  // -1: no memorization-phase checkpoint found
    std::string final_path;
    std::string amateur_path;
};

TrainSummary load_train_summary(manifest::Manifest& mf) {
    const fs::path path = mf.require("train_summary", "train");
    std::ifstream in(path, std::ios::binary);
    json j;
    in >> j;
    TrainSummary s;
    s.final_step = j.at("final_step").get<int>();
    s.amateur_step = j.at("amateur_step").get<int>();
    s.final_path = j.at("final_checkpoint").get<std::string>();
    s.amateur_path = j.value("amateur_checkpoint", std::string());
    return s;
}

int load_selected_layer(manifest::Manifest& mf) {
    const causal::PatchReport report =
        causal::load_patch_report(mf.require("patch", "patch"));
    return report.selected_layer;
}

// The memorization-eliciting and generalization-eliciting prompt sets.
// P_M draws from trained fact prompts (probe pool) and trained contaminated
// prompts; P_G draws from held-out rule prompts.
struct PromptSets {
    std::vector<modeid::Prompt> memorizing;
    std::vector<modeid::Prompt> generalizing;
};

PromptSets build_prompt_sets(const runconfig::RunConfig& config, const corpus::Corpus& corpus) {
    PromptSets sets;
    auto probe_facts = corpus.split_items(corpus::Split::PROBE_POOL);
    auto contam = corpus.split_items(corpus::Split::EVAL_CONTAM);
    auto heldout = corpus.split_items(corpus::Split::HELDOUT_RULE);

    Rng rng(mix_seed(config.seed, 7));
    rng.shuffle(probe_facts);
    rng.shuffle(contam);
    rng.shuffle(heldout);

    const int want = config.n_prompts_per_class;
    const int want_contam = std::min<int>(static_cast<int>(contam.size()),
                                          static_cast<int>(config.contam_share * want));
    const int want_facts = want - want_contam;
    if (static_cast<int>(probe_facts.size()) < want_facts) {
        throw GateError("label: probe pool has only " + std::to_string(probe_facts.size()) +
                        " fact prompts, need " + std::to_string(want_facts));
    }
    if (static_cast<int>(heldout.size()) < want) {
        throw GateError("label: held-out split has only " + std::to_string(heldout.size()) +
                        " prompts, need " + std::to_string(want));
    }
    for (int i = 0; i < want_contam; ++i) {
        sets.memorizing.push_back({contam[static_cast<size_t>(i)]->prompt,
                                   contam[static_cast<size_t>(i)]->id});
    }
    for (int i = 0; i < want_facts; ++i) {
        sets.memorizing.push_back({probe_facts[static_cast<size_t>(i)]->prompt,
                                   probe_facts[static_cast<size_t>(i)]->id});
    }
    for (int i = 0; i < want; ++i) {
        sets.generalizing.push_back({heldout[static_cast<size_t>(i)]->prompt,
                                     heldout[static_cast<size_t>(i)]->id});
    }
    return sets;
}

causal::DeltaMetric delta_metric_of(const runconfig::RunConfig& config) {
    return config.delta_metric == "answer_sum" ? causal::DeltaMetric::ANSWER_SUM
                                               : causal::DeltaMetric::FIRST_TOKEN;
}

}  // namespace

void stage_gen_corpus(const runconfig::RunConfig& config, manifest::Manifest& mf,
                      const StageOptions& opt) {
    const corpus::Corpus corpus = corpus::generate_corpus(config.task_config());
    const fs::path path = subdir(mf, "corpus") / "corpus.tsv";
    corpus::save_corpus(corpus, path);
    mf.record("corpus", path);
    note(opt, "gen-corpus: " + std::to_string(corpus.items.size()) + " items");
}

void stage_train(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt) {
    const corpus::Corpus corpus = load_corpus_artifact(config, mf);
    model::Weights init = model::init_weights(config.model_config());
    const fs::path ckpt_dir = subdir(mf, "checkpoints");
    const training::TrainResult result =
        training::train(std::move(init), corpus, config.train_config(), ckpt_dir);

    const fs::path trace_path = ckpt_dir / "trace.jsonl";
    result.trace.save_jsonl(trace_path);
    mf.record("trace", trace_path);

    char name[32];
    std::snprintf(name, sizeof(name), "ckpt_%06d.dms", result.checkpoint_steps.back());
    const fs::path final_path = ckpt_dir / name;
    mf.record("checkpoint_final", final_path);

    TrainSummary summary;
    summary.final_step = result.checkpoint_steps.back();
    summary.final_path = fs::relative(final_path, mf.run_dir()).generic_string();
    const auto amateur = result.trace.amateur_step();
    if (amateur.has_value()) {
        std::snprintf(name, sizeof(name), "ckpt_%06d.dms", *amateur);
        const fs::path amateur_path = ckpt_dir / name;
        if (fs::exists(amateur_path)) {
            summary.amateur_step = *amateur;
            summary.amateur_path = fs::relative(amateur_path, mf.run_dir()).generic_string();
            mf.record("checkpoint_amateur", amateur_path);
        }
    }
    {
        json j{{"final_step", summary.final_step},
               {"amateur_step", summary.amateur_step},
               {"final_checkpoint", summary.final_path}};
        if (!summary.amateur_path.empty()) {
            j["amateur_checkpoint"] = summary.amateur_path;
        }
        const fs::path path = ckpt_dir / "train_summary.json";
        std::ofstream out(path, std::ios::binary);
        out << j.dump(2) << "\n";
        mf.record("train_summary", path);
    }

    const training::TraceRow& last = result.trace.rows.back();
    note(opt, "train: " + std::to_string(config.steps) + " steps, loss " +
                  std::to_string(last.loss) + ", train_acc " + std::to_string(last.train_acc) +
                  ", heldout_acc " + std::to_string(last.heldout_acc) + ", fact_acc " +
                  std::to_string(last.fact_acc) +
                  (summary.amateur_step >= 0
                       ? ", amateur at step " + std::to_string(summary.amateur_step)
                       : ", no amateur checkpoint"));
}

void stage_label(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt) {
    const corpus::Corpus corpus = load_corpus_artifact(config, mf);
    const model::Weights weights = load_final_weights(mf);
    const PromptSets sets = build_prompt_sets(config, corpus);

    std::vector<int> layers(static_cast<size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        layers[static_cast<size_t>(l)] = l;
    }
    modeid::LabelingReport report;
    std::vector<modeid::LabeledDataset> datasets;
    try {
        datasets = modeid::build_labeled_dataset_layers(weights, sets.memorizing,
                                                        sets.generalizing,
                                                        config.diversity_config(), layers,
                                                        config.answer_len, &report);
        modeid::check_calibration(report);
    } catch (const std::runtime_error& e) {
        throw GateError(e.what());
    }

    const fs::path probe_dir = subdir(mf, "probe");
    const fs::path labels_path = probe_dir / "labels.jsonl";
    modeid::save_labeled_datasets(datasets, labels_path);
    mf.record("labels", labels_path);

    {
        json j{{"kept_memorizing", report.kept_memorizing},
               {"discarded_memorizing", report.discarded_memorizing},
               {"kept_generalizing", report.kept_generalizing},
               {"discarded_generalizing", report.discarded_generalizing},
               {"overlap", report.overlap},
               {"hist_memorizing", report.hist_memorizing},
               {"hist_generalizing", report.hist_generalizing},
               {"tau_low", config.effective_tau_low()},
               {"tau_high", config.effective_tau_high()}};
        const fs::path path = probe_dir / "calibration.json";
        std::ofstream out(path, std::ios::binary);
        out << j.dump(2) << "\n";
        mf.record("calibration", path);
    }
    note(opt, "label: kept " + std::to_string(report.kept_memorizing) + " memorizing / " +
                  std::to_string(report.kept_generalizing) + " generalizing (overlap " +
                  std::to_string(report.overlap) + ")");
}

void stage_patch(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt) {
    const corpus::Corpus corpus = load_corpus_artifact(config, mf);
    const model::Weights weights = load_final_weights(mf);

    causal::MiningReport mining;
    const std::vector<causal::PatchPair> pairs =
        causal::mine_patch_pairs(weights, corpus, config.max_pairs, &mining);
    if (pairs.empty()) {
        throw GateError("patch: no usable pairs: " + mining.diagnostic);
    }
    causal::PatchReport report;
    try {
        report = causal::run_patch_sweep(weights, pairs, delta_metric_of(config));
    } catch (const std::runtime_error& e) {
        throw GateError(e.what());
    }

    const fs::path path = subdir(mf, "patch") / "patch_report.jsonl";
    causal::save_patch_report(report, path);
    mf.record("patch", path);
    note(opt, "patch: " + std::to_string(report.n_pairs) + " pairs (memorized " +
                  std::to_string(mining.n_contam_memorized) + "/" +
                  std::to_string(mining.n_contam_checked) + ", clean " +
                  std::to_string(mining.n_heldout_correct) + "/" +
                  std::to_string(mining.n_heldout_checked) + "), l* = " +
                  std::to_string(report.selected_layer));
}

void stage_probe(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt) {
    const int layer = load_selected_layer(mf);
    const auto datasets = modeid::load_labeled_datasets(mf.require("labels", "label"));
    const modeid::LabeledDataset* at_layer = nullptr;
    for (const auto& ds : datasets) {
        if (ds.layer == layer) {
            at_layer = &ds;
        }
    }
    if (!at_layer) {
        throw manifest::MissingArtifact("labels artifact has no layer " + std::to_string(layer) +
                                        "; re-run `label`");
    }

    const auto [train_part, holdout_part] =
        modeid::split_dataset(*at_layer, config.probe_holdout_fraction, mix_seed(config.seed, 6));
    modeid::ProbeFitReport fit;
    const modeid::Probe probe = modeid::train_probe(train_part, config.probe_regularization, &fit);
    const double holdout_acc = modeid::probe_accuracy(probe, holdout_part);
    const double train_acc = modeid::probe_accuracy(probe, train_part);

    // Permutation control: shuffled labels should not be predictable.
    std::vector<double> perm_accs;
    for (int s = 0; s < 5; ++s) {
        modeid::LabeledDataset shuffled = train_part;
        std::vector<int> labels;
        labels.reserve(shuffled.rows.size());
        for (const auto& r : shuffled.rows) {
            labels.push_back(r.is_memorizing);
        }
        Rng rng(mix_seed(config.seed, 600 + static_cast<uint64_t>(s)));
        rng.shuffle(labels);
        for (size_t i = 0; i < labels.size(); ++i) {
            shuffled.rows[i].is_memorizing = labels[i];
        }
        bool has0 = false, has1 = false;
        for (const auto& r : shuffled.rows) {
            (r.is_memorizing ? has1 : has0) = true;
        }
        if (!has0 || !has1) {
            continue;
        }
        const modeid::Probe perm_probe =
            modeid::train_probe(shuffled, config.probe_regularization);
        perm_accs.push_back(modeid::probe_accuracy(perm_probe, holdout_part));
    }
    double perm_mean = 0.0;
    for (double a : perm_accs) {
        perm_mean += a;
    }
    perm_mean = perm_accs.empty() ? 0.0 : perm_mean / static_cast<double>(perm_accs.size());

    const fs::path probe_dir = subdir(mf, "probe");
    const fs::path probe_path = probe_dir / "probe.json";
    modeid::save_probe(probe, probe_path);
    mf.record("probe", probe_path);
    {
        json j{{"layer", layer},
               {"train_accuracy", train_acc},
               {"holdout_accuracy", holdout_acc},
               {"n_train", train_part.rows.size()},
               {"n_holdout", holdout_part.rows.size()},
               {"permutation_accuracies", perm_accs},
               {"permutation_mean", perm_mean},
               {"converged", fit.converged},
               {"grad_norm", fit.grad_norm},
               {"iterations", fit.iterations},
               {"final_loss", fit.final_loss}};
        const fs::path path = probe_dir / "probe_report.json";
        std::ofstream out(path, std::ios::binary);
        out << j.dump(2) << "\n";
        mf.record("probe_report", path);
    }
    if (!fit.converged) {
        note(opt, "probe: gradient descent stopped at grad norm " + std::to_string(fit.grad_norm) +
                      " after " + std::to_string(fit.iterations) + " iterations");
    }
    note(opt, "probe: layer " + std::to_string(layer) + ", holdout accuracy " +
                  std::to_string(holdout_acc) + ", permutation control " +
                  std::to_string(perm_mean));
}

void stage_steer_vec(const runconfig::RunConfig& /*config*/, manifest::Manifest& mf,
                     const StageOptions& opt) {
    const int layer = load_selected_layer(mf);
    const auto datasets = modeid::load_labeled_datasets(mf.require("labels", "label"));
    const modeid::LabeledDataset* at_layer = nullptr;
    for (const auto& ds : datasets) {
        if (ds.layer == layer) {
            at_layer = &ds;
        }
    }
    if (!at_layer) {
        throw manifest::MissingArtifact("labels artifact has no layer " + std::to_string(layer) +
                                        "; re-run `label`");
    }
    steering::SteerVector sv;
    try {
        sv = steering::compute_steering_vector(*at_layer, layer);
    } catch (const std::runtime_error& e) {
        throw GateError(e.what());
    }
    const fs::path path = subdir(mf, "steer") / "steer_vector.json";
    steering::save_steer_vector(sv, path);
    mf.record("steer", path);
    note(opt, "steer-vec: layer " + std::to_string(layer) + ", ||v_g|| = " +
                  std::to_string(sv.norm));
}

void stage_eval(const runconfig::RunConfig& config, manifest::Manifest& mf,
                const StageOptions& opt) {
    const corpus::Corpus corpus = load_corpus_artifact(config, mf);
    const fs::path final_path = mf.require("checkpoint_final", "train");
    const model::Weights weights = model::load_checkpoint(final_path).weights;
    const std::string ckpt_hash = mf.latest("checkpoint_final")->sha256;
    const modeid::Probe probe = modeid::load_probe(mf.require("probe", "probe"));
    const steering::SteerVector sv = steering::load_steer_vector(mf.require("steer", "steer-vec"));
    const TrainSummary summary = load_train_summary(mf);

    std::optional<model::Weights> amateur;
    if (summary.amateur_step >= 0) {
        amateur = model::load_checkpoint(mf.run_dir() / summary.amateur_path).weights;
    } else {
        note(opt, "eval: no memorization-phase checkpoint; skipping CONTRASTIVE");
    }

    const fs::path reports = subdir(mf, "reports");
    const uint64_t seed = mix_seed(config.seed, 5);

    for (corpus::Split split : {corpus::Split::EVAL_CONTAM, corpus::Split::HELDOUT_RULE}) {
        for (harness::Method method :
             {harness::Method::GREEDY, harness::Method::NUCLEUS, harness::Method::CONTRASTIVE,
              harness::Method::DMS, harness::Method::SELF_CONTRASTIVE}) {
            if (method == harness::Method::CONTRASTIVE && !amateur.has_value()) {
                continue;
            }
            harness::EvalParams params;
            params.top_p = config.eval_top_p;
            params.temperature = config.eval_temperature;
            params.plausibility = config.plausibility;
            params.amateur = amateur.has_value() ? &*amateur : nullptr;
            params.probe = &probe;
            params.steer = &sv;
            params.steer_params = config.steer_params();
            const harness::EvalReport report =
                harness::run_eval(weights, corpus, split, method, params, seed,
                                  config.eval_max_items, ckpt_hash);
            std::string name = std::string("eval_") + harness::method_name(method) + "_" +
                               corpus::split_name(split);
            std::transform(name.begin(), name.end(), name.begin(),
                           [](unsigned char c) { return std::tolower(c); });
            const fs::path path = reports / (name + ".jsonl");
            harness::save_eval_report(report, path);
            mf.record(name, path);
            note(opt, name + ": exact_match " + std::to_string(report.exact_match) + " over " +
                          std::to_string(report.n_items) + " items");
        }
    }
}

void stage_sweep_layer(const runconfig::RunConfig& config, manifest::Manifest& mf,
                       const StageOptions& opt) {
    const corpus::Corpus corpus = load_corpus_artifact(config, mf);
    const model::Weights weights = load_final_weights(mf);
    const std::string ckpt_hash = mf.latest("checkpoint_final")->sha256;
    const auto datasets = modeid::load_labeled_datasets(mf.require("labels", "label"));

    std::vector<modeid::LabeledDataset> ordered(datasets.begin(), datasets.end());
    std::sort(ordered.begin(), ordered.end(),
              [](const modeid::LabeledDataset& a, const modeid::LabeledDataset& b) {
                  return a.layer < b.layer;
              });
    const harness::SweepReport report = harness::layer_sweep(
        weights, corpus, ordered, corpus::Split::EVAL_CONTAM, config.steer_params(),
        config.probe_regularization, mix_seed(config.seed, 5), config.sweep_max_items, ckpt_hash);

    const fs::path reports = subdir(mf, "reports");
    harness::save_sweep_report(report, reports / "sweep_layer.jsonl", reports / "sweep_layer.csv");
    mf.record("sweep_layer", reports / "sweep_layer.jsonl");
    mf.record("sweep_layer_csv", reports / "sweep_layer.csv");
    std::string curve = "sweep-layer:";
    for (const auto& pt : report.points) {
        curve += " " + std::to_string(pt.exact_match);
    }
    note(opt, curve);
}

void stage_sweep_alpha(const runconfig::RunConfig& config, manifest::Manifest& mf,
                       const StageOptions& opt) {
    const corpus::Corpus corpus = load_corpus_artifact(config, mf);
    const model::Weights weights = load_final_weights(mf);
    const std::string ckpt_hash = mf.latest("checkpoint_final")->sha256;
    const modeid::Probe probe = modeid::load_probe(mf.require("probe", "probe"));
    const steering::SteerVector sv = steering::load_steer_vector(mf.require("steer", "steer-vec"));

    const harness::SweepReport report = harness::alpha_sweep(
        weights, corpus, probe, sv, config.alpha_grid, corpus::Split::EVAL_CONTAM,
        config.steer_params(), mix_seed(config.seed, 5), config.sweep_max_items, ckpt_hash);

    const fs::path reports = subdir(mf, "reports");
    harness::save_sweep_report(report, reports / "sweep_alpha.jsonl", reports / "sweep_alpha.csv");
    mf.record("sweep_alpha", reports / "sweep_alpha.jsonl");
    mf.record("sweep_alpha_csv", reports / "sweep_alpha.csv");
    std::string curve = "sweep-alpha:";
    for (const auto& pt : report.points) {
        curve += " " + std::to_string(pt.exact_match);
    }
    note(opt, curve);
}

void stage_ib_plane(const runconfig::RunConfig& config, manifest::Manifest& mf,
                    const StageOptions& opt) {
    const corpus::Corpus corpus = load_corpus_artifact(config, mf);
    const TrainSummary summary = load_train_summary(mf);
    const model::Weights weights = load_final_weights(mf);
    const int l_star = load_selected_layer(mf);

    // Deterministic sample of trainable items.
    std::vector<const corpus::Item*> sample = corpus.trainable_items();
    Rng rng(mix_seed(config.seed, 8));
    rng.shuffle(sample);
    if (static_cast<int>(sample.size()) > config.ib_sample_items) {
        sample.resize(static_cast<size_t>(config.ib_sample_items));
    }

    std::vector<int> layers(static_cast<size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        layers[static_cast<size_t>(l)] = l;
    }

    const fs::path reports = subdir(mf, "reports");
    const fs::path plane_path = reports / "info_plane.jsonl";
    std::vector<ib::InfoPlanePoint> points =
        ib::info_plane(weights, sample, layers, config.ib_components, config.ib_bins,
                       summary.final_step);

    std::optional<model::Weights> amateur;
    if (summary.amateur_step >= 0) {
        amateur = model::load_checkpoint(mf.run_dir() / summary.amateur_path).weights;
        const auto amateur_points =
            ib::info_plane(*amateur, sample, layers, config.ib_components, config.ib_bins,
                           summary.amateur_step);
        points.insert(points.end(), amateur_points.begin(), amateur_points.end());
    }
    ib::save_info_plane(points, plane_path);
    mf.record("ib", plane_path);

    // Within-class variance ratio at l* over held-out rule activations,
    // final vs memorization-phase checkpoint.
    auto heldout = corpus.split_items(corpus::Split::HELDOUT_RULE);
    auto collect = [&](const model::Weights& w) {
        std::vector<std::vector<float>> acts(heldout.size());
        std::vector<int> labels(heldout.size());
        const std::vector<model::HookSpec> hooks{model::record_hook(l_star)};
        std::map<std::vector<int>, int> class_ids;
        for (size_t i = 0; i < heldout.size(); ++i) {
            auto [it, ins] =
                class_ids.emplace(heldout[i]->answer, static_cast<int>(class_ids.size()));
            labels[i] = it->second;
        }
        parallel_for(heldout.size(), [&](size_t i) {
            const model::ForwardResult fr = model::forward(w, heldout[i]->prompt, hooks);
            const auto phi = fr.cache->at(l_star, static_cast<int>(heldout[i]->prompt.size()) - 1);
            acts[i].assign(phi.begin(), phi.end());
        });
        return std::make_pair(std::move(acts), std::move(labels));
    };

    json collapse;
    collapse["layer"] = l_star;
    {
        auto [acts, labels] = collect(weights);
        collapse["final_step"] = summary.final_step;
        collapse["final_ratio"] = ib::within_class_variance_ratio(acts, labels);
    }
    if (amateur.has_value()) {
        auto [acts, labels] = collect(*amateur);
        collapse["amateur_step"] = summary.amateur_step;
        collapse["amateur_ratio"] = ib::within_class_variance_ratio(acts, labels);
    }
    const fs::path collapse_path = reports / "collapse.json";
    {
        std::ofstream out(collapse_path, std::ios::binary);
        out << collapse.dump(2) << "\n";
    }
    mf.record("collapse", collapse_path);
    note(opt, "ib-plane: " + std::to_string(points.size()) + " points over " +
                  std::to_string(sample.size()) + " items");
}

void run_pipeline(const runconfig::RunConfig& config, const std::filesystem::path& out_dir,
                  const StageOptions& opt) {
    config.validate();
    manifest::Manifest mf(out_dir);
    {
        const fs::path path = out_dir / "config.resolved";
        std::ofstream out(path, std::ios::binary);
        out << runconfig::serialize_config(config);
        out.close();
        mf.record("config", path);
    }
    stage_gen_corpus(config, mf, opt);
    stage_train(config, mf, opt);
    stage_label(config, mf, opt);
    stage_patch(config, mf, opt);
    stage_probe(config, mf, opt);
    stage_steer_vec(config, mf, opt);
    stage_eval(config, mf, opt);
    stage_sweep_layer(config, mf, opt);
    stage_sweep_alpha(config, mf, opt);
    stage_ib_plane(config, mf, opt);
}

}  // namespace dms::pipeline
