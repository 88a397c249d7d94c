// dms: train a small dual-mode transformer, locate its causal layer, and
// steer decoding toward the generalizing circuit. Stages communicate only
// through files in the run directory, so each subcommand can be re-run on
// its own.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>

#include <CLI11.hpp>

#include "dms/manifest.hpp"
#include "dms/pipeline.hpp"
#include "dms/runconfig.hpp"

namespace {

// Exit codes: 0 success, 2 config error, 3 missing/invalid artifact,
// 4 failed pipeline gate.
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitGate = 4;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run configuration file (defaults built in)");
    cmd->add_option("--out", args.out_dir, "Run directory")->required();
    cmd->add_option("--seed", args.seed, "Override the global seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_flag("--quiet", args.quiet, "Suppress progress notes");
}

dms::runconfig::RunConfig resolve_config(const CommonArgs& args) {
    dms::runconfig::RunConfig config;
    if (!args.config_path.empty()) {
        config = dms::runconfig::load_config(args.config_path);
    }
    dms::runconfig::apply_env_overrides(config);
    if (args.seed_set) {
        config.seed = args.seed;
    }
    config.validate();
    return config;
}

using Stage = std::function<void(const dms::runconfig::RunConfig&, dms::manifest::Manifest&,
                                 const dms::pipeline::StageOptions&)>;

int run_stage(const CommonArgs& args, const Stage& stage) {
    try {
        const dms::runconfig::RunConfig config = resolve_config(args);
        dms::manifest::Manifest mf(args.out_dir);
        dms::pipeline::StageOptions opt;
        opt.quiet = args.quiet;
        stage(config, mf, opt);
        return 0;
    } catch (const dms::runconfig::ConfigError& e) {
        std::fprintf(stderr, "dms: %s\n", e.what());
        return kExitConfig;
    } catch (const dms::manifest::MissingArtifact& e) {
        std::fprintf(stderr, "dms: %s\n", e.what());
        return kExitMissing;
    } catch (const dms::pipeline::GateError& e) {
        std::fprintf(stderr, "dms: %s\n", e.what());
        return kExitGate;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "dms: %s\n", e.what());
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic mode steering laboratory"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* help;
        Stage stage;
    };
    const Sub subs[] = {
        {"gen-corpus", "Generate the synthetic dual-mode corpus", dms::pipeline::stage_gen_corpus},
        {"train", "Train the transformer and write checkpoints", dms::pipeline::stage_train},
        {"label", "Build the diversity-labeled activation dataset", dms::pipeline::stage_label},
        {"patch", "Run activation patching and select the causal layer",
         dms::pipeline::stage_patch},
        {"probe", "Train the memorization probe at the causal layer", dms::pipeline::stage_probe},
        {"steer-vec", "Compute the generalization steering vector",
         dms::pipeline::stage_steer_vec},
        {"eval", "Evaluate the decoding methods on the eval splits", dms::pipeline::stage_eval},
        {"sweep-layer", "DMS accuracy as a function of intervention layer",
         dms::pipeline::stage_sweep_layer},
        {"sweep-alpha", "DMS accuracy as a function of steering strength",
         dms::pipeline::stage_sweep_alpha},
        {"ib-plane", "Information-plane coordinates and collapse ratios",
         dms::pipeline::stage_ib_plane},
    };

    CommonArgs args;
    int rc = 0;
    for (const Sub& sub : subs) {
        CLI::App* cmd = app.add_subcommand(sub.name, sub.help);
        add_common(cmd, args);
        cmd->callback([&args, &rc, stage = sub.stage] { rc = run_stage(args, stage); });
    }
    {
        CLI::App* cmd = app.add_subcommand("pipeline", "Run every stage in order");
        add_common(cmd, args);
        cmd->callback([&args, &rc] {
            rc = run_stage(args, [](const dms::runconfig::RunConfig& config,
                                    dms::manifest::Manifest& mf,
                                    const dms::pipeline::StageOptions& opt) {
                dms::pipeline::run_pipeline(config, mf.run_dir(), opt);
            });
        });
    }

    CLI11_PARSE(app, argc, argv);
    return rc;
}
