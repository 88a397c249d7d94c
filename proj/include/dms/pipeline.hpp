#pragma once

// Pipeline stages behind the CLI subcommands. Every stage reads its inputs
// from the run directory via the manifest, writes its outputs there, and
// records them, so each stage can be re-run on its own. Layout:
//
//   <out>/config.resolved       the configuration actually used
//   <out>/manifest.jsonl
//   <out>/corpus/               corpus.tsv
//   <out>/checkpoints/          ckpt_*.dms, trace.jsonl, train_summary.json
//   <out>/probe/                labels.jsonl, calibration.json, probe.json,
//                               probe_report.json
//   <out>/patch/                patch_report.jsonl
//   <out>/steer/                steer_vector.json
//   <out>/reports/              eval_*.jsonl, sweep_*.jsonl/.csv,
//                               info_plane.jsonl, collapse.json

#include <filesystem>
#include <string>

#include "dms/manifest.hpp"
#include "dms/runconfig.hpp"

namespace dms::pipeline {

// A stage precondition that the artifacts cannot satisfy (no minable pairs,
// labeling classes empty, no flipping layer): distinct from config errors
// and from missing upstream artifacts.
struct GateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StageOptions {
    bool quiet = false;
};

void stage_gen_corpus(const runconfig::RunConfig& config, manifest::Manifest& mf,
                      const StageOptions& opt = {});
void stage_train(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt = {});
void stage_label(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt = {});
void stage_patch(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt = {});
void stage_probe(const runconfig::RunConfig& config, manifest::Manifest& mf,
                 const StageOptions& opt = {});
void stage_steer_vec(const runconfig::RunConfig& config, manifest::Manifest& mf,
                     const StageOptions& opt = {});
void stage_eval(const runconfig::RunConfig& config, manifest::Manifest& mf,
                const StageOptions& opt = {});
void stage_sweep_layer(const runconfig::RunConfig& config, manifest::Manifest& mf,
                       const StageOptions& opt = {});
void stage_sweep_alpha(const runconfig::RunConfig& config, manifest::Manifest& mf,
                       const StageOptions& opt = {});
void stage_ib_plane(const runconfig::RunConfig& config, manifest::Manifest& mf,
                    const StageOptions& opt = {});

// Writes config.resolved and runs every stage in order.
void run_pipeline(const runconfig::RunConfig& config, const std::filesystem::path& out_dir,
                  const StageOptions& opt = {});

}  // namespace dms::pipeline
