#pragma once

// Experiment drivers behind the `nafi` command line tool.

#include "nafi/config.hpp"
#include "nafi/generative.hpp"
#include "nafi/matching.hpp"
#include "nafi/network.hpp"

#include "json.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace nafi {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitDegenerate = 3,
    kExitShape = 4,
    kExitInvariant = 5,
};

/// Everything the fusion step needs from the data and local training stage.
struct PipelineSetup {
    LabeledDataset test;
    /// Locals handed to the matching algorithms.
    std::vector<Fcnn> locals;
    /// Locals trained from one shared init for FedAvg; identical to
    /// `locals` when the matching locals are shared-init too.
    std::vector<Fcnn> fedavg_locals;
    std::vector<ClassProportions> proportions;
    /// Fraction of all training examples held by each trained client.
    std::vector<double> data_weights;
    std::vector<double> local_accuracy;
    int empty_shards = 0;
};

struct PipelineMetrics {
    double lambda = 0.0;
    double acc_nafi = 0.0;
    double acc_pfnm = 0.0;
    double acc_fedavg = 0.0;
    double acc_nafi_layerwise = 0.0;
    double mean_local = 0.0;
    int global_nafi = 0;
    int global_pfnm = 0;
    int total_local = 0;
    double log_size_ratio_nafi = 0.0;
    double log_size_ratio_pfnm = 0.0;
    int passes_nafi = 0;
    int passes_pfnm = 0;
};

PipelineSetup prepare_pipeline(const RunConfig& cfg);
PipelineMetrics fuse_and_evaluate(const RunConfig& cfg, const PipelineSetup& setup, double lambda);

nlohmann::ordered_json metrics_json(const RunConfig& cfg, const PipelineSetup& setup, const PipelineMetrics& m);

/// Full pipeline at cfg.lambda.
nlohmann::ordered_json cmd_pipeline(const RunConfig& cfg);

struct SweepTable {
    std::vector<PipelineMetrics> rows;
    [[nodiscard]] std::string csv() const;
    [[nodiscard]] nlohmann::ordered_json json() const;
};

SweepTable cmd_sweep_lambda(const RunConfig& cfg, const std::vector<double>& grid);

SyntheticFederation cmd_simulate(const RunConfig& cfg, const std::string& out_path, std::ostream& log);

struct MatchOutput {
    nlohmann::ordered_json assignment;
    MatchResult result;
};

/// Runs matching over a federation and builds the assignment document
/// (including recovery metrics when ground truth is present).
MatchOutput match_federation(const SyntheticFederation& fed, const MatchConfig& config);

/// Entry point used by the executable; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace nafi
