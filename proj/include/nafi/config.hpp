#pragma once

// Run configuration: a flat `key = value` file ('#' starts a comment).
// Unknown keys and malformed values are rejected with file:line messages.

#include "nafi/generative.hpp"
#include "nafi/matching.hpp"
#include "nafi/network.hpp"

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace nafi {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    // matching
    Algorithm algorithm = Algorithm::nafi;
    double lambda = 0.01;
    double gamma0 = 1.0;
    double sigma0_sq = 10.0;
    double sigma_s_sq = 1.0;
    int max_passes = 10;
    ClientOrder client_order = ClientOrder::fixed;
    double log_clamp = 1e-12;

    // federation simulator
    int clients = 5;
    int dim = 10;
    std::string selection = "ibp"; // ibp | bernoulli
    double select_p = 0.8;
    int num_atoms = 10;

    // data and training
    int classes = 4;
    int features = 20;
    int per_class = 250;
    int test_per_class = 250;
    double spread = 1.0;
    double alpha = 0.5;
    int hidden = 20;
    Activation activation = Activation::relu;
    double lr = 0.01;
    int batch = 32;
    int epochs = 10;
    /// Matching locals start from one shared init instead of one per client.
    /// FedAvg always trains its own locals from a shared init.
    bool shared_init = false;
    double prox_mu = 0.0;

    std::vector<double> lambda_grid = {1e-8, 1e-3, 1e-2, 1e-1, 0.5, 1.0};

    std::uint64_t seed = 0;
    std::string out;

    /// Range checks; throws ConfigError.
    void validate() const;

    [[nodiscard]] MatchConfig match_config() const;
    [[nodiscard]] FederationParams federation_params() const;
    [[nodiscard]] TrainHyper train_hyper(std::uint64_t train_seed) const;
};

/// Applies `key = value` lines from `is` on top of `base`.
RunConfig parse_config(std::istream& is, const std::string& source, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});

/// Applies one setting; throws ConfigError (without location) on failure.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Canonical `key = value` rendering of every setting.
std::string describe(const RunConfig& cfg);

std::string to_string(Algorithm a);
std::string to_string(ClientOrder o);

} // namespace nafi
