#pragma once

// Bayesian nonparametric neuron matching: per-client assignment costs
// (plain PFNM and the KL-regularized NAFI variant), Hungarian solves, and the
// alternating optimization over clients.

#include "nafi/gaussian.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

namespace nafi {

/// Raised when matching state violates one of its structural invariants.
class InvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct LocalModelNeurons {
    ClientId client_id = 0;
    /// J_s x (D+K); row j is one local neuron.
    Eigen::MatrixXd neurons;
    double sigma_sq = 1.0;
};

enum class Algorithm { pfnm, nafi };
enum class ClientOrder { fixed, shuffled };

struct MatchConfig {
    double gamma0 = 1.0;
    /// Prior mean; an empty vector means the zero vector of the data dimension.
    Eigen::VectorXd prior_mean;
    double sigma0_sq = 10.0;
    /// Per-client noise variance overrides; clients not listed use the
    /// sigma_sq carried by their LocalModelNeurons.
    std::map<ClientId, double> sigma_sq;
    double lambda = 0.0;
    int max_passes = 10;
    ClientOrder client_order = ClientOrder::fixed;
    std::uint64_t seed = 0;
    double log_clamp = 1e-12;
    Algorithm algorithm = Algorithm::pfnm;

    [[nodiscard]] Gaussiand prior(Eigen::Index dim) const;
    void validate() const;
};

struct CostMatrix {
    Eigen::MatrixXd entries;
    int existing_rows = 0;
    int new_rows = 0;
};

struct Observation {
    Eigen::VectorXd w;
    double sigma_sq = 1.0;
};

struct AssignmentState {
    std::vector<AtomStatsd> atoms;
    std::map<ClientId, std::vector<int>> per_client;
    std::map<ClientId, std::vector<Observation>> client_obs;

    [[nodiscard]] int num_atoms() const { return static_cast<int>(atoms.size()); }

    /// Throws InvariantError if any structural invariant fails.
    void check_invariants() const;

    /// Atom labels relabelled by first appearance (clients ascending, local
    /// index ascending); equal for states that induce the same partition.
    [[nodiscard]] std::map<ClientId, std::vector<int>> canonical_labels() const;
};

/// Atom stats with the prior contribution subtracted out, i.e. only the
/// assigned local neurons.
struct DataTerms {
    Eigen::VectorXd weighted_sum;
    double precision = 0.0;
};

CostMatrix build_cost_pfnm(const AssignmentState& state_minus, const LocalModelNeurons& local,
                           int num_clients, const MatchConfig& config);

CostMatrix build_cost_nafi(const AssignmentState& state_minus, const LocalModelNeurons& local,
                           int num_clients, const MatchConfig& config);

/// Dispatches on config.algorithm.
CostMatrix build_cost(const AssignmentState& state_minus, const LocalModelNeurons& local,
                      int num_clients, const MatchConfig& config);

/// Removes every observation of `client` and drops atoms left empty.
void remove_client(AssignmentState& state, ClientId client);

/// Drops zero-count atoms and renumbers per-client maps; atom order is kept.
void prune_atoms(AssignmentState& state);

AssignmentState assign_client(AssignmentState state, const LocalModelNeurons& local,
                              int num_clients, const MatchConfig& config);

struct MatchResult {
    AssignmentState state;
    Eigen::MatrixXd global;
    int passes = 0;
    bool converged = false;
    /// Objective after each full pass; see matching_objective.
    std::vector<double> objective_trace;
};

MatchResult run_matching(const std::vector<LocalModelNeurons>& locals, const MatchConfig& config);

/// Row i is the posterior mean of atom i.
Eigen::MatrixXd extract_global(const AssignmentState& state);

/// Negative log posterior of the assignments with the atoms integrated to
/// their conjugate MAP, on the same scale as the assignment cost (twice the
/// negative log probability, constants in the assignments dropped).
double matching_objective(const AssignmentState& state, int num_clients, const MatchConfig& config);

} // namespace nafi
