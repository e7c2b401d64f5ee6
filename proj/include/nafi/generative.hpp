#pragma once

// Synthetic federations drawn from the Beta-Bernoulli / Indian buffet
// generative model, plus the metrics used to score recovered assignments.

#include "nafi/matching.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace nafi {

/// Every sampler in this module draws from one of these, seeded explicitly.
using Rng = std::mt19937_64;

/// The generated instance is unusable (a client ended up with no neurons,
/// or no atom was selected at all).
class DegenerateInstance : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct StickWeights {
    std::vector<double> weights;
    int truncation = 0;
};

/// Stick-breaking weights of a Beta process with mass gamma0:
/// v_g ~ Beta(gamma0, 1) independently, q_i = prod_{g <= i} v_g.
StickWeights sample_stick_breaking(double gamma0, int truncation, std::uint64_t seed);

using BinaryMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Indian buffet process with S customers; columns are dishes in order of
/// first appearance.
BinaryMatrix sample_ibp(double gamma0, int num_customers, std::uint64_t seed);
BinaryMatrix sample_ibp(double gamma0, int num_customers, Rng& rng);

struct SelectionMode {
    enum class Kind { ibp, bernoulli } kind = Kind::ibp;
    /// Selection probability, bernoulli mode only.
    double p = 1.0;
    /// Number of candidate atoms, bernoulli mode only.
    int num_atoms = 0;

    static SelectionMode ibp() { return {}; }
    static SelectionMode bernoulli(double p, int num_atoms) { return {Kind::bernoulli, p, num_atoms}; }
};

struct FederationParams {
    double gamma0 = 1.0;
    int num_clients = 1;
    int dim = 1;
    double sigma0_sq = 10.0;
    double sigma_s_sq = 1.0;
    std::uint64_t seed = 0;
    SelectionMode selection;
    /// Selection draws allowed before the instance is declared degenerate.
    int max_selection_attempts = 100;
};

struct SyntheticFederation {
    /// J_true x dim ground-truth atoms.
    Eigen::MatrixXd atoms;
    /// S x J_true, entry (s, i) = 1 iff client s holds atom i.
    BinaryMatrix selection;
    /// permutations[s][j] = position (among client s's selected atoms in
    /// ascending atom order) that ended up as local row j.
    std::vector<std::vector<int>> permutations;
    std::vector<LocalModelNeurons> locals;
    /// truth_assignment[s][j] = true atom of local row j of client s.
    std::vector<std::vector<int>> truth_assignment;
    FederationParams params;

    [[nodiscard]] int num_atoms() const { return static_cast<int>(atoms.rows()); }
    [[nodiscard]] int total_local_neurons() const;
};

/// Draw order from one Rng seeded with params.seed: selection matrix
/// (redrawn while some client holds no atom, up to the attempt bound), atoms
/// (row-major, N(0, sigma0_sq)), then per client: noise rows in atom order
/// followed by the row permutation. Atoms no client selected are dropped.
SyntheticFederation generate_federation(const FederationParams& params);

struct RecoveryMetrics {
    double exact_match_rate = 0.0;
    double ari = 0.0;
    int count_error = 0;
    int inferred_atoms = 0;
    int true_atoms = 0;
    double mean_atom_distance = 0.0;
};

/// Adjusted Rand index between two labelings of the same items.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

RecoveryMetrics recovery_metrics(const SyntheticFederation& truth, const AssignmentState& inferred);

/// log10(J / total).
double log_size_ratio(int num_global, int total_local);

} // namespace nafi
