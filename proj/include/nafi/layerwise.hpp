#pragma once

// Layer-by-layer fusion of deeper fully connected stacks, and folding of
// batch-normalization parameters into the preceding affine layer.

#include "nafi/matching.hpp"
#include "nafi/network.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <vector>

namespace nafi {

struct BnParams {
    Eigen::VectorXd gamma;
    Eigen::VectorXd beta;
    Eigen::VectorXd mean;
    Eigen::VectorXd var;
    double eps = 1e-5;

    [[nodiscard]] Eigen::Index size() const { return gamma.size(); }
    void validate() const;
    /// gamma * (z - mean) / sqrt(var + eps) + beta, elementwise.
    [[nodiscard]] Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& z) const;
};

/// Affine stack: layer n maps dim_n -> dim_{n+1} as W x + b, optionally
/// followed by batch norm; the activation is applied after every layer
/// except the last.
struct LayeredWeights {
    std::vector<Eigen::MatrixXd> layers;
    /// Either empty (bias-free) or one vector per layer.
    std::vector<Eigen::VectorXd> biases;
    /// Either empty or one entry per layer.
    std::vector<std::optional<BnParams>> bn;
    ClientId client_id = 0;
    /// Fraction of the client's examples per output class.
    ClassProportions proportions;
    Activation activation = Activation::relu;

    [[nodiscard]] int depth() const { return static_cast<int>(layers.size()); }
    [[nodiscard]] bool has_bias() const { return !biases.empty(); }
    [[nodiscard]] bool has_bn() const;
    [[nodiscard]] Eigen::VectorXd bias(int n) const;
    void validate() const;
};

Eigen::VectorXd forward(const LayeredWeights& net, const Eigen::Ref<const Eigen::VectorXd>& x);

LayeredWeights layered_from_fcnn(const Fcnn& net, ClientId client, ClassProportions proportions = {});

/// Given the client id, the frozen global prefix (layers 0..n) and the
/// client's remaining layers (n+1..N-1), returns the retrained remainder.
using RetrainHook = std::function<std::vector<Eigen::MatrixXd>(
    ClientId, const std::vector<Eigen::MatrixXd>&, const std::vector<Eigen::MatrixXd>&)>;

RetrainHook no_op_hook();

struct FusionOptions {
    /// Noise variance attached to every client's neurons unless overridden
    /// in MatchConfig::sigma_sq.
    double sigma_sq = 1.0;
    /// Divide matched sums by per-atom support instead of by S.
    bool count_normalized = false;
};

struct FusionResult {
    LayeredWeights global;
    /// assignments[n][s][j]: global unit of client s's unit j at layer n.
    std::vector<std::vector<std::vector<int>>> assignments;
    int rounds = 0;
    std::vector<int> uniform_fallback;
};

FusionResult fuse_layerwise(const std::vector<LayeredWeights>& clients, const MatchConfig& config,
                            const RetrainHook& hook = no_op_hook(), const FusionOptions& options = {});

struct FoldedLayer {
    Eigen::MatrixXd weights;
    Eigen::VectorXd bias;
};

/// W' = diag(gamma / sqrt(var + eps)) W, b' = gamma (b - mean) / sqrt(var + eps) + beta.
FoldedLayer fold_bn(const Eigen::Ref<const Eigen::MatrixXd>& w, const Eigen::Ref<const Eigen::VectorXd>& b,
                    const BnParams& bn);

/// Folds every bn block into its layer; the result has biases and no bn.
LayeredWeights fold_all_bn(const LayeredWeights& net);

} // namespace nafi
