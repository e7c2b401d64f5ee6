#pragma once

// Single-hidden-layer networks f(x) = W1 act(W0 x), their neuron view for
// matching, local training, synthetic data and the FedAvg baseline.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace nafi {

enum class Activation { relu, tanh };

struct Fcnn {
    /// J x D input weights; row j feeds hidden unit j.
    Eigen::MatrixXd w0;
    /// K x J output weights.
    Eigen::MatrixXd w1;
    Activation activation = Activation::relu;
    /// When set, inputs carry D-1 features and a constant 1 is appended, so
    /// the last column of w0 acts as a hidden bias.
    bool augmented_input = false;

    [[nodiscard]] int hidden() const { return static_cast<int>(w0.rows()); }
    [[nodiscard]] int input_dim() const { return static_cast<int>(w0.cols()); }
    [[nodiscard]] int output_dim() const { return static_cast<int>(w1.rows()); }
    /// Dimension of the raw feature vectors this net accepts.
    [[nodiscard]] int feature_dim() const { return input_dim() - (augmented_input ? 1 : 0); }

    void validate() const;

    friend bool operator==(const Fcnn& a, const Fcnn& b) {
        return a.activation == b.activation && a.augmented_input == b.augmented_input &&
               a.w0.rows() == b.w0.rows() && a.w0.cols() == b.w0.cols() &&
               a.w1.rows() == b.w1.rows() && a.w1.cols() == b.w1.cols() && a.w0 == b.w0 &&
               a.w1 == b.w1;
    }
};

struct LabeledDataset {
    Eigen::MatrixXd features; // N x D
    std::vector<int> labels;

    [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }
    void validate(int num_classes) const;
};

/// Per-client fraction of local examples carrying each label.
using ClassProportions = Eigen::VectorXd;

Fcnn init_fcnn(int input_dim, int hidden, int output_dim, std::uint64_t seed,
               Activation activation = Activation::relu, bool augmented_input = false);

/// J x (D+K): row j is [w0 row j, w1 column j].
Eigen::MatrixXd neurons_of(const Fcnn& net);
Fcnn net_of(const Eigen::Ref<const Eigen::MatrixXd>& neurons, int input_dim, int output_dim,
            Activation activation = Activation::relu, bool augmented_input = false);

/// Reorders hidden units: unit j of the result is unit tau[j] of `net`.
Fcnn permute_hidden(const Fcnn& net, const std::vector<int>& tau);

Eigen::VectorXd forward(const Fcnn& net, const Eigen::Ref<const Eigen::VectorXd>& x);
/// Row-wise forward over an N x feature_dim matrix; returns N x K logits.
Eigen::MatrixXd forward_batch(const Fcnn& net, const Eigen::Ref<const Eigen::MatrixXd>& x);

struct ProxTerm {
    double mu = 0.0;
    Fcnn anchor;
};

struct TrainHyper {
    double lr = 0.01;
    int batch = 32;
    int epochs = 10;
    std::uint64_t seed = 0;
    /// Unset means plain SGD on the cross-entropy.
    std::optional<ProxTerm> prox;
};

struct Gradient {
    Eigen::MatrixXd w0;
    Eigen::MatrixXd w1;
};

/// Mean softmax cross-entropy over `rows` of data (all rows if empty), plus
/// (mu/2)||w - anchor||^2 when prox is given; gradient written to `grad`.
double loss_and_gradient(const Fcnn& net, const LabeledDataset& data, const std::vector<int>& rows,
                         const std::optional<ProxTerm>& prox, Gradient* grad);

Fcnn train_local(Fcnn net, const LabeledDataset& data, const TrainHyper& hyper);

/// Class means drawn once, shared by every sample drawn from them.
struct BlobModel {
    Eigen::MatrixXd means; // K x D
};

BlobModel make_blobs(int num_classes, int dim, std::uint64_t seed);
LabeledDataset sample_blobs(const BlobModel& model, int per_class, double spread, std::uint64_t seed);
LabeledDataset synth_data(int num_classes, int dim, int per_class, double spread, std::uint64_t seed);

/// Appends a constant-1 feature column.
LabeledDataset augment(const LabeledDataset& data);

struct Partition {
    std::vector<LabeledDataset> shards;
    std::vector<ClassProportions> proportions;
    /// class_shares(k, s): Dirichlet draw of the share of class k sent to client s.
    Eigen::MatrixXd class_shares;
    std::vector<bool> empty;
};

Partition dirichlet_partition(const LabeledDataset& data, int num_classes, double alpha,
                              int num_clients, std::uint64_t seed);

Fcnn fedavg(const std::vector<Fcnn>& nets, const std::vector<double>& weights);

struct OutputLayerResult {
    Eigen::MatrixXd weights;
    /// Classes with zero total proportion, averaged uniformly instead.
    std::vector<int> uniform_fallback;
};

/// Row k = sum_s p_s[k] W_s[k, :] / sum_s p_s[k].
OutputLayerResult weighted_output_layer(const std::vector<Eigen::MatrixXd>& outputs,
                                        const std::vector<ClassProportions>& proportions);
OutputLayerResult weighted_output_layer(const std::vector<Fcnn>& nets,
                                        const std::vector<ClassProportions>& proportions);

/// Argmax accuracy; ties go to the smallest class index.
double evaluate(const Fcnn& net, const LabeledDataset& data);

int argmax_first(const Eigen::Ref<const Eigen::VectorXd>& v);

} // namespace nafi
