#include "nafi/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace nafi {
namespace {

using Rng = std::mt19937_64;

Eigen::MatrixXd activate(const Eigen::MatrixXd& h, Activation act) {
    if (act == Activation::relu) return h.cwiseMax(0.0);
    return h.array().tanh().matrix();
}

Eigen::MatrixXd activation_derivative(const Eigen::MatrixXd& h, Activation act) {
    if (act == Activation::relu) return (h.array() > 0.0).cast<double>().matrix();
    return (1.0 - h.array().tanh().square()).matrix();
}

Eigen::MatrixXd with_bias_column(const Eigen::Ref<const Eigen::MatrixXd>& x) {
    Eigen::MatrixXd out(x.rows(), x.cols() + 1);
    out.leftCols(x.cols()) = x;
    out.col(x.cols()).setOnes();
    return out;
}

Eigen::MatrixXd network_input(const Fcnn& net, const Eigen::Ref<const Eigen::MatrixXd>& x) {
    if (x.cols() != net.feature_dim())
        throw std::invalid_argument("forward: expected " + std::to_string(net.feature_dim()) +
                                    " features, got " + std::to_string(x.cols()));
    return net.augmented_input ? with_bias_column(x) : Eigen::MatrixXd(x);
}

} // namespace

void Fcnn::validate() const {
    if (w0.rows() != w1.cols())
        throw std::invalid_argument("Fcnn: w0 has " + std::to_string(w0.rows()) +
                                    " hidden rows but w1 has " + std::to_string(w1.cols()) + " columns");
    if (augmented_input && w0.cols() < 1) throw std::invalid_argument("Fcnn: augmented input needs D >= 1");
}

void LabeledDataset::validate(int num_classes) const {
    if (features.rows() != static_cast<Eigen::Index>(labels.size()))
        throw std::invalid_argument("LabeledDataset: feature rows and label count differ");
    for (int y : labels)
        if (y < 0 || y >= num_classes)
            throw std::invalid_argument("LabeledDataset: label " + std::to_string(y) + " out of range");
}

Fcnn init_fcnn(int input_dim, int hidden, int output_dim, std::uint64_t seed, Activation activation,
               bool augmented_input) {
    if (input_dim < 1 || hidden < 1 || output_dim < 1)
        throw std::invalid_argument("init_fcnn: dimensions must be positive");
    Rng rng(seed);
    // Glorot uniform.
    auto fill = [&](Eigen::MatrixXd& m, int fan_in, int fan_out) {
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
    };
    Fcnn net;
    net.activation = activation;
    net.augmented_input = augmented_input;
    net.w0.resize(hidden, input_dim);
    net.w1.resize(output_dim, hidden);
    fill(net.w0, input_dim, hidden);
    fill(net.w1, hidden, output_dim);
    return net;
}

Eigen::MatrixXd neurons_of(const Fcnn& net) {
    net.validate();
    Eigen::MatrixXd out(net.hidden(), net.input_dim() + net.output_dim());
    out.leftCols(net.input_dim()) = net.w0;
    out.rightCols(net.output_dim()) = net.w1.transpose();
    return out;
}

Fcnn net_of(const Eigen::Ref<const Eigen::MatrixXd>& neurons, int input_dim, int output_dim,
            Activation activation, bool augmented_input) {
    if (input_dim < 1 || output_dim < 1 || neurons.cols() != input_dim + output_dim)
        throw std::invalid_argument("net_of: neuron matrix has " + std::to_string(neurons.cols()) +
                                    " columns, expected D+K = " + std::to_string(input_dim + output_dim));
    Fcnn net;
    net.activation = activation;
    net.augmented_input = augmented_input;
    net.w0 = neurons.leftCols(input_dim);
    net.w1 = neurons.rightCols(output_dim).transpose();
    return net;
}

Fcnn permute_hidden(const Fcnn& net, const std::vector<int>& tau) {
    net.validate();
    const int J = net.hidden();
    if (static_cast<int>(tau.size()) != J)
        throw std::invalid_argument("permute_hidden: permutation length differs from hidden size");
    std::vector<char> seen(J, 0);
    for (int t : tau) {
        if (t < 0 || t >= J || seen[t]) throw std::invalid_argument("permute_hidden: not a permutation");
        seen[t] = 1;
    }
    Fcnn out = net;
    for (int j = 0; j < J; ++j) {
        out.w0.row(j) = net.w0.row(tau[j]);
        out.w1.col(j) = net.w1.col(tau[j]);
    }
    return out;
}

Eigen::MatrixXd forward_batch(const Fcnn& net, const Eigen::Ref<const Eigen::MatrixXd>& x) {
    const Eigen::MatrixXd input = network_input(net, x);
    return activate(input * net.w0.transpose(), net.activation) * net.w1.transpose();
}

Eigen::VectorXd forward(const Fcnn& net, const Eigen::Ref<const Eigen::VectorXd>& x) {
    return forward_batch(net, x.transpose()).transpose();
}

double loss_and_gradient(const Fcnn& net, const LabeledDataset& data, const std::vector<int>& rows,
                         const std::optional<ProxTerm>& prox, Gradient* grad) {
    std::vector<int> all;
    const std::vector<int>* idx = &rows;
    if (rows.empty()) {
        all.resize(data.size());
        std::iota(all.begin(), all.end(), 0);
        idx = &all;
    }
    const int B = static_cast<int>(idx->size());
    if (B == 0) throw std::invalid_argument("loss_and_gradient: empty batch");

    Eigen::MatrixXd xb(B, data.features.cols());
    for (int b = 0; b < B; ++b) xb.row(b) = data.features.row((*idx)[b]);
    const Eigen::MatrixXd input = network_input(net, xb);
    const Eigen::MatrixXd h = input * net.w0.transpose();
    const Eigen::MatrixXd a = activate(h, net.activation);
    Eigen::MatrixXd z = a * net.w1.transpose();

    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const double zmax = z.row(b).maxCoeff();
        const double lse = zmax + std::log((z.row(b).array() - zmax).exp().sum());
        const int y = data.labels[(*idx)[b]];
        loss -= z(b, y) - lse;
        z.row(b) = (z.row(b).array() - lse).exp().matrix(); // softmax probabilities
        z(b, y) -= 1.0;
    }
    loss /= B;
    z /= B; // dL/dlogits

    if (grad) {
        grad->w1 = z.transpose() * a;
        const Eigen::MatrixXd dh = ((z * net.w1).array() * activation_derivative(h, net.activation).array()).matrix();
        grad->w0 = dh.transpose() * input;
    }
    if (prox && prox->mu != 0.0) {
        const Eigen::MatrixXd d0 = net.w0 - prox->anchor.w0;
        const Eigen::MatrixXd d1 = net.w1 - prox->anchor.w1;
        loss += 0.5 * prox->mu * (d0.squaredNorm() + d1.squaredNorm());
        if (grad) {
            grad->w0 += prox->mu * d0;
            grad->w1 += prox->mu * d1;
        }
    }
    return loss;
}

Fcnn train_local(Fcnn net, const LabeledDataset& data, const TrainHyper& hyper) {
    net.validate();
    if (data.size() == 0) throw std::invalid_argument("train_local: empty dataset");
    if (hyper.batch < 1 || hyper.epochs < 0 || !(hyper.lr > 0.0))
        throw std::invalid_argument("train_local: bad hyperparameters");
    data.validate(net.output_dim());
    Rng rng(hyper.seed);
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Gradient g;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (int start = 0; start < data.size(); start += hyper.batch) {
            const int end = std::min(data.size(), start + hyper.batch);
            std::vector<int> batch(order.begin() + start, order.begin() + end);
            loss_and_gradient(net, data, batch, hyper.prox, &g);
            net.w0 -= hyper.lr * g.w0;
            net.w1 -= hyper.lr * g.w1;
        }
    }
    return net;
}

BlobModel make_blobs(int num_classes, int dim, std::uint64_t seed) {
    if (num_classes < 2) throw std::invalid_argument("make_blobs: need K >= 2");
    if (dim < 1) throw std::invalid_argument("make_blobs: need D >= 1");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    BlobModel model;
    model.means.resize(num_classes, dim);
    for (int k = 0; k < num_classes; ++k)
        for (int d = 0; d < dim; ++d) model.means(k, d) = normal(rng);
    return model;
}

LabeledDataset sample_blobs(const BlobModel& model, int per_class, double spread, std::uint64_t seed) {
    if (per_class < 1) throw std::invalid_argument("sample_blobs: per_class must be positive");
    if (spread < 0.0) throw std::invalid_argument("sample_blobs: spread must be nonnegative");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto K = model.means.rows();
    const auto D = model.means.cols();
    LabeledDataset out;
    out.features.resize(K * per_class, D);
    out.labels.reserve(K * per_class);
    for (Eigen::Index k = 0; k < K; ++k)
        for (int p = 0; p < per_class; ++p) {
            const Eigen::Index row = k * per_class + p;
            for (Eigen::Index d = 0; d < D; ++d) out.features(row, d) = model.means(k, d) + spread * normal(rng);
            out.labels.push_back(static_cast<int>(k));
        }
    return out;
}

LabeledDataset synth_data(int num_classes, int dim, int per_class, double spread, std::uint64_t seed) {
    return sample_blobs(make_blobs(num_classes, dim, seed), per_class, spread, seed + 1);
}

LabeledDataset augment(const LabeledDataset& data) {
    return LabeledDataset{with_bias_column(data.features), data.labels};
}

Partition dirichlet_partition(const LabeledDataset& data, int num_classes, double alpha, int num_clients,
                              std::uint64_t seed) {
    if (num_clients < 1) throw std::invalid_argument("dirichlet_partition: need S >= 1");
    if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be positive");
    data.validate(num_classes);
    Rng rng(seed);
    std::gamma_distribution<double> gamma(alpha, 1.0);

    std::vector<std::vector<int>> members(num_clients);
    Partition part;
    part.class_shares = Eigen::MatrixXd::Zero(num_classes, num_clients);
    for (int k = 0; k < num_classes; ++k) {
        std::vector<int> idx;
        for (int i = 0; i < data.size(); ++i)
            if (data.labels[i] == k) idx.push_back(i);
        std::shuffle(idx.begin(), idx.end(), rng);

        Eigen::VectorXd share(num_clients);
        for (int s = 0; s < num_clients; ++s) share[s] = gamma(rng);
        if (share.sum() > 0.0) {
            share /= share.sum();
        } else {
            // Every gamma draw underflowed; give the class to one client.
            share.setZero();
            share[std::uniform_int_distribution<int>(0, num_clients - 1)(rng)] = 1.0;
        }
        part.class_shares.row(k) = share.transpose();

        // Largest-remainder rounding so the counts add up exactly.
        const int n = static_cast<int>(idx.size());
        std::vector<int> counts(num_clients);
        std::vector<std::pair<double, int>> remainders;
        int assigned = 0;
        for (int s = 0; s < num_clients; ++s) {
            const double target = share[s] * n;
            counts[s] = static_cast<int>(std::floor(target));
            assigned += counts[s];
            remainders.emplace_back(target - counts[s], s);
        }
        std::stable_sort(remainders.begin(), remainders.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (int r = 0; r < n - assigned; ++r) ++counts[remainders[r].second];

        int cursor = 0;
        for (int s = 0; s < num_clients; ++s)
            for (int c = 0; c < counts[s]; ++c) members[s].push_back(idx[cursor++]);
    }

    for (int s = 0; s < num_clients; ++s) {
        auto& m = members[s];
        std::sort(m.begin(), m.end());
        LabeledDataset shard;
        shard.features.resize(static_cast<Eigen::Index>(m.size()), data.features.cols());
        ClassProportions p = ClassProportions::Zero(num_classes);
        for (std::size_t r = 0; r < m.size(); ++r) {
            shard.features.row(static_cast<Eigen::Index>(r)) = data.features.row(m[r]);
            shard.labels.push_back(data.labels[m[r]]);
            p[data.labels[m[r]]] += 1.0;
        }
        if (!m.empty()) p /= static_cast<double>(m.size());
        part.empty.push_back(m.empty());
        part.shards.push_back(std::move(shard));
        part.proportions.push_back(std::move(p));
    }
    return part;
}

Fcnn fedavg(const std::vector<Fcnn>& nets, const std::vector<double>& weights) {
    if (nets.empty()) throw std::invalid_argument("fedavg: no models");
    if (nets.size() != weights.size()) throw std::invalid_argument("fedavg: one weight per model required");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("fedavg: weights must be nonnegative");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("fedavg: weights must sum to 1");
    const Fcnn& first = nets.front();
    Fcnn out = first;
    out.w0.setZero();
    out.w1.setZero();
    for (std::size_t s = 0; s < nets.size(); ++s) {
        const Fcnn& n = nets[s];
        if (n.w0.rows() != first.w0.rows() || n.w0.cols() != first.w0.cols() ||
            n.w1.rows() != first.w1.rows() || n.w1.cols() != first.w1.cols() ||
            n.activation != first.activation || n.augmented_input != first.augmented_input)
            throw std::invalid_argument("fedavg: architecture mismatch at model " + std::to_string(s));
        out.w0 += weights[s] * n.w0;
        out.w1 += weights[s] * n.w1;
    }
    return out;
}

OutputLayerResult weighted_output_layer(const std::vector<Eigen::MatrixXd>& outputs,
                                        const std::vector<ClassProportions>& proportions) {
    if (outputs.empty()) throw std::invalid_argument("weighted_output_layer: no models");
    if (outputs.size() != proportions.size())
        throw std::invalid_argument("weighted_output_layer: one proportion vector per model required");
    const auto K = outputs.front().rows();
    const auto J = outputs.front().cols();
    for (std::size_t s = 0; s < outputs.size(); ++s) {
        if (outputs[s].rows() != K || outputs[s].cols() != J)
            throw std::invalid_argument("weighted_output_layer: output shape mismatch at model " + std::to_string(s));
        if (proportions[s].size() != K)
            throw std::invalid_argument("weighted_output_layer: proportion length mismatch at model " + std::to_string(s));
    }
    OutputLayerResult out;
    out.weights = Eigen::MatrixXd::Zero(K, J);
    const double S = static_cast<double>(outputs.size());
    for (Eigen::Index k = 0; k < K; ++k) {
        double total = 0.0;
        for (const auto& p : proportions) total += p[k];
        if (total > 0.0) {
            for (std::size_t s = 0; s < outputs.size(); ++s)
                out.weights.row(k) += proportions[s][k] * outputs[s].row(k);
            out.weights.row(k) /= total;
        } else {
            for (const auto& w : outputs) out.weights.row(k) += w.row(k);
            out.weights.row(k) /= S;
            out.uniform_fallback.push_back(static_cast<int>(k));
        }
    }
    return out;
}

OutputLayerResult weighted_output_layer(const std::vector<Fcnn>& nets,
                                        const std::vector<ClassProportions>& proportions) {
    std::vector<Eigen::MatrixXd> outputs;
    outputs.reserve(nets.size());
    for (const auto& n : nets) outputs.push_back(n.w1);
    return weighted_output_layer(outputs, proportions);
}

int argmax_first(const Eigen::Ref<const Eigen::VectorXd>& v) {
    int best = 0;
    for (Eigen::Index k = 1; k < v.size(); ++k)
        if (v[k] > v[best]) best = static_cast<int>(k);
    return best;
}

double evaluate(const Fcnn& net, const LabeledDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    const Eigen::MatrixXd logits = forward_batch(net, data.features);
    int correct = 0;
    for (int i = 0; i < data.size(); ++i)
        if (argmax_first(logits.row(i).transpose()) == data.labels[i]) ++correct;
    return static_cast<double>(correct) / data.size();
}

} // namespace nafi
