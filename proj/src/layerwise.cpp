#include "nafi/layerwise.hpp"

#include <cmath>
#include <string>

namespace nafi {

void BnParams::validate() const {
    const auto n = gamma.size();
    if (beta.size() != n || mean.size() != n || var.size() != n)
        throw DimensionError("BnParams: gamma, beta, mean and var must have equal length");
    if (!(eps > 0.0)) throw std::invalid_argument("BnParams: eps must be positive");
    if ((var.array() < 0.0).any()) throw std::invalid_argument("BnParams: negative variance");
}

Eigen::VectorXd BnParams::apply(const Eigen::Ref<const Eigen::VectorXd>& z) const {
    detail::require_same_dim(z.size(), size(), "BnParams::apply");
    return (gamma.array() * (z - mean).array() / (var.array() + eps).sqrt() + beta.array()).matrix();
}

bool LayeredWeights::has_bn() const {
    for (const auto& b : bn)
        if (b) return true;
    return false;
}

Eigen::VectorXd LayeredWeights::bias(int n) const {
    return has_bias() ? biases.at(n) : Eigen::VectorXd::Zero(layers.at(n).rows());
}

void LayeredWeights::validate() const {
    if (layers.empty()) throw std::invalid_argument("LayeredWeights: no layers");
    for (int n = 0; n + 1 < depth(); ++n)
        if (layers[n + 1].cols() != layers[n].rows())
            throw DimensionError("LayeredWeights: layer " + std::to_string(n + 1) + " expects " +
                                 std::to_string(layers[n + 1].cols()) + " inputs but layer " +
                                 std::to_string(n) + " produces " + std::to_string(layers[n].rows()));
    if (has_bias()) {
        if (static_cast<int>(biases.size()) != depth())
            throw DimensionError("LayeredWeights: bias count differs from layer count");
        for (int n = 0; n < depth(); ++n)
            detail::require_same_dim(biases[n].size(), layers[n].rows(), "LayeredWeights bias");
    }
    if (!bn.empty()) {
        if (static_cast<int>(bn.size()) != depth())
            throw DimensionError("LayeredWeights: bn count differs from layer count");
        for (int n = 0; n < depth(); ++n)
            if (bn[n]) {
                bn[n]->validate();
                detail::require_same_dim(bn[n]->size(), layers[n].rows(), "LayeredWeights bn");
            }
    }
    if (proportions.size() != 0) detail::require_same_dim(proportions.size(), layers.back().rows(), "LayeredWeights proportions");
}

Eigen::VectorXd forward(const LayeredWeights& net, const Eigen::Ref<const Eigen::VectorXd>& x) {
    Eigen::VectorXd z = x;
    for (int n = 0; n < net.depth(); ++n) {
        z = net.layers[n] * z;
        if (net.has_bias()) z += net.biases[n];
        if (!net.bn.empty() && net.bn[n]) z = net.bn[n]->apply(z);
        if (n + 1 < net.depth())
            z = net.activation == Activation::relu ? Eigen::VectorXd(z.cwiseMax(0.0))
                                                   : Eigen::VectorXd(z.array().tanh().matrix());
    }
    return z;
}

LayeredWeights layered_from_fcnn(const Fcnn& net, ClientId client, ClassProportions proportions) {
    if (net.augmented_input)
        throw std::invalid_argument("layered_from_fcnn: augmented-input nets are not supported");
    LayeredWeights out;
    out.layers = {net.w0, net.w1};
    out.client_id = client;
    out.proportions = std::move(proportions);
    out.activation = net.activation;
    return out;
}

RetrainHook no_op_hook() {
    return [](ClientId, const std::vector<Eigen::MatrixXd>&, const std::vector<Eigen::MatrixXd>& rest) {
        return rest;
    };
}

FusionResult fuse_layerwise(const std::vector<LayeredWeights>& clients, const MatchConfig& config,
                            const RetrainHook& hook, const FusionOptions& options) {
    if (clients.empty()) throw std::invalid_argument("fuse_layerwise: no clients");
    const int N = clients.front().depth();
    const bool with_bias = clients.front().has_bias();
    for (const auto& c : clients) {
        c.validate();
        if (c.depth() != N) throw DimensionError("fuse_layerwise: clients differ in layer count");
        if (c.has_bn()) throw std::invalid_argument("fuse_layerwise: fold batch norm before fusing");
        if (c.has_bias() != with_bias) throw DimensionError("fuse_layerwise: clients disagree on biases");
        detail::require_same_dim(c.layers.front().cols(), clients.front().layers.front().cols(), "fuse_layerwise input");
        detail::require_same_dim(c.layers.back().rows(), clients.front().layers.back().rows(), "fuse_layerwise output");
    }
    const int S = static_cast<int>(clients.size());
    std::vector<LayeredWeights> work = clients;

    FusionResult result;
    LayeredWeights& global = result.global;
    global.activation = clients.front().activation;
    global.client_id = -1;

    for (int n = 0; n + 1 < N; ++n) {
        std::vector<LocalModelNeurons> locals;
        for (const auto& c : work) {
            const Eigen::MatrixXd& w = c.layers[n];
            const Eigen::MatrixXd& next = c.layers[n + 1];
            const Eigen::Index extra = with_bias ? 1 : 0;
            LocalModelNeurons l;
            l.client_id = c.client_id;
            l.sigma_sq = options.sigma_sq;
            l.neurons.resize(w.rows(), w.cols() + extra + next.rows());
            l.neurons.leftCols(w.cols()) = w;
            if (with_bias) l.neurons.col(w.cols()) = c.biases[n];
            l.neurons.rightCols(next.rows()) = next.transpose();
            locals.push_back(std::move(l));
        }
        const MatchResult match = run_matching(locals, config);
        const int J = match.state.num_atoms();

        Eigen::MatrixXd fused = Eigen::MatrixXd::Zero(J, work.front().layers[n].cols());
        Eigen::VectorXd fused_bias = Eigen::VectorXd::Zero(J);
        Eigen::VectorXd support = Eigen::VectorXd::Zero(J);
        std::vector<std::vector<int>> layer_assign;
        for (auto& c : work) {
            const auto& labels = match.state.per_client.at(c.client_id);
            for (std::size_t j = 0; j < labels.size(); ++j) {
                fused.row(labels[j]) += c.layers[n].row(static_cast<Eigen::Index>(j));
                if (with_bias) fused_bias[labels[j]] += c.biases[n][static_cast<Eigen::Index>(j)];
                support[labels[j]] += 1.0;
            }
            // Carry the next layer's columns into global unit order.
            Eigen::MatrixXd next = Eigen::MatrixXd::Zero(c.layers[n + 1].rows(), J);
            for (std::size_t j = 0; j < labels.size(); ++j) next.col(labels[j]) = c.layers[n + 1].col(static_cast<Eigen::Index>(j));
            c.layers[n + 1] = std::move(next);
            layer_assign.push_back(labels);
        }
        if (options.count_normalized) {
            fused = support.cwiseInverse().asDiagonal() * fused;
            fused_bias = fused_bias.cwiseQuotient(support);
        } else {
            fused /= S;
            fused_bias /= S;
        }
        global.layers.push_back(fused);
        if (with_bias) global.biases.push_back(fused_bias);
        result.assignments.push_back(std::move(layer_assign));
        ++result.rounds;

        for (auto& c : work) {
            for (int k = 0; k <= n; ++k) {
                c.layers[k] = global.layers[k];
                if (with_bias) c.biases[k] = global.biases[k];
            }
            std::vector<Eigen::MatrixXd> rest(c.layers.begin() + n + 1, c.layers.end());
            std::vector<Eigen::MatrixXd> trained = hook(c.client_id, global.layers, rest);
            if (trained.size() != rest.size())
                throw DimensionError("fuse_layerwise: retrain hook changed the number of layers");
            for (std::size_t k = 0; k < rest.size(); ++k)
                if (trained[k].rows() != rest[k].rows() || trained[k].cols() != rest[k].cols())
                    throw DimensionError("fuse_layerwise: retrain hook changed the shape of layer " +
                                         std::to_string(n + 1 + static_cast<int>(k)));
            for (std::size_t k = 0; k < rest.size(); ++k) c.layers[n + 1 + k] = std::move(trained[k]);
        }
    }

    std::vector<Eigen::MatrixXd> outputs;
    std::vector<ClassProportions> props;
    const Eigen::Index K = work.front().layers.back().rows();
    for (const auto& c : work) {
        Eigen::MatrixXd out = c.layers.back();
        if (with_bias) {
            out.conservativeResize(Eigen::NoChange, out.cols() + 1);
            out.col(out.cols() - 1) = c.biases.back();
        }
        outputs.push_back(std::move(out));
        props.push_back(c.proportions.size() == 0 ? ClassProportions::Constant(K, 1.0 / K) : c.proportions);
    }
    OutputLayerResult last = weighted_output_layer(outputs, props);
    if (with_bias) {
        global.biases.push_back(last.weights.col(last.weights.cols() - 1));
        global.layers.push_back(last.weights.leftCols(last.weights.cols() - 1));
    } else {
        global.layers.push_back(std::move(last.weights));
    }
    result.uniform_fallback = std::move(last.uniform_fallback);
    ++result.rounds;
    global.proportions = ClassProportions::Zero(K);
    for (const auto& p : props) global.proportions += p / S;
    return result;
}

FoldedLayer fold_bn(const Eigen::Ref<const Eigen::MatrixXd>& w, const Eigen::Ref<const Eigen::VectorXd>& b,
                    const BnParams& bn) {
    bn.validate();
    detail::require_same_dim(w.rows(), bn.size(), "fold_bn weights");
    detail::require_same_dim(b.size(), bn.size(), "fold_bn bias");
    const Eigen::VectorXd scale = (bn.gamma.array() / (bn.var.array() + bn.eps).sqrt()).matrix();
    FoldedLayer out;
    out.weights = scale.asDiagonal() * w;
    out.bias = (scale.array() * (b - bn.mean).array() + bn.beta.array()).matrix();
    return out;
}

LayeredWeights fold_all_bn(const LayeredWeights& net) {
    net.validate();
    LayeredWeights out = net;
    out.bn.clear();
    out.biases.resize(net.depth());
    for (int n = 0; n < net.depth(); ++n) {
        const Eigen::VectorXd b = net.bias(n);
        if (!net.bn.empty() && net.bn[n]) {
            FoldedLayer f = fold_bn(net.layers[n], b, *net.bn[n]);
            out.layers[n] = std::move(f.weights);
            out.biases[n] = std::move(f.bias);
        } else {
            out.biases[n] = b;
        }
    }
    return out;
}

} // namespace nafi
