#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "nafi/layerwise.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace nafi;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
    std::normal_distribution<double> normal(0.0, sd);
    MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng);
    return m;
}

LayeredWeights random_stack(std::mt19937_64& rng, const std::vector<int>& dims, bool bias, ClientId id = 0) {
    LayeredWeights net;
    net.client_id = id;
    for (std::size_t n = 0; n + 1 < dims.size(); ++n) {
        net.layers.push_back(random_matrix(rng, dims[n + 1], dims[n]));
        if (bias) net.biases.push_back(random_matrix(rng, dims[n + 1], 1));
    }
    return net;
}

/// The same network with the hidden units of layer n shuffled.
LayeredWeights shuffle_hidden(LayeredWeights net, int n, std::mt19937_64& rng) {
    std::vector<int> tau(static_cast<std::size_t>(net.layers[n].rows()));
    std::iota(tau.begin(), tau.end(), 0);
    std::shuffle(tau.begin(), tau.end(), rng);
    MatrixXd rows(net.layers[n].rows(), net.layers[n].cols());
    MatrixXd cols(net.layers[n + 1].rows(), net.layers[n + 1].cols());
    VectorXd b(net.layers[n].rows());
    for (std::size_t j = 0; j < tau.size(); ++j) {
        const auto J = static_cast<Eigen::Index>(j);
        rows.row(J) = net.layers[n].row(tau[j]);
        cols.col(J) = net.layers[n + 1].col(tau[j]);
        if (net.has_bias()) b[J] = net.biases[n][tau[j]];
    }
    net.layers[n] = rows;
    net.layers[n + 1] = cols;
    if (net.has_bias()) net.biases[n] = b;
    return net;
}

BnParams random_bn(std::mt19937_64& rng, Eigen::Index c) {
    BnParams bn;
    bn.gamma = random_matrix(rng, c, 1);
    bn.beta = random_matrix(rng, c, 1);
    bn.mean = random_matrix(rng, c, 1);
    bn.var = random_matrix(rng, c, 1).array().square() + 0.1;
    bn.eps = 1e-3;
    return bn;
}

double max_forward_gap(const LayeredWeights& a, const LayeredWeights& b, std::mt19937_64& rng, int inputs = 100) {
    double gap = 0.0;
    for (int i = 0; i < inputs; ++i) {
        const VectorXd x = random_matrix(rng, a.layers.front().cols(), 1);
        gap = std::max(gap, (forward(a, x) - forward(b, x)).cwiseAbs().maxCoeff());
    }
    return gap;
}

MatchConfig tight_config() {
    MatchConfig cfg;
    cfg.sigma0_sq = 1.0;
    return cfg;
}

FusionOptions tight_options() {
    FusionOptions o;
    o.sigma_sq = 1e-4;
    return o;
}

} // namespace

TEST_CASE("layered forward pass by hand") {
    LayeredWeights net;
    net.layers = {MatrixXd{{1, -1}, {2, 0}}, MatrixXd{{1, 1}}};
    net.biases = {VectorXd{{0, -1}}, VectorXd{{0.5}}};
    // Hidden: relu(1 - 2) = 0, relu(2 - 1) = 1; output 0 + 1 + 0.5.
    CHECK(forward(net, VectorXd{{1, 2}})[0] == 1.5);
}

TEST_CASE("stack validation") {
    std::mt19937_64 rng(1);
    LayeredWeights net = random_stack(rng, {3, 4, 2}, true);
    CHECK_NOTHROW(net.validate());
    net.layers[1] = MatrixXd::Zero(2, 5);
    CHECK_THROWS(net.validate());
    net = random_stack(rng, {3, 4, 2}, true);
    net.biases.pop_back();
    CHECK_THROWS(net.validate());
}

TEST_CASE("single client fusion reproduces the client") {
    std::mt19937_64 rng(2);
    for (bool bias : {false, true}) {
        const LayeredWeights c = random_stack(rng, {5, 6, 4, 3}, bias);
        const FusionResult r = fuse_layerwise({c}, tight_config(), no_op_hook(), tight_options());
        CHECK(r.rounds == 3);
        CHECK_NOTHROW(r.global.validate());
        for (int n = 0; n < 3; ++n) CHECK(r.global.layers[n].rows() == c.layers[n].rows());
        CHECK(max_forward_gap(r.global, c, rng) <= 1e-10);
    }
}

TEST_CASE("identical clients fuse to the same function") {
    std::mt19937_64 rng(3);
    const LayeredWeights base = random_stack(rng, {4, 7, 5, 2}, true);
    // Plain copies, and copies whose first hidden layer is permuted: a layer's
    // matching vectors carry the next layer's columns, so only the first
    // hidden layer may differ in order for the copies to remain comparable.
    for (bool shuffled : {false, true}) {
        std::vector<LayeredWeights> clients;
        for (int s = 0; s < 4; ++s) {
            LayeredWeights c = shuffled ? shuffle_hidden(base, 0, rng) : base;
            c.client_id = s;
            clients.push_back(c);
        }
        const FusionResult r = fuse_layerwise(clients, tight_config(), no_op_hook(), tight_options());
        CHECK(r.rounds == 3);
        CHECK(r.global.layers[0].rows() == 7);
        CHECK(r.global.layers[1].rows() == 5);
        CHECK_NOTHROW(r.global.validate());
        CHECK(max_forward_gap(r.global, base, rng) <= 1e-8);
        REQUIRE(r.assignments.size() == 2);
        for (const auto& layer : r.assignments) CHECK(layer.size() == 4);
    }
}

TEST_CASE("two-layer fusion equals matching plus the output-layer average") {
    std::mt19937_64 rng(4);
    std::vector<LayeredWeights> clients;
    std::vector<Fcnn> nets;
    std::vector<ClassProportions> props;
    for (int s = 0; s < 3; ++s) {
        Fcnn f;
        f.w0 = random_matrix(rng, 5, 3);
        f.w1 = random_matrix(rng, 2, 5);
        ClassProportions p(2);
        p << 0.3 + 0.2 * s, 0.7 - 0.2 * s;
        nets.push_back(f);
        props.push_back(p);
        clients.push_back(layered_from_fcnn(f, s, p));
    }
    MatchConfig cfg;
    cfg.sigma0_sq = 4.0;
    FusionOptions opt;
    opt.sigma_sq = 0.5;
    const FusionResult r = fuse_layerwise(clients, cfg, no_op_hook(), opt);

    std::vector<LocalModelNeurons> locals;
    for (int s = 0; s < 3; ++s) locals.push_back(LocalModelNeurons{s, neurons_of(nets[s]), 0.5});
    const MatchResult m = run_matching(locals, cfg);
    const int J = m.state.num_atoms();
    MatrixXd w0 = MatrixXd::Zero(J, 3);
    std::vector<MatrixXd> outputs;
    for (int s = 0; s < 3; ++s) {
        const auto& labels = m.state.per_client.at(s);
        MatrixXd w1 = MatrixXd::Zero(2, J);
        for (std::size_t j = 0; j < labels.size(); ++j) {
            w0.row(labels[j]) += nets[s].w0.row(static_cast<Eigen::Index>(j)) / 3.0;
            w1.col(labels[j]) = nets[s].w1.col(static_cast<Eigen::Index>(j));
        }
        outputs.push_back(w1);
    }
    const MatrixXd w1 = weighted_output_layer(outputs, props).weights;
    REQUIRE(r.global.layers.size() == 2);
    CHECK(r.global.layers[0].rows() == J);
    CHECK((r.global.layers[0] - w0).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((r.global.layers[1] - w1).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(r.rounds == 2);
}

TEST_CASE("count-normalized averaging divides by support") {
    std::mt19937_64 rng(5);
    LayeredWeights a = random_stack(rng, {3, 4, 2}, false, 0);
    LayeredWeights b = a;
    b.client_id = 1;
    // Client b lacks hidden unit 3 entirely; units 0-2 are shared.
    b.layers[0].conservativeResize(3, Eigen::NoChange);
    b.layers[1].conservativeResize(Eigen::NoChange, 3);
    FusionOptions opt = tight_options();
    const FusionResult plain = fuse_layerwise({a, b}, tight_config(), no_op_hook(), opt);
    opt.count_normalized = true;
    const FusionResult normed = fuse_layerwise({a, b}, tight_config(), no_op_hook(), opt);
    REQUIRE(plain.global.layers[0].rows() == 4);
    const int lone = plain.assignments[0][0][3];
    CHECK((plain.global.layers[0].row(lone) - 0.5 * a.layers[0].row(3)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((normed.global.layers[0].row(lone) - a.layers[0].row(3)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("retrain hook sees the frozen prefix and may replace the rest") {
    std::mt19937_64 rng(6);
    const LayeredWeights c = random_stack(rng, {3, 4, 4, 2}, false);
    int calls = 0;
    RetrainHook hook = [&](ClientId, const std::vector<MatrixXd>& prefix, const std::vector<MatrixXd>& rest) {
        ++calls;
        CHECK(prefix.size() + rest.size() == 3);
        std::vector<MatrixXd> out = rest;
        for (auto& m : out) m.setZero();
        return out;
    };
    const FusionResult r = fuse_layerwise({c}, tight_config(), hook, tight_options());
    CHECK(calls == 2);
    CHECK(r.global.layers.back().isZero());

    RetrainHook bad = [](ClientId, const std::vector<MatrixXd>&, const std::vector<MatrixXd>& rest) {
        std::vector<MatrixXd> out = rest;
        out.pop_back();
        return out;
    };
    CHECK_THROWS_AS(fuse_layerwise({c}, tight_config(), bad, tight_options()), DimensionError);
}

TEST_CASE("fusion rejects inconsistent clients") {
    std::mt19937_64 rng(7);
    const LayeredWeights a = random_stack(rng, {3, 4, 2}, false, 0);
    LayeredWeights deeper = random_stack(rng, {3, 4, 4, 2}, false, 1);
    CHECK_THROWS_AS(fuse_layerwise({a, deeper}, tight_config()), DimensionError);
    LayeredWeights wide = random_stack(rng, {5, 4, 2}, false, 1);
    CHECK_THROWS_AS(fuse_layerwise({a, wide}, tight_config()), DimensionError);
    LayeredWeights with_bn = a;
    with_bn.client_id = 1;
    with_bn.bn = {random_bn(rng, 4), std::nullopt};
    CHECK_THROWS(fuse_layerwise({a, with_bn}, tight_config()));
    CHECK_THROWS(fuse_layerwise({}, tight_config()));
}

TEST_CASE("folding an identity batch norm changes nothing") {
    std::mt19937_64 rng(8);
    const MatrixXd w = random_matrix(rng, 4, 3);
    const VectorXd b = random_matrix(rng, 4, 1);
    BnParams bn;
    bn.eps = 1e-5;
    bn.gamma = VectorXd::Ones(4);
    bn.beta = VectorXd::Zero(4);
    bn.mean = VectorXd::Zero(4);
    bn.var = VectorXd::Constant(4, 1.0 - bn.eps);
    const FoldedLayer f = fold_bn(w, b, bn);
    CHECK((f.weights - w).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((f.bias - b).cwiseAbs().maxCoeff() < 1e-15);

    bn.gamma.setZero();
    bn.beta = random_matrix(rng, 4, 1);
    const FoldedLayer z = fold_bn(w, b, bn);
    CHECK(z.weights.isZero());
    CHECK(z.bias == bn.beta);
}

TEST_CASE("folded layer equals affine then batch norm") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 5; ++t) {
        const MatrixXd w = random_matrix(rng, 6, 4);
        const VectorXd b = random_matrix(rng, 6, 1);
        const BnParams bn = random_bn(rng, 6);
        const FoldedLayer f = fold_bn(w, b, bn);
        double gap = 0.0;
        for (int i = 0; i < 100; ++i) {
            const VectorXd x = random_matrix(rng, 4, 1);
            const VectorXd z = w * x + b;
            VectorXd expected(6);
            for (int c = 0; c < 6; ++c)
                expected[c] = bn.gamma[c] * (z[c] - bn.mean[c]) / std::sqrt(bn.var[c] + bn.eps) + bn.beta[c];
            gap = std::max(gap, (f.weights * x + f.bias - expected).cwiseAbs().maxCoeff());
        }
        CHECK(gap <= 1e-9);
    }
    BnParams bad = random_bn(rng, 6);
    bad.var[0] = -1.0;
    CHECK_THROWS(fold_bn(random_matrix(rng, 6, 4), VectorXd::Zero(6), bad));
    CHECK_THROWS(fold_bn(random_matrix(rng, 5, 4), VectorXd::Zero(5), random_bn(rng, 6)));
}

TEST_CASE("folding every block preserves the network function") {
    std::mt19937_64 rng(10);
    for (bool bias : {false, true}) {
        LayeredWeights net = random_stack(rng, {3, 5, 4, 2}, bias);
        net.bn = {random_bn(rng, 5), std::nullopt, random_bn(rng, 2)};
        CHECK(net.has_bn());
        const LayeredWeights folded = fold_all_bn(net);
        CHECK_FALSE(folded.has_bn());
        CHECK(folded.has_bias());
        CHECK(max_forward_gap(folded, net, rng) <= 1e-9);
    }
}

TEST_CASE("fcnn view as a layered stack") {
    std::mt19937_64 rng(11);
    Fcnn f;
    f.w0 = random_matrix(rng, 4, 3);
    f.w1 = random_matrix(rng, 2, 4);
    const LayeredWeights l = layered_from_fcnn(f, 7);
    CHECK(l.client_id == 7);
    CHECK(l.depth() == 2);
    for (int i = 0; i < 20; ++i) {
        const VectorXd x = random_matrix(rng, 3, 1);
        CHECK((forward(l, x) - forward(f, x)).cwiseAbs().maxCoeff() < 1e-13);
    }
}
