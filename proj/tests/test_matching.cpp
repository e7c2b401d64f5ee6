#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "nafi/generative.hpp"
#include "nafi/lap.hpp"
#include "nafi/matching.hpp"

#include <cmath>
#include <random>

using namespace nafi;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

LocalModelNeurons client(ClientId id, const MatrixXd& neurons, double s2 = 1.0) {
    return LocalModelNeurons{id, neurons, s2};
}

MatrixXd random_matrix(std::mt19937_64& rng, int r, int c, double sd) {
    std::normal_distribution<double> normal(0.0, sd);
    MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = normal(rng);
    return m;
}

FederationParams low_noise(std::uint64_t seed, double sigma_s = 0.01) {
    FederationParams p;
    p.num_clients = 4;
    p.dim = 12;
    p.sigma0_sq = 9.0;
    p.sigma_s_sq = sigma_s * sigma_s;
    p.seed = seed;
    p.selection = SelectionMode::bernoulli(0.7, 8);
    return p;
}

/// Independent scalar evaluation of the existing-atom and new-atom cost
/// branches with a zero prior mean.
double scalar_existing(double S, double n, double data_sum, double data_prec, double w, double s2, double s0) {
    const double ws = data_sum, p = 1.0 / s0 + data_prec;
    return 2.0 * std::log((S - n) / n) - std::pow(ws + w / s2, 2) / (p + 1.0 / s2) + ws * ws / p;
}

double scalar_new(double S, int k, double gamma0, double w, double s2, double s0) {
    return 2.0 * std::log(k / (gamma0 / S)) - std::pow(w / s2, 2) / (1.0 / s0 + 1.0 / s2);
}

} // namespace

TEST_CASE("all-zero single new row costs nothing") {
    MatchConfig cfg;
    cfg.sigma0_sq = 1.0;
    cfg.gamma0 = 1.0;
    const CostMatrix c = build_cost_pfnm(AssignmentState{}, client(0, MatrixXd::Zero(1, 1)), 1, cfg);
    REQUIRE(c.entries.rows() == 1);
    REQUIRE(c.entries.cols() == 1);
    CHECK(c.existing_rows == 0);
    CHECK(c.new_rows == 1);
    CHECK(c.entries(0, 0) == 0.0);
}

TEST_CASE("scalar cost column with one existing atom") {
    MatchConfig cfg;
    cfg.sigma0_sq = 1.0;
    cfg.gamma0 = 1.0;
    AssignmentState state;
    state = assign_client(state, client(0, MatrixXd::Constant(1, 1, 2.0)), 2, cfg);
    REQUIRE(state.num_atoms() == 1);
    const CostMatrix c = build_cost_pfnm(state, client(1, MatrixXd::Constant(1, 1, 2.0)), 2, cfg);
    REQUIRE(c.entries.rows() == 2);
    // existing: 2 log 1 - (2+2)^2/3 + 2^2/2 = -10/3; new: 2 log 2 - 2^2/2
    CHECK(c.entries(0, 0) == doctest::Approx(-10.0 / 3.0));
    CHECK(c.entries(1, 0) == doctest::Approx(2.0 * std::log(2.0) - 2.0));
    CHECK(c.entries(0, 0) == doctest::Approx(scalar_existing(2, 1, 2.0, 1.0, 2.0, 1.0, 1.0)));
    CHECK(c.entries(1, 0) == doctest::Approx(scalar_new(2, 1, 1.0, 2.0, 1.0, 1.0)));
}

TEST_CASE("new-row prior cost grows with the new-row index") {
    MatchConfig cfg;
    cfg.gamma0 = 2.0;
    cfg.sigma0_sq = 4.0;
    std::mt19937_64 rng(4);
    const MatrixXd w = random_matrix(rng, 4, 1, 1.0);
    const CostMatrix c = build_cost_pfnm(AssignmentState{}, client(0, w, 0.5), 3, cfg);
    for (int k = 1; k <= 4; ++k)
        for (int j = 0; j < 4; ++j)
            CHECK(c.entries(k - 1, j) == doctest::Approx(scalar_new(3, k, 2.0, w(j, 0), 0.5, 4.0)));
}

TEST_CASE("nonzero prior mean enters the new-row constant") {
    MatchConfig cfg;
    cfg.sigma0_sq = 2.0;
    cfg.prior_mean = VectorXd::Constant(1, 3.0);
    const CostMatrix c = build_cost_pfnm(AssignmentState{}, client(0, MatrixXd::Constant(1, 1, 1.0)), 1, cfg);
    // 2 log(1/1) - (3/2 + 1)^2 / (1/2 + 1) + (3/2)^2 * 2
    CHECK(c.entries(0, 0) == doctest::Approx(-6.25 / 1.5 + 4.5));
}

TEST_CASE("nafi with lambda zero equals pfnm entrywise") {
    std::mt19937_64 rng(6);
    MatchConfig cfg;
    AssignmentState state;
    for (int s = 0; s < 3; ++s) state = assign_client(state, client(s, random_matrix(rng, 4, 5, 1.0)), 4, cfg);
    const auto local = client(3, random_matrix(rng, 3, 5, 1.0));
    MatchConfig nafi = cfg;
    nafi.algorithm = Algorithm::nafi;
    nafi.lambda = 0.0;
    CHECK(build_cost_nafi(state, local, 4, nafi).entries == build_cost_pfnm(state, local, 4, cfg).entries);
}

TEST_CASE("nafi entries add lambda times the posterior kl") {
    std::mt19937_64 rng(7);
    MatchConfig cfg;
    cfg.sigma0_sq = 3.0;
    AssignmentState state;
    for (int s = 0; s < 3; ++s) state = assign_client(state, client(s, random_matrix(rng, 3, 4, 1.0), 0.4), 4, cfg);
    const auto local = client(3, random_matrix(rng, 3, 4, 1.0), 0.4);
    MatchConfig nafi = cfg;
    nafi.algorithm = Algorithm::nafi;
    nafi.lambda = 0.3;
    const CostMatrix p = build_cost_pfnm(state, local, 4, cfg);
    const CostMatrix n = build_cost_nafi(state, local, 4, nafi);

    // KL between isotropic Gaussians, written out independently.
    auto kl = [](const VectorXd& m1, double v1, const VectorXd& m2, double v2) {
        const double d = static_cast<double>(m1.size());
        return 0.5 * (d * v1 / v2 + (m2 - m1).squaredNorm() / v2 - d + d * std::log(v2 / v1));
    };
    for (int i = 0; i < p.existing_rows; ++i) {
        const auto& a = state.atoms[i];
        for (int j = 0; j < 3; ++j) {
            const double prec2 = a.precision + 1.0 / 0.4;
            const VectorXd m2 = (a.weighted_sum + local.neurons.row(j).transpose() / 0.4) / prec2;
            const double expected = kl(a.weighted_sum / a.precision, 1.0 / a.precision, m2, 1.0 / prec2);
            CHECK(n.entries(i, j) - p.entries(i, j) == doctest::Approx(0.3 * expected).epsilon(1e-10));
        }
    }
    for (int k = 0; k < p.new_rows; ++k)
        for (int j = 0; j < 3; ++j) {
            const double prec2 = 1.0 / 3.0 + 1.0 / 0.4;
            const VectorXd m2 = (local.neurons.row(j).transpose() / 0.4) / prec2;
            const double expected = kl(VectorXd::Zero(4), 3.0, m2, 1.0 / prec2);
            CHECK(n.entries(p.existing_rows + k, j) - p.entries(p.existing_rows + k, j) ==
                  doctest::Approx(0.3 * expected).epsilon(1e-10));
        }
}

TEST_CASE("kl penalty prefers the atom whose mean is closer") {
    MatchConfig cfg;
    cfg.algorithm = Algorithm::nafi;
    cfg.lambda = 1.0;
    AssignmentState state;
    MatrixXd near(2, 2);
    near << 1.0, 1.0,
            5.0, 5.0;
    state = assign_client(state, client(0, near), 3, cfg);
    REQUIRE(state.num_atoms() == 2);
    MatchConfig pfnm = cfg;
    pfnm.lambda = 0.0;
    const auto local = client(1, MatrixXd::Constant(1, 2, 1.0));
    const MatrixXd penalty = build_cost_nafi(state, local, 3, cfg).entries - build_cost_pfnm(state, local, 3, pfnm).entries;
    CHECK(penalty(0, 0) < penalty(1, 0));
}

TEST_CASE("cost construction detects invariant violations") {
    MatchConfig cfg;
    AssignmentState state;
    state = assign_client(state, client(0, MatrixXd::Identity(2, 2)), 2, cfg);
    CHECK_THROWS_AS(build_cost_pfnm(state, client(0, MatrixXd::Identity(2, 2)), 2, cfg), InvariantError);
    AssignmentState broken = state;
    broken.atoms[0].count = 0;
    CHECK_THROWS_AS(build_cost_pfnm(broken, client(1, MatrixXd::Identity(2, 2)), 2, cfg), InvariantError);
    CHECK_THROWS_AS(build_cost_pfnm(state, client(1, MatrixXd::Identity(2, 2)), 1, cfg), InvariantError);
}

TEST_CASE("check_invariants catches bad states") {
    MatchConfig cfg;
    AssignmentState state = assign_client(AssignmentState{}, client(0, MatrixXd::Identity(3, 3)), 2, cfg);
    CHECK_NOTHROW(state.check_invariants());
    AssignmentState dup = state;
    dup.per_client[0][1] = dup.per_client[0][0];
    CHECK_THROWS_AS(dup.check_invariants(), InvariantError);
    AssignmentState range = state;
    range.per_client[0][2] = 17;
    CHECK_THROWS_AS(range.check_invariants(), InvariantError);
}

TEST_CASE("first client creates one atom per neuron") {
    MatchConfig cfg;
    cfg.sigma0_sq = 2.0;
    std::mt19937_64 rng(9);
    const MatrixXd w = random_matrix(rng, 5, 3, 1.0);
    const AssignmentState state = assign_client(AssignmentState{}, client(0, w, 0.5), 3, cfg);
    REQUIRE(state.num_atoms() == 5);
    const MatrixXd global = extract_global(state);
    // posterior mean of N(0, 2) after one observation with variance 0.5
    for (int j = 0; j < 5; ++j)
        CHECK((global.row(state.per_client.at(0)[j]) - w.row(j) * (2.0 / 2.5)).norm() <= 1e-12);
}

TEST_CASE("identical low-noise clients match every neuron") {
    std::mt19937_64 rng(10);
    const MatrixXd w = random_matrix(rng, 6, 8, 3.0);
    MatchConfig cfg;
    AssignmentState state;
    state = assign_client(state, client(0, w, 1e-4), 2, cfg);
    state = assign_client(state, client(1, w, 1e-4), 2, cfg);
    CHECK(state.num_atoms() == 6);
    CHECK(state.per_client.at(0) == state.per_client.at(1));
}

TEST_CASE("reassigning a client with nothing else changed is idempotent") {
    const SyntheticFederation fed = generate_federation(low_noise(3, 0.3));
    MatchConfig cfg;
    cfg.sigma0_sq = 9.0;
    AssignmentState state;
    for (const auto& l : fed.locals) state = assign_client(state, l, 4, cfg);
    const AssignmentState once = assign_client(state, fed.locals[2], 4, cfg);
    const AssignmentState twice = assign_client(once, fed.locals[2], 4, cfg);
    CHECK(once.canonical_labels() == twice.canonical_labels());
}

TEST_CASE("one client: global model is the per-neuron posterior mean") {
    std::mt19937_64 rng(12);
    const MatrixXd w = random_matrix(rng, 4, 3, 1.0);
    MatchConfig cfg;
    const MatchResult r = run_matching({client(5, w, 1.0)}, cfg);
    CHECK(r.state.num_atoms() == 4);
    CHECK(r.converged);
    for (int j = 0; j < 4; ++j)
        CHECK((r.global.row(r.state.per_client.at(5)[j]) - w.row(j) * (10.0 / 11.0)).norm() <= 1e-12);
}

TEST_CASE("low-noise federation is recovered exactly") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const SyntheticFederation fed = generate_federation(low_noise(seed));
        for (Algorithm a : {Algorithm::nafi, Algorithm::pfnm}) {
            MatchConfig cfg;
            cfg.sigma0_sq = 9.0;
            cfg.algorithm = a;
            cfg.lambda = a == Algorithm::nafi ? 0.01 : 0.0;
            const MatchResult r = run_matching(fed.locals, cfg);
            if (a == Algorithm::nafi) {
                const RecoveryMetrics m = recovery_metrics(fed, r.state);
                CHECK(m.ari == 1.0);
                CHECK(m.count_error == 0);
            }
            CHECK(r.state.num_atoms() <= fed.total_local_neurons());
        }
    }
}

TEST_CASE("lambda zero nafi run equals the pfnm run") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const SyntheticFederation fed = generate_federation(low_noise(seed, 1.0));
        MatchConfig p;
        p.sigma0_sq = 9.0;
        p.client_order = ClientOrder::shuffled;
        p.seed = seed;
        MatchConfig n = p;
        n.algorithm = Algorithm::nafi;
        n.lambda = 0.0;
        const MatchResult a = run_matching(fed.locals, p);
        const MatchResult b = run_matching(fed.locals, n);
        CHECK(a.state.per_client == b.state.per_client);
        CHECK(a.global == b.global);
        CHECK(a.passes == b.passes);
    }
}

TEST_CASE("each client update does not increase its conditional objective") {
    // Oracle: data term of the whole state plus the client's IBP terms as the
    // last customer (existing atoms it joins, then its k-th new atom).
    auto step_objective = [](const AssignmentState& st, ClientId c, int S, const MatchConfig& cfg) {
        const Gaussiand prior = cfg.prior(st.atoms.front().dim());
        double value = 0.0;
        int fresh = 0;
        for (const auto& atom : st.atoms) {
            value += sms(prior) - atom.weighted_sum.squaredNorm() / atom.precision;
            if (!atom.supporting_clients.count(c)) continue;
            const int n = atom.count - 1;
            value += n > 0 ? 2.0 * std::log(double(S - n) / n) : 2.0 * std::log(++fresh * S / cfg.gamma0);
        }
        return value;
    };
    int steps = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        FederationParams params = low_noise(100 + seed, 1.5);
        params.num_clients = 6;
        const SyntheticFederation fed = generate_federation(params);
        MatchConfig cfg;
        cfg.sigma0_sq = 9.0;
        AssignmentState state;
        for (const auto& l : fed.locals) state = assign_client(state, l, 6, cfg);
        for (int pass = 0; pass < 5; ++pass)
            for (const auto& l : fed.locals) {
                const double before = step_objective(state, l.client_id, 6, cfg);
                state = assign_client(state, l, 6, cfg);
                const double after = step_objective(state, l.client_id, 6, cfg);
                CHECK(after <= before + 1e-8 * (1.0 + std::abs(before)));
                ++steps;
            }
    }
    MESSAGE("client updates checked: " << steps);
}

// Each update minimises the client's conditional objective with the other
// clients' prior term held fixed; that term differs from client to client, so
// the joint objective has no exact descent guarantee. Expected to report
// occasional small increases.
TEST_CASE("pfnm objective does not increase across passes" * doctest::may_fail()) {
    int multi_pass = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        FederationParams params = low_noise(100 + seed, 1.5);
        params.num_clients = 6;
        const SyntheticFederation fed = generate_federation(params);
        MatchConfig cfg;
        cfg.sigma0_sq = 9.0;
        cfg.max_passes = 20;
        const MatchResult r = run_matching(fed.locals, cfg);
        if (r.objective_trace.size() > 2) ++multi_pass;
        for (std::size_t t = 1; t < r.objective_trace.size(); ++t)
            CHECK(r.objective_trace[t] <= r.objective_trace[t - 1] + 1e-8 * (1.0 + std::abs(r.objective_trace[t - 1])));
    }
    MESSAGE("instances needing more than two passes: " << multi_pass);
}

namespace {

/// The same assignment with every variance multiplied by `factor`.
AssignmentState rescaled(const AssignmentState& state, const MatchConfig& cfg, Eigen::Index dim, double factor) {
    AssignmentState out = state;
    for (auto& atom : out.atoms) atom = AtomStatsd::from_prior(cfg.prior(dim));
    for (auto& [c, obs] : out.client_obs) {
        const auto& labels = out.per_client.at(c);
        for (std::size_t j = 0; j < obs.size(); ++j) {
            obs[j].sigma_sq *= factor;
            out.atoms[labels[j]] = add_observation(std::move(out.atoms[labels[j]]), obs[j].w, obs[j].sigma_sq, c);
        }
    }
    return out;
}

/// Counts LAPs (over three passes of `algorithm`) whose argmin changes when
/// every variance is doubled on the same state.
std::pair<int, int> scale_flips(double matcher_sigma0_sq, Algorithm algorithm) {
    int laps = 0, flips = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const SyntheticFederation fed = generate_federation(low_noise(seed));
        MatchConfig a;
        a.algorithm = algorithm;
        a.lambda = algorithm == Algorithm::nafi ? 0.01 : 0.0;
        a.sigma0_sq = matcher_sigma0_sq;
        MatchConfig b = a;
        b.sigma0_sq = 2.0 * a.sigma0_sq;
        for (const auto& l : fed.locals) b.sigma_sq[l.client_id] = 2.0 * l.sigma_sq;
        AssignmentState state;
        for (int pass = 0; pass < 3; ++pass)
            for (const auto& l : fed.locals) {
                AssignmentState minus = state;
                remove_client(minus, l.client_id);
                const auto ra = solve_lap(build_cost(minus, l, 4, a).entries).row_of_col;
                const auto rb =
                    solve_lap(build_cost(rescaled(minus, b, 12, 2.0), l, 4, b).entries).row_of_col;
                ++laps;
                if (ra != rb) ++flips;
                state = assign_client(std::move(state), l, 4, a);
            }
    }
    return {flips, laps};
}

} // namespace

TEST_CASE("doubling all variances leaves each low-noise lap argmin unchanged") {
    // Atoms spread well beyond the matcher prior: data gaps dominate the
    // log-prior terms, so halving them cannot reorder the optimum.
    for (Algorithm alg : {Algorithm::pfnm, Algorithm::nafi}) {
        const auto [flips, laps] = scale_flips(1.0, alg);
        CHECK(laps == 120);
        CHECK(flips == 0);
    }
    // With the matcher prior equal to the generating prior the existing-atom
    // and new-atom data gains nearly cancel and the log terms decide, so the
    // argmin is not scale-stable there.
    const auto [flips, laps] = scale_flips(9.0, Algorithm::pfnm);
    MESSAGE("matched-prior suite: " << flips << " of " << laps << " argmins change");
}

TEST_CASE("identical clients with low noise give J = J_s") {
    std::mt19937_64 rng(13);
    const MatrixXd w = random_matrix(rng, 7, 10, 3.0);
    std::vector<LocalModelNeurons> locals;
    for (int s = 0; s < 5; ++s) locals.push_back(client(s, w, 1e-4));
    const MatchResult r = run_matching(locals, MatchConfig{});
    CHECK(r.state.num_atoms() == 7);
}

TEST_CASE("shuffled order is reproducible for a fixed seed") {
    const SyntheticFederation fed = generate_federation(low_noise(8, 1.0));
    MatchConfig cfg;
    cfg.client_order = ClientOrder::shuffled;
    cfg.seed = 77;
    const MatchResult a = run_matching(fed.locals, cfg);
    const MatchResult b = run_matching(fed.locals, cfg);
    CHECK(a.state.per_client == b.state.per_client);
    CHECK(a.objective_trace == b.objective_trace);
}

TEST_CASE("extract_global with two observations on one atom") {
    MatchConfig cfg;
    cfg.sigma0_sq = 1.0;
    AssignmentState state;
    state = assign_client(state, client(0, MatrixXd::Constant(1, 1, 1.0), 1e-3), 2, cfg);
    state = assign_client(state, client(1, MatrixXd::Constant(1, 1, 1.02), 1e-3), 2, cfg);
    REQUIRE(state.num_atoms() == 1);
    // (1/1e-3 + 1.02/1e-3) / (1 + 2/1e-3)
    CHECK(extract_global(state)(0, 0) == doctest::Approx(2020.0 / 2001.0).epsilon(1e-12));
}

TEST_CASE("extract_global is equivariant under atom relabeling") {
    const SyntheticFederation fed = generate_federation(low_noise(4, 0.5));
    const MatchResult r = run_matching(fed.locals, MatchConfig{});
    AssignmentState swapped = r.state;
    REQUIRE(swapped.num_atoms() >= 2);
    std::swap(swapped.atoms[0], swapped.atoms[1]);
    for (auto& [id, labels] : swapped.per_client)
        for (int& a : labels) a = a == 0 ? 1 : (a == 1 ? 0 : a);
    CHECK_NOTHROW(swapped.check_invariants());
    const MatrixXd g = extract_global(swapped);
    CHECK(g.row(0) == r.global.row(1));
    CHECK(g.row(1) == r.global.row(0));
    CHECK(swapped.canonical_labels() == r.state.canonical_labels());
}

TEST_CASE("run_matching rejects inconsistent input") {
    CHECK_THROWS_AS(run_matching({client(0, MatrixXd::Zero(2, 3)), client(1, MatrixXd::Zero(2, 4))}, MatchConfig{}),
                    DimensionError);
    CHECK_THROWS_AS(run_matching({client(0, MatrixXd::Zero(2, 3)), client(0, MatrixXd::Zero(2, 3))}, MatchConfig{}),
                    std::invalid_argument);
    CHECK_THROWS_AS(run_matching({}, MatchConfig{}), std::invalid_argument);
    MatchConfig bad;
    bad.gamma0 = 0.0;
    CHECK_THROWS_AS(run_matching({client(0, MatrixXd::Zero(2, 3))}, bad), std::invalid_argument);
}
