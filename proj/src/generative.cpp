#include "nafi/generative.hpp"

#include "nafi/lap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>

namespace nafi {
namespace {

int poisson(double mean, Rng& rng) {
    if (mean <= 0.0) return 0;
    return std::poisson_distribution<int>(mean)(rng);
}

} // namespace

StickWeights sample_stick_breaking(double gamma0, int truncation, std::uint64_t seed) {
    if (!(gamma0 > 0.0)) throw std::invalid_argument("sample_stick_breaking: gamma0 must be positive");
    if (truncation < 1) throw std::invalid_argument("sample_stick_breaking: truncation must be >= 1");
    Rng rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    StickWeights out;
    out.truncation = truncation;
    out.weights.reserve(truncation);
    // Beta(gamma0, 1) by inversion: v = u^(1/gamma0), accumulated in log space.
    double log_q = 0.0;
    for (int g = 0; g < truncation; ++g) {
        const double u = 1.0 - unif(rng); // (0, 1]
        log_q += std::log(u) / gamma0;
        out.weights.push_back(std::max(std::exp(log_q), std::numeric_limits<double>::min()));
    }
    return out;
}

BinaryMatrix sample_ibp(double gamma0, int num_customers, Rng& rng) {
    if (num_customers < 1) throw std::invalid_argument("sample_ibp: need at least one customer");
    if (gamma0 < 0.0) throw std::invalid_argument("sample_ibp: gamma0 must be nonnegative");
    std::vector<std::vector<std::uint8_t>> rows(num_customers);
    std::vector<int> dish_counts;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int s = 1; s <= num_customers; ++s) {
        auto& row = rows[s - 1];
        row.assign(dish_counts.size(), 0);
        for (std::size_t i = 0; i < dish_counts.size(); ++i)
            if (unif(rng) < static_cast<double>(dish_counts[i]) / s) row[i] = 1;
        const int fresh = poisson(gamma0 / s, rng);
        row.insert(row.end(), fresh, 1);
        dish_counts.resize(row.size(), 0);
        for (std::size_t i = 0; i < row.size(); ++i) dish_counts[i] += row[i];
    }
    BinaryMatrix out = BinaryMatrix::Zero(num_customers, static_cast<Eigen::Index>(dish_counts.size()));
    for (int s = 0; s < num_customers; ++s)
        for (std::size_t i = 0; i < rows[s].size(); ++i) out(s, static_cast<Eigen::Index>(i)) = rows[s][i];
    return out;
}

BinaryMatrix sample_ibp(double gamma0, int num_customers, std::uint64_t seed) {
    Rng rng(seed);
    return sample_ibp(gamma0, num_customers, rng);
}

int SyntheticFederation::total_local_neurons() const {
    int total = 0;
    for (const auto& l : locals) total += static_cast<int>(l.neurons.rows());
    return total;
}

SyntheticFederation generate_federation(const FederationParams& params) {
    if (params.num_clients < 1) throw std::invalid_argument("generate_federation: need S >= 1");
    if (params.dim < 1) throw std::invalid_argument("generate_federation: need dim >= 1");
    if (!(params.sigma0_sq > 0.0) || !(params.sigma_s_sq >= 0.0))
        throw std::invalid_argument("generate_federation: sigma0_sq must be positive, sigma_s_sq nonnegative");
    if (params.max_selection_attempts < 1)
        throw std::invalid_argument("generate_federation: max_selection_attempts must be positive");
    if (params.selection.kind == SelectionMode::Kind::bernoulli) {
        const auto& mode = params.selection;
        if (mode.num_atoms < 1 || mode.p < 0.0 || mode.p > 1.0)
            throw std::invalid_argument("generate_federation: bad bernoulli selection parameters");
    }
    const int S = params.num_clients;
    Rng rng(params.seed);

    // Selection draws repeat (from the same stream) until every client holds
    // at least one atom.
    BinaryMatrix selection;
    std::string problem;
    for (int attempt = 0; attempt < params.max_selection_attempts; ++attempt) {
        problem.clear();
        if (params.selection.kind == SelectionMode::Kind::ibp) {
            selection = sample_ibp(params.gamma0, S, rng);
        } else {
            std::bernoulli_distribution coin(params.selection.p);
            selection.resize(S, params.selection.num_atoms);
            for (int s = 0; s < S; ++s)
                for (int i = 0; i < params.selection.num_atoms; ++i) selection(s, i) = coin(rng) ? 1 : 0;
        }
        std::vector<Eigen::Index> kept;
        for (Eigen::Index i = 0; i < selection.cols(); ++i)
            if (selection.col(i).cast<int>().sum() > 0) kept.push_back(i);
        if (static_cast<Eigen::Index>(kept.size()) != selection.cols()) {
            BinaryMatrix compact(S, static_cast<Eigen::Index>(kept.size()));
            for (std::size_t c = 0; c < kept.size(); ++c)
                compact.col(static_cast<Eigen::Index>(c)) = selection.col(kept[c]);
            selection = std::move(compact);
        }
        for (int s = 0; s < S && problem.empty(); ++s)
            if (selection.row(s).cast<int>().sum() == 0) problem = "client " + std::to_string(s) + " selected no atoms";
        if (problem.empty()) break;
    }
    if (!problem.empty())
        throw DegenerateInstance(problem + " in each of " + std::to_string(params.max_selection_attempts) +
                                 " selection draws");

    const int J = static_cast<int>(selection.cols());
    SyntheticFederation fed;
    fed.params = params;
    fed.selection = selection;

    std::normal_distribution<double> normal(0.0, 1.0);
    const double sd0 = std::sqrt(params.sigma0_sq);
    const double sds = std::sqrt(params.sigma_s_sq);
    fed.atoms.resize(J, params.dim);
    for (int i = 0; i < J; ++i)
        for (int d = 0; d < params.dim; ++d) fed.atoms(i, d) = sd0 * normal(rng);

    for (int s = 0; s < S; ++s) {
        std::vector<int> chosen;
        for (int i = 0; i < J; ++i)
            if (selection(s, i)) chosen.push_back(i);
        const int Js = static_cast<int>(chosen.size());
        Eigen::MatrixXd noisy(Js, params.dim);
        for (int r = 0; r < Js; ++r)
            for (int d = 0; d < params.dim; ++d) noisy(r, d) = fed.atoms(chosen[r], d) + sds * normal(rng);
        std::vector<int> perm(Js);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);

        LocalModelNeurons local;
        local.client_id = s;
        local.sigma_sq = params.sigma_s_sq;
        local.neurons.resize(Js, params.dim);
        std::vector<int> truth(Js);
        for (int j = 0; j < Js; ++j) {
            local.neurons.row(j) = noisy.row(perm[j]);
            truth[j] = chosen[perm[j]];
        }
        fed.permutations.push_back(std::move(perm));
        fed.truth_assignment.push_back(std::move(truth));
        fed.locals.push_back(std::move(local));
    }
    return fed;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw DimensionError("adjusted_rand_index: label vectors differ in length");
    const double n = static_cast<double>(a.size());
    if (a.size() < 2) return 1.0;
    auto choose2 = [](double x) { return x * (x - 1.0) / 2.0; };

    std::map<std::pair<int, int>, int> joint;
    std::map<int, int> rows, cols;
    for (std::size_t k = 0; k < a.size(); ++k) {
        ++joint[{a[k], b[k]}];
        ++rows[a[k]];
        ++cols[b[k]];
    }
    double index = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, c] : joint) index += choose2(c);
    for (const auto& [key, c] : rows) sum_a += choose2(c);
    for (const auto& [key, c] : cols) sum_b += choose2(c);
    const double expected = sum_a * sum_b / choose2(n);
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return index == max_index ? 1.0 : 0.0;
    return (index - expected) / (max_index - expected);
}

RecoveryMetrics recovery_metrics(const SyntheticFederation& truth, const AssignmentState& inferred) {
    std::vector<int> true_labels, inferred_labels;
    for (std::size_t s = 0; s < truth.locals.size(); ++s) {
        const ClientId id = truth.locals[s].client_id;
        auto it = inferred.per_client.find(id);
        if (it == inferred.per_client.end())
            throw DimensionError("recovery_metrics: client " + std::to_string(id) + " missing from assignment");
        if (it->second.size() != truth.truth_assignment[s].size())
            throw DimensionError("recovery_metrics: neuron count mismatch for client " + std::to_string(id));
        true_labels.insert(true_labels.end(), truth.truth_assignment[s].begin(), truth.truth_assignment[s].end());
        inferred_labels.insert(inferred_labels.end(), it->second.begin(), it->second.end());
    }
    if (inferred.per_client.size() != truth.locals.size())
        throw DimensionError("recovery_metrics: client count mismatch");

    RecoveryMetrics m;
    m.ari = adjusted_rand_index(true_labels, inferred_labels);
    m.true_atoms = truth.num_atoms();
    m.inferred_atoms = inferred.num_atoms();
    m.count_error = std::abs(m.inferred_atoms - m.true_atoms);

    std::map<int, std::set<std::size_t>> true_members, inferred_members;
    for (std::size_t k = 0; k < true_labels.size(); ++k) {
        true_members[true_labels[k]].insert(k);
        inferred_members[inferred_labels[k]].insert(k);
    }
    std::size_t exact = 0;
    for (std::size_t k = 0; k < true_labels.size(); ++k)
        if (true_members[true_labels[k]] == inferred_members[inferred_labels[k]]) ++exact;
    m.exact_match_rate = true_labels.empty() ? 1.0 : static_cast<double>(exact) / true_labels.size();

    const Eigen::MatrixXd global = extract_global(inferred);
    if (global.rows() > 0 && truth.atoms.rows() > 0) {
        const bool inferred_rows = global.rows() >= truth.atoms.rows();
        const Eigen::MatrixXd& big = inferred_rows ? global : truth.atoms;
        const Eigen::MatrixXd& small = inferred_rows ? truth.atoms : global;
        Eigen::MatrixXd dist(big.rows(), small.rows());
        for (Eigen::Index r = 0; r < big.rows(); ++r)
            for (Eigen::Index c = 0; c < small.rows(); ++c) dist(r, c) = (big.row(r) - small.row(c)).norm();
        m.mean_atom_distance = solve_lap_any(dist).total_cost / static_cast<double>(small.rows());
    }
    return m;
}

double log_size_ratio(int num_global, int total_local) {
    if (num_global < 1 || total_local < 1 || num_global > total_local)
        throw std::invalid_argument("log_size_ratio: need 1 <= J <= total");
    return std::log10(static_cast<double>(num_global) / total_local);
}

} // namespace nafi
