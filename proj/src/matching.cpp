#include "nafi/matching.hpp"

#include "nafi/lap.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <string>

namespace nafi {

Gaussiand MatchConfig::prior(Eigen::Index dim) const {
    if (prior_mean.size() == 0) return Gaussiand(Eigen::VectorXd::Zero(dim), sigma0_sq);
    detail::require_same_dim(prior_mean.size(), dim, "MatchConfig::prior");
    return Gaussiand(prior_mean, sigma0_sq);
}

void MatchConfig::validate() const {
    if (!(gamma0 > 0.0)) throw std::invalid_argument("gamma0 must be positive");
    if (!(sigma0_sq > 0.0)) throw std::invalid_argument("sigma0_sq must be positive");
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
    if (max_passes < 1) throw std::invalid_argument("max_passes must be at least 1");
    if (!(log_clamp > 0.0)) throw std::invalid_argument("log_clamp must be positive");
    for (const auto& [client, s] : sigma_sq)
        if (!(s > 0.0))
            throw std::invalid_argument("sigma_sq for client " + std::to_string(client) +
                                        " must be positive");
}

namespace {

double client_sigma_sq(const LocalModelNeurons& local, const MatchConfig& config) {
    if (auto it = config.sigma_sq.find(local.client_id); it != config.sigma_sq.end())
        return it->second;
    return local.sigma_sq;
}

double clamped_log(double x, double clamp) { return std::log(std::max(x, clamp)); }

void check_cost_inputs(const AssignmentState& state_minus, const LocalModelNeurons& local,
                       int num_clients, Eigen::Index dim) {
    if (local.neurons.rows() < 1) throw std::invalid_argument("client has no neurons");
    if (num_clients < 1) throw std::invalid_argument("number of clients must be positive");
    for (std::size_t i = 0; i < state_minus.atoms.size(); ++i) {
        const auto& atom = state_minus.atoms[i];
        detail::require_same_dim(atom.dim(), dim, "build_cost");
        if (atom.supporting_clients.contains(local.client_id))
            throw InvariantError("atom " + std::to_string(i) + " still holds client " +
                                 std::to_string(local.client_id));
        if (atom.count <= 0)
            throw InvariantError("atom " + std::to_string(i) + " has no support and was not pruned");
        if (atom.count >= num_clients)
            throw InvariantError("atom " + std::to_string(i) + " is supported by every other client" +
                                 " plus the current one");
    }
}

} // namespace

CostMatrix build_cost_pfnm(const AssignmentState& state_minus, const LocalModelNeurons& local,
                           int num_clients, const MatchConfig& config) {
    const Eigen::Index dim = local.neurons.cols();
    check_cost_inputs(state_minus, local, num_clients, dim);
    const Gaussiand prior = config.prior(dim);
    const double sigma_sq = client_sigma_sq(local, config);
    const double S = num_clients;

    const int existing = state_minus.num_atoms();
    const int fresh = static_cast<int>(local.neurons.rows());
    CostMatrix out;
    out.existing_rows = existing;
    out.new_rows = fresh;
    out.entries.resize(existing + fresh, fresh);

    const Eigen::MatrixXd scaled = local.neurons / sigma_sq;
    const double local_prec = 1.0 / sigma_sq;

    for (int i = 0; i < existing; ++i) {
        const auto& atom = state_minus.atoms[i];
        const double n = atom.count;
        const double prior_term = 2.0 * clamped_log((S - n) / n, config.log_clamp);
        const double old_sms = atom.weighted_sum.squaredNorm() / atom.precision;
        const double new_prec = atom.precision + local_prec;
        for (int j = 0; j < fresh; ++j) {
            const double new_sms =
                (atom.weighted_sum + scaled.row(j).transpose()).squaredNorm() / new_prec;
            out.entries(i, j) = prior_term - new_sms + old_sms;
        }
    }

    const double prior_prec = 1.0 / prior.variance();
    const Eigen::VectorXd prior_sum = prior.mean() * prior_prec;
    const double prior_sms = prior_sum.squaredNorm() * prior.variance();
    const double new_prec = prior_prec + local_prec;
    for (int k = 1; k <= fresh; ++k) {
        const double prior_term = 2.0 * clamped_log(k / (config.gamma0 / S), config.log_clamp);
        for (int j = 0; j < fresh; ++j) {
            const double new_sms = (prior_sum + scaled.row(j).transpose()).squaredNorm() / new_prec;
            out.entries(existing + k - 1, j) = prior_term - new_sms + prior_sms;
        }
    }
    return out;
}

CostMatrix build_cost_nafi(const AssignmentState& state_minus, const LocalModelNeurons& local,
                           int num_clients, const MatchConfig& config) {
    CostMatrix out = build_cost_pfnm(state_minus, local, num_clients, config);
    if (config.lambda == 0.0) return out;

    const Eigen::Index dim = local.neurons.cols();
    const double sigma_sq = client_sigma_sq(local, config);
    const Gaussiand prior = config.prior(dim);
    const AtomStatsd prior_stats = AtomStatsd::from_prior(prior);

    auto penalty = [&](const AtomStatsd& stats, int j) {
        const Gaussiand current = posterior_from_stats(stats);
        const Gaussiand updated = posterior_from_stats(
            add_observation(stats, local.neurons.row(j).transpose(), sigma_sq, local.client_id));
        return config.lambda * kl_isotropic(current, updated);
    };

    for (int i = 0; i < out.existing_rows; ++i)
        for (int j = 0; j < out.new_rows; ++j)
            out.entries(i, j) += penalty(state_minus.atoms[i], j);
    // The prior-side penalty does not depend on which new row is used.
    for (int j = 0; j < out.new_rows; ++j) {
        const double p = penalty(prior_stats, j);
        for (int k = 0; k < out.new_rows; ++k) out.entries(out.existing_rows + k, j) += p;
    }
    return out;
}

CostMatrix build_cost(const AssignmentState& state_minus, const LocalModelNeurons& local,
                      int num_clients, const MatchConfig& config) {
    return config.algorithm == Algorithm::nafi
               ? build_cost_nafi(state_minus, local, num_clients, config)
               : build_cost_pfnm(state_minus, local, num_clients, config);
}

void prune_atoms(AssignmentState& state) {
    std::vector<int> remap(state.atoms.size(), -1);
    std::vector<AtomStatsd> kept;
    kept.reserve(state.atoms.size());
    for (std::size_t i = 0; i < state.atoms.size(); ++i) {
        if (state.atoms[i].count > 0) {
            remap[i] = static_cast<int>(kept.size());
            kept.push_back(std::move(state.atoms[i]));
        }
    }
    state.atoms = std::move(kept);
    for (auto& [client, labels] : state.per_client)
        for (int& a : labels) {
            if (remap.at(a) < 0)
                throw InvariantError("client " + std::to_string(client) +
                                     " points at a pruned atom");
            a = remap[a];
        }
}

void remove_client(AssignmentState& state, ClientId client) {
    auto it = state.per_client.find(client);
    if (it == state.per_client.end()) return;
    const auto& obs = state.client_obs.at(client);
    for (std::size_t j = 0; j < it->second.size(); ++j) {
        auto& atom = state.atoms.at(it->second[j]);
        atom = remove_observation(std::move(atom), obs[j].w, obs[j].sigma_sq, client);
    }
    state.per_client.erase(it);
    state.client_obs.erase(client);
    prune_atoms(state);
}

AssignmentState assign_client(AssignmentState state, const LocalModelNeurons& local,
                              int num_clients, const MatchConfig& config) {
    remove_client(state, local.client_id);

    const CostMatrix cost = build_cost(state, local, num_clients, config);
    const LapSolution sol = solve_lap(cost.entries);

    const double sigma_sq = client_sigma_sq(local, config);
    const Gaussiand prior = config.prior(local.neurons.cols());
    const int existing = cost.existing_rows;
    const int fresh = cost.new_rows;

    // New atoms are appended in ascending new-row order.
    std::vector<int> new_row_atom(fresh, -1);
    {
        std::vector<char> used(fresh, 0);
        for (int r : sol.row_of_col)
            if (r >= existing) used[r - existing] = 1;
        for (int k = 0; k < fresh; ++k)
            if (used[k]) {
                new_row_atom[k] = static_cast<int>(state.atoms.size());
                state.atoms.push_back(AtomStatsd::from_prior(prior));
            }
    }

    std::vector<int> labels(fresh);
    std::vector<Observation> obs(fresh);
    for (int j = 0; j < fresh; ++j) {
        const int r = sol.row_of_col[j];
        const int atom = r < existing ? r : new_row_atom[r - existing];
        obs[j] = Observation{local.neurons.row(j).transpose(), sigma_sq};
        state.atoms[atom] = add_observation(std::move(state.atoms[atom]), obs[j].w, sigma_sq,
                                            local.client_id);
        labels[j] = atom;
    }
    state.per_client[local.client_id] = std::move(labels);
    state.client_obs[local.client_id] = std::move(obs);
    prune_atoms(state);
    state.check_invariants();
    return state;
}

void AssignmentState::check_invariants() const {
    std::vector<int> counts(atoms.size(), 0);
    std::vector<std::set<ClientId>> support(atoms.size());
    for (const auto& [client, labels] : per_client) {
        auto obs = client_obs.find(client);
        if (obs == client_obs.end() || obs->second.size() != labels.size())
            throw InvariantError("client " + std::to_string(client) +
                                 " has inconsistent retained observations");
        std::set<int> seen;
        for (int a : labels) {
            if (a < 0 || a >= num_atoms())
                throw InvariantError("client " + std::to_string(client) + " maps to atom " +
                                     std::to_string(a) + " out of range");
            if (!seen.insert(a).second)
                throw InvariantError("client " + std::to_string(client) +
                                     " maps two neurons to atom " + std::to_string(a));
            ++counts[a];
            support[a].insert(client);
        }
    }
    for (std::size_t i = 0; i < atoms.size(); ++i) {
        if (atoms[i].count < 1)
            throw InvariantError("atom " + std::to_string(i) + " has zero count");
        if (atoms[i].count != counts[i] || atoms[i].supporting_clients != support[i])
            throw InvariantError("atom " + std::to_string(i) + " stats disagree with assignments");
    }
}

std::map<ClientId, std::vector<int>> AssignmentState::canonical_labels() const {
    std::map<int, int> relabel;
    std::map<ClientId, std::vector<int>> out;
    for (const auto& [client, labels] : per_client) {
        auto& dst = out[client];
        dst.reserve(labels.size());
        for (int a : labels) {
            auto [it, inserted] = relabel.try_emplace(a, static_cast<int>(relabel.size()));
            dst.push_back(it->second);
        }
    }
    return out;
}

Eigen::MatrixXd extract_global(const AssignmentState& state) {
    if (state.atoms.empty()) return {};
    Eigen::MatrixXd out(state.atoms.size(), state.atoms.front().dim());
    for (std::size_t i = 0; i < state.atoms.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = posterior_from_stats(state.atoms[i]).mean().transpose();
    return out;
}

double matching_objective(const AssignmentState& state, int num_clients, const MatchConfig& config) {
    if (state.atoms.empty()) return 0.0;
    const Gaussiand prior = config.prior(state.atoms.front().dim());
    const double prior_sms = sms(prior);

    double data = 0.0;
    for (const auto& atom : state.atoms)
        data += prior_sms - atom.weighted_sum.squaredNorm() / atom.precision;

    // Indian buffet process probability of the left-ordered equivalence class.
    const int S = num_clients;
    std::map<std::vector<ClientId>, int> histories;
    double log_p = static_cast<double>(state.atoms.size()) * std::log(config.gamma0);
    double harmonic = 0.0;
    for (int s = 1; s <= S; ++s) harmonic += 1.0 / s;
    log_p -= config.gamma0 * harmonic;
    for (const auto& atom : state.atoms) {
        const int m = atom.count;
        log_p += std::lgamma(S - m + 1.0) + std::lgamma(static_cast<double>(m)) - std::lgamma(S + 1.0);
        histories[{atom.supporting_clients.begin(), atom.supporting_clients.end()}] += 1;
    }
    for (const auto& [history, k] : histories) log_p -= std::lgamma(k + 1.0);
    return data - 2.0 * log_p;
}

MatchResult run_matching(const std::vector<LocalModelNeurons>& locals, const MatchConfig& config) {
    config.validate();
    if (locals.empty()) throw std::invalid_argument("run_matching: no clients");
    const Eigen::Index dim = locals.front().neurons.cols();
    std::set<ClientId> ids;
    for (const auto& l : locals) {
        if (l.neurons.cols() != dim)
            throw DimensionError("run_matching: client " + std::to_string(l.client_id) + " has " +
                                 std::to_string(l.neurons.cols()) + " columns, expected " +
                                 std::to_string(dim));
        if (!ids.insert(l.client_id).second)
            throw std::invalid_argument("run_matching: duplicate client id " +
                                        std::to_string(l.client_id));
    }
    const int S = static_cast<int>(locals.size());

    std::vector<int> order(locals.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return locals[a].client_id < locals[b].client_id; });
    std::mt19937_64 rng(config.seed);

    MatchResult result;
    std::map<ClientId, std::vector<int>> previous;
    for (int pass = 1; pass <= config.max_passes; ++pass) {
        if (config.client_order == ClientOrder::shuffled) std::shuffle(order.begin(), order.end(), rng);
        for (int idx : order) result.state = assign_client(std::move(result.state), locals[idx], S, config);
        result.passes = pass;
        result.objective_trace.push_back(matching_objective(result.state, S, config));
        auto labels = result.state.canonical_labels();
        if (pass > 1 && labels == previous) {
            result.converged = true;
            break;
        }
        previous = std::move(labels);
    }
    result.global = extract_global(result.state);
    return result;
}

} // namespace nafi
