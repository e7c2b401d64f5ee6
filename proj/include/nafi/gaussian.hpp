#pragma once

// Isotropic Gaussian primitives used by the matching cost: conjugate
// sufficient statistics, standardized mean square, KL divergence and the
// marginal likelihood of a single observation.
//
// Everything is templated on the scalar so the same code runs on double
// and on exact rationals in tests.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>

namespace nafi {

using ClientId = int;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// N(mean, variance * I).
template <typename Scalar>
class IsotropicGaussian {
public:
    IsotropicGaussian(Vector<Scalar> mean, Scalar variance)
        : mean_(std::move(mean)), variance_(std::move(variance)) {
        if (!(variance_ > Scalar(0)))
            throw std::invalid_argument("IsotropicGaussian: variance must be positive");
    }

    [[nodiscard]] const Vector<Scalar>& mean() const { return mean_; }
    [[nodiscard]] const Scalar& variance() const { return variance_; }
    [[nodiscard]] Eigen::Index dim() const { return mean_.size(); }

    friend bool operator==(const IsotropicGaussian& a, const IsotropicGaussian& b) {
        return a.variance_ == b.variance_ && a.mean_.size() == b.mean_.size() &&
               a.mean_ == b.mean_;
    }

private:
    Vector<Scalar> mean_;
    Scalar variance_;
};

using Gaussiand = IsotropicGaussian<double>;

/// Natural-parameter accumulator for one global atom:
///   weighted_sum = mu0/sigma0^2 + sum w/sigma_s^2
///   precision    = 1/sigma0^2  + sum 1/sigma_s^2
/// Each contributing client may add at most one observation.
template <typename Scalar>
struct AtomSufficientStats {
    Vector<Scalar> weighted_sum;
    Scalar precision;
    int count = 0;
    std::set<ClientId> supporting_clients;

    static AtomSufficientStats from_prior(const IsotropicGaussian<Scalar>& prior) {
        AtomSufficientStats s;
        s.precision = Scalar(1) / prior.variance();
        s.weighted_sum = prior.mean() * s.precision;
        s.count = 0;
        return s;
    }

    [[nodiscard]] Eigen::Index dim() const { return weighted_sum.size(); }

    friend bool operator==(const AtomSufficientStats& a, const AtomSufficientStats& b) {
        return a.precision == b.precision && a.count == b.count &&
               a.supporting_clients == b.supporting_clients &&
               a.weighted_sum.size() == b.weighted_sum.size() &&
               a.weighted_sum == b.weighted_sum;
    }
};

using AtomStatsd = AtomSufficientStats<double>;

namespace detail {
inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
    if (a != b)
        throw DimensionError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                             " vs " + std::to_string(b) + ")");
}
} // namespace detail

template <typename Scalar>
IsotropicGaussian<Scalar> posterior_from_stats(const AtomSufficientStats<Scalar>& stats) {
    return IsotropicGaussian<Scalar>(stats.weighted_sum / stats.precision,
                                     Scalar(1) / stats.precision);
}

template <typename Scalar, typename Derived>
AtomSufficientStats<Scalar> add_observation(AtomSufficientStats<Scalar> stats,
                                            const Eigen::MatrixBase<Derived>& w,
                                            const Scalar& sigma_sq, ClientId client) {
    detail::require_same_dim(stats.dim(), w.size(), "add_observation");
    if (stats.supporting_clients.contains(client))
        throw std::logic_error("add_observation: client " + std::to_string(client) +
                               " already contributes to this atom");
    stats.weighted_sum += w / sigma_sq;
    stats.precision += Scalar(1) / sigma_sq;
    stats.count += 1;
    stats.supporting_clients.insert(client);
    return stats;
}

/// Exact inverse of add_observation; (w, sigma_sq) must be the values that were added.
template <typename Scalar, typename Derived>
AtomSufficientStats<Scalar> remove_observation(AtomSufficientStats<Scalar> stats,
                                               const Eigen::MatrixBase<Derived>& w,
                                               const Scalar& sigma_sq, ClientId client) {
    detail::require_same_dim(stats.dim(), w.size(), "remove_observation");
    if (!stats.supporting_clients.contains(client))
        throw std::logic_error("remove_observation: client " + std::to_string(client) +
                               " does not contribute to this atom");
    stats.weighted_sum -= w / sigma_sq;
    stats.precision -= Scalar(1) / sigma_sq;
    stats.count -= 1;
    stats.supporting_clients.erase(client);
    return stats;
}

/// Standardized mean square ||mean||^2 / variance.
template <typename Scalar>
Scalar sms(const IsotropicGaussian<Scalar>& g) {
    return g.mean().squaredNorm() / g.variance();
}

/// KL(x || y) for isotropic Gaussians of equal dimension.
template <typename Scalar>
Scalar kl_isotropic(const IsotropicGaussian<Scalar>& x, const IsotropicGaussian<Scalar>& y) {
    using std::log;
    detail::require_same_dim(x.dim(), y.dim(), "kl_isotropic");
    const Scalar d = Scalar(x.dim());
    const Scalar ratio = x.variance() / y.variance();
    const Scalar mahal = (y.mean() - x.mean()).squaredNorm() / y.variance();
    return Scalar(0.5) * (d * ratio + mahal - d - d * log(ratio));
}

/// log N(w; prior.mean, (prior.variance + sigma_sq) I), the marginal of w
/// under theta ~ prior and w | theta ~ N(theta, sigma_sq I).
template <typename Scalar, typename Derived>
Scalar log_marginal(const Eigen::MatrixBase<Derived>& w, const IsotropicGaussian<Scalar>& prior,
                    const Scalar& sigma_sq) {
    using std::log;
    detail::require_same_dim(w.size(), prior.dim(), "log_marginal");
    const Scalar var = prior.variance() + sigma_sq;
    const Scalar d = Scalar(prior.dim());
    const Scalar two_pi = Scalar(2) * std::numbers::pi_v<double>;
    return Scalar(-0.5) * (d * log(two_pi * var) + (w - prior.mean()).squaredNorm() / var);
}

} // namespace nafi
