#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gacan/autodiff.hpp"
#include "gacan/error.hpp"
#include "gacan/parameters.hpp"
#include "gacan/tensor.hpp"

namespace gacan {

/// Sensor network: pairwise distances and the thresholded Gaussian-kernel
/// adjacency derived from them.
struct TrafficGraph {
    std::size_t n_nodes = 0;
    Tensor distances; // N x N, +inf where no measurement exists
    Tensor adjacency; // N x N, symmetric, zero diagonal
};

/// Normalized Laplacian L, its largest eigenvalue, and 2L/lambda_max - I.
struct SpectralOperator {
    Tensor laplacian;
    double lambda_max = 0.0;
    Tensor scaled_laplacian;

    std::size_t n_nodes() const { return laplacian.dim(0); }
};

inline void check_square(const Tensor& m, const char* what) {
    if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
        throw DimensionError(std::string(what) + " must be square, got " + shape_str(m.shape()));
    }
}

/// W_ij = exp(-d_ij^2 / sigma2) when i != j and that value is >= eps_threshold, else 0.
inline Tensor build_adjacency(const Tensor& distances, double sigma2 = 10.0, double eps_threshold = 0.5) {
    check_square(distances, "distance matrix");
    if (!(sigma2 > 0.0)) throw ValidationError("sigma2 must be positive");
    if (!(eps_threshold >= 0.0 && eps_threshold < 1.0)) throw ValidationError("epsilon must lie in [0,1)");
    const std::size_t n = distances.dim(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (distances(i, i) != 0.0) throw ValidationError("distance diagonal must be zero (node " + std::to_string(i) + ")");
        for (std::size_t j = 0; j < n; ++j) {
            const double d = distances(i, j);
            if (std::isnan(d) || d < 0.0) {
                throw ValidationError("negative or NaN distance at (" + std::to_string(i) + "," + std::to_string(j) + ")");
            }
            if (d != distances(j, i) && std::abs(d - distances(j, i)) > 1e-9) {
                throw ValidationError("asymmetric distances at (" + std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }
    Tensor w({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            // Symmetrize through the upper triangle so W is exactly symmetric.
            const double d = i < j ? distances(i, j) : distances(j, i);
            const double v = std::isinf(d) ? 0.0 : std::exp(-d * d / sigma2);
            w(i, j) = v >= eps_threshold ? v : 0.0;
        }
    }
    return w;
}

/// L = I - D^{-1/2} W D^{-1/2}. An isolated node (zero degree) gets the
/// identity row, i.e. its D^{-1/2} entry is taken as 0.
inline Tensor normalized_laplacian(const Tensor& adjacency) {
    check_square(adjacency, "adjacency");
    const std::size_t n = adjacency.dim(0);
    std::vector<double> dinv(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (adjacency(i, j) < 0.0) throw ValidationError("adjacency must be nonnegative");
            deg += adjacency(i, j);
        }
        dinv[i] = deg > 0.0 ? 1.0 / std::sqrt(deg) : 0.0;
    }
    Tensor l({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) l(i, j) = (i == j ? 1.0 : 0.0) - dinv[i] * adjacency(i, j) * dinv[j];
    }
    return l;
}

/// Largest eigenvalue of a symmetric matrix by power iteration on L + 2I.
/// The shift makes the top of the spectrum dominant for any matrix whose
/// eigenvalues lie in [0, 2]. Stops once the residual ||Lv - lambda v|| is
/// below tol, which bounds the distance to an eigenvalue.
inline double lambda_max(const Tensor& laplacian, double tol = 1e-8, std::size_t max_iter = 10000,
                         std::uint64_t seed = 0x5eed) {
    check_square(laplacian, "laplacian");
    const std::size_t n = laplacian.dim(0);
    constexpr double shift = 2.0;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.5, 1.5);
    std::vector<double> v(n), lv(n);
    for (auto& x : v) x = unif(rng);
    auto normalize = [](std::vector<double>& x) {
        double s = 0.0;
        for (double e : x) s += e * e;
        s = std::sqrt(s);
        for (double& e : x) e /= s;
    };
    normalize(v);
    double estimate = 0.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += laplacian(i, j) * v[j];
            lv[i] = s;
        }
        double rq = 0.0;
        for (std::size_t i = 0; i < n; ++i) rq += v[i] * lv[i];
        estimate = rq;
        double res = 0.0;
        for (std::size_t i = 0; i < n; ++i) res += (lv[i] - rq * v[i]) * (lv[i] - rq * v[i]);
        if (std::sqrt(res) <= tol) return estimate;
        for (std::size_t i = 0; i < n; ++i) v[i] = lv[i] + shift * v[i];
        normalize(v);
    }
    throw ConvergenceError("power iteration did not converge in " + std::to_string(max_iter) + " iterations", estimate);
}

/// 2L/lambda_max - I
inline Tensor scaled_laplacian(const Tensor& laplacian, double lmax) {
    check_square(laplacian, "laplacian");
    if (!(lmax > 0.0)) throw ValidationError("lambda_max must be positive");
    const std::size_t n = laplacian.dim(0);
    Tensor s({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) s(i, j) = 2.0 * laplacian(i, j) / lmax - (i == j ? 1.0 : 0.0);
    return s;
}

inline SpectralOperator make_spectral_operator(const Tensor& adjacency) {
    SpectralOperator op;
    op.laplacian = normalized_laplacian(adjacency);
    op.lambda_max = lambda_max(op.laplacian);
    op.scaled_laplacian = scaled_laplacian(op.laplacian, op.lambda_max);
    return op;
}

inline TrafficGraph make_traffic_graph(const Tensor& distances, double sigma2 = 10.0, double eps_threshold = 0.5) {
    TrafficGraph g;
    g.n_nodes = distances.dim(0);
    g.distances = distances;
    g.adjacency = build_adjacency(distances, sigma2, eps_threshold);
    return g;
}

/// Chebyshev graph convolution sum_k T_k(L~) X theta_k, evaluated by the
/// vector recurrence Z_0 = X, Z_1 = L~ X, Z_k = 2 L~ Z_{k-1} - Z_{k-2}.
///
/// x is N x C (one graph signal) or T x N x C (one signal per time position,
/// filtered independently); each theta_k is C x C'.
inline ad::Var cheb_conv(const Tensor& scaled_lap, const ad::Var& x, const std::vector<ad::Var>& theta) {
    using namespace ad;
    check_square(scaled_lap, "scaled laplacian");
    if (theta.empty()) throw ValidationError("cheb_conv needs at least one coefficient (r >= 1)");
    const std::size_t n = scaled_lap.dim(0);
    const bool timed = x.rank() == 3;
    if (!(x.rank() == 2 || timed) || x.dim(timed ? 1 : 0) != n) {
        throw DimensionError("cheb_conv input " + shape_str(x.shape()) + " does not match " + std::to_string(n) + " nodes");
    }
    const std::size_t t = timed ? x.dim(0) : 1;
    const std::size_t c = x.shape().back();
    for (const auto& th : theta) {
        if (th.rank() != 2 || th.dim(0) != c || th.dim(1) != theta.front().dim(1)) {
            throw DimensionError("cheb_conv coefficient " + shape_str(th.shape()) + " does not match " + std::to_string(c) + " channels");
        }
    }
    const std::size_t cout = theta.front().dim(1);
    Tape& tape = *x.tape();
    Var lap = tape.constant(scaled_lap);

    // Work in node-major layout N x (T*C) so one matmul filters all times.
    Var z0 = timed ? reshape(permute(x, {1, 0, 2}), {n, t * c}) : x;
    auto project = [&](const Var& z, const Var& th) {
        Var rows = timed ? reshape(permute(reshape(z, {n, t, c}), {1, 0, 2}), {t * n, c}) : z;
        return matmul(rows, th);
    };
    Var y = project(z0, theta[0]);
    if (theta.size() > 1) {
        Var zprev = z0;
        Var zcur = matmul(lap, z0);
        y = add(y, project(zcur, theta[1]));
        for (std::size_t k = 2; k < theta.size(); ++k) {
            Var znext = sub(scale(matmul(lap, zcur), 2.0), zprev);
            y = add(y, project(znext, theta[k]));
            zprev = zcur;
            zcur = znext;
        }
    }
    return timed ? reshape(y, {t, n, cout}) : y;
}

/// Eigenvalues of a symmetric matrix, ascending (dense solver; test scale).
inline std::vector<double> symmetric_eigenvalues(const Tensor& m) {
    check_square(m, "matrix");
    const auto n = static_cast<Eigen::Index>(m.dim(0));
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) = m(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericError("symmetric eigendecomposition failed");
    return {es.eigenvalues().data(), es.eigenvalues().data() + n};
}

/// Exact spectral filtering U diag(sum_k T_k(lambda~_i) theta_k) U^T X through a
/// full eigendecomposition of L, with lambda~ = 2 lambda / lambda_max - 1.
/// Independent of cheb_conv; used to verify it. x is N x C, theta_k C x C'.
inline Tensor spectral_oracle(const Tensor& laplacian, const Tensor& x, const std::vector<Tensor>& theta, double lmax) {
    check_square(laplacian, "laplacian");
    const auto n = static_cast<Eigen::Index>(laplacian.dim(0));
    if (n > 64) throw ValidationError("spectral_oracle is limited to 64 nodes");
    if (x.rank() != 2 || x.dim(0) != laplacian.dim(0)) throw DimensionError("spectral_oracle input shape mismatch");
    if (theta.empty()) throw ValidationError("spectral_oracle needs at least one coefficient");
    Eigen::MatrixXd l(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) l(i, j) = laplacian(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(l);
    if (es.info() != Eigen::Success) throw NumericError("symmetric eigendecomposition failed");
    const Eigen::MatrixXd& u = es.eigenvectors();
    const Eigen::VectorXd& lam = es.eigenvalues();

    const auto c = static_cast<Eigen::Index>(x.dim(1));
    const auto cout = static_cast<Eigen::Index>(theta.front().dim(1));
    Eigen::MatrixXd xm(n, c);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < c; ++j) xm(i, j) = x(i, j);
    const Eigen::MatrixXd xhat = u.transpose() * xm;

    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, cout);
    for (std::size_t k = 0; k < theta.size(); ++k) {
        if (theta[k].rank() != 2 || static_cast<Eigen::Index>(theta[k].dim(0)) != c ||
            static_cast<Eigen::Index>(theta[k].dim(1)) != cout) {
            throw DimensionError("spectral_oracle coefficient shape mismatch");
        }
        Eigen::VectorXd gain(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            // Closed form T_k(s) = cos(k acos s), continued by cosh outside [-1,1].
            const double s = 2.0 * lam(i) / lmax - 1.0;
            const double kk = static_cast<double>(k);
            double tk = 0.0;
            if (std::abs(s) <= 1.0) tk = std::cos(kk * std::acos(s));
            else if (s > 1.0) tk = std::cosh(kk * std::acosh(s));
            else tk = ((k % 2) ? -1.0 : 1.0) * std::cosh(kk * std::acosh(-s));
            gain(i) = tk;
        }
        Eigen::MatrixXd th(c, cout);
        for (Eigen::Index i = 0; i < c; ++i)
            for (Eigen::Index j = 0; j < cout; ++j) th(i, j) = theta[k](static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        y += u * gain.asDiagonal() * xhat * th;
    }
    Tensor out({static_cast<std::size_t>(n), static_cast<std::size_t>(cout)});
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < cout; ++j) out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = y(i, j);
    return out;
}

/// Reads `from,to,distance` rows. Pairs not listed stay at +inf. When both
/// directions are given they must agree within 1e-9. If n_nodes is unset the
/// node count is one past the largest id. Lines starting with '#' are
/// comments.
inline Tensor read_distances_csv(std::istream& in, std::optional<std::size_t> n_nodes = std::nullopt) {
    std::string line;
    std::size_t lineno = 0;
    do {
        if (!std::getline(in, line)) throw ParseError("empty distances file", lineno + 1);
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
    } while (!line.empty() && line.front() == '#');
    if (line != "from,to,distance") throw ParseError("expected header 'from,to,distance'", lineno);
    struct Row {
        std::size_t from, to;
        double d;
        std::size_t line;
    };
    std::vector<Row> rows;
    std::size_t max_id = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        auto f = split_view(line, ',');
        if (f.size() != 3) throw ParseError("expected 3 fields", lineno);
        try {
            const double a = parse_double(f[0]);
            const double b = parse_double(f[1]);
            const double d = parse_double(f[2]);
            if (a < 0 || b < 0 || a != std::floor(a) || b != std::floor(b)) throw ValidationError("node ids must be nonnegative integers");
            rows.push_back({static_cast<std::size_t>(a), static_cast<std::size_t>(b), d, lineno});
            max_id = std::max({max_id, rows.back().from, rows.back().to});
        } catch (const ValidationError& e) {
            throw ParseError(e.what(), lineno);
        }
    }
    const std::size_t n = n_nodes.value_or(rows.empty() ? 0 : max_id + 1);
    if (n == 0) throw ValidationError("distances file defines no nodes");
    Tensor dist({n, n}, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) dist(i, i) = 0.0;
    std::vector<bool> seen(n * n, false);
    for (const auto& r : rows) {
        if (r.from >= n || r.to >= n) throw ParseError("node id out of range", r.line);
        if (r.d < 0.0 || std::isnan(r.d)) throw ValidationError("negative distance on line " + std::to_string(r.line));
        if (r.from == r.to) {
            if (r.d != 0.0) throw ValidationError("nonzero self distance on line " + std::to_string(r.line));
            continue;
        }
        for (auto [i, j] : {std::pair{r.from, r.to}, std::pair{r.to, r.from}}) {
            if (seen[i * n + j] && std::abs(dist(i, j) - r.d) > 1e-9) {
                throw ValidationError("conflicting distances for pair (" + std::to_string(r.from) + "," +
                                      std::to_string(r.to) + ") on line " + std::to_string(r.line));
            }
            dist(i, j) = r.d;
            seen[i * n + j] = true;
        }
    }
    return dist;
}

inline Tensor load_distances(const std::string& path, std::optional<std::size_t> n_nodes = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open distances file '" + path + "'");
    return read_distances_csv(in, n_nodes);
}

} // namespace gacan
