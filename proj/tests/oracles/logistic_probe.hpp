#pragma once

// Per-token logistic regression on the planted-saliency task. It sees the
// raw token channels plus the log of its class-attention mass, is fit by
// Newton iterations to convergence, and selects the top k logits per grid.
// Its held-out recall is the ceiling the trained fusion path is judged
// against.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "meteor/trainer.hpp"

namespace meteor::oracle {

struct ProbeResult {
    std::vector<double> weights;  // channels..., log attention, bias
    double train_recall = 0.0;
    double eval_recall = 0.0;
    std::size_t iterations = 0;
};

namespace detail {

inline std::vector<double> probe_features(const ToySample<double>& s, std::size_t i) {
    const auto& g = s.grid;
    std::vector<double> f(g.channels() + 2);
    for (std::size_t c = 0; c < g.channels(); ++c) f[c] = g.tokens(i, c);
    f[g.channels()] = std::log(g.cls_attention[i + 1]);
    f[g.channels() + 1] = 1.0;
    return f;
}

// Gaussian elimination with partial pivoting; a is row-major n x n.
inline std::vector<double> solve(std::vector<double> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
        if (std::abs(a[piv * n + col]) < 1e-300) throw std::runtime_error("singular probe system");
        if (piv != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
            std::swap(b[col], b[piv]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double m = a[r * n + col] / a[col * n + col];
            for (std::size_t c = col; c < n; ++c) a[r * n + c] -= m * a[col * n + c];
            b[r] -= m * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t r = n; r-- > 0;) {
        double acc = b[r];
        for (std::size_t c = r + 1; c < n; ++c) acc -= a[r * n + c] * x[c];
        x[r] = acc / a[r * n + r];
    }
    return x;
}

inline double probe_recall(const std::vector<ToySample<double>>& samples, const std::vector<double>& w,
                           std::size_t k) {
    double total = 0.0;
    for (const auto& s : samples) {
        const std::size_t n = s.grid.n();
        std::vector<double> logit(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto f = probe_features(s, i);
            logit[i] = std::inner_product(f.begin(), f.end(), w.begin(), 0.0);
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return logit[a] > logit[b]; });
        std::size_t hits = 0;
        for (std::size_t j = 0; j < k && j < n; ++j)
            if (std::find(s.truth.begin(), s.truth.end(), order[j] + 1) != s.truth.end()) ++hits;
        total += static_cast<double>(hits) / static_cast<double>(s.truth.size());
    }
    return total / static_cast<double>(samples.size());
}

}  // namespace detail

/// Fits on train, reports recall at k on both sets. ridge is a small L2
/// penalty that keeps the Hessian well conditioned.
inline ProbeResult fit_logistic_probe(const std::vector<ToySample<double>>& train,
                                      const std::vector<ToySample<double>>& eval, std::size_t k,
                                      double ridge = 1e-6, std::size_t max_iterations = 50) {
    const std::size_t dim = train.front().grid.channels() + 2;
    ProbeResult result;
    result.weights.assign(dim, 0.0);
    for (std::size_t it = 0; it < max_iterations; ++it) {
        std::vector<double> grad(dim, 0.0), hess(dim * dim, 0.0);
        for (const auto& s : train) {
            for (std::size_t i = 0; i < s.grid.n(); ++i) {
                const auto f = detail::probe_features(s, i);
                const double z = std::inner_product(f.begin(), f.end(), result.weights.begin(), 0.0);
                const double p = 1.0 / (1.0 + std::exp(-z));
                const bool y = std::find(s.truth.begin(), s.truth.end(), i + 1) != s.truth.end();
                const double r = p - (y ? 1.0 : 0.0);
                const double v = p * (1.0 - p);
                for (std::size_t a = 0; a < dim; ++a) {
                    grad[a] += r * f[a];
                    for (std::size_t b = 0; b < dim; ++b) hess[a * dim + b] += v * f[a] * f[b];
                }
            }
        }
        for (std::size_t a = 0; a < dim; ++a) {
            grad[a] += ridge * result.weights[a];
            hess[a * dim + a] += ridge;
        }
        const auto step = detail::solve(hess, grad);
        double step_norm = 0.0;
        for (std::size_t a = 0; a < dim; ++a) {
            result.weights[a] -= step[a];
            step_norm = std::max(step_norm, std::abs(step[a]));
        }
        result.iterations = it + 1;
        if (step_norm < 1e-10) break;
    }
    result.train_recall = detail::probe_recall(train, result.weights, k);
    result.eval_recall = detail::probe_recall(eval, result.weights, k);
    return result;
}

/// The probe on exactly the data train_toy would see for spec and config.
inline ProbeResult toy_probe(const ToyTaskSpec& spec, const TrainConfig& config) {
    const auto train = gen_toy_batch<double>(spec, config.train_samples);
    const auto eval = toy_eval_set<double>(spec, config.eval_samples);
    return fit_logistic_probe(train, eval, config.k);
}

}  // namespace meteor::oracle
