#pragma once

// Compares loss_and_gradients against central differences of toy_loss on a
// sample of coordinates of every parameter tensor.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "finite_difference.hpp"
#include "meteor/rng.hpp"
#include "meteor/trainer.hpp"

namespace meteor::oracle {

struct TensorCheck {
    std::string name;
    std::size_t coordinates = 0;
    double max_relative_error = 0.0;
};

struct GradCheckConfig {
    std::size_t grid_h = 3;
    std::size_t grid_w = 3;
    std::size_t channels = 4;
    std::size_t state_dim = 2;
    std::size_t n_salient = 2;
    std::size_t coords_per_tensor = 20;
    double lambda = 0.8;
    double step = 1e-5;
    ScanMode mode = ScanMode::kLocalToSingle;
    std::size_t window = 3;
};

inline std::vector<TensorCheck> check_gradients(std::uint64_t seed, const GradCheckConfig& cfg) {
    ToyTaskSpec spec;
    spec.grid_h = cfg.grid_h;
    spec.grid_w = cfg.grid_w;
    spec.channels = cfg.channels;
    spec.n_salient = cfg.n_salient;
    spec.seed = seed;
    const auto sample = gen_toy_batch<double>(spec, 1).front();
    auto params = FgfParams<double>::init(cfg.channels, cfg.channels, cfg.state_dim, mix_seed(seed, 99));
    // Move every tensor off its structured init so no coordinate sits at a
    // symmetric point.
    Rng jitter(mix_seed(seed, 5));
    FgfParams<double>::visit(params, [&](const std::string&, std::span<double> s) {
        for (double& v : s) v += 0.05 * jitter.normal();
    });

    const auto analytic = loss_and_gradients(sample, params, cfg.lambda, cfg.window, cfg.mode);
    std::vector<std::span<const double>> grads;
    FgfParams<double>::visit(analytic.grads, [&](const std::string&, std::span<const double> s) { grads.push_back(s); });

    std::vector<TensorCheck> out;
    Rng pick(mix_seed(seed, 17));
    std::size_t k = 0;
    auto loss = [&] { return toy_loss(sample, params, cfg.lambda, cfg.window, cfg.mode); };
    FgfParams<double>::visit(params, [&](const std::string& name, std::span<double> s) {
        std::vector<std::size_t> coords(s.size());
        std::iota(coords.begin(), coords.end(), 0);
        std::shuffle(coords.begin(), coords.end(), pick.engine());
        coords.resize(std::min(coords.size(), cfg.coords_per_tensor));
        TensorCheck check{name, coords.size(), 0.0};
        for (std::size_t i : coords) {
            const double numeric = central_difference(loss, s[i], cfg.step);
            check.max_relative_error = std::max(check.max_relative_error, relative_error(grads[k][i], numeric));
        }
        out.push_back(check);
        ++k;
    });
    return out;
}

}  // namespace meteor::oracle
