#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "meteor/error.hpp"
#include "meteor/ssm.hpp"
#include "oracles/finite_difference.hpp"

namespace meteor {
namespace {

template <typename T>
ScanSequence<T> random_sequence(std::size_t length, std::size_t channels, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    ScanSequence<T> seq(length, channels);
    rng.fill_normal(std::span(seq.data), scale);
    return seq;
}

template <typename T>
SsmParams<T> random_params(std::size_t channels, std::size_t state_dim, std::uint64_t seed) {
    Rng rng(seed);
    auto p = SsmParams<T>::init(channels, state_dim, rng);
    // Move away from the init so every projection carries signal.
    SsmParams<T>::visit(p, [&](std::string_view, std::span<T> v) {
        for (T& x : v) x += static_cast<T>(0.1 * rng.normal());
    });
    return p;
}

double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

TEST(Discretize, Examples) {
    const auto d1 = discretize(0.1, -1.0, 1.0);
    EXPECT_NEAR(d1.a_bar, 0.904837, 1e-6);
    EXPECT_NEAR(d1.a_bar, std::exp(-0.1), 1e-15);
    EXPECT_DOUBLE_EQ(d1.b_bar, 0.1);

    const auto d2 = discretize(0.5, -2.0, 3.0);
    EXPECT_NEAR(d2.a_bar, 0.367879, 1e-6);
    EXPECT_DOUBLE_EQ(d2.b_bar, 1.5);
}

TEST(Discretize, ClampFloorResetsState) {
    const auto d = discretize(1.0, -1e300, 2.0);
    EXPECT_TRUE(std::isfinite(d.a_bar));
    EXPECT_LE(d.a_bar, std::exp(kMinLogDecay));
    EXPECT_GE(d.a_bar, 0.0);
    EXPECT_DOUBLE_EQ(d.b_bar, 2.0);
}

TEST(Softplus, PositiveAndStable) {
    for (double x : {-800.0, -30.0, -1.0, 0.0, 1.0, 30.0, 800.0}) {
        const double s = softplus(x);
        EXPECT_TRUE(std::isfinite(s));
        EXPECT_GE(s, 0.0);
    }
    EXPECT_GT(softplus(-30.0), 0.0);
    EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
    EXPECT_NEAR(softplus(800.0), 800.0, 1e-12);
}

TEST(SsmParams, InitInvariants) {
    Rng rng(3);
    const auto p = SsmParams<double>::init(6, 8, rng);
    EXPECT_NO_THROW(p.validate());
    for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t n = 0; n < 8; ++n) EXPECT_NEAR(std::exp(p.a_log(c, n)), static_cast<double>(n + 1), 1e-12);
    for (double b : p.delta_proj.bias) {
        EXPECT_GE(softplus(b), 0.01 - 1e-12);
        EXPECT_LE(softplus(b), 0.1 + 1e-12);
    }
    for (double d : p.d_skip) EXPECT_EQ(d, 1.0);
}

TEST(SelectiveScan, ZeroInputGivesZeroOutput) {
    const auto p = random_params<double>(5, 4, 1);
    const ScanSequence<double> zero(9, 5);
    const auto y = selective_scan(zero, p);
    for (double v : y.data) EXPECT_EQ(v, 0.0);
    const auto r = reference_scan(zero, p);
    for (double v : r.data) EXPECT_EQ(v, 0.0);
}

TEST(SelectiveScan, SingleStepCollapse) {
    const std::size_t C = 4, N = 3;
    const auto p = random_params<double>(C, N, 2);
    const auto x = random_sequence<double>(1, C, 5);
    const auto y = selective_scan(x, p);

    // y_c = <C_out, delta_c * B> x_c + d_c x_c, with delta, B, C_out
    // projected from the single token.
    auto project = [&](const Affine<double>& a, std::size_t o) {
        double acc = a.bias[o];
        for (std::size_t i = 0; i < C; ++i) acc += a.weight(o, i) * x(0, i);
        return acc;
    };
    for (std::size_t c = 0; c < C; ++c) {
        const double delta = std::log1p(std::exp(project(p.delta_proj, c)));
        double cb = 0.0;
        for (std::size_t n = 0; n < N; ++n) cb += project(p.c_proj, n) * delta * project(p.b_proj, n);
        EXPECT_NEAR(y(0, c), cb * x(0, c) + p.d_skip[c] * x(0, c), 1e-12);
    }
}

TEST(SelectiveScan, MatchesReferenceAt257Steps) {
    const auto p = random_params<double>(8, 4, 11);
    const auto x = random_sequence<double>(257, 8, 12);
    const auto fast = selective_scan(x, p);
    const auto ref = reference_scan(x, p);
    EXPECT_LE(max_abs_diff(fast, ref), 1e-6);
}

TEST(SelectiveScan, SeededFuzzMatchesReference) {
    Rng shape(99);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t L = 1 + shape.below(600);
        const std::size_t C = 1 + shape.below(16);
        const std::size_t N = 1 + shape.below(8);
        const auto p = random_params<double>(C, N, seed);
        const auto x = random_sequence<double>(L, C, seed + 1000);
        EXPECT_LE(max_abs_diff(selective_scan(x, p), reference_scan(x, p)), 1e-6) << "seed " << seed;
        EXPECT_LE(max_abs_diff(selective_scan(x, p, Accumulation::kWide), reference_scan(x, p)), 1e-6);
    }
}

TEST(SelectiveScan, FloatWithinLooseTolerance) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto pd = random_params<double>(8, 4, seed);
        const auto xd = random_sequence<double>(1024, 8, seed + 7);
        SsmParams<float> pf;
        pf.a_log = cast_matrix<float>(pd.a_log);
        pf.delta_proj = {8, 8};
        pf.delta_proj.weight = cast_matrix<float>(pd.delta_proj.weight);
        pf.delta_proj.bias = cast_vector<float>(pd.delta_proj.bias);
        pf.b_proj = {4, 8};
        pf.b_proj.weight = cast_matrix<float>(pd.b_proj.weight);
        pf.b_proj.bias = cast_vector<float>(pd.b_proj.bias);
        pf.c_proj = {4, 8};
        pf.c_proj.weight = cast_matrix<float>(pd.c_proj.weight);
        pf.c_proj.bias = cast_vector<float>(pd.c_proj.bias);
        pf.d_skip = cast_vector<float>(pd.d_skip);
        const auto xf = cast_matrix<float>(xd);
        const auto ref = reference_scan(xf, pf);
        for (auto acc : {Accumulation::kNative, Accumulation::kWide}) {
            const auto y = selective_scan(xf, pf, acc);
            double m = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i)
                m = std::max(m, std::fabs(static_cast<double>(y.data[i]) - ref.data[i]));
            EXPECT_LE(m, 1e-3);
        }
    }
}

TEST(SelectiveScan, Causal) {
    const auto p = random_params<double>(4, 3, 21);
    const auto x = random_sequence<double>(40, 4, 22);
    const auto base = selective_scan(x, p);
    for (std::size_t t : {0u, 13u, 39u}) {
        auto bumped = x;
        bumped(t, 2) += 0.5;
        const auto y = selective_scan(bumped, p);
        for (std::size_t s = 0; s < t; ++s)
            for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y(s, c), base(s, c)) << "s=" << s << " t=" << t;
        double change = 0.0;
        for (std::size_t c = 0; c < 4; ++c) change += std::fabs(y(t, c) - base(t, c));
        EXPECT_GT(change, 0.0);
    }
}

TEST(SelectiveScan, StatesStayWithinStabilityBound) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const std::size_t L = 300, C = 6, N = 4;
        const auto p = random_params<double>(C, N, seed);
        const auto x = random_sequence<double>(L, C, seed + 50, 3.0);
        const auto tape = selective_scan_recorded(x, p);
        double max_drive = 0.0, max_decay = 0.0, max_state = 0.0;
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t n = 0; n < N; ++n) {
                    max_drive = std::max(max_drive, std::fabs(tape.delta(t, c) * tape.b(t, n) * x(t, c)));
                    max_decay = std::max(max_decay, tape.decay[(t * C + c) * N + n]);
                    max_state = std::max(max_state, std::fabs(tape.states[((t + 1) * C + c) * N + n]));
                }
        ASSERT_LT(max_decay, 1.0);
        EXPECT_LE(max_state, max_drive / (1.0 - max_decay) + 1e-9);
    }
}

TEST(SelectiveScan, RecordedMatchesPlain) {
    const auto p = random_params<double>(5, 3, 31);
    const auto x = random_sequence<double>(64, 5, 32);
    EXPECT_LE(max_abs_diff(selective_scan_recorded(x, p).outputs, selective_scan(x, p)), 1e-12);
}

TEST(SelectiveScan, RejectsBadInput) {
    const auto p = random_params<double>(3, 2, 1);
    EXPECT_THROW(selective_scan(ScanSequence<double>(0, 3), p), ConfigError);
    EXPECT_THROW(selective_scan(ScanSequence<double>(4, 2), p), ConfigError);
    auto x = random_sequence<double>(4, 3, 2);
    x(2, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(selective_scan(x, p), NumericError);
    EXPECT_THROW(reference_scan(x, p), NumericError);
}

TEST(ScanBackward, MatchesFiniteDifferences) {
    const std::size_t L = 12, C = 3, N = 2;
    auto p = random_params<double>(C, N, 41);
    auto x = random_sequence<double>(L, C, 42);
    const auto weights = random_sequence<double>(L, C, 43);
    auto loss = [&] {
        const auto y = selective_scan(x, p);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) acc += weights.data[i] * y.data[i];
        return acc;
    };

    auto grads = SsmParams<double>::zeros(C, N);
    const auto dx = scan_backward(selective_scan_recorded(x, p), p, weights, grads);

    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double fd = oracle::central_difference(loss, x.data[i]);
        EXPECT_LE(oracle::relative_error(dx.data[i], fd), 1e-5) << "input " << i;
    }
    std::vector<std::pair<std::string, std::vector<double>>> analytic;
    SsmParams<double>::visit(grads, [&](std::string_view name, std::span<double> v) {
        analytic.emplace_back(std::string(name), std::vector<double>(v.begin(), v.end()));
    });
    std::size_t t = 0;
    SsmParams<double>::visit(p, [&](std::string_view name, std::span<double> v) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double fd = oracle::central_difference(loss, v[i]);
            EXPECT_LE(oracle::relative_error(analytic[t].second[i], fd), 1e-5) << name << "[" << i << "]";
        }
        ++t;
    });
}

}  // namespace
}  // namespace meteor
