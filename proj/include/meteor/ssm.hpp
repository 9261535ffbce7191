#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "meteor/rng.hpp"
#include "meteor/tensor.hpp"

namespace meteor {

inline constexpr std::size_t kDefaultStateDim = 8;
/// Floor on delta*a before exponentiation; below it the state is fully reset.
inline constexpr double kMinLogDecay = -60.0;

/// Diagonal selective state-space parameters for one scan direction.
///
/// A = -exp(a_log) is strictly negative, so the discretized decay
/// exp(delta * A) lies in (0, 1). Step sizes are softplus(delta_proj(x)) and
/// the input/output vectors B, C_out are affine in the current token, which
/// makes the recurrence input-selective.
template <typename T>
struct SsmParams {
    Matrix<T> a_log;     // [channels x state_dim]
    Affine<T> delta_proj;  // channels -> channels
    Affine<T> b_proj;      // channels -> state_dim
    Affine<T> c_proj;      // channels -> state_dim
    std::vector<T> d_skip;  // [channels]

    std::size_t channels() const { return a_log.rows; }
    std::size_t state_dim() const { return a_log.cols; }

    /// All projections and a_log zero, d_skip zero.
    static SsmParams zeros(std::size_t channels, std::size_t state_dim);
    /// -A = 1..state_dim per channel, softplus(delta bias) log-uniform in
    /// [0.01, 0.1], projections ~ N(0, 1/channels), d_skip = 1.
    static SsmParams init(std::size_t channels, std::size_t state_dim, Rng& rng);

    void validate() const;

    /// Visits every trainable tensor as (name, flat span).
    template <typename Self, typename F>
    static void visit(Self& self, F&& f) {
        f(std::string_view("a_log"), std::span(self.a_log.data));
        f(std::string_view("delta_proj.weight"), std::span(self.delta_proj.weight.data));
        f(std::string_view("delta_proj.bias"), std::span(self.delta_proj.bias));
        f(std::string_view("b_proj.weight"), std::span(self.b_proj.weight.data));
        f(std::string_view("b_proj.bias"), std::span(self.b_proj.bias));
        f(std::string_view("c_proj.weight"), std::span(self.c_proj.weight.data));
        f(std::string_view("c_proj.bias"), std::span(self.c_proj.bias));
        f(std::string_view("d_skip"), std::span(self.d_skip));
    }

    bool operator==(const SsmParams&) const = default;
};

template <typename T>
using ScanSequence = Matrix<T>;  // [L x channels]

struct Discretized {
    double a_bar;
    double b_bar;
};

/// Zero-order hold for the decay, Euler for the input coefficient.
Discretized discretize(double delta, double a, double b);

double softplus(double x);
double sigmoid(double x);

enum class Accumulation { kNative, kWide };

/// Linear-time selective scan:
///   h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t,   h_0 = 0
///   y_t = <C_out_t, h_t> + d_skip * x_t
/// per channel. Projections are batched up front; the recurrence is a single
/// pass over t. kWide accumulates the state in double regardless of T.
template <typename T>
ScanSequence<T> selective_scan(const ScanSequence<T>& seq, const SsmParams<T>& params,
                               Accumulation acc = Accumulation::kNative);

/// Literal step-by-step evaluation in double, one channel at a time.
/// Equivalence oracle for selective_scan.
template <typename T>
ScanSequence<T> reference_scan(const ScanSequence<T>& seq, const SsmParams<T>& params);

/// Forward activations kept for reverse-mode differentiation.
template <typename T>
struct ScanTape {
    ScanSequence<T> inputs;     // [L x C]
    Matrix<T> delta_pre;        // [L x C] pre-softplus
    Matrix<T> delta;            // [L x C]
    Matrix<T> b;                // [L x N]
    Matrix<T> c;                // [L x N]
    std::vector<T> states;      // [(L+1) x C x N], states[0] = 0
    std::vector<T> decay;       // [L x C x N] discretized decay per step
    ScanSequence<T> outputs;    // [L x C]
};

/// selective_scan that also records the tape.
template <typename T>
ScanTape<T> selective_scan_recorded(const ScanSequence<T>& seq, const SsmParams<T>& params);

/// Backpropagation through time. Accumulates parameter gradients into
/// `grads` and returns d loss / d inputs.
template <typename T>
ScanSequence<T> scan_backward(const ScanTape<T>& tape, const SsmParams<T>& params,
                              const ScanSequence<T>& d_outputs, SsmParams<T>& grads);

}  // namespace meteor
