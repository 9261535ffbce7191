#include "meteor/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "meteor/error.hpp"

namespace meteor {

double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Discretized discretize(double delta, double a, double b) {
    const double log_decay = std::max(delta * a, kMinLogDecay);
    return {std::exp(log_decay), delta * b};
}

template <typename T>
SsmParams<T> SsmParams<T>::zeros(std::size_t channels, std::size_t state_dim) {
    SsmParams p;
    p.a_log = Matrix<T>(channels, state_dim);
    p.delta_proj = Affine<T>(channels, channels);
    p.b_proj = Affine<T>(state_dim, channels);
    p.c_proj = Affine<T>(state_dim, channels);
    p.d_skip.assign(channels, T{0});
    return p;
}

template <typename T>
SsmParams<T> SsmParams<T>::init(std::size_t channels, std::size_t state_dim, Rng& rng) {
    if (channels == 0 || state_dim == 0) throw ConfigError("ssm needs channels >= 1 and state_dim >= 1");
    SsmParams p = zeros(channels, state_dim);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t n = 0; n < state_dim; ++n)
            p.a_log(c, n) = static_cast<T>(std::log(static_cast<double>(n + 1)));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(channels));
    rng.fill_normal(std::span(p.delta_proj.weight.data), 0.1 * proj_std);
    for (auto& b : p.delta_proj.bias) {
        const double dt = std::exp(rng.uniform(std::log(0.01), std::log(0.1)));
        b = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus^-1
    }
    rng.fill_normal(std::span(p.b_proj.weight.data), proj_std);
    rng.fill_normal(std::span(p.c_proj.weight.data), proj_std);
    std::fill(p.d_skip.begin(), p.d_skip.end(), T{1});
    return p;
}

template <typename T>
void SsmParams<T>::validate() const {
    const std::size_t C = channels();
    const std::size_t N = state_dim();
    if (C == 0 || N == 0) throw ConfigError("ssm params are empty");
    auto check = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(std::string("ssm params: ") + what + " has the wrong shape");
    };
    check(delta_proj.weight.rows == C && delta_proj.weight.cols == C && delta_proj.bias.size() == C,
          "delta_proj");
    check(b_proj.weight.rows == N && b_proj.weight.cols == C && b_proj.bias.size() == N, "b_proj");
    check(c_proj.weight.rows == N && c_proj.weight.cols == C && c_proj.bias.size() == N, "c_proj");
    check(d_skip.size() == C, "d_skip");
}

namespace {

template <typename T>
void check_sequence(const ScanSequence<T>& seq, const SsmParams<T>& params) {
    params.validate();
    if (seq.rows == 0) throw ConfigError("scan sequence must have length >= 1");
    if (seq.cols != params.channels())
        throw ConfigError("scan sequence width " + std::to_string(seq.cols) +
                          " does not match ssm channels " + std::to_string(params.channels()));
    if (!all_finite<T>(seq.data)) throw NumericError("scan sequence contains non-finite values");
}

// Batched projections for every step.
template <typename T>
void project_all(const ScanSequence<T>& seq, const SsmParams<T>& params, Matrix<T>& delta_pre,
                 Matrix<T>& delta, Matrix<T>& b, Matrix<T>& c) {
    const std::size_t L = seq.rows;
    delta_pre = Matrix<T>(L, params.channels());
    delta = Matrix<T>(L, params.channels());
    b = Matrix<T>(L, params.state_dim());
    c = Matrix<T>(L, params.state_dim());
    for (std::size_t t = 0; t < L; ++t) {
        auto x = seq.row(t);
        params.delta_proj.apply(x, delta_pre.row(t));
        params.b_proj.apply(x, b.row(t));
        params.c_proj.apply(x, c.row(t));
        auto pre = delta_pre.row(t);
        auto out = delta.row(t);
        for (std::size_t k = 0; k < pre.size(); ++k)
            out[k] = static_cast<T>(softplus(static_cast<double>(pre[k])));
    }
}

template <typename T, typename Acc>
ScanSequence<T> scan_impl(const ScanSequence<T>& seq, const SsmParams<T>& params) {
    check_sequence(seq, params);
    const std::size_t L = seq.rows;
    const std::size_t C = params.channels();
    const std::size_t N = params.state_dim();

    Matrix<T> delta_pre, delta, b, c;
    project_all(seq, params, delta_pre, delta, b, c);

    std::vector<Acc> neg_a(C * N);
    for (std::size_t i = 0; i < C * N; ++i)
        neg_a[i] = static_cast<Acc>(-std::exp(static_cast<double>(params.a_log.data[i])));

    std::vector<Acc> h(C * N, Acc{0});
    ScanSequence<T> out(L, C);
    for (std::size_t t = 0; t < L; ++t) {
        const T* x = seq.data.data() + t * C;
        const T* dt = delta.data.data() + t * C;
        const T* bt = b.data.data() + t * N;
        const T* ct = c.data.data() + t * N;
        T* y = out.data.data() + t * C;
        for (std::size_t ch = 0; ch < C; ++ch) {
            const Acc d = static_cast<Acc>(dt[ch]);
            const Acc dx = d * static_cast<Acc>(x[ch]);
            Acc* hc = h.data() + ch * N;
            const Acc* ac = neg_a.data() + ch * N;
            Acc acc{0};
            for (std::size_t n = 0; n < N; ++n) {
                const Acc decay = std::exp(std::max(d * ac[n], static_cast<Acc>(kMinLogDecay)));
                hc[n] = decay * hc[n] + dx * static_cast<Acc>(bt[n]);
                acc += static_cast<Acc>(ct[n]) * hc[n];
            }
            y[ch] = static_cast<T>(acc + static_cast<Acc>(params.d_skip[ch]) * static_cast<Acc>(x[ch]));
        }
    }
    return out;
}

}  // namespace

template <typename T>
ScanSequence<T> selective_scan(const ScanSequence<T>& seq, const SsmParams<T>& params,
                               Accumulation acc) {
    if (acc == Accumulation::kWide) return scan_impl<T, double>(seq, params);
    return scan_impl<T, T>(seq, params);
}

template <typename T>
ScanSequence<T> reference_scan(const ScanSequence<T>& seq, const SsmParams<T>& params) {
    check_sequence(seq, params);
    const std::size_t L = seq.rows;
    const std::size_t C = params.channels();
    const std::size_t N = params.state_dim();
    ScanSequence<T> out(L, C);

    for (std::size_t ch = 0; ch < C; ++ch) {
        std::vector<double> h(N, 0.0);
        for (std::size_t t = 0; t < L; ++t) {
            double delta_pre = static_cast<double>(params.delta_proj.bias[ch]);
            for (std::size_t k = 0; k < C; ++k)
                delta_pre += static_cast<double>(params.delta_proj.weight(ch, k)) *
                             static_cast<double>(seq(t, k));
            const double delta = softplus(delta_pre);
            const double x = static_cast<double>(seq(t, ch));
            double y = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                double b = static_cast<double>(params.b_proj.bias[n]);
                double c = static_cast<double>(params.c_proj.bias[n]);
                for (std::size_t k = 0; k < C; ++k) {
                    b += static_cast<double>(params.b_proj.weight(n, k)) * static_cast<double>(seq(t, k));
                    c += static_cast<double>(params.c_proj.weight(n, k)) * static_cast<double>(seq(t, k));
                }
                const double a = -std::exp(static_cast<double>(params.a_log(ch, n)));
                const Discretized disc = discretize(delta, a, b);
                h[n] = disc.a_bar * h[n] + disc.b_bar * x;
                y += c * h[n];
            }
            y += static_cast<double>(params.d_skip[ch]) * x;
            out(t, ch) = static_cast<T>(y);
        }
    }
    return out;
}

template <typename T>
ScanTape<T> selective_scan_recorded(const ScanSequence<T>& seq, const SsmParams<T>& params) {
    check_sequence(seq, params);
    const std::size_t L = seq.rows;
    const std::size_t C = params.channels();
    const std::size_t N = params.state_dim();

    ScanTape<T> tape;
    tape.inputs = seq;
    project_all(seq, params, tape.delta_pre, tape.delta, tape.b, tape.c);
    tape.states.assign((L + 1) * C * N, T{0});
    tape.decay.assign(L * C * N, T{0});
    tape.outputs = ScanSequence<T>(L, C);

    std::vector<T> neg_a(C * N);
    for (std::size_t i = 0; i < C * N; ++i)
        neg_a[i] = static_cast<T>(-std::exp(static_cast<double>(params.a_log.data[i])));

    for (std::size_t t = 0; t < L; ++t) {
        const T* prev = tape.states.data() + t * C * N;
        T* cur = tape.states.data() + (t + 1) * C * N;
        T* decay = tape.decay.data() + t * C * N;
        for (std::size_t ch = 0; ch < C; ++ch) {
            const T d = tape.delta(t, ch);
            const T dx = d * seq(t, ch);
            T acc{0};
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t k = ch * N + n;
                decay[k] = std::exp(std::max(d * neg_a[k], static_cast<T>(kMinLogDecay)));
                cur[k] = decay[k] * prev[k] + dx * tape.b(t, n);
                acc += tape.c(t, n) * cur[k];
            }
            tape.outputs(t, ch) = acc + params.d_skip[ch] * seq(t, ch);
        }
    }
    return tape;
}

template <typename T>
ScanSequence<T> scan_backward(const ScanTape<T>& tape, const SsmParams<T>& params,
                              const ScanSequence<T>& d_outputs, SsmParams<T>& grads) {
    const std::size_t L = tape.inputs.rows;
    const std::size_t C = params.channels();
    const std::size_t N = params.state_dim();
    if (d_outputs.rows != L || d_outputs.cols != C)
        throw ConfigError("scan_backward: output gradient shape mismatch");

    ScanSequence<T> d_inputs(L, C);
    std::vector<T> dh(C * N, T{0});
    std::vector<T> d_delta(C), d_delta_pre(C), d_b(N), d_c(N);
    std::vector<T> neg_a(C * N);
    for (std::size_t i = 0; i < C * N; ++i)
        neg_a[i] = static_cast<T>(-std::exp(static_cast<double>(params.a_log.data[i])));

    for (std::size_t t = L; t-- > 0;) {
        const T* x = tape.inputs.data.data() + t * C;
        const T* prev = tape.states.data() + t * C * N;
        const T* cur = tape.states.data() + (t + 1) * C * N;
        const T* gy = d_outputs.data.data() + t * C;
        T* dx = d_inputs.data.data() + t * C;
        std::fill(d_delta.begin(), d_delta.end(), T{0});
        std::fill(d_b.begin(), d_b.end(), T{0});
        std::fill(d_c.begin(), d_c.end(), T{0});

        for (std::size_t ch = 0; ch < C; ++ch) {
            // y = <c, h_t> + d_skip * x
            grads.d_skip[ch] += gy[ch] * x[ch];
            dx[ch] += gy[ch] * params.d_skip[ch];
            const T d = tape.delta(t, ch);
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t k = ch * N + n;
                d_c[n] += gy[ch] * cur[k];
                dh[k] += gy[ch] * tape.c(t, n);

                // h_t = decay * h_{t-1} + d * b * x
                const T a = neg_a[k];
                const bool clamped = d * a < static_cast<T>(kMinLogDecay);
                const T decay = tape.decay[t * C * N + k];
                const T g = dh[k];
                const T b = tape.b(t, n);
                d_delta[ch] += g * b * x[ch];
                d_b[n] += g * d * x[ch];
                dx[ch] += g * d * b;
                if (!clamped) {
                    const T d_log_decay = g * prev[k] * decay;
                    d_delta[ch] += d_log_decay * a;
                    // a = -exp(a_log)  =>  da/da_log = a
                    grads.a_log(ch, n) += d_log_decay * d * a;
                }
                dh[k] = g * decay;
            }
        }

        for (std::size_t ch = 0; ch < C; ++ch)
            d_delta_pre[ch] = d_delta[ch] * static_cast<T>(sigmoid(tape.delta_pre(t, ch)));

        auto accumulate_affine = [&](const Affine<T>& map, Affine<T>& g, std::span<const T> dout) {
            for (std::size_t o = 0; o < map.out_width(); ++o) {
                const T go = dout[o];
                if (go == T{0}) continue;
                g.bias[o] += go;
                T* gw = g.weight.data.data() + o * C;
                const T* w = map.weight.data.data() + o * C;
                for (std::size_t i = 0; i < C; ++i) {
                    gw[i] += go * x[i];
                    dx[i] += go * w[i];
                }
            }
        };
        accumulate_affine(params.delta_proj, grads.delta_proj, d_delta_pre);
        accumulate_affine(params.b_proj, grads.b_proj, d_b);
        accumulate_affine(params.c_proj, grads.c_proj, d_c);
    }
    return d_inputs;
}

#define METEOR_INSTANTIATE(T)                                                                    \
    template struct SsmParams<T>;                                                                \
    template ScanSequence<T> selective_scan(const ScanSequence<T>&, const SsmParams<T>&,         \
                                            Accumulation);                                       \
    template ScanSequence<T> reference_scan(const ScanSequence<T>&, const SsmParams<T>&);        \
    template ScanTape<T> selective_scan_recorded(const ScanSequence<T>&, const SsmParams<T>&);   \
    template ScanSequence<T> scan_backward(const ScanTape<T>&, const SsmParams<T>&,              \
                                           const ScanSequence<T>&, SsmParams<T>&);

METEOR_INSTANTIATE(float)
METEOR_INSTANTIATE(double)
#undef METEOR_INSTANTIATE

}  // namespace meteor
