#include "meteor/fgf.hpp"

#include <algorithm>
#include <cmath>

#include "meteor/error.hpp"

namespace meteor {

std::string_view to_string(ScanMode mode) {
    switch (mode) {
        case ScanMode::kSingle: return "single";
        case ScanMode::kLocalToSingle: return "local_to_single";
        case ScanMode::kCombined: return "combined";
    }
    return "unknown";
}

ScanMode parse_scan_mode(std::string_view name) {
    if (name == "single") return ScanMode::kSingle;
    if (name == "local_to_single") return ScanMode::kLocalToSingle;
    if (name == "combined") return ScanMode::kCombined;
    throw ConfigError("unknown scan mode '" + std::string(name) +
                      "' (expected single, local_to_single or combined)");
}

std::string to_string(const Slot& slot) {
    switch (slot.kind) {
        case Slot::Kind::kLocal: return "TL" + std::to_string(slot.index);
        case Slot::Kind::kToken: return "T" + std::to_string(slot.index);
        case Slot::Kind::kInstruction: return "INS";
    }
    return "?";
}

ScanOrdering build_ordering(std::size_t n) {
    if (n == 0) throw ConfigError("scan ordering needs at least one token");
    ScanOrdering ord;
    ord.n = n;
    ord.ins_slot = n;
    ord.forward.reserve(2 * n + 1);
    ord.backward.reserve(2 * n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        ord.forward.push_back(Slot::local(i));
        ord.forward.push_back(Slot::token(i));
    }
    for (std::size_t i = n; i >= 1; --i) {
        ord.backward.push_back(Slot::local(i));
        ord.backward.push_back(Slot::token(i));
    }
    ord.forward.insert(ord.forward.begin() + static_cast<std::ptrdiff_t>(n), Slot::instruction());
    ord.backward.insert(ord.backward.begin() + static_cast<std::ptrdiff_t>(n), Slot::instruction());
    return ord;
}

ScanOrdering build_single_ordering(std::size_t n) {
    if (n == 0) throw ConfigError("scan ordering needs at least one token");
    ScanOrdering ord;
    ord.n = n;
    ord.ins_slot = n / 2;
    for (std::size_t i = 1; i <= n; ++i) ord.forward.push_back(Slot::token(i));
    ord.forward.insert(ord.forward.begin() + static_cast<std::ptrdiff_t>(ord.ins_slot),
                       Slot::instruction());
    ord.backward.assign(ord.forward.rbegin(), ord.forward.rend());
    return ord;
}

template <typename T>
void ChannelNorm<T>::apply(std::span<const T> x, std::span<T> y) const {
    const std::size_t C = x.size();
    T mean{0};
    for (T v : x) mean += v;
    mean /= static_cast<T>(C);
    T var{0};
    for (T v : x) var += (v - mean) * (v - mean);
    var /= static_cast<T>(C);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(kEps));
    for (std::size_t c = 0; c < C; ++c) y[c] = (x[c] - mean) * rstd * scale[c] + shift[c];
}

template <typename T>
FgfParams<T> FgfParams<T>::init(std::size_t channels, std::size_t output_width,
                                std::size_t state_dim, std::uint64_t seed) {
    if (channels == 0 || output_width == 0)
        throw ConfigError("fusion params need channels >= 1 and output width >= 1");
    Rng rng(seed);
    FgfParams p;
    p.ins_token.resize(channels);
    rng.fill_normal(std::span(p.ins_token), 1.0);
    p.ssm_fwd = SsmParams<T>::init(channels, state_dim, rng);
    p.ssm_bwd = SsmParams<T>::init(channels, state_dim, rng);
    p.in_norm = ChannelNorm<T>(channels);
    p.out_proj = Affine<T>(output_width, channels);
    rng.fill_normal(std::span(p.out_proj.weight.data), 1.0 / std::sqrt(static_cast<double>(channels)));
    return p;
}

template <typename T>
FgfParams<T> FgfParams<T>::zeros_like(const FgfParams& like) {
    FgfParams z = like;
    visit(z, [](const std::string&, std::span<T> s) { std::fill(s.begin(), s.end(), T{0}); });
    return z;
}

template <typename T>
void FgfParams<T>::validate() const {
    const std::size_t C = channels();
    if (C == 0) throw ConfigError("fusion params: ins_token is empty");
    ssm_fwd.validate();
    ssm_bwd.validate();
    if (ssm_fwd.channels() != C || ssm_bwd.channels() != C)
        throw ConfigError("fusion params: ssm channels do not match ins_token width");
    if (in_norm.scale.size() != C || in_norm.shift.size() != C)
        throw ConfigError("fusion params: in_norm width does not match ins_token width");
    if (out_proj.in_width() != C || out_proj.bias.size() != out_proj.out_width() ||
        out_proj.out_width() == 0)
        throw ConfigError("fusion params: out_proj shape does not map C -> D");
}

template <typename T>
template <typename To>
FgfParams<To> FgfParams<T>::cast() const {
    FgfParams<To> out;
    // Shapes first, then copy tensor by tensor in visit order.
    out.ins_token.resize(ins_token.size());
    out.ssm_fwd = SsmParams<To>::zeros(ssm_fwd.channels(), ssm_fwd.state_dim());
    out.ssm_bwd = SsmParams<To>::zeros(ssm_bwd.channels(), ssm_bwd.state_dim());
    out.in_norm = ChannelNorm<To>(in_norm.scale.size());
    out.out_proj = Affine<To>(out_proj.out_width(), out_proj.in_width());
    std::vector<std::span<const T>> src;
    visit(*this, [&](const std::string&, std::span<const T> s) { src.push_back(s); });
    std::size_t k = 0;
    FgfParams<To>::visit(out, [&](const std::string&, std::span<To> d) {
        std::transform(src[k].begin(), src[k].end(), d.begin(),
                       [](T v) { return static_cast<To>(v); });
        ++k;
    });
    return out;
}

template <typename T>
Matrix<T> local_aggregate(const TokenGrid<T>& grid, std::size_t window) {
    if (window % 2 == 0 || window == 0)
        throw ConfigError("window must be odd, got " + std::to_string(window));
    const std::size_t H = grid.h_u;
    const std::size_t W = grid.w_u;
    const std::size_t C = grid.channels();
    if (grid.tokens.rows != H * W) throw ConfigError("token grid shape mismatch");
    const long half = static_cast<long>(window / 2);
    const T inv = T{1} / static_cast<T>(window * window);

    Matrix<T> out(H * W, C);
    for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t c = 0; c < W; ++c) {
            auto dst = out.row(r * W + c);
            for (long dr = -half; dr <= half; ++dr) {
                const long rr = std::clamp(static_cast<long>(r) + dr, 0L, static_cast<long>(H) - 1);
                for (long dc = -half; dc <= half; ++dc) {
                    const long cc = std::clamp(static_cast<long>(c) + dc, 0L, static_cast<long>(W) - 1);
                    auto src = grid.tokens.row(static_cast<std::size_t>(rr) * W + static_cast<std::size_t>(cc));
                    for (std::size_t k = 0; k < C; ++k) dst[k] += src[k];
                }
            }
            for (std::size_t k = 0; k < C; ++k) dst[k] *= inv;
        }
    }
    return out;
}

namespace {

// Row of the slot table holding a slot's vector.
std::size_t slot_row(const Slot& slot, std::size_t n) {
    switch (slot.kind) {
        case Slot::Kind::kToken: return slot.index - 1;
        case Slot::Kind::kLocal: return n + slot.index - 1;
        case Slot::Kind::kInstruction: return 2 * n;
    }
    return 0;
}

struct PassSpec {
    bool backward_params;
    std::vector<Slot> order;
};

std::vector<PassSpec> passes_for(ScanMode mode, std::size_t n) {
    std::vector<PassSpec> passes;
    if (mode == ScanMode::kSingle) {
        auto ord = build_single_ordering(n);
        passes.push_back({false, std::move(ord.forward)});
        passes.push_back({true, std::move(ord.backward)});
        return passes;
    }
    auto ord = build_ordering(n);
    passes.push_back({false, std::move(ord.forward)});
    passes.push_back({true, std::move(ord.backward)});
    if (mode == ScanMode::kCombined) {
        // Third pass: plain token order, sharing the forward parameters.
        auto single = build_single_ordering(n);
        passes.push_back({false, std::move(single.forward)});
    }
    return passes;
}

template <typename T>
void check_compatible(const TokenGrid<T>& grid, const FgfParams<T>& params) {
    params.validate();
    if (grid.tokens.rows != grid.n() || grid.n() == 0) throw ConfigError("token grid shape mismatch");
    if (grid.channels() != params.channels())
        throw ConfigError("token width " + std::to_string(grid.channels()) +
                          " does not match fusion width " + std::to_string(params.channels()));
    if (!all_finite<T>(grid.tokens.data)) throw NumericError("token grid contains non-finite values");
}

template <typename T>
Matrix<T> build_slot_table(const TokenGrid<T>& grid, const FgfParams<T>& params, std::size_t window,
                           ScanMode mode) {
    const std::size_t n = grid.n();
    const std::size_t C = grid.channels();
    Matrix<T> table(2 * n + 1, C);
    std::copy(grid.tokens.data.begin(), grid.tokens.data.end(), table.data.begin());
    if (mode != ScanMode::kSingle) {
        const Matrix<T> local = local_aggregate(grid, window);
        std::copy(local.data.begin(), local.data.end(), table.data.begin() + static_cast<std::ptrdiff_t>(n * C));
    }
    std::copy(params.ins_token.begin(), params.ins_token.end(), table.row(2 * n).begin());
    return table;
}

template <typename T>
Matrix<T> gather(const Matrix<T>& table, const std::vector<Slot>& order, std::size_t n) {
    Matrix<T> seq(order.size(), table.cols);
    for (std::size_t p = 0; p < order.size(); ++p) {
        auto src = table.row(slot_row(order[p], n));
        std::copy(src.begin(), src.end(), seq.row(p).begin());
    }
    return seq;
}

// Averages pass outputs into F (token slots) and ins_out.
template <typename T>
FusedOutput<T> combine(const std::vector<PassSpec>& specs, const std::vector<const Matrix<T>*>& outs,
                       std::size_t n, std::size_t C) {
    FusedOutput<T> result{Matrix<T>(n, C), std::vector<T>(C, T{0})};
    for (std::size_t p = 0; p < specs.size(); ++p) {
        const auto& order = specs[p].order;
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const Slot& s = order[pos];
            if (s.kind == Slot::Kind::kLocal) continue;
            auto src = outs[p]->row(pos);
            std::span<T> dst = s.kind == Slot::Kind::kToken ? result.f_tokens.row(s.index - 1)
                                                            : std::span<T>(result.ins_out);
            for (std::size_t k = 0; k < C; ++k) dst[k] += src[k];
        }
    }
    const T count = static_cast<T>(specs.size());
    for (T& v : result.f_tokens.data) v /= count;
    for (T& v : result.ins_out) v /= count;
    return result;
}

}  // namespace

template <typename T>
FusedOutput<T> fuse(const TokenGrid<T>& grid, const FgfParams<T>& params, std::size_t window,
                    ScanMode mode) {
    check_compatible(grid, params);
    const std::size_t n = grid.n();
    const std::size_t C = grid.channels();

    Matrix<T> table = build_slot_table(grid, params, window, mode);
    for (std::size_t r = 0; r < table.rows; ++r) params.in_norm.apply(table.row(r), table.row(r));

    const auto specs = passes_for(mode, n);
    std::vector<Matrix<T>> outputs;
    outputs.reserve(specs.size());
    for (const auto& spec : specs) {
        const auto& ssm = spec.backward_params ? params.ssm_bwd : params.ssm_fwd;
        outputs.push_back(selective_scan(gather(table, spec.order, n), ssm));
    }
    std::vector<const Matrix<T>*> ptrs;
    for (const auto& o : outputs) ptrs.push_back(&o);
    return combine<T>(specs, ptrs, n, C);
}

template <typename T>
FuseTape<T> fuse_recorded(const TokenGrid<T>& grid, const FgfParams<T>& params, std::size_t window,
                          ScanMode mode) {
    check_compatible(grid, params);
    const std::size_t n = grid.n();
    const std::size_t C = grid.channels();

    FuseTape<T> tape;
    tape.n = n;
    tape.raw_slots = build_slot_table(grid, params, window, mode);
    tape.norm_slots = Matrix<T>(tape.raw_slots.rows, C);
    tape.rstd.resize(tape.raw_slots.rows);
    for (std::size_t r = 0; r < tape.raw_slots.rows; ++r) {
        auto x = tape.raw_slots.row(r);
        T mean{0};
        for (T v : x) mean += v;
        mean /= static_cast<T>(C);
        T var{0};
        for (T v : x) var += (v - mean) * (v - mean);
        var /= static_cast<T>(C);
        const T rstd = T{1} / std::sqrt(var + static_cast<T>(ChannelNorm<T>::kEps));
        tape.rstd[r] = rstd;
        auto y = tape.norm_slots.row(r);
        for (std::size_t c = 0; c < C; ++c)
            y[c] = (x[c] - mean) * rstd * params.in_norm.scale[c] + params.in_norm.shift[c];
    }

    const auto specs = passes_for(mode, n);
    std::vector<const Matrix<T>*> ptrs;
    tape.passes.reserve(specs.size());
    for (const auto& spec : specs) {
        const auto& ssm = spec.backward_params ? params.ssm_bwd : params.ssm_fwd;
        tape.passes.push_back({spec.backward_params, spec.order,
                               selective_scan_recorded(gather(tape.norm_slots, spec.order, n), ssm)});
    }
    for (const auto& p : tape.passes) ptrs.push_back(&p.scan.outputs);
    tape.output = combine<T>(specs, ptrs, n, C);
    return tape;
}

template <typename T>
void fuse_backward(const FuseTape<T>& tape, const FgfParams<T>& params, const Matrix<T>& d_f_tokens,
                   std::span<const T> d_ins_out, FgfParams<T>& grads) {
    const std::size_t n = tape.n;
    const std::size_t C = params.channels();
    if (d_f_tokens.rows != n || d_f_tokens.cols != C || d_ins_out.size() != C)
        throw ConfigError("fuse_backward: gradient shape mismatch");
    const T inv_passes = T{1} / static_cast<T>(tape.passes.size());

    Matrix<T> d_norm(tape.norm_slots.rows, C);
    for (const auto& pass : tape.passes) {
        ScanSequence<T> d_out(pass.order.size(), C);
        for (std::size_t pos = 0; pos < pass.order.size(); ++pos) {
            const Slot& s = pass.order[pos];
            if (s.kind == Slot::Kind::kLocal) continue;
            std::span<const T> g = s.kind == Slot::Kind::kToken ? d_f_tokens.row(s.index - 1) : d_ins_out;
            auto dst = d_out.row(pos);
            for (std::size_t k = 0; k < C; ++k) dst[k] = g[k] * inv_passes;
        }
        const auto& ssm = pass.backward_params ? params.ssm_bwd : params.ssm_fwd;
        auto& ssm_grads = pass.backward_params ? grads.ssm_bwd : grads.ssm_fwd;
        const ScanSequence<T> d_in = scan_backward(pass.scan, ssm, d_out, ssm_grads);
        for (std::size_t pos = 0; pos < pass.order.size(); ++pos) {
            auto dst = d_norm.row(slot_row(pass.order[pos], n));
            auto src = d_in.row(pos);
            for (std::size_t k = 0; k < C; ++k) dst[k] += src[k];
        }
    }

    // Channel normalization backward. Only the instruction row carries a
    // trainable input; the other rows contribute to scale/shift only.
    std::vector<T> xhat(C), dxhat(C);
    for (std::size_t r = 0; r < tape.norm_slots.rows; ++r) {
        auto dy = d_norm.row(r);
        auto x = tape.raw_slots.row(r);
        T mean{0};
        for (T v : x) mean += v;
        mean /= static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c) {
            xhat[c] = (x[c] - mean) * tape.rstd[r];
            grads.in_norm.scale[c] += dy[c] * xhat[c];
            grads.in_norm.shift[c] += dy[c];
            dxhat[c] = dy[c] * params.in_norm.scale[c];
        }
        if (r != 2 * n) continue;
        T mean_dxhat{0}, mean_dxhat_xhat{0};
        for (std::size_t c = 0; c < C; ++c) {
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
        }
        mean_dxhat /= static_cast<T>(C);
        mean_dxhat_xhat /= static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c)
            grads.ins_token[c] += tape.rstd[r] * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
    }
}

#define METEOR_INSTANTIATE(T)                                                                      \
    template struct ChannelNorm<T>;                                                                \
    template struct FgfParams<T>;                                                                  \
    template Matrix<T> local_aggregate(const TokenGrid<T>&, std::size_t);                          \
    template FusedOutput<T> fuse(const TokenGrid<T>&, const FgfParams<T>&, std::size_t, ScanMode); \
    template FuseTape<T> fuse_recorded(const TokenGrid<T>&, const FgfParams<T>&, std::size_t,      \
                                       ScanMode);                                                  \
    template void fuse_backward(const FuseTape<T>&, const FgfParams<T>&, const Matrix<T>&,         \
                                std::span<const T>, FgfParams<T>&);

METEOR_INSTANTIATE(float)
METEOR_INSTANTIATE(double)
#undef METEOR_INSTANTIATE

template FgfParams<double> FgfParams<float>::cast<double>() const;
template FgfParams<float> FgfParams<double>::cast<float>() const;
template FgfParams<float> FgfParams<float>::cast<float>() const;
template FgfParams<double> FgfParams<double>::cast<double>() const;

}  // namespace meteor
