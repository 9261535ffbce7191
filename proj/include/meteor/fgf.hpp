#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "meteor/rng.hpp"
#include "meteor/ssm.hpp"
#include "meteor/tensor.hpp"
#include "meteor/token_model.hpp"

namespace meteor {

enum class ScanMode { kSingle, kLocalToSingle, kCombined };

std::string_view to_string(ScanMode mode);
ScanMode parse_scan_mode(std::string_view name);

/// One entry of an interleaved scan sequence.
struct Slot {
    enum class Kind : std::uint8_t { kLocal, kToken, kInstruction };
    Kind kind = Kind::kToken;
    std::size_t index = 0;  // 1-based token index; 0 for the instruction slot

    static Slot local(std::size_t i) { return {Kind::kLocal, i}; }
    static Slot token(std::size_t i) { return {Kind::kToken, i}; }
    static Slot instruction() { return {Kind::kInstruction, 0}; }

    bool operator==(const Slot&) const = default;
};

std::string to_string(const Slot& slot);

/// Visitation order of the local-to-single scan in both directions.
/// forward  = TL1 T1 TL2 T2 ... with INS at slot n,
/// backward = TLn Tn TLn-1 Tn-1 ... TL1 T1 with INS at slot n.
/// Window aggregates precede their token in both directions.
struct ScanOrdering {
    std::size_t n = 0;
    std::size_t ins_slot = 0;
    std::vector<Slot> forward;
    std::vector<Slot> backward;
};

ScanOrdering build_ordering(std::size_t n);

/// Plain token order without window aggregates: T1..Tm INS Tm+1..Tn with
/// m = n / 2, and its reversal.
ScanOrdering build_single_ordering(std::size_t n);

/// Per-token affine normalization over the channel axis.
template <typename T>
struct ChannelNorm {
    static constexpr double kEps = 1e-5;
    std::vector<T> scale;
    std::vector<T> shift;

    explicit ChannelNorm(std::size_t channels = 0) : scale(channels, T{1}), shift(channels, T{0}) {}
    void apply(std::span<const T> x, std::span<T> y) const;

    bool operator==(const ChannelNorm&) const = default;
};

/// Trainable state of the fusion module.
template <typename T>
struct FgfParams {
    std::vector<T> ins_token;  // shared instruction token, width C
    SsmParams<T> ssm_fwd;
    SsmParams<T> ssm_bwd;
    ChannelNorm<T> in_norm;
    Affine<T> out_proj;  // C -> D, applied after selection

    std::size_t channels() const { return ins_token.size(); }
    std::size_t output_width() const { return out_proj.out_width(); }

    static FgfParams init(std::size_t channels, std::size_t output_width, std::size_t state_dim,
                          std::uint64_t seed);
    /// Same shapes as `like`, every value zero. Used as a gradient buffer.
    static FgfParams zeros_like(const FgfParams& like);

    void validate() const;

    /// Visits every tensor as (qualified name, flat span).
    template <typename Self, typename F>
    static void visit(Self& self, F&& f) {
        f(std::string("ins_token"), std::span(self.ins_token));
        SsmParams<T>::visit(self.ssm_fwd, [&](std::string_view name, auto span) {
            f("ssm_fwd." + std::string(name), span);
        });
        SsmParams<T>::visit(self.ssm_bwd, [&](std::string_view name, auto span) {
            f("ssm_bwd." + std::string(name), span);
        });
        f(std::string("in_norm.scale"), std::span(self.in_norm.scale));
        f(std::string("in_norm.shift"), std::span(self.in_norm.shift));
        f(std::string("out_proj.weight"), std::span(self.out_proj.weight.data));
        f(std::string("out_proj.bias"), std::span(self.out_proj.bias));
    }

    template <typename To>
    FgfParams<To> cast() const;

    bool operator==(const FgfParams&) const = default;
};

template <typename T>
struct FusedOutput {
    Matrix<T> f_tokens;  // [n x C], F^i in raster order
    std::vector<T> ins_out;
};

/// Mean over the window x window neighbourhood of every token, with
/// out-of-grid cells replaced by the nearest in-grid token.
template <typename T>
Matrix<T> local_aggregate(const TokenGrid<T>& grid, std::size_t window = 3);

/// Bidirectional selective-scan fusion of one view. Each scan pass sees the
/// normalized slot sequence; outputs are averaged per slot across passes.
/// F^i comes from the T(i) slots and ins_out from the instruction slot.
template <typename T>
FusedOutput<T> fuse(const TokenGrid<T>& grid, const FgfParams<T>& params, std::size_t window = 3,
                    ScanMode mode = ScanMode::kLocalToSingle);

/// Forward state kept for reverse-mode differentiation of fuse.
template <typename T>
struct FuseTape {
    struct Pass {
        bool backward_params = false;
        std::vector<Slot> order;
        ScanTape<T> scan;
    };
    std::size_t n = 0;
    Matrix<T> raw_slots;   // [2n+1 x C]: T(1..n), TL(1..n), INS
    Matrix<T> norm_slots;  // normalized raw_slots
    std::vector<T> rstd;   // per slot row
    std::vector<Pass> passes;
    FusedOutput<T> output;
};

template <typename T>
FuseTape<T> fuse_recorded(const TokenGrid<T>& grid, const FgfParams<T>& params, std::size_t window,
                          ScanMode mode);

/// Accumulates d loss / d params into `grads` given gradients w.r.t. F and
/// ins_out.
template <typename T>
void fuse_backward(const FuseTape<T>& tape, const FgfParams<T>& params, const Matrix<T>& d_f_tokens,
                   std::span<const T> d_ins_out, FgfParams<T>& grads);

}  // namespace meteor
