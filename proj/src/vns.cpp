#include "meteor/vns.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "meteor/error.hpp"

namespace meteor {

template <typename T>
std::vector<T> visual_scores(std::span<const T> cls_attention) {
    if (cls_attention.size() < 2)
        throw ConfigError("cls_attention needs the class entry plus at least one token");
    double mass = 0.0;
    for (std::size_t i = 1; i < cls_attention.size(); ++i) {
        const T a = cls_attention[i];
        if (!std::isfinite(a) || a < T{0})
            throw NumericError("cls_attention entries must be finite and nonnegative");
        mass += static_cast<double>(a);
    }
    if (!(mass > 0.0)) throw DegenerateAttention("class attention has no mass on content tokens");
    std::vector<T> vs(cls_attention.size() - 1);
    for (std::size_t i = 0; i < vs.size(); ++i)
        vs[i] = static_cast<T>(static_cast<double>(cls_attention[i + 1]) / mass);
    return vs;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
    if (logits.empty()) return {};
    const double top = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
    std::vector<double> e(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp(static_cast<double>(logits[i]) - top);
        total += e[i];
    }
    std::vector<T> out(logits.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(e[i] / total);
    return out;
}

template <typename T>
std::vector<T> native_scores(const Matrix<T>& f_tokens, std::span<const T> ins_out) {
    if (f_tokens.cols != ins_out.size())
        throw ConfigError("native scores: token width " + std::to_string(f_tokens.cols) +
                          " does not match instruction width " + std::to_string(ins_out.size()));
    if (!all_finite<T>(f_tokens.data) || !all_finite(ins_out))
        throw NumericError("native scores: non-finite input");
    std::vector<T> logits(f_tokens.rows);
    for (std::size_t i = 0; i < f_tokens.rows; ++i) logits[i] = dot(f_tokens.row(i), ins_out);
    return softmax<T>(logits);
}

template <typename T>
std::vector<T> aggregate_scores(std::span<const T> vs, std::span<const T> ns, double lambda_eff) {
    if (vs.size() != ns.size())
        throw ConfigError("aggregate scores: length mismatch (" + std::to_string(vs.size()) + " vs " +
                          std::to_string(ns.size()) + ")");
    if (!(lambda_eff >= 0.0 && lambda_eff <= 1.0))
        throw ConfigError("lambda must lie in [0, 1], got " + std::to_string(lambda_eff));
    const T lam = static_cast<T>(lambda_eff);
    const T rest = static_cast<T>(1.0 - lambda_eff);
    std::vector<T> out(vs.size());
    for (std::size_t i = 0; i < vs.size(); ++i) out[i] = lam * vs[i] + rest * ns[i];
    return out;
}

void WarmupSchedule::validate() const {
    if (!(lambda_target >= 0.0 && lambda_target <= 1.0))
        throw ConfigError("lambda_target must lie in [0, 1], got " + std::to_string(lambda_target));
    if (warmup_steps == 0) throw ConfigError("warmup_steps must be >= 1");
}

double WarmupSchedule::native_weight() const {
    validate();
    const double progress =
        std::min(1.0, static_cast<double>(current_step) / static_cast<double>(warmup_steps));
    return (1.0 - lambda_target) * progress;
}

double effective_lambda(const WarmupSchedule& schedule) { return 1.0 - schedule.native_weight(); }

double effective_lambda(double lambda_target) {
    if (!(lambda_target >= 0.0 && lambda_target <= 1.0))
        throw ConfigError("lambda_target must lie in [0, 1], got " + std::to_string(lambda_target));
    return lambda_target;
}

template <typename T>
ScoreSet<T> score_tokens(std::span<const T> cls_attention, const Matrix<T>& f_tokens,
                         std::span<const T> ins_out, double lambda_eff) {
    ScoreSet<T> s;
    s.vs = visual_scores(cls_attention);
    if (s.vs.size() != f_tokens.rows)
        throw ConfigError("cls_attention covers " + std::to_string(s.vs.size()) + " tokens, view has " +
                          std::to_string(f_tokens.rows));
    s.ns = native_scores(f_tokens, ins_out);
    s.as_scores = aggregate_scores<T>(s.vs, s.ns, lambda_eff);
    s.lambda_eff = lambda_eff;
    return s;
}

template <typename T>
std::vector<std::uint32_t> top_k_indices(std::span<const T> scores, std::size_t k) {
    if (k == 0 || k > scores.size())
        throw ConfigError("k must lie in [1, " + std::to_string(scores.size()) + "], got " +
                          std::to_string(k));
    std::vector<std::uint32_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    order.resize(k);
    std::sort(order.begin(), order.end());
    for (auto& i : order) ++i;
    return order;
}

template <typename T>
Selection<T> select_top_k(std::span<const T> as_scores, const Matrix<T>& f_tokens, std::size_t k) {
    if (as_scores.size() != f_tokens.rows)
        throw ConfigError("select_top_k: " + std::to_string(as_scores.size()) + " scores for " +
                          std::to_string(f_tokens.rows) + " tokens");
    if (k > f_tokens.rows)
        throw ConfigError("k exceeds tokens per view (" + std::to_string(k) + " > " +
                          std::to_string(f_tokens.rows) + ")");
    Selection<T> sel;
    sel.indices = top_k_indices(as_scores, k);
    sel.tokens = Matrix<T>(k, f_tokens.cols);
    for (std::size_t r = 0; r < k; ++r) {
        auto src = f_tokens.row(sel.indices[r] - 1);
        std::copy(src.begin(), src.end(), sel.tokens.row(r).begin());
    }
    return sel;
}

#define METEOR_INSTANTIATE(T)                                                                      \
    template std::vector<T> visual_scores(std::span<const T>);                                     \
    template std::vector<T> softmax(std::span<const T>);                                           \
    template std::vector<T> native_scores(const Matrix<T>&, std::span<const T>);                   \
    template std::vector<T> aggregate_scores(std::span<const T>, std::span<const T>, double);      \
    template ScoreSet<T> score_tokens(std::span<const T>, const Matrix<T>&, std::span<const T>,    \
                                      double);                                                     \
    template std::vector<std::uint32_t> top_k_indices(std::span<const T>, std::size_t);            \
    template Selection<T> select_top_k(std::span<const T>, const Matrix<T>&, std::size_t);

METEOR_INSTANTIATE(float)
METEOR_INSTANTIATE(double)
#undef METEOR_INSTANTIATE

}  // namespace meteor
