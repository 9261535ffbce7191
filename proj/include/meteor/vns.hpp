#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "meteor/tensor.hpp"

namespace meteor {

inline constexpr double kDefaultLambda = 0.8;

/// Visual expert: class-token attention with the self-attention entry
/// dropped and the remaining mass renormalized to a distribution.
template <typename T>
std::vector<T> visual_scores(std::span<const T> cls_attention);

/// Native expert: softmax over the view of <F^i, ins_out>.
template <typename T>
std::vector<T> native_scores(const Matrix<T>& f_tokens, std::span<const T> ins_out);

/// Numerically stable softmax (max-subtracted, double accumulation).
template <typename T>
std::vector<T> softmax(std::span<const T> logits);

/// AS = lambda * VS + (1 - lambda) * NS.
template <typename T>
std::vector<T> aggregate_scores(std::span<const T> vs, std::span<const T> ns, double lambda_eff);

/// Progressive expert weighting: the native weight ramps linearly from 0 to
/// 1 - lambda_target over warmup_steps optimizer steps.
struct WarmupSchedule {
    double lambda_target = kDefaultLambda;
    std::size_t warmup_steps = 1;
    std::size_t current_step = 0;

    void validate() const;
    double native_weight() const;
};

double effective_lambda(const WarmupSchedule& schedule);
/// Inference has no schedule: the target weight applies directly.
double effective_lambda(double lambda_target);

template <typename T>
struct ScoreSet {
    std::vector<T> vs;
    std::vector<T> ns;
    std::vector<T> as_scores;
    double lambda_eff = kDefaultLambda;
};

template <typename T>
ScoreSet<T> score_tokens(std::span<const T> cls_attention, const Matrix<T>& f_tokens,
                         std::span<const T> ins_out, double lambda_eff);

/// Indices of the k largest scores, smaller index winning ties, returned
/// 1-based and ascending.
template <typename T>
std::vector<std::uint32_t> top_k_indices(std::span<const T> scores, std::size_t k);

template <typename T>
struct Selection {
    std::vector<std::uint32_t> indices;  // Q_K, 1-based, ascending
    Matrix<T> tokens;                    // F^i for i in Q_K, same order
};

template <typename T>
Selection<T> select_top_k(std::span<const T> as_scores, const Matrix<T>& f_tokens, std::size_t k);

}  // namespace meteor
