#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "meteor/fgf.hpp"
#include "meteor/token_model.hpp"
#include "meteor/vns.hpp"

namespace meteor {

/// Planted-saliency task: unit-variance noise tokens, a few of which are
/// shifted along a hidden unit direction. Class attention is only mildly
/// informative (2x mass on planted tokens, log-normal jitter on all).
struct ToyTaskSpec {
    std::size_t grid_h = 6;
    std::size_t grid_w = 6;
    std::size_t channels = 16;
    std::size_t n_salient = 4;
    double signal_strength = 3.0;
    double attention_noise = 0.25;  // stddev of the log-normal attention jitter
    std::uint64_t seed = 1;

    void validate() const;
};

template <typename T>
struct ToySample {
    TokenGrid<T> grid;
    std::vector<std::uint32_t> truth;  // 1-based, ascending
};

/// The hidden instruction direction for a channel count. Fixed across seeds
/// so that training and evaluation sets share it.
std::vector<double> instruction_direction(std::size_t channels);

/// Deterministic given spec.seed.
template <typename T>
std::vector<ToySample<T>> gen_toy_batch(const ToyTaskSpec& spec, std::size_t batch);

inline constexpr double kLossEpsilon = 1e-12;

/// Cross-entropy of the aggregated scores against the uniform distribution
/// over the truth indices (1-based).
template <typename T>
T selection_loss(std::span<const T> as_scores, std::span<const std::uint32_t> truth);

template <typename T>
struct LossAndGradients {
    T loss{};
    FgfParams<T> grads;
    ScoreSet<T> scores;
};

/// Forward through fuse -> native scores -> aggregation -> loss, then
/// reverse-mode back to every fusion parameter. The visual expert is a
/// constant; out_proj sits after selection and gets zero gradient.
template <typename T>
LossAndGradients<T> loss_and_gradients(const ToySample<T>& sample, const FgfParams<T>& params,
                                       double lambda_eff, std::size_t window, ScanMode mode);

/// Forward-only loss through the production fuse path.
template <typename T>
T toy_loss(const ToySample<T>& sample, const FgfParams<T>& params, double lambda_eff,
           std::size_t window, ScanMode mode);

/// Throws NumericError naming the first non-finite gradient tensor.
template <typename T>
void check_gradients_finite(const FgfParams<T>& grads);

enum class OptimizerKind { kAdamW, kMomentum };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
    double learning_rate = 3e-3;  // peak, cosine-decayed to 0
    std::size_t batch_size = 32;
    std::size_t epochs = 20;
    std::size_t k = 4;
    double lambda_target = kDefaultLambda;
    std::size_t warmup_steps = 0;  // 0: one epoch
    std::size_t train_samples = 1024;
    std::size_t eval_samples = 256;
    std::size_t state_dim = kDefaultStateDim;
    std::size_t window = 3;
    ScanMode scan_mode = ScanMode::kLocalToSingle;
    OptimizerKind optimizer = OptimizerKind::kAdamW;
    double weight_decay = 0.0;
    double momentum = 0.9;
    std::uint64_t param_seed = 7;
    std::string metrics_path;  // JSON lines, one per step; empty disables
    std::string dump_path;     // parameter dump on divergence; empty disables

    void validate() const;
};

struct TrainMetrics {
    double final_loss = 0.0;
    double selection_recall = 0.0;  // on the held-out set
    double first_epoch_loss_variance = 0.0;
    std::size_t steps = 0;
    std::size_t steps_per_epoch = 0;
    std::vector<double> loss_curve;
    std::vector<double> lambda_curve;
};

template <typename T>
struct TrainResult {
    TrainMetrics metrics;
    FgfParams<T> params;
};

/// Mean |Q_K intersect truth| / |truth| over the samples, selecting with a
/// fixed lambda.
template <typename T>
double evaluate_recall(const FgfParams<T>& params, const std::vector<ToySample<T>>& samples,
                       std::size_t k, double lambda, std::size_t window, ScanMode mode);

/// Held-out set for a spec: same hidden direction, disjoint sample seed.
template <typename T>
std::vector<ToySample<T>> toy_eval_set(const ToyTaskSpec& spec, std::size_t samples);

template <typename T>
TrainResult<T> train_toy(const ToyTaskSpec& spec, const TrainConfig& config);

double variance(std::span<const double> values);

}  // namespace meteor
