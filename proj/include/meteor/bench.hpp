#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "meteor/pipeline.hpp"
#include "meteor/trainer.hpp"

namespace meteor::bench {

/// Median wall-clock seconds of `trials` runs of fn (after one warm-up run).
double median_seconds(const std::function<void()>& fn, std::size_t trials);

struct ScanScalingRow {
    std::size_t length = 0;
    double median_seconds = 0.0;
    double ratio = 0.0;  // runtime(L) / runtime(L/2 row), 0 for the first row
};

struct ScanScalingOptions {
    std::vector<std::size_t> lengths{4096, 8192, 16384};
    std::size_t channels = 32;
    std::size_t state_dim = 16;
    std::size_t trials = 7;
    std::uint64_t seed = 3;
};

std::vector<ScanScalingRow> scan_scaling(const ScanScalingOptions& options);

/// Stand-in for the language model's decoding cost: every generated token
/// touches every context token once per layer, so cost is linear in the
/// number of visual tokens handed over.
struct TokenSink {
    std::size_t prompt_tokens = 64;
    std::size_t generated_tokens = 64;
    std::size_t layers = 8;

    /// Returns a checksum so the work cannot be optimized away.
    double consume(const std::vector<ViewOutput>& views) const;
};

struct TpsRow {
    std::size_t k = 0;
    std::size_t visual_tokens = 0;
    double median_seconds = 0.0;
    double tokens_per_second = 0.0;  // generated tokens / (compress + sink)
};

struct TpsOptions {
    std::vector<std::size_t> ks{576, 144, 64, 32};
    ImageMeta image{1008, 672};
    std::size_t channels = 64;
    std::size_t output_width = 256;
    std::size_t trials = 5;
    std::uint64_t seed = 11;
    TokenSink sink;
};

std::vector<TpsRow> tps(const TpsOptions& options);

struct AblationCell {
    std::string scan;
    std::string expert;
    double lambda_target = 0.0;
    double recall = 0.0;
    double first_epoch_loss_variance = 0.0;
    double final_loss = 0.0;
};

struct AblationOptions {
    ToyTaskSpec spec;
    TrainConfig config;
    std::vector<ScanMode> scans{ScanMode::kSingle, ScanMode::kLocalToSingle};
    std::size_t replicates = 1;  // parameter seeds averaged per cell
};

/// Expert modes: visual (lambda 1), native (lambda 0), visual-native
/// (config.lambda_target). Replicate r trains from param_seed + r; the cell
/// reports the replicate means.
std::vector<AblationCell> ablation(const AblationOptions& options);

}  // namespace meteor::bench
