#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "meteor/fgf.hpp"
#include "meteor/tensor_io.hpp"
#include "meteor/token_model.hpp"
#include "meteor/vns.hpp"

namespace meteor {

/// What the encoder is asked to produce: the resized global view or one
/// slice of the partitioned image.
struct ViewRequest {
    std::size_t view = 0;  // 0 = global, 1..N = slices row-major
    bool global = true;
    PixelRect rect;
    std::size_t encoder_side = kDefaultEncoderSide;
};

/// Pluggable vision encoder. Implementations return grids of
/// (encoder_side / 14)^2 tokens that satisfy the TokenGrid invariants.
class Encoder {
public:
    virtual ~Encoder() = default;
    virtual TokenGrid<float> encode(const ViewRequest& request) const = 0;
};

/// Deterministic pseudo-random grids. Each view's content depends only on
/// (seed, view rect), so views are independent of one another.
class SyntheticEncoder final : public Encoder {
public:
    SyntheticEncoder(std::uint64_t seed, std::size_t channels) : seed_(seed), channels_(channels) {}
    TokenGrid<float> encode(const ViewRequest& request) const override;

private:
    std::uint64_t seed_;
    std::size_t channels_;
};

/// Serves grids from a pre-exported bundle.
class FileEncoder final : public Encoder {
public:
    explicit FileEncoder(const std::string& path);
    explicit FileEncoder(GridBundle bundle) : bundle_(std::move(bundle)) {}
    TokenGrid<float> encode(const ViewRequest& request) const override;
    const GridBundle& bundle() const { return bundle_; }

private:
    GridBundle bundle_;
};

struct PipelineConfig {
    std::size_t k_per_view = 32;
    double lambda_target = kDefaultLambda;
    std::size_t window = 3;
    ScanMode scan_mode = ScanMode::kLocalToSingle;
    std::size_t max_slices = kDefaultMaxSlices;
    std::size_t encoder_side = kDefaultEncoderSide;
    std::size_t output_width = 256;

    void validate() const;
};

struct ViewOutput {
    ViewRequest request;
    CompressedOutput<float> output;
};

/// Fuse, score, keep the top k_per_view tokens and project them to the
/// output width.
CompressedOutput<float> compress_view(const TokenGrid<float>& grid, const FgfParams<float>& params,
                                      const PipelineConfig& config);

/// Views to encode for an image: global first, then slices row-major.
std::vector<ViewRequest> plan_views(const ImageMeta& meta, const PipelineConfig& config);

/// Partition, encode and compress every view (concurrently), returned in
/// view order.
std::vector<ViewOutput> compress_image(const ImageMeta& meta, const Encoder& encoder,
                                       const FgfParams<float>& params, const PipelineConfig& config);

std::size_t total_tokens(const std::vector<ViewOutput>& views);

}  // namespace meteor
