#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "meteor/tensor.hpp"

namespace meteor {

inline constexpr std::size_t kDefaultEncoderSide = 336;
inline constexpr std::size_t kDefaultMaxSlices = 6;
inline constexpr std::size_t kPatchSize = 14;

struct ImageMeta {
    std::size_t width = 0;
    std::size_t height = 0;

    void validate() const;
};

struct PixelRect {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t w = 0;
    std::size_t h = 0;

    std::size_t area() const { return w * h; }
    bool operator==(const PixelRect&) const = default;
};

/// Row-major tiling of an image into sub-images. The resized global view is
/// always emitted in addition to the slices.
struct SliceGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t n_slices = 0;
    bool includes_global = true;
    std::vector<PixelRect> slice_rects;
};

/// One view's encoder output: h_u x w_u tokens of width C in raster order,
/// the class token, and the class token's attention over [CLS, tokens...].
template <typename T>
struct TokenGrid {
    std::size_t h_u = 0;
    std::size_t w_u = 0;
    Matrix<T> tokens;  // [h_u*w_u x C]
    std::vector<T> cls_token;
    std::vector<T> cls_attention;  // length 1 + h_u*w_u

    std::size_t n() const { return h_u * w_u; }
    std::size_t channels() const { return tokens.cols; }

    /// Throws ConfigError / NumericError when an invariant does not hold.
    void validate() const;
};

struct CompressionReport {
    std::size_t tokens_in = 0;
    std::size_t tokens_out = 0;
    double compression_ratio = 0.0;
    double effective_lambda = 0.0;
};

/// Retained tokens of one view. Indices are 1-based raster positions,
/// strictly ascending; selected rows follow the same order.
template <typename T>
struct CompressedOutput {
    Matrix<T> selected;  // [K x D]
    std::vector<std::uint32_t> indices;
    CompressionReport report;
};

/// Grid search over rows*cols <= max_slices for the tiling whose slices are
/// closest to the encoder's native square in aspect and area. Images that
/// fit the encoder natively get no slices.
SliceGrid partition_image(const ImageMeta& meta, std::size_t encoder_side = kDefaultEncoderSide,
                          std::size_t max_slices = kDefaultMaxSlices);

/// Deviation of a rows x cols tiling from the encoder's native square.
double partition_deviation(const ImageMeta& meta, std::size_t rows, std::size_t cols,
                           std::size_t encoder_side);

/// Splits `extent` pixels into `parts` lengths, remainder pixels going one
/// each to the leading parts.
std::vector<std::size_t> split_extent(std::size_t extent, std::size_t parts);

/// Tokens emitted for an image: one K-sized block per slice plus the global view.
std::size_t token_budget(std::size_t n_slices, std::size_t k_per_view);

/// 1-based raster index of (row, col) in a grid of width w_u.
std::size_t raster_index(std::size_t row, std::size_t col, std::size_t h_u, std::size_t w_u);

double compression_ratio(std::size_t tokens_in, std::size_t tokens_out);

}  // namespace meteor
