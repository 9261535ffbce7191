#include "meteor/token_model.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "meteor/error.hpp"

namespace meteor {

void ImageMeta::validate() const {
    if (width == 0 || height == 0)
        throw ConfigError("image must be at least 1x1, got " + std::to_string(width) + "x" +
                          std::to_string(height));
}

template <typename T>
void TokenGrid<T>::validate() const {
    const std::size_t count = n();
    if (count == 0) throw ConfigError("token grid is empty");
    if (tokens.rows != count)
        throw ConfigError("token grid has " + std::to_string(tokens.rows) + " tokens, expected " +
                          std::to_string(count));
    if (tokens.cols == 0) throw ConfigError("token grid has zero channels");
    if (cls_token.size() != tokens.cols)
        throw ConfigError("cls_token width " + std::to_string(cls_token.size()) +
                          " does not match channels " + std::to_string(tokens.cols));
    if (cls_attention.size() != count + 1)
        throw ConfigError("cls_attention length " + std::to_string(cls_attention.size()) +
                          ", expected " + std::to_string(count + 1));
    if (!all_finite<T>(tokens.data) || !all_finite<T>(cls_token))
        throw NumericError("token grid contains non-finite values");
    double total = 0.0;
    for (T a : cls_attention) {
        if (!std::isfinite(a) || a < T{0})
            throw NumericError("cls_attention entries must be finite and nonnegative");
        total += static_cast<double>(a);
    }
    if (std::abs(total - 1.0) > 1e-5)
        throw NumericError("cls_attention sums to " + std::to_string(total) + ", expected 1");
}

template struct TokenGrid<float>;
template struct TokenGrid<double>;

double partition_deviation(const ImageMeta& meta, std::size_t rows, std::size_t cols,
                           std::size_t encoder_side) {
    constexpr double encoder_aspect = 1.0;
    const double w = static_cast<double>(meta.width);
    const double h = static_cast<double>(meta.height);
    const double side = static_cast<double>(encoder_side);
    const double slice_aspect = (w / static_cast<double>(cols)) / (h / static_cast<double>(rows));
    const double area_ratio = (w * h) / (static_cast<double>(rows * cols) * side * side);
    return std::abs(std::log(slice_aspect) - std::log(encoder_aspect)) +
           std::abs(std::log(area_ratio));
}

std::vector<std::size_t> split_extent(std::size_t extent, std::size_t parts) {
    std::vector<std::size_t> out(parts, extent / parts);
    for (std::size_t i = 0; i < extent % parts; ++i) ++out[i];
    return out;
}

SliceGrid partition_image(const ImageMeta& meta, std::size_t encoder_side, std::size_t max_slices) {
    meta.validate();
    if (encoder_side == 0) throw ConfigError("encoder_side must be >= 1");

    SliceGrid grid;
    if ((meta.width <= encoder_side && meta.height <= encoder_side) || max_slices == 0) return grid;

    // Scores within this of each other count as tied; exact ties are common
    // (single-row strips trade the two terms off one for one).
    constexpr double kTieTolerance = 1e-9;
    double best = std::numeric_limits<double>::infinity();
    // Enumeration order (slices ascending, then rows ascending) makes the
    // strict comparison below implement the tie-break.
    for (std::size_t slices = 1; slices <= max_slices; ++slices) {
        for (std::size_t rows = 1; rows <= slices; ++rows) {
            if (slices % rows != 0) continue;
            const std::size_t cols = slices / rows;
            if (rows > meta.height || cols > meta.width) continue;
            const double score = partition_deviation(meta, rows, cols, encoder_side);
            if (score < best - kTieTolerance) {
                best = score;
                grid.rows = rows;
                grid.cols = cols;
            }
        }
    }
    grid.n_slices = grid.rows * grid.cols;

    const auto heights = split_extent(meta.height, grid.rows);
    const auto widths = split_extent(meta.width, grid.cols);
    std::size_t y = 0;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        std::size_t x = 0;
        for (std::size_t c = 0; c < grid.cols; ++c) {
            grid.slice_rects.push_back({x, y, widths[c], heights[r]});
            x += widths[c];
        }
        y += heights[r];
    }
    return grid;
}

std::size_t token_budget(std::size_t n_slices, std::size_t k_per_view) {
    if (k_per_view == 0) throw ConfigError("k_per_view must be >= 1");
    return k_per_view * (n_slices + 1);
}

std::size_t raster_index(std::size_t row, std::size_t col, std::size_t h_u, std::size_t w_u) {
    if (row >= h_u || col >= w_u)
        throw ConfigError("token coordinate (" + std::to_string(row) + ", " + std::to_string(col) +
                          ") outside " + std::to_string(h_u) + "x" + std::to_string(w_u) + " grid");
    return 1 + row * w_u + col;
}

double compression_ratio(std::size_t tokens_in, std::size_t tokens_out) {
    if (tokens_in == 0) return 0.0;
    return 1.0 - static_cast<double>(tokens_out) / static_cast<double>(tokens_in);
}

}  // namespace meteor
