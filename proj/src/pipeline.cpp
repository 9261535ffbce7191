#include "meteor/pipeline.hpp"

#include <cmath>
#include <exception>

#include "meteor/error.hpp"
#include "meteor/parallel.hpp"
#include "meteor/rng.hpp"

namespace meteor {

TokenGrid<float> SyntheticEncoder::encode(const ViewRequest& request) const {
    if (channels_ == 0) throw ConfigError("synthetic encoder needs channels >= 1");
    if (request.encoder_side < kPatchSize) throw ConfigError("encoder_side smaller than one patch");
    const std::size_t side = request.encoder_side / kPatchSize;
    std::uint64_t s = mix_seed(seed_, request.global ? 0xC0FFEE : 0);
    s = mix_seed(s, request.rect.x);
    s = mix_seed(s, request.rect.y);
    s = mix_seed(s, request.rect.w);
    s = mix_seed(s, request.rect.h);
    Rng rng(s);

    TokenGrid<float> grid;
    grid.h_u = side;
    grid.w_u = side;
    grid.tokens = Matrix<float>(side * side, channels_);
    rng.fill_normal(std::span(grid.tokens.data), 1.0);
    grid.cls_token.resize(channels_);
    rng.fill_normal(std::span(grid.cls_token), 1.0);

    // Attention: softmax of random logits, class self-attention included.
    std::vector<double> logits(grid.n() + 1);
    double top = -1e300;
    for (auto& l : logits) {
        l = 1.5 * rng.normal();
        top = std::max(top, l);
    }
    double total = 0.0;
    for (auto& l : logits) {
        l = std::exp(l - top);
        total += l;
    }
    grid.cls_attention.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) grid.cls_attention[i] = static_cast<float>(logits[i] / total);
    return grid;
}

FileEncoder::FileEncoder(const std::string& path) : bundle_(load_bundle(path)) {}

TokenGrid<float> FileEncoder::encode(const ViewRequest& request) const {
    for (const auto& v : bundle_.views) {
        if (v.view != request.view) continue;
        if (v.global != request.global || (!request.global && !(v.rect == request.rect)))
            throw IoError("bundle view " + std::to_string(v.view) + " does not match the requested slice");
        return v.grid;
    }
    throw IoError("bundle has no view " + std::to_string(request.view));
}

void PipelineConfig::validate() const {
    if (k_per_view == 0) throw ConfigError("k must be >= 1");
    if (!(lambda_target >= 0.0 && lambda_target <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (window != 3 && window != 5 && window != 7) throw ConfigError("window must be 3, 5 or 7");
    if (encoder_side < kPatchSize) throw ConfigError("encoder_side must be >= 14");
    if (output_width == 0) throw ConfigError("output width must be >= 1");
    const std::size_t per_view = (encoder_side / kPatchSize) * (encoder_side / kPatchSize);
    if (k_per_view > per_view)
        throw ConfigError("k exceeds tokens per view (" + std::to_string(k_per_view) + " > " +
                          std::to_string(per_view) + ")");
}

CompressedOutput<float> compress_view(const TokenGrid<float>& grid, const FgfParams<float>& params,
                                      const PipelineConfig& config) {
    grid.validate();
    if (config.k_per_view > grid.n())
        throw ConfigError("k exceeds tokens per view (" + std::to_string(config.k_per_view) + " > " +
                          std::to_string(grid.n()) + ")");
    const double lambda = effective_lambda(config.lambda_target);
    const auto fused = fuse(grid, params, config.window, config.scan_mode);
    const auto scores = score_tokens<float>(grid.cls_attention, fused.f_tokens, fused.ins_out, lambda);
    const auto sel = select_top_k<float>(scores.as_scores, fused.f_tokens, config.k_per_view);

    CompressedOutput<float> out;
    out.indices = sel.indices;
    out.selected = Matrix<float>(sel.tokens.rows, params.output_width());
    for (std::size_t r = 0; r < sel.tokens.rows; ++r) params.out_proj.apply(sel.tokens.row(r), out.selected.row(r));
    out.report.tokens_in = grid.n();
    out.report.tokens_out = sel.indices.size();
    out.report.compression_ratio = compression_ratio(grid.n(), sel.indices.size());
    out.report.effective_lambda = lambda;
    return out;
}

std::vector<ViewRequest> plan_views(const ImageMeta& meta, const PipelineConfig& config) {
    const SliceGrid slices = partition_image(meta, config.encoder_side, config.max_slices);
    std::vector<ViewRequest> views;
    views.push_back({0, true, {0, 0, meta.width, meta.height}, config.encoder_side});
    for (std::size_t i = 0; i < slices.slice_rects.size(); ++i)
        views.push_back({i + 1, false, slices.slice_rects[i], config.encoder_side});
    return views;
}

std::vector<ViewOutput> compress_image(const ImageMeta& meta, const Encoder& encoder,
                                       const FgfParams<float>& params, const PipelineConfig& config) {
    config.validate();
    params.validate();
    const auto views = plan_views(meta, config);
    std::vector<ViewOutput> out(views.size());
    parallel_for(views.size(), [&](std::size_t i) {
        const auto& req = views[i];
        TokenGrid<float> grid;
        try {
            grid = encoder.encode(req);
            grid.validate();
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw IoError("encoder failed on view " + std::to_string(req.view) + ": " + e.what());
        }
        try {
            out[i] = {req, compress_view(grid, params, config)};
        } catch (const DegenerateAttention& e) {
            throw DegenerateAttention("view " + std::to_string(req.view) + ": " + e.what());
        }
    });
    return out;
}

std::size_t total_tokens(const std::vector<ViewOutput>& views) {
    std::size_t n = 0;
    for (const auto& v : views) n += v.output.report.tokens_out;
    return n;
}

}  // namespace meteor
