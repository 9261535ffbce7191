#include "meteor/bench.hpp"

#include <algorithm>
#include <chrono>

#include "meteor/error.hpp"
#include "meteor/rng.hpp"

namespace meteor::bench {

double median_seconds(const std::function<void()>& fn, std::size_t trials) {
    using clock = std::chrono::steady_clock;
    fn();
    std::vector<double> times;
    times.reserve(trials);
    for (std::size_t i = 0; i < std::max<std::size_t>(trials, 1); ++i) {
        const auto start = clock::now();
        fn();
        times.push_back(std::chrono::duration<double>(clock::now() - start).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t mid = times.size() / 2;
    return times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
}

std::vector<ScanScalingRow> scan_scaling(const ScanScalingOptions& options) {
    Rng rng(options.seed);
    const auto params = SsmParams<float>::init(options.channels, options.state_dim, rng);
    std::vector<ScanScalingRow> rows;
    for (std::size_t L : options.lengths) {
        ScanSequence<float> seq(L, options.channels);
        rng.fill_normal(std::span(seq.data), 1.0);
        volatile float sink = 0.0f;
        const double t = median_seconds([&] { sink = sink + selective_scan(seq, params).data.back(); },
                                        options.trials);
        ScanScalingRow row{L, t, rows.empty() ? 0.0 : t / rows.back().median_seconds};
        rows.push_back(row);
    }
    return rows;
}

double TokenSink::consume(const std::vector<ViewOutput>& views) const {
    std::size_t width = 0;
    std::vector<std::span<const float>> context;
    for (const auto& v : views) {
        for (std::size_t r = 0; r < v.output.selected.rows; ++r) context.push_back(v.output.selected.row(r));
        width = v.output.selected.cols;
    }
    if (width == 0) return 0.0;
    // Prompt tokens: fixed content, same width.
    std::vector<float> prompt(prompt_tokens * width);
    for (std::size_t i = 0; i < prompt.size(); ++i) prompt[i] = static_cast<float>((i % 17) * 0.01);
    for (std::size_t p = 0; p < prompt_tokens; ++p) context.emplace_back(prompt.data() + p * width, width);

    std::vector<float> query(width, 0.01f);
    double checksum = 0.0;
    for (std::size_t g = 0; g < generated_tokens; ++g) {
        for (std::size_t layer = 0; layer < layers; ++layer) {
            float acc = 0.0f;
            for (const auto& tok : context) {
                float d = 0.0f;
                for (std::size_t c = 0; c < width; ++c) d += tok[c] * query[c];
                acc += d;
            }
            query[layer % width] = acc * 1e-6f;
            checksum += acc;
        }
    }
    return checksum;
}

std::vector<TpsRow> tps(const TpsOptions& options) {
    const SyntheticEncoder encoder(options.seed, options.channels);
    const auto params = FgfParams<float>::init(options.channels, options.output_width, kDefaultStateDim,
                                               mix_seed(options.seed, 1));
    std::vector<TpsRow> rows;
    for (std::size_t k : options.ks) {
        PipelineConfig cfg;
        cfg.k_per_view = k;
        cfg.output_width = options.output_width;
        std::size_t emitted = 0;
        volatile double sink = 0.0;
        const double t = median_seconds(
            [&] {
                const auto views = compress_image(options.image, encoder, params, cfg);
                emitted = total_tokens(views);
                sink = sink + options.sink.consume(views);
            },
            options.trials);
        rows.push_back({k, emitted, t, static_cast<double>(options.sink.generated_tokens) / t});
    }
    return rows;
}

std::vector<AblationCell> ablation(const AblationOptions& options) {
    struct Expert {
        const char* name;
        double lambda;
    };
    const Expert experts[] = {{"visual", 1.0}, {"native", 0.0}, {"visual-native", options.config.lambda_target}};
    if (options.replicates == 0) throw ConfigError("ablation needs at least one replicate");
    std::vector<AblationCell> cells;
    for (ScanMode scan : options.scans) {
        for (const auto& e : experts) {
            AblationCell cell{std::string(to_string(scan)), e.name, e.lambda, 0.0, 0.0, 0.0};
            for (std::size_t r = 0; r < options.replicates; ++r) {
                TrainConfig cfg = options.config;
                cfg.scan_mode = scan;
                cfg.lambda_target = e.lambda;
                cfg.param_seed = options.config.param_seed + r;
                cfg.metrics_path.clear();
                const auto result = train_toy<float>(options.spec, cfg);
                cell.recall += result.metrics.selection_recall;
                cell.first_epoch_loss_variance += result.metrics.first_epoch_loss_variance;
                cell.final_loss += result.metrics.final_loss;
            }
            const auto reps = static_cast<double>(options.replicates);
            cell.recall /= reps;
            cell.first_epoch_loss_variance /= reps;
            cell.final_loss /= reps;
            cells.push_back(cell);
        }
    }
    return cells;
}

}  // namespace meteor::bench
