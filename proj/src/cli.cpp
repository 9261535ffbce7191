#include "meteor/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "meteor/bench.hpp"
#include "meteor/error.hpp"
#include "meteor/pipeline.hpp"
#include "meteor/tensor_io.hpp"
#include "meteor/trainer.hpp"

namespace meteor::cli {

namespace {

using json = nlohmann::json;

struct SyntheticInput {
    ImageMeta image;
    std::uint64_t seed = 0;
};

std::optional<SyntheticInput> parse_synthetic(const std::string& input) {
    constexpr std::string_view prefix = "synthetic:";
    if (input.rfind(prefix, 0) != 0) return std::nullopt;
    SyntheticInput s;
    unsigned long long w = 0, h = 0, seed = 0;
    char tail = 0;
    if (std::sscanf(input.c_str() + prefix.size(), "%llux%llu:%llu%c", &w, &h, &seed, &tail) != 3)
        throw ConfigError("--input: expected synthetic:WxH:seed, got '" + input + "'");
    s.image = {static_cast<std::size_t>(w), static_cast<std::size_t>(h)};
    s.image.validate();
    s.seed = seed;
    return s;
}

std::pair<std::size_t, std::size_t> parse_dims(const std::string& text, const char* flag) {
    unsigned long long a = 0, b = 0;
    char tail = 0;
    if (std::sscanf(text.c_str(), "%llux%llu%c", &a, &b, &tail) != 2)
        throw ConfigError(std::string(flag) + ": expected AxB, got '" + text + "'");
    return {static_cast<std::size_t>(a), static_cast<std::size_t>(b)};
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("'" + path + "' is not valid JSON: " + e.what());
    }
}

template <typename V>
void read_field(const json& j, const char* key, V& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("field '") + key + "' has the wrong type");
    }
}

// ---------------------------------------------------------------- compress

struct CompressArgs {
    std::string input;
    std::string params_path;
    std::optional<std::uint64_t> init_random;
    PipelineConfig config;
    std::string scan = "local_to_single";
    std::size_t channels = 64;
    std::size_t state_dim = kDefaultStateDim;
    std::string out;
    std::string report;
};

int cmd_compress(const CompressArgs& a, std::ostream& out) {
    PipelineConfig config = a.config;
    config.scan_mode = parse_scan_mode(a.scan);

    std::unique_ptr<Encoder> encoder;
    ImageMeta image;
    if (auto synth = parse_synthetic(a.input)) {
        image = synth->image;
        encoder = std::make_unique<SyntheticEncoder>(synth->seed, a.channels);
    } else {
        auto file = std::make_unique<FileEncoder>(a.input);
        const auto& bundle = file->bundle();
        if (bundle.views.empty()) throw IoError("bundle '" + a.input + "' has no views");
        image = bundle.image;
        config.encoder_side = bundle.views.front().encoder_side;
        config.max_slices = bundle.views.size() - 1;
        encoder = std::move(file);
    }
    config.validate();

    FgfParams<float> params;
    if (!a.params_path.empty()) {
        params = load_params(a.params_path);
    } else if (a.init_random) {
        const std::size_t C = encoder->encode({0, true, {0, 0, image.width, image.height}, config.encoder_side}).channels();
        params = FgfParams<float>::init(C, config.output_width, a.state_dim, *a.init_random);
    } else {
        throw ConfigError("either --params or --init-random is required");
    }

    const auto views = compress_image(image, *encoder, params, config);

    TensorGroup group;
    std::ostringstream report;
    std::size_t tokens_in = 0, tokens_out = 0;
    for (const auto& v : views) {
        const std::string prefix = "view" + std::to_string(v.request.view) + "/";
        const auto& o = v.output;
        group.emplace_back(prefix + "selected",
                           Tensor::f32({static_cast<std::uint32_t>(o.selected.rows), static_cast<std::uint32_t>(o.selected.cols)},
                                       o.selected.data));
        group.emplace_back(prefix + "indices", Tensor::u32({static_cast<std::uint32_t>(o.indices.size())}, o.indices));
        const auto& r = v.request.rect;
        json rec{{"view", v.request.view},
                 {"global", v.request.global},
                 {"rect", {r.x, r.y, r.w, r.h}},
                 {"tokens_in", o.report.tokens_in},
                 {"tokens_out", o.report.tokens_out},
                 {"compression_ratio", o.report.compression_ratio},
                 {"effective_lambda", o.report.effective_lambda}};
        report << rec.dump() << '\n';
        tokens_in += o.report.tokens_in;
        tokens_out += o.report.tokens_out;
    }
    const std::size_t budget = token_budget(views.size() - 1, config.k_per_view);
    json summary{{"summary", true},
                 {"views", views.size()},
                 {"tokens_in", tokens_in},
                 {"tokens_out", tokens_out},
                 {"token_budget", budget},
                 {"compression_ratio", compression_ratio(tokens_in, tokens_out)}};
    report << summary.dump() << '\n';

    write_group_file(a.out, group);
    const std::string report_path = a.report.empty() ? a.out + ".jsonl" : a.report;
    const std::string text = report.str();
    write_file_bytes(report_path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));

    out << std::left << std::setw(6) << "view" << std::setw(8) << "kind" << std::setw(22) << "rect"
        << std::setw(11) << "tokens_in" << std::setw(12) << "tokens_out" << std::setw(8) << "ratio"
        << "lambda\n";
    for (const auto& v : views) {
        const auto& r = v.request.rect;
        const std::string rect = std::to_string(r.x) + "," + std::to_string(r.y) + " " + std::to_string(r.w) + "x" +
                                 std::to_string(r.h);
        out << std::left << std::setw(6) << v.request.view << std::setw(8) << (v.request.global ? "global" : "slice")
            << std::setw(22) << rect << std::setw(11) << v.output.report.tokens_in << std::setw(12)
            << v.output.report.tokens_out << std::setw(8) << fixed(v.output.report.compression_ratio, 4)
            << fixed(v.output.report.effective_lambda, 2) << '\n';
    }
    out << "total: views=" << views.size() << " tokens_in=" << tokens_in << " tokens_out=" << tokens_out
        << " budget=" << budget << " ratio=" << fixed(compression_ratio(tokens_in, tokens_out), 4) << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- train-toy

struct TrainArgs {
    std::string spec_path;
    std::string config_path;
    ToyTaskSpec spec;
    TrainConfig config;
    std::string grid = "6x6";
    std::string scan = "local_to_single";
    std::string optimizer = "adamw";
    std::string save_params;
    std::optional<double> assert_recall;
    bool f64 = false;
    // Flags given explicitly on the command line win over the JSON files.
    std::vector<std::string> explicit_flags;
};

void apply_spec_json(const json& j, ToyTaskSpec& s) {
    read_field(j, "grid_h", s.grid_h);
    read_field(j, "grid_w", s.grid_w);
    read_field(j, "channels", s.channels);
    read_field(j, "n_salient", s.n_salient);
    read_field(j, "signal_strength", s.signal_strength);
    read_field(j, "attention_noise", s.attention_noise);
    read_field(j, "seed", s.seed);
}

void apply_config_json(const json& j, TrainConfig& c) {
    read_field(j, "learning_rate", c.learning_rate);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "epochs", c.epochs);
    read_field(j, "k", c.k);
    read_field(j, "lambda_target", c.lambda_target);
    read_field(j, "warmup_steps", c.warmup_steps);
    read_field(j, "train_samples", c.train_samples);
    read_field(j, "eval_samples", c.eval_samples);
    read_field(j, "state_dim", c.state_dim);
    read_field(j, "window", c.window);
    read_field(j, "weight_decay", c.weight_decay);
    read_field(j, "momentum", c.momentum);
    read_field(j, "param_seed", c.param_seed);
    if (j.contains("scan_mode")) c.scan_mode = parse_scan_mode(j.at("scan_mode").get<std::string>());
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
}

template <typename T>
TrainMetrics train_and_save(const ToyTaskSpec& spec, const TrainConfig& config, const std::string& save_path) {
    auto result = train_toy<T>(spec, config);
    if (!save_path.empty()) save_params(save_path, result.params.template cast<float>());
    return result.metrics;
}

int cmd_train_toy(TrainArgs a, std::ostream& out) {
    // Layering: defaults < JSON files < explicit flags. Flags were parsed
    // into a.spec / a.config already, so snapshot them before the files
    // overwrite the structs.
    const ToyTaskSpec flag_spec = a.spec;
    const TrainConfig flag_config = a.config;
    auto given = [&](const char* flag) {
        return std::find(a.explicit_flags.begin(), a.explicit_flags.end(), flag) != a.explicit_flags.end();
    };
    if (!a.spec_path.empty()) apply_spec_json(load_json_file(a.spec_path), a.spec);
    if (!a.config_path.empty()) apply_config_json(load_json_file(a.config_path), a.config);

    if (given("--grid") || a.spec_path.empty()) std::tie(a.spec.grid_h, a.spec.grid_w) = parse_dims(a.grid, "--grid");
    if (given("--channels")) a.spec.channels = flag_spec.channels;
    if (given("--salient")) a.spec.n_salient = flag_spec.n_salient;
    if (given("--strength")) a.spec.signal_strength = flag_spec.signal_strength;
    if (given("--attention-noise")) a.spec.attention_noise = flag_spec.attention_noise;
    if (given("--seed")) a.spec.seed = flag_spec.seed;
    if (given("--lr")) a.config.learning_rate = flag_config.learning_rate;
    if (given("--batch")) a.config.batch_size = flag_config.batch_size;
    if (given("--epochs")) a.config.epochs = flag_config.epochs;
    if (given("--k")) a.config.k = flag_config.k;
    if (given("--lambda")) a.config.lambda_target = flag_config.lambda_target;
    if (given("--warmup-steps")) a.config.warmup_steps = flag_config.warmup_steps;
    if (given("--train-samples")) a.config.train_samples = flag_config.train_samples;
    if (given("--eval-samples")) a.config.eval_samples = flag_config.eval_samples;
    if (given("--state-dim")) a.config.state_dim = flag_config.state_dim;
    if (given("--window")) a.config.window = flag_config.window;
    if (given("--param-seed")) a.config.param_seed = flag_config.param_seed;
    if (given("--scan") || a.config_path.empty()) a.config.scan_mode = parse_scan_mode(a.scan);
    if (given("--optimizer") || a.config_path.empty()) a.config.optimizer = parse_optimizer(a.optimizer);
    a.config.metrics_path = flag_config.metrics_path;
    a.config.dump_path = flag_config.dump_path;

    const TrainMetrics m = a.f64 ? train_and_save<double>(a.spec, a.config, a.save_params)
                                 : train_and_save<float>(a.spec, a.config, a.save_params);
    out << "steps=" << m.steps << " final_loss=" << fixed(m.final_loss, 6)
        << " first_epoch_loss_variance=" << fixed(m.first_epoch_loss_variance, 6)
        << " eval_recall=" << fixed(m.selection_recall, 4) << '\n';
    if (a.assert_recall && m.selection_recall < *a.assert_recall) {
        out << "recall " << fixed(m.selection_recall, 4) << " below asserted " << fixed(*a.assert_recall, 4) << '\n';
        return 1;
    }
    return kExitOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
    std::string mode;
    std::vector<std::size_t> sizes;
    std::size_t trials = 5;
    std::string json_path;
    std::size_t epochs = 20;
    std::size_t replicates = 1;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
    json report;
    report["mode"] = a.mode;
    if (a.trials < 5) throw ConfigError("--trials must be >= 5");
    if (a.mode == "scan_scaling") {
        bench::ScanScalingOptions opt;
        if (!a.sizes.empty()) opt.lengths = a.sizes;
        opt.trials = a.trials;
        const auto rows = bench::scan_scaling(opt);
        out << std::left << std::setw(10) << "L" << std::setw(16) << "median_ms" << "ratio\n";
        for (const auto& r : rows) {
            out << std::left << std::setw(10) << r.length << std::setw(16) << fixed(r.median_seconds * 1e3, 3)
                << (r.ratio > 0 ? fixed(r.ratio, 3) : "-") << '\n';
            report["rows"].push_back({{"length", r.length}, {"median_seconds", r.median_seconds}, {"ratio", r.ratio}});
        }
    } else if (a.mode == "tps") {
        bench::TpsOptions opt;
        if (!a.sizes.empty()) opt.ks = a.sizes;
        opt.trials = a.trials;
        const auto rows = bench::tps(opt);
        out << std::left << std::setw(8) << "K" << std::setw(15) << "visual_tokens" << std::setw(14) << "median_ms"
            << "tps\n";
        for (const auto& r : rows) {
            out << std::left << std::setw(8) << r.k << std::setw(15) << r.visual_tokens << std::setw(14)
                << fixed(r.median_seconds * 1e3, 2) << fixed(r.tokens_per_second, 2) << '\n';
            report["rows"].push_back({{"k", r.k},
                                      {"visual_tokens", r.visual_tokens},
                                      {"median_seconds", r.median_seconds},
                                      {"tokens_per_second", r.tokens_per_second}});
        }
    } else if (a.mode == "ablation") {
        bench::AblationOptions opt;
        opt.config.epochs = a.epochs;
        opt.replicates = a.replicates;
        const auto cells = bench::ablation(opt);
        out << std::left << std::setw(18) << "scan" << std::setw(15) << "expert" << std::setw(9) << "recall"
            << "loss_var_epoch1\n";
        for (const auto& c : cells) {
            out << std::left << std::setw(18) << c.scan << std::setw(15) << c.expert << std::setw(9)
                << fixed(c.recall, 4) << fixed(c.first_epoch_loss_variance, 6) << '\n';
            report["rows"].push_back({{"scan", c.scan},
                                      {"expert", c.expert},
                                      {"lambda_target", c.lambda_target},
                                      {"recall", c.recall},
                                      {"first_epoch_loss_variance", c.first_epoch_loss_variance},
                                      {"final_loss", c.final_loss}});
        }
    } else {
        throw ConfigError("--mode must be scan_scaling, tps or ablation");
    }
    if (!a.json_path.empty()) {
        const std::string text = report.dump(2) + "\n";
        write_file_bytes(a.json_path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    } else {
        out << report.dump() << '\n';
    }
    return kExitOk;
}

// ---------------------------------------------------------------- bundle / init-params

struct BundleArgs {
    std::string synthetic;
    std::size_t channels = 64;
    std::size_t encoder_side = kDefaultEncoderSide;
    std::size_t max_slices = kDefaultMaxSlices;
    std::string out;
};

int cmd_bundle(const BundleArgs& a, std::ostream& out) {
    const auto synth = parse_synthetic("synthetic:" + a.synthetic);
    PipelineConfig cfg;
    cfg.encoder_side = a.encoder_side;
    cfg.max_slices = a.max_slices;
    const SyntheticEncoder encoder(synth->seed, a.channels);
    GridBundle bundle;
    bundle.image = synth->image;
    for (const auto& req : plan_views(synth->image, cfg))
        bundle.views.push_back({req.view, req.global, req.rect, req.encoder_side, encoder.encode(req)});
    save_bundle(a.out, bundle);
    out << "wrote " << bundle.views.size() << " views to " << a.out << '\n';
    return kExitOk;
}

struct InitArgs {
    std::uint64_t seed = 0;
    std::size_t channels = 64;
    std::size_t width = 256;
    std::size_t state_dim = kDefaultStateDim;
    std::string out;
};

int cmd_init_params(const InitArgs& a, std::ostream& out) {
    save_params(a.out, FgfParams<float>::init(a.channels, a.width, a.state_dim, a.seed));
    out << "wrote parameters to " << a.out << '\n';
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Visual token compression: selective-scan fusion with dual-expert top-k selection", "meteor"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    CompressArgs ca;
    auto* compress = app.add_subcommand("compress", "Compress every view of an image to k tokens");
    compress->add_option("--input", ca.input, "Grid bundle path or synthetic:WxH:seed")->required();
    compress->add_option("--params", ca.params_path, "Parameter file");
    compress->add_option("--init-random", ca.init_random, "Initialize parameters from this seed");
    compress->add_option("--k", ca.config.k_per_view, "Tokens kept per view");
    compress->add_option("--lambda", ca.config.lambda_target, "Visual expert weight");
    compress->add_option("--window", ca.config.window, "Local aggregation window (3, 5 or 7)");
    compress->add_option("--scan", ca.scan, "single, local_to_single or combined");
    compress->add_option("--max-slices", ca.config.max_slices, "Slice cap for synthetic inputs");
    compress->add_option("--encoder-side", ca.config.encoder_side, "Encoder input side for synthetic inputs");
    compress->add_option("--width", ca.config.output_width, "Output width D for --init-random");
    compress->add_option("--channels", ca.channels, "Token width C for synthetic inputs");
    compress->add_option("--state-dim", ca.state_dim, "SSM state size for --init-random");
    compress->add_option("--out", ca.out, "Output tensor group")->required();
    compress->add_option("--report", ca.report, "JSON-lines report (default: <out>.jsonl)");

    TrainArgs ta;
    auto* train = app.add_subcommand("train-toy", "Train the fusion parameters on the planted-saliency task");
    train->add_option("--spec", ta.spec_path, "Toy task spec JSON");
    train->add_option("--config", ta.config_path, "Training config JSON");
    train->add_option("--grid", ta.grid, "Token grid HxW");
    train->add_option("--channels", ta.spec.channels, "Token width");
    train->add_option("--salient", ta.spec.n_salient, "Planted tokens per grid");
    train->add_option("--strength", ta.spec.signal_strength, "Planted signal strength");
    train->add_option("--attention-noise", ta.spec.attention_noise, "Log-normal jitter of class attention");
    train->add_option("--seed", ta.spec.seed, "Data seed");
    train->add_option("--param-seed", ta.config.param_seed, "Parameter init seed");
    train->add_option("--epochs", ta.config.epochs, "Epochs");
    train->add_option("--batch", ta.config.batch_size, "Batch size");
    train->add_option("--k", ta.config.k, "Selection budget");
    train->add_option("--lambda", ta.config.lambda_target, "Target visual expert weight");
    train->add_option("--lr", ta.config.learning_rate, "Peak learning rate (cosine decay)");
    train->add_option("--warmup-steps", ta.config.warmup_steps, "Native-weight warmup steps (0 = one epoch)");
    train->add_option("--train-samples", ta.config.train_samples, "Training grids");
    train->add_option("--eval-samples", ta.config.eval_samples, "Held-out grids");
    train->add_option("--state-dim", ta.config.state_dim, "SSM state size");
    train->add_option("--window", ta.config.window, "Local aggregation window");
    train->add_option("--scan", ta.scan, "single, local_to_single or combined");
    train->add_option("--optimizer", ta.optimizer, "adamw or momentum");
    train->add_option("--out", ta.config.metrics_path, "Metrics JSON-lines file");
    train->add_option("--dump", ta.config.dump_path, "Parameter dump path on divergence");
    train->add_option("--save-params", ta.save_params, "Write trained parameters here");
    train->add_option("--assert-recall", ta.assert_recall, "Exit nonzero if eval recall is below this");
    train->add_flag("--f64", ta.f64, "Train in 64-bit arithmetic");

    BenchArgs ba;
    auto* bench_cmd = app.add_subcommand("bench", "Scaling, throughput and ablation benchmarks");
    bench_cmd->add_option("--mode", ba.mode, "scan_scaling, tps or ablation")->required();
    bench_cmd->add_option("--sizes", ba.sizes, "Sequence lengths (scan_scaling) or K values (tps)");
    bench_cmd->add_option("--trials", ba.trials, "Timed trials per point (median reported)");
    bench_cmd->add_option("--epochs", ba.epochs, "Training epochs per ablation cell");
    bench_cmd->add_option("--replicates", ba.replicates, "Parameter seeds averaged per ablation cell");
    bench_cmd->add_option("--json", ba.json_path, "Write the JSON report here instead of stdout");

    BundleArgs bu;
    auto* bundle = app.add_subcommand("bundle", "Export synthetic encoder grids as a grid bundle");
    bundle->add_option("--synthetic", bu.synthetic, "WxH:seed")->required();
    bundle->add_option("--channels", bu.channels, "Token width");
    bundle->add_option("--encoder-side", bu.encoder_side, "Encoder input side");
    bundle->add_option("--max-slices", bu.max_slices, "Slice cap");
    bundle->add_option("--out", bu.out, "Bundle path")->required();

    InitArgs ia;
    auto* init = app.add_subcommand("init-params", "Write freshly initialized parameters");
    init->add_option("--seed", ia.seed, "Init seed");
    init->add_option("--channels", ia.channels, "Token width C");
    init->add_option("--width", ia.width, "Output width D");
    init->add_option("--state-dim", ia.state_dim, "SSM state size");
    init->add_option("--out", ia.out, "Parameter file")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }

    try {
        if (compress->parsed()) return cmd_compress(ca, out);
        if (train->parsed()) {
            for (const auto* opt : train->get_options())
                if (opt->count() > 0) ta.explicit_flags.push_back(opt->get_name());
            return cmd_train_toy(ta, out);
        }
        if (bench_cmd->parsed()) return cmd_bench(ba, out);
        if (bundle->parsed()) return cmd_bundle(bu, out);
        if (init->parsed()) return cmd_init_params(ia, out);
    } catch (const DivergenceError& e) {
        err << "error: " << e.what();
        if (!e.dump_path().empty()) err << " (parameters dumped to " << e.dump_path() << ")";
        err << '\n';
        return kExitDiverged;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::domain_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitIo;
    }
    return kExitConfig;
}

}  // namespace meteor::cli
