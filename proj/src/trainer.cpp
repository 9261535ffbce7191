#include "meteor/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "json.hpp"
#include "meteor/error.hpp"
#include "meteor/parallel.hpp"
#include "meteor/rng.hpp"
#include "meteor/tensor_io.hpp"

namespace meteor {

void ToyTaskSpec::validate() const {
    if (grid_h == 0 || grid_w == 0) throw ConfigError("toy grid must be at least 1x1");
    if (channels == 0) throw ConfigError("toy channels must be >= 1");
    if (n_salient > grid_h * grid_w) throw ConfigError("n_salient exceeds tokens per grid");
    if (!(signal_strength >= 0.0) || !std::isfinite(signal_strength))
        throw ConfigError("signal_strength must be finite and >= 0");
    if (!(attention_noise >= 0.0) || !std::isfinite(attention_noise))
        throw ConfigError("attention_noise must be finite and >= 0");
}

std::vector<double> instruction_direction(std::size_t channels) {
    Rng rng(mix_seed(0x1A5D1C7ULL, channels));
    std::vector<double> u(channels);
    double norm = 0.0;
    for (auto& v : u) {
        v = rng.normal();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : u) v /= norm;
    return u;
}

template <typename T>
std::vector<ToySample<T>> gen_toy_batch(const ToyTaskSpec& spec, std::size_t batch) {
    spec.validate();
    const std::size_t n = spec.grid_h * spec.grid_w;
    const std::size_t C = spec.channels;
    const auto u = instruction_direction(C);
    Rng rng(spec.seed);

    std::vector<ToySample<T>> out;
    out.reserve(batch);
    std::vector<std::uint32_t> perm(n);
    for (std::size_t b = 0; b < batch; ++b) {
        ToySample<T> s;
        s.grid.h_u = spec.grid_h;
        s.grid.w_u = spec.grid_w;
        s.grid.tokens = Matrix<T>(n, C);
        rng.fill_normal(std::span(s.grid.tokens.data), 1.0);

        std::iota(perm.begin(), perm.end(), 1u);
        for (std::size_t i = 0; i < spec.n_salient; ++i)
            std::swap(perm[i], perm[i + rng.below(n - i)]);
        s.truth.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(spec.n_salient));
        std::sort(s.truth.begin(), s.truth.end());
        for (auto idx : s.truth) {
            auto row = s.grid.tokens.row(idx - 1);
            for (std::size_t c = 0; c < C; ++c) row[c] += static_cast<T>(spec.signal_strength * u[c]);
        }

        s.grid.cls_token.assign(C, T{0});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < C; ++c) s.grid.cls_token[c] += s.grid.tokens(i, c) / static_cast<T>(n);

        std::vector<double> mass(n + 1);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mass[i + 1] = std::exp(spec.attention_noise * rng.normal());
            total += mass[i + 1];
        }
        for (auto idx : s.truth) {
            total += mass[idx];
            mass[idx] *= 2.0;
        }
        const double self_fraction = rng.uniform(0.05, 0.3);
        mass[0] = total * self_fraction / (1.0 - self_fraction);
        total += mass[0];
        s.grid.cls_attention.resize(n + 1);
        for (std::size_t i = 0; i <= n; ++i) s.grid.cls_attention[i] = static_cast<T>(mass[i] / total);
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
T selection_loss(std::span<const T> as_scores, std::span<const std::uint32_t> truth) {
    if (truth.empty()) throw ConfigError("selection loss needs a nonempty truth set");
    double total = 0.0;
    for (auto idx : truth) {
        if (idx == 0 || idx > as_scores.size()) throw ConfigError("truth index out of range");
        total += std::log(static_cast<double>(as_scores[idx - 1]) + kLossEpsilon);
    }
    return static_cast<T>(-total / static_cast<double>(truth.size()));
}

template <typename T>
LossAndGradients<T> loss_and_gradients(const ToySample<T>& sample, const FgfParams<T>& params,
                                       double lambda_eff, std::size_t window, ScanMode mode) {
    const FuseTape<T> tape = fuse_recorded(sample.grid, params, window, mode);
    const auto& F = tape.output.f_tokens;
    const auto& o = tape.output.ins_out;

    LossAndGradients<T> r;
    r.scores = score_tokens<T>(sample.grid.cls_attention, F, o, lambda_eff);
    r.loss = selection_loss<T>(r.scores.as_scores, sample.truth);
    r.grads = FgfParams<T>::zeros_like(params);

    const std::size_t n = F.rows;
    const std::size_t C = F.cols;
    const T native_weight = static_cast<T>(1.0 - lambda_eff);
    const T inv_truth = T{1} / static_cast<T>(sample.truth.size());

    std::vector<T> d_ns(n, T{0});
    for (auto idx : sample.truth)
        d_ns[idx - 1] -= native_weight * inv_truth / (r.scores.as_scores[idx - 1] + static_cast<T>(kLossEpsilon));

    // softmax backward: dz_i = ns_i * (dns_i - sum_j ns_j dns_j)
    T weighted{0};
    for (std::size_t i = 0; i < n; ++i) weighted += r.scores.ns[i] * d_ns[i];
    Matrix<T> d_f(n, C);
    std::vector<T> d_o(C, T{0});
    for (std::size_t i = 0; i < n; ++i) {
        const T dz = r.scores.ns[i] * (d_ns[i] - weighted);
        if (dz == T{0}) continue;
        auto fi = F.row(i);
        auto dfi = d_f.row(i);
        for (std::size_t c = 0; c < C; ++c) {
            dfi[c] = dz * o[c];
            d_o[c] += dz * fi[c];
        }
    }
    fuse_backward(tape, params, d_f, std::span<const T>(d_o), r.grads);
    return r;
}

template <typename T>
T toy_loss(const ToySample<T>& sample, const FgfParams<T>& params, double lambda_eff,
           std::size_t window, ScanMode mode) {
    const auto fused = fuse(sample.grid, params, window, mode);
    const auto scores = score_tokens<T>(sample.grid.cls_attention, fused.f_tokens, fused.ins_out, lambda_eff);
    return selection_loss<T>(scores.as_scores, sample.truth);
}

template <typename T>
void check_gradients_finite(const FgfParams<T>& grads) {
    FgfParams<T>::visit(grads, [](const std::string& name, std::span<const T> s) {
        if (!all_finite(s)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    });
}

std::string_view to_string(OptimizerKind kind) {
    return kind == OptimizerKind::kAdamW ? "adamw" : "momentum";
}

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "adamw") return OptimizerKind::kAdamW;
    if (name == "momentum") return OptimizerKind::kMomentum;
    throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adamw or momentum)");
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (k == 0) throw ConfigError("k must be >= 1");
    if (!(lambda_target >= 0.0 && lambda_target <= 1.0)) throw ConfigError("lambda_target must lie in [0, 1]");
    if (train_samples == 0) throw ConfigError("train_samples must be >= 1");
    if (eval_samples == 0) throw ConfigError("eval_samples must be >= 1");
    if (state_dim == 0) throw ConfigError("state_dim must be >= 1");
    if (window % 2 == 0) throw ConfigError("window must be odd");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

double variance(std::span<const double> values) {
    if (values.size() < 2) return 0.0;
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double acc = 0.0;
    for (double v : values) acc += (v - mean) * (v - mean);
    return acc / static_cast<double>(values.size() - 1);
}

namespace {

double sample_recall(std::span<const std::uint32_t> selected, std::span<const std::uint32_t> truth) {
    if (truth.empty()) return 1.0;
    std::size_t hits = 0;
    for (auto i : truth)
        if (std::binary_search(selected.begin(), selected.end(), i)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// Decoupled-weight-decay Adam or heavy-ball momentum over all tensors.
template <typename T>
class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, const FgfParams<T>& like)
        : cfg_(cfg), m_(FgfParams<T>::zeros_like(like)), v_(FgfParams<T>::zeros_like(like)) {}

    void step(FgfParams<T>& params, const FgfParams<T>& grads, double lr) {
        ++t_;
        std::vector<std::span<T>> p, m, v;
        std::vector<std::span<const T>> g;
        FgfParams<T>::visit(params, [&](const std::string&, std::span<T> s) { p.push_back(s); });
        FgfParams<T>::visit(m_, [&](const std::string&, std::span<T> s) { m.push_back(s); });
        FgfParams<T>::visit(v_, [&](const std::string&, std::span<T> s) { v.push_back(s); });
        FgfParams<T>::visit(grads, [&](const std::string&, std::span<const T> s) { g.push_back(s); });
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t k = 0; k < p.size(); ++k) {
            for (std::size_t i = 0; i < p[k].size(); ++i) {
                const double gi = static_cast<double>(g[k][i]);
                double w = static_cast<double>(p[k][i]);
                if (cfg_.optimizer == OptimizerKind::kAdamW) {
                    const double mi = b1 * static_cast<double>(m[k][i]) + (1 - b1) * gi;
                    const double vi = b2 * static_cast<double>(v[k][i]) + (1 - b2) * gi * gi;
                    m[k][i] = static_cast<T>(mi);
                    v[k][i] = static_cast<T>(vi);
                    w -= lr * cfg_.weight_decay * w;
                    w -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
                } else {
                    const double mi = cfg_.momentum * static_cast<double>(m[k][i]) + gi;
                    m[k][i] = static_cast<T>(mi);
                    w -= lr * (mi + cfg_.weight_decay * w);
                }
                p[k][i] = static_cast<T>(w);
            }
        }
    }

private:
    const TrainConfig& cfg_;
    FgfParams<T> m_;
    FgfParams<T> v_;
    std::size_t t_ = 0;
};

template <typename T>
void dump_params(const std::string& path, const FgfParams<T>& params) {
    if (path.empty()) return;
    try {
        save_params(path, params.template cast<float>());
    } catch (const std::exception&) {
        // the divergence error is the one to report
    }
}

}  // namespace

template <typename T>
double evaluate_recall(const FgfParams<T>& params, const std::vector<ToySample<T>>& samples,
                       std::size_t k, double lambda, std::size_t window, ScanMode mode) {
    if (samples.empty()) return 0.0;
    std::vector<double> recall(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const auto& s = samples[i];
        const auto fused = fuse(s.grid, params, window, mode);
        const auto scores = score_tokens<T>(s.grid.cls_attention, fused.f_tokens, fused.ins_out, lambda);
        const auto q = top_k_indices<T>(scores.as_scores, k);
        recall[i] = sample_recall(q, s.truth);
    });
    return std::accumulate(recall.begin(), recall.end(), 0.0) / static_cast<double>(samples.size());
}

template <typename T>
std::vector<ToySample<T>> toy_eval_set(const ToyTaskSpec& spec, std::size_t samples) {
    ToyTaskSpec eval = spec;
    eval.seed = mix_seed(spec.seed, 0xE7A1);
    return gen_toy_batch<T>(eval, samples);
}

template <typename T>
TrainResult<T> train_toy(const ToyTaskSpec& spec, const TrainConfig& config) {
    spec.validate();
    config.validate();
    if (spec.n_salient == 0) throw ConfigError("training needs n_salient >= 1");
    if (config.k > spec.grid_h * spec.grid_w) throw ConfigError("k exceeds tokens per view");

    const auto train = gen_toy_batch<T>(spec, config.train_samples);
    const auto eval = toy_eval_set<T>(spec, config.eval_samples);

    TrainResult<T> result;
    result.params = FgfParams<T>::init(spec.channels, spec.channels, config.state_dim, config.param_seed);
    auto& params = result.params;
    auto& metrics = result.metrics;

    const std::size_t steps_per_epoch = (config.train_samples + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    WarmupSchedule schedule{config.lambda_target, config.warmup_steps ? config.warmup_steps : steps_per_epoch, 0};
    metrics.steps_per_epoch = steps_per_epoch;

    std::ofstream metrics_out;
    if (!config.metrics_path.empty()) {
        metrics_out.open(config.metrics_path, std::ios::trunc);
        if (!metrics_out) throw IoError("cannot open metrics file '" + config.metrics_path + "'");
    }

    Optimizer<T> opt(config, params);
    Rng shuffle_rng(mix_seed(spec.seed, 0x5A0F));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, order.size() - begin);
            schedule.current_step = step;
            const double lambda_eff = effective_lambda(schedule);

            std::vector<LossAndGradients<T>> per_sample(count);
            try {
                parallel_for(count, [&](std::size_t i) {
                    per_sample[i] = loss_and_gradients(train[order[begin + i]], params, lambda_eff, config.window,
                                                       config.scan_mode);
                });
            } catch (const NumericError& e) {
                // Parameters went non-finite somewhere inside the forward pass.
                dump_params(config.dump_path, params);
                throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), step,
                                      config.dump_path);
            }

            // Fixed-order reduction.
            FgfParams<T> grads = FgfParams<T>::zeros_like(params);
            std::vector<std::span<T>> acc;
            FgfParams<T>::visit(grads, [&](const std::string&, std::span<T> s) { acc.push_back(s); });
            double loss = 0.0, recall = 0.0;
            const T scale = T{1} / static_cast<T>(count);
            for (std::size_t i = 0; i < count; ++i) {
                loss += static_cast<double>(per_sample[i].loss);
                std::size_t k = 0;
                FgfParams<T>::visit(per_sample[i].grads, [&](const std::string&, std::span<const T> s) {
                    for (std::size_t j = 0; j < s.size(); ++j) acc[k][j] += s[j] * scale;
                    ++k;
                });
                const auto q = top_k_indices<T>(per_sample[i].scores.as_scores, config.k);
                recall += sample_recall(q, train[order[begin + i]].truth);
            }
            loss /= static_cast<double>(count);
            recall /= static_cast<double>(count);

            if (!std::isfinite(loss)) {
                dump_params(config.dump_path, params);
                throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " +
                                          std::to_string(loss) + ")",
                                      step, config.dump_path);
            }
            try {
                check_gradients_finite(grads);
            } catch (const NumericError& e) {
                dump_params(config.dump_path, params);
                throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), step,
                                      config.dump_path);
            }

            const double lr = config.learning_rate * 0.5 *
                              (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                              static_cast<double>(total_steps)));
            opt.step(params, grads, lr);

            metrics.loss_curve.push_back(loss);
            metrics.lambda_curve.push_back(lambda_eff);
            if (metrics_out) {
                nlohmann::json rec{{"step", step}, {"epoch", epoch}, {"loss", loss},
                                   {"lambda_eff", lambda_eff}, {"recall", recall}, {"lr", lr}};
                metrics_out << rec.dump() << '\n';
            }
            ++step;
        }
    }

    metrics.steps = step;
    metrics.final_loss = metrics.loss_curve.back();
    const std::size_t first = std::min(steps_per_epoch, metrics.loss_curve.size());
    metrics.first_epoch_loss_variance = variance(std::span<const double>(metrics.loss_curve.data(), first));
    try {
        metrics.selection_recall = evaluate_recall(params, eval, config.k, effective_lambda(config.lambda_target),
                                                   config.window, config.scan_mode);
    } catch (const NumericError& e) {
        dump_params(config.dump_path, params);
        throw DivergenceError(std::string(e.what()) + " after the final step", step, config.dump_path);
    }
    if (metrics_out) {
        nlohmann::json rec{{"step", step}, {"phase", "eval"}, {"loss", metrics.final_loss},
                           {"lambda_eff", config.lambda_target}, {"recall", metrics.selection_recall}};
        metrics_out << rec.dump() << '\n';
    }
    return result;
}

#define METEOR_INSTANTIATE(T)                                                                          \
    template std::vector<ToySample<T>> gen_toy_batch(const ToyTaskSpec&, std::size_t);                 \
    template T selection_loss(std::span<const T>, std::span<const std::uint32_t>);                     \
    template LossAndGradients<T> loss_and_gradients(const ToySample<T>&, const FgfParams<T>&, double,  \
                                                    std::size_t, ScanMode);                            \
    template T toy_loss(const ToySample<T>&, const FgfParams<T>&, double, std::size_t, ScanMode);      \
    template void check_gradients_finite(const FgfParams<T>&);                                         \
    template double evaluate_recall(const FgfParams<T>&, const std::vector<ToySample<T>>&, std::size_t, \
                                    double, std::size_t, ScanMode);                                    \
    template std::vector<ToySample<T>> toy_eval_set(const ToyTaskSpec&, std::size_t);                  \
    template TrainResult<T> train_toy(const ToyTaskSpec&, const TrainConfig&);

METEOR_INSTANTIATE(float)
METEOR_INSTANTIATE(double)
#undef METEOR_INSTANTIATE

}  // namespace meteor
