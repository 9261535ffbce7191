// End-to-end acceptance run. Prints one PASS/FAIL line per check and exits
// nonzero if any check fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "meteor/bench.hpp"
#include "meteor/error.hpp"
#include "meteor/fgf.hpp"
#include "meteor/pipeline.hpp"
#include "meteor/rng.hpp"
#include "meteor/ssm.hpp"
#include "meteor/tensor_io.hpp"
#include "meteor/trainer.hpp"
#include "meteor/vns.hpp"
#include "oracles/gradient_check.hpp"
#include "oracles/logistic_probe.hpp"

namespace {

using namespace meteor;
using clock_type = std::chrono::steady_clock;

int failures = 0;

void report(const char* name, bool ok, const std::string& detail) {
    std::printf("%s %-22s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

double seconds_since(clock_type::time_point start) {
    return std::chrono::duration<double>(clock_type::now() - start).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void scan_equivalence() {
    const auto start = clock_type::now();
    Rng rng(20240601);
    double worst = 0.0;
    for (int c = 0; c < 100; ++c) {
        const std::size_t L = 1 + rng.below(4096);
        const std::size_t C = 1 + rng.below(32);
        const std::size_t N = 1 + rng.below(16);
        const auto params = SsmParams<double>::init(C, N, rng);
        ScanSequence<double> seq(L, C);
        rng.fill_normal(std::span(seq.data), 1.0);
        const auto fast = selective_scan(seq, params);
        const auto slow = reference_scan(seq, params);
        for (std::size_t i = 0; i < fast.data.size(); ++i) worst = std::max(worst, std::abs(fast.data[i] - slow.data[i]));
    }
    const double t = seconds_since(start);
    report("scan_equivalence", worst <= 1e-6 && t < 60.0,
           fmt("cases=100 max_abs=%.3e (tol 1e-6) time=%.1fs (limit 60s)", worst, t));
}

void gradient_fidelity() {
    const auto start = clock_type::now();
    double worst = 0.0;
    std::size_t min_coords = SIZE_MAX, tensors = 0;
    bool covered = true;
    for (ScanMode mode : {ScanMode::kLocalToSingle, ScanMode::kSingle, ScanMode::kCombined})
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            oracle::GradCheckConfig cfg;
            cfg.mode = mode;
            for (const auto& check : oracle::check_gradients(seed, cfg)) {
                worst = std::max(worst, check.max_relative_error);
                min_coords = std::min(min_coords, check.coordinates);
                ++tensors;
            }
        }
    // Tensors smaller than 20 entries are checked in full.
    const auto params = FgfParams<double>::init(4, 4, 2, 1);
    FgfParams<double>::visit(params, [&](const std::string&, std::span<const double> s) {
        if (s.size() >= 20 && min_coords < 20) covered = false;
    });
    const double t = seconds_since(start);
    report("gradient_fidelity", covered && worst <= 1e-4 && t < 120.0,
           fmt("seeds=5 modes=3 tensor_checks=%zu max_rel=%.3e (tol 1e-4) time=%.1fs (limit 120s)", tensors, worst, t));
}

double sum_of(const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += x;
    return s;
}

void score_contracts() {
    Rng rng(777);
    double worst = 0.0;
    int endpoint_mismatch = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(576);
        const std::size_t C = 1 + rng.below(32);
        Matrix<float> f(n, C);
        rng.fill_normal(std::span(f.data), 1.0 + 4.0 * rng.uniform());
        std::vector<float> ins(C);
        rng.fill_normal(std::span(ins), 1.0);
        std::vector<float> attn(n + 1);
        for (float& a : attn) a = static_cast<float>(rng.uniform(1e-4, 1.0));
        const double lambda = rng.uniform();
        const auto s = score_tokens<float>(attn, f, ins, lambda);
        for (const auto* v : {&s.vs, &s.ns, &s.as_scores}) worst = std::max(worst, std::abs(sum_of(*v) - 1.0));

        const std::size_t k = 1 + rng.below(n);
        if (top_k_indices<float>(score_tokens<float>(attn, f, ins, 1.0).as_scores, k) != top_k_indices<float>(s.vs, k))
            ++endpoint_mismatch;
        if (top_k_indices<float>(score_tokens<float>(attn, f, ins, 0.0).as_scores, k) != top_k_indices<float>(s.ns, k))
            ++endpoint_mismatch;
    }
    report("score_contracts", worst <= 1e-6 && endpoint_mismatch == 0,
           fmt("cases=1000 max_sum_err=%.3e (tol 1e-6) endpoint_mismatches=%d", worst, endpoint_mismatch));
}

void scan_ordering() {
    using Kind = Slot::Kind;
    std::string bad;
    for (std::size_t n : {1u, 2u, 9u, 576u}) {
        const auto o = build_ordering(n);
        bool ok = o.forward.size() == 2 * n + 1 && o.backward.size() == 2 * n + 1;
        ok = ok && o.backward[o.ins_slot].kind == Kind::kInstruction && o.forward[o.ins_slot].kind == Kind::kInstruction;
        ok = ok && o.ins_slot == (2 * n + 1) - 1 - o.ins_slot;
        std::vector<Slot> bwd;
        for (const auto& s : o.backward)
            if (s.kind != Kind::kInstruction) bwd.push_back(s);
        ok = ok && bwd.size() == 2 * n;
        for (std::size_t p = 0; ok && p < n; ++p) {
            // Window aggregate immediately before its token, pair index descending.
            ok = bwd[2 * p] == Slot::local(n - p) && bwd[2 * p + 1] == Slot::token(n - p);
        }
        if (!ok) bad += " n=" + std::to_string(n);
    }
    report("scan_ordering", bad.empty(), bad.empty() ? "n in {1,2,9,576}" : "violations:" + bad);
}

void token_budget_check() {
    const std::size_t channels = 16;
    const SyntheticEncoder enc(7, channels);
    const auto params = FgfParams<double>::init(channels, 32, 4, 3).cast<float>();
    PipelineConfig cfg;
    cfg.output_width = 32;
    const auto big = compress_image({1008, 672}, enc, params, cfg);
    const auto small = compress_image({300, 300}, enc, params, cfg);

    const auto grid = enc.encode({0, true, {0, 0, 336, 336}, 336});
    std::string ratios;
    bool ratios_ok = grid.h_u * grid.w_u == 576;
    for (auto [k, want] : {std::pair{144u, 0.75}, std::pair{64u, 1.0 - 64.0 / 576}, std::pair{32u, 1.0 - 32.0 / 576}}) {
        cfg.k_per_view = k;
        const double r = compress_view(grid, params, cfg).report.compression_ratio;
        ratios_ok = ratios_ok && std::abs(r - want) < 1e-9;
        ratios += fmt(" K=%u:%.4f", k, r);
    }
    const bool ok = big.size() == 7 && total_tokens(big) == 224 && total_tokens(small) == 32 && ratios_ok;
    report("token_budget", ok,
           fmt("672x1008 views=%zu tokens=%zu (want 7/224) 300x300 tokens=%zu (want 32)", big.size(), total_tokens(big),
               total_tokens(small)) +
               ratios);
}

void linear_scaling() {
    const auto rows = bench::scan_scaling({});
    bool ok = rows.size() == 3;
    std::string detail;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        ok = ok && rows[i].ratio <= 2.3;
        detail += fmt(" %zu->%zu:%.3f", rows[i - 1].length, rows[i].length, rows[i].ratio);
    }
    report("linear_scaling", ok, "median ratios" + detail + " (limit 2.3)");
}

void throughput_trend() {
    const auto rows = bench::tps({});
    auto at = [&](std::size_t k) {
        for (const auto& r : rows)
            if (r.k == k) return r.tokens_per_second;
        return 0.0;
    };
    std::string detail;
    for (const auto& r : rows) detail += fmt(" K=%zu:%.2f", r.k, r.tokens_per_second);
    report("throughput_trend", at(144) < at(64) && at(64) < at(32), "tokens/s" + detail);
}

void ablation_directions() {
    const auto start = clock_type::now();
    bench::AblationOptions opt;
    opt.replicates = 3;
    const auto cells = bench::ablation(opt);
    auto cell = [&](ScanMode scan, const std::string& expert) -> const bench::AblationCell& {
        for (const auto& c : cells)
            if (c.scan == to_string(scan) && c.expert == expert) return c;
        throw std::runtime_error("missing ablation cell " + expert);
    };
    const auto& l2s = cell(ScanMode::kLocalToSingle, "visual-native");
    const auto& single = cell(ScanMode::kSingle, "visual-native");
    const auto& native = cell(ScanMode::kLocalToSingle, "native");
    const double t = seconds_since(start);
    report("ablation_scan", l2s.recall >= single.recall,
           fmt("recall local_to_single=%.4f single=%.4f (replicates=3, %.0fs)", l2s.recall, single.recall, t));
    report("ablation_expert_recall", l2s.recall >= native.recall,
           fmt("recall visual-native=%.4f native=%.4f", l2s.recall, native.recall));
    report("ablation_expert_var", native.first_epoch_loss_variance > l2s.first_epoch_loss_variance,
           fmt("first-epoch loss variance native=%.6f visual-native=%.6f", native.first_epoch_loss_variance,
               l2s.first_epoch_loss_variance));
}

void toy_training() {
    const ToyTaskSpec spec;
    const TrainConfig config;
    const auto probe = oracle::toy_probe(spec, config);
    const double threshold = probe.eval_recall >= 0.9 ? 0.9 : probe.eval_recall - 0.05;
    const auto start = clock_type::now();
    const auto result = train_toy<float>(spec, config);
    const double t = seconds_since(start);
    const double recall = result.metrics.selection_recall;
    report("toy_training", recall >= threshold && t < 600.0 && config.epochs <= 20,
           fmt("recall=%.4f threshold=%.2f probe=%.4f epochs=%zu time=%.1fs (limit 600s)", recall, threshold,
               probe.eval_recall, config.epochs, t));
}

Tensor random_tensor(Rng& rng) {
    const std::size_t rank = rng.below(4);
    std::vector<std::uint32_t> dims;
    std::size_t count = 1;
    for (std::size_t r = 0; r < rank; ++r) {
        dims.push_back(static_cast<std::uint32_t>(rng.below(12)));
        count *= dims.back();
    }
    switch (rng.below(3)) {
        case 0: {
            std::vector<float> v(count);
            for (float& x : v) {
                const auto bits = static_cast<std::uint32_t>(rng.engine()());
                std::memcpy(&x, &bits, 4);
            }
            return Tensor::f32(dims, v);
        }
        case 1: {
            std::vector<std::uint32_t> v(count);
            for (auto& x : v) x = static_cast<std::uint32_t>(rng.engine()());
            return Tensor::u32(dims, v);
        }
        default: {
            std::vector<std::uint8_t> v(count);
            for (auto& x : v) x = static_cast<std::uint8_t>(rng.below(256));
            return Tensor::u8(dims, v);
        }
    }
}

void file_format() {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "meteor_acceptance";
    fs::create_directories(dir);
    const auto path = (dir / "t.mtok").string();
    Rng rng(4242);
    int exact = 0, total = 0;
    std::size_t flips = 0, detected = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const Tensor t = random_tensor(rng);
        write_tensor_file(path, t);
        const auto bytes = read_file_bytes(path);
        ++total;
        // Compare bit patterns; NaN payloads make value equality useless.
        const Tensor back = read_tensor_file(path);
        if (back.dims == t.dims && back.dtype() == t.dtype() && encode_tensor(back) == encode_tensor(t)) ++exact;
        if (trial % 10 != 0) continue;
        // Payload and checksum sit after the 8-byte preamble and the dims.
        const std::size_t body = 8 + 4 * t.dims.size();
        for (std::size_t byte = body; byte < bytes.size(); ++byte)
            for (int bit = 0; bit < 8; ++bit) {
                auto bad = bytes;
                bad[byte] ^= static_cast<std::uint8_t>(1u << bit);
                ++flips;
                try {
                    std::size_t off = 0;
                    decode_tensor(bad, off);
                } catch (const IoError&) {
                    ++detected;
                }
            }
    }
    report("file_format", exact == total && detected == flips && flips > 0,
           fmt("round_trip %d/%d bit-exact, bit flips detected %zu/%zu", exact, total, detected, flips));
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<void()>>> checks{
        {"scan_equivalence", scan_equivalence}, {"gradient_fidelity", gradient_fidelity},
        {"score_contracts", score_contracts},   {"scan_ordering", scan_ordering},
        {"token_budget", token_budget_check},   {"linear_scaling", linear_scaling},
        {"throughput_trend", throughput_trend}, {"ablation", ablation_directions},
        {"toy_training", toy_training},         {"file_format", file_format},
    };
    for (const auto& [name, fn] : checks) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(name, false, std::string("threw: ") + e.what());
        }
    }
    std::printf("%d check(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
