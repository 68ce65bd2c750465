// znn command line: train a network, sweep threads/widths, or evaluate the
// analytical cost model.
//
//   znn train   --net spec.znn --threads 4 --rounds 50 --mode auto ...
//   znn bench   --net spec.znn --threads 1,2,4 --widths 5,10,20 ...
//   znn analyze --net spec.znn --procs 4,8,18,40,64 --fft-constant 5
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "znn/trainer.hpp"

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    if (!is.good()) throw znn::structural_error("--net: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

znn::conv_mode_policy parse_mode(const std::string& s) {
    if (s == "direct") return znn::conv_mode_policy::direct;
    if (s == "fft") return znn::conv_mode_policy::fft;
    if (s == "auto") return znn::conv_mode_policy::autotune;
    throw CLI::ValidationError("--mode", "want auto|direct|fft, got " + s);
}

void write_report(const std::string& path, const std::string& contents) {
    if (path.empty()) return;
    std::ofstream os(path);
    if (!os.good()) throw std::runtime_error("cannot write report to " + path);
    os << contents;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"task-parallel 3D convolutional network trainer"};
    app.require_subcommand(1);

    std::string net_path, mode_str = "auto", data = "synthetic", report_path;
    std::string threads_csv = "1", widths_csv = "5,10,15,20,25,30,40,50,60,80,100,120";
    std::string procs_csv = "4,8,18,40,64";
    int threads = 1, warmup = 5, rounds = 50, samples = 4;
    bool memoize = false;
    double lr = 0.01, fft_constant = 5.0, baseline_ms = 0;
    std::uint64_t seed = 1;

    auto* tr = app.add_subcommand("train", "run gradient training rounds");
    tr->add_option("--net", net_path, "network spec file")->required();
    tr->add_option("--threads", threads, "worker threads");
    tr->add_option("--warmup", warmup, "warm-up rounds before timing");
    tr->add_option("--rounds", rounds, "measured rounds");
    tr->add_option("--mode", mode_str, "auto|direct|fft");
    tr->add_flag("--memoize", memoize, "reuse forward-pass transforms in backward/update");
    tr->add_option("--lr", lr, "learning rate");
    tr->add_option("--seed", seed, "random seed");
    tr->add_option("--data", data, "synthetic or a directory with inputs/ and labels/");
    tr->add_option("--samples", samples, "synthetic sample count");
    tr->add_option("--baseline-ms", baseline_ms,
                   "recorded 1-worker mean round time, for the speedup column");
    tr->add_option("--report", report_path, "CSV report path");

    auto* be = app.add_subcommand("bench", "thread/width speedup sweep");
    be->add_option("--net", net_path, "layered network spec file")->required();
    be->add_option("--threads", threads_csv, "comma-separated thread counts");
    be->add_option("--widths", widths_csv, "comma-separated layer widths");
    be->add_option("--warmup", warmup, "warm-up rounds before timing");
    be->add_option("--rounds", rounds, "measured rounds");
    be->add_option("--mode", mode_str, "auto|direct|fft");
    be->add_flag("--memoize", memoize, "reuse forward-pass transforms");
    be->add_option("--lr", lr, "learning rate");
    be->add_option("--seed", seed, "random seed");
    be->add_option("--report", report_path, "CSV report path");

    auto* an = app.add_subcommand("analyze", "evaluate the analytical speedup bound");
    an->add_option("--net", net_path, "layered network spec file")->required();
    an->add_option("--procs", procs_csv, "comma-separated processor counts");
    an->add_option("--fft-constant", fft_constant, "FFT cost constant C");
    an->add_option("--mode", mode_str, "direct|fft|memoized cost columns");
    an->add_option("--report", report_path, "CSV report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1; // 0 for --help, 1 for any configuration error
    }

    try {
        const std::string spec = slurp(net_path);

        if (tr->parsed()) {
            znn::train_config<float> cfg;
            cfg.netspec_text = spec;
            cfg.threads = threads;
            cfg.warmup_rounds = warmup;
            cfg.measured_rounds = rounds;
            cfg.mode = parse_mode(mode_str);
            cfg.memoize = memoize;
            cfg.learning_rate = float(lr);
            cfg.seed = seed;
            cfg.data = data;
            cfg.synthetic_samples = samples;
            cfg.baseline_seconds = baseline_ms / 1e3;

            auto g = znn::parse_netspec<float>(spec);
            znn::init_weights(g, seed);
            auto rep = znn::train(g, cfg);

            std::cout << "mode: " << mode_str;
            for (const auto& c : rep.autotune)
                std::cout << "  [layer " << c.image_dims.str() << " k=" << c.kernel_dims.str()
                          << " -> " << (c.chosen == znn::conv_engine::fft ? "fft" : "direct")
                          << "]";
            std::cout << "\nmean round: " << rep.mean_round_seconds * 1e3 << " ms over "
                      << rounds << " rounds (+" << warmup << " warmup)\n";
            if (rep.speedup_vs_baseline > 0)
                std::cout << "speedup vs baseline: " << rep.speedup_vs_baseline << "\n";
            std::cout << "final loss: " << rep.losses.back() << "\n";
            const auto& tc = rep.counters.transforms;
            std::cout << "transforms: " << tc.total()
                      << ", pool system bytes: " << rep.volume_pool_counters.system_bytes
                      << "\n";
            std::cout << "sum guard acquisitions: " << rep.counters.sum_guard_acquisitions
                      << ", tasks per worker:";
            for (auto t : rep.counters.tasks_per_worker) std::cout << ' ' << t;
            std::cout << "\n";
            std::stringstream csv;
            znn::write_train_csv(csv, rep);
            write_report(report_path, csv.str());
        } else if (be->parsed()) {
            znn::train_config<float> base;
            base.netspec_text = spec;
            base.warmup_rounds = warmup;
            base.measured_rounds = rounds;
            base.mode = parse_mode(mode_str);
            base.memoize = memoize;
            base.learning_rate = float(lr);
            base.seed = seed;
            auto rows = znn::bench_sweep<float>(spec, base, parse_int_list(threads_csv),
                                                parse_int_list(widths_csv));
            std::stringstream csv;
            znn::write_bench_csv(csv, rows);
            std::cout << csv.str();
            write_report(report_path, csv.str());
        } else {
            znn::conv_cost_mode cmode = znn::conv_cost_mode::direct;
            if (mode_str == "fft") cmode = znn::conv_cost_mode::fft;
            if (mode_str == "memoized" || mode_str == "auto")
                cmode = znn::conv_cost_mode::fft_memoized;
            auto rows = znn::analyze_netspec<float>(spec, parse_double_list(procs_csv), cmode,
                                                    fft_constant);
            std::stringstream csv;
            znn::write_analyze_csv(csv, rows);
            std::cout << csv.str();
            write_report(report_path, csv.str());
        }
    } catch (const znn::structural_error& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const CLI::Error& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
