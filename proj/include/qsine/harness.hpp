#pragma once

#include <qsine/classical.hpp>
#include <qsine/dataset.hpp>
#include <qsine/errors.hpp>
#include <qsine/metrics.hpp>
#include <qsine/quantizer.hpp>
#include <qsine/rng.hpp>
#include <qsine/signal.hpp>
#include <qsine/signalnet.hpp>
#include <qsine/thresholds.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace qsine {

struct RunConfig {
    std::uint64_t seed = 0;
    std::vector<int> bits = {1, 3};
    std::size_t N = 64;
    std::size_t M = 5;
    double snr_min = -10.0;
    double snr_max = 10.0;
    double snr_step = 1.0;
    std::string out;
    std::string config;
    // generate
    std::size_t count = 50'000;
    FreqMode freq_mode = FreqMode::in_distribution;
    std::size_t fixed_m = 0;
    std::optional<double> snr_fixed; // generate at one SNR instead of the grid range
    // train
    std::string task = "all"; // detection | estimator | all
    std::vector<std::size_t> m_values;
    std::string data;
    std::string models = "models";
    TrainConfig train;
    // eval
    std::vector<std::string> algorithms = {"signalnet", "periodogram", "aic", "mdl"};
    std::size_t n_trials = 8'000;
    std::size_t nfft = 1 << 16;
    std::size_t subvector_len = 16;
    PeakMode peak_mode = PeakMode::guarded_maxima;

    [[nodiscard]] std::vector<double> snr_grid() const {
        if (!(snr_step > 0.0) || snr_max < snr_min) {
            throw ParameterError("snr grid is empty");
        }
        std::vector<double> g;
        const auto steps = static_cast<std::size_t>(std::floor((snr_max - snr_min) / snr_step + 1e-9));
        for (std::size_t i = 0; i <= steps; ++i) {
            g.push_back(snr_min + static_cast<double>(i) * snr_step);
        }
        return g;
    }

    [[nodiscard]] std::vector<std::size_t> counts() const {
        if (!m_values.empty()) {
            for (auto m : m_values) {
                if (m < 1 || m > M) {
                    throw ParameterError("m value outside {1..M}");
                }
            }
            return m_values;
        }
        std::vector<std::size_t> all(M);
        std::iota(all.begin(), all.end(), std::size_t{1});
        return all;
    }
};

// ---------------------------------------------------------------------------
// Metric records and CSV

inline constexpr const char* kMetricsHeader = "algorithm,bits,m,snr_db,metric,value,n_trials,seed";

struct MetricRecord {
    std::string algorithm;
    int bits = 0;
    std::string m; // count or "joint"
    double snr_db = 0.0;
    std::string metric;
    double value = 0.0;
    std::size_t n_trials = 0;
    std::uint64_t seed = 0;
    std::string freq_mode; // only written by the OOD command

    [[nodiscard]] auto key() const { return std::tie(algorithm, bits, m, snr_db, metric, freq_mode); }
};

inline std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline void write_metrics_csv(std::ostream& os, std::vector<MetricRecord> rows, bool with_freq_mode = false) {
    std::sort(rows.begin(), rows.end(), [](const MetricRecord& a, const MetricRecord& b) { return a.key() < b.key(); });
    os << kMetricsHeader << (with_freq_mode ? ",freq_mode" : "") << '\n';
    for (const auto& r : rows) {
        if (!std::isfinite(r.value) || r.n_trials < 1) {
            throw DataError("metric record " + r.algorithm + "/" + r.metric + " is not finite");
        }
        os << r.algorithm << ',' << r.bits << ',' << r.m << ',' << format_number(r.snr_db) << ',' << r.metric << ','
           << format_number(r.value) << ',' << r.n_trials << ',' << r.seed;
        if (with_freq_mode) {
            os << ',' << r.freq_mode;
        }
        os << '\n';
    }
}

inline void write_metrics_file(const std::string& path, const std::vector<MetricRecord>& rows, bool with_freq_mode = false) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("cannot write " + path);
    }
    write_metrics_csv(os, rows, with_freq_mode);
}

// ---------------------------------------------------------------------------
// Evaluation primitives

/// Aligned MSE per parameter, averaged over frames (estimates compared head
/// k to the k-th frequency-sorted label).
template <typename Estimator>
LossVector evaluate_estimates(Estimator&& estimate, const std::vector<LabeledExample>& data) {
    LossVector acc;
    for (const auto& ex : data) {
        const ParameterSet truth = sorted_by_frequency(ex.label);
        const LossVector l = parameter_mse(truth, estimate(ex.x));
        acc.amp += l.amp;
        acc.freq += l.freq;
        acc.phase += l.phase;
    }
    const double n = static_cast<double>(data.size());
    return {acc.amp / n, acc.freq / n, acc.phase / n};
}

/// Mean detection loss of an integer count estimator.
template <typename Detector>
double evaluate_detection(Detector&& detect, const std::vector<LabeledExample>& data) {
    double acc = 0.0;
    for (const auto& ex : data) {
        acc += detection_loss(static_cast<double>(ex.label.count()), static_cast<double>(detect(ex.x)));
    }
    return acc / static_cast<double>(data.size());
}

/// Mean normalized chamfer of a joint (count + parameters) estimator.
template <typename Joint>
double evaluate_chamfer(Joint&& joint, const std::vector<LabeledExample>& data, const ThresholdSet& thr) {
    double acc = 0.0;
    for (const auto& ex : data) {
        acc += normalized_chamfer(ex.label, joint(ex.x), thr.for_count(ex.label.count()));
    }
    return acc / static_cast<double>(data.size());
}

/// Fresh test data for one evaluation cell. The seed depends only on
/// (seed, bits, snr, m), so every algorithm and both frequency modes see the
/// same draw sequence.
inline std::uint64_t cell_seed(std::uint64_t seed, int bits, double snr_db, std::size_t m) {
    std::uint64_t s = derive_seed(seed, Stream::test);
    s = derive_seed(s, static_cast<std::uint64_t>(bits));
    s = derive_seed(s, static_cast<std::uint64_t>(std::llround(snr_db * 1000.0) + (1LL << 40)));
    return derive_seed(s, m);
}

inline std::vector<LabeledExample> make_test_set(const RunConfig& rc, int bits, double snr_db, std::size_t m,
                                                 FreqMode mode = FreqMode::in_distribution) {
    GenConfig g;
    g.N = rc.N;
    g.M = rc.M;
    g.bits = bits;
    g.snr_db = snr_db;
    g.fixed_m = m;
    g.freq_mode = mode;
    g.seed = cell_seed(rc.seed, bits, snr_db, m);
    return make_dataset(g, rc.n_trials);
}

inline std::string model_dir(const RunConfig& rc, int bits) {
    return (std::filesystem::path(rc.models) / ("b" + std::to_string(bits))).string();
}

/// Loads a SignalNet bundle from `<models>/b<bits>/bundle.txt`.
inline SignalNetModel load_signalnet(const std::string& dir) {
    const std::filesystem::path base(dir);
    const BundleManifest b = read_bundle((base / "bundle.txt").string());
    SignalNetModel model;
    model.bits = b.bits;
    if (!b.detection.empty()) {
        model.detection = load_detection((base / b.detection).string(), b.N, b.M, b.bits);
        model.has_detection = true;
    }
    for (const auto& [m, path] : b.estimators) {
        model.estimators.emplace(m, load_estimator((base / path).string(), b.N, m, b.bits));
    }
    return model;
}

/// Runs independent evaluation cells on a worker pool. Every cell derives its
/// own seed, so results do not depend on scheduling; rows are concatenated in
/// cell order (and sorted again when written).
template <typename CellFn>
std::vector<MetricRecord> run_cells(std::size_t n_cells, CellFn&& cell_fn, std::size_t threads = 0) {
    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, std::max<std::size_t>(n_cells, 1));
    std::vector<std::vector<MetricRecord>> per_cell(n_cells);
    std::vector<std::exception_ptr> errors(n_cells);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n_cells; i = next++) {
            try {
                cell_fn(i, per_cell[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 1; t < threads; ++t) {
            pool.emplace_back(worker);
        }
        worker();
    }
    std::vector<MetricRecord> rows;
    for (std::size_t i = 0; i < n_cells; ++i) {
        if (errors[i]) {
            std::rethrow_exception(errors[i]);
        }
        rows.insert(rows.end(), per_cell[i].begin(), per_cell[i].end());
    }
    return rows;
}

inline void append_threshold_rows(std::vector<MetricRecord>& rows, const RunConfig& rc, const ThresholdSet& thr,
                                  const std::vector<double>& grid) {
    for (int b : rc.bits) {
        for (double snr : grid) {
            for (std::size_t m : rc.counts()) {
                const std::string ms = std::to_string(m);
                rows.push_back({"threshold", b, ms, snr, "freq_mse_db", to_db(thr.freq[m - 1]), 1, rc.seed, ""});
                rows.push_back({"threshold", b, ms, snr, "amp_mse_db", to_db(thr.amp.loss), 1, rc.seed, ""});
                rows.push_back({"threshold", b, ms, snr, "phase_mse", thr.phase.loss, 1, rc.seed, ""});
            }
            rows.push_back({"threshold", b, "joint", snr, "detection_loss", thr.detection.loss, 1, rc.seed, ""});
        }
    }
}

/// SNR sweep over the selected algorithms. Algorithms:
///   signalnet   estimator metrics per m, detection loss and normalized chamfer (joint)
///   periodogram estimator metrics per m given the true count
///   aic, mdl    detection loss, and normalized chamfer of count + periodogram (joint)
inline std::vector<MetricRecord> run_eval(const RunConfig& rc) {
    const auto grid = rc.snr_grid();
    const ThresholdSet thr = compute_thresholds(rc.M, rc.N);
    auto selected = [&](const std::string& a) {
        return std::find(rc.algorithms.begin(), rc.algorithms.end(), a) != rc.algorithms.end();
    };
    for (const auto& a : rc.algorithms) {
        if (a != "signalnet" && a != "periodogram" && a != "aic" && a != "mdl") {
            throw ParameterError("unknown algorithm: " + a);
        }
    }
    std::map<int, SignalNetModel> nets;
    if (selected("signalnet")) {
        for (int b : rc.bits) {
            nets.emplace(b, load_signalnet(model_dir(rc, b)));
        }
    }
    std::vector<std::pair<int, double>> cells;
    for (int b : rc.bits) {
        for (double snr : grid) {
            cells.emplace_back(b, snr);
        }
    }
    auto rows = run_cells(cells.size(), [&](std::size_t cell, std::vector<MetricRecord>& out) {
        const auto [b, snr] = cells[cell];
        const QuantizerSpec q = make_quantizer(b);
        const SignalNetModel* net = nets.count(b) ? &nets.at(b) : nullptr;
        auto push = [&](const std::string& algo, const std::string& m, const std::string& metric, double v) {
            out.push_back({algo, b, m, snr, metric, v, rc.n_trials, rc.seed, ""});
        };
        for (std::size_t m : rc.counts()) {
            const auto data = make_test_set(rc, b, snr, m);
            const std::string ms = std::to_string(m);
            auto emit = [&](const std::string& algo, const LossVector& l) {
                push(algo, ms, "freq_mse_db", to_db(l.freq));
                push(algo, ms, "amp_mse_db", to_db(l.amp));
                push(algo, ms, "phase_mse", l.phase);
            };
            if (net) {
                const auto it = net->estimators.find(m);
                if (it == net->estimators.end()) {
                    throw ConfigurationError("signalnet: no estimator for m = " + ms);
                }
                emit("signalnet", evaluate_estimates([&](const IQFrame& x) { return it->second.estimate(x); }, data));
            }
            if (selected("periodogram")) {
                emit("periodogram", evaluate_estimates(
                                        [&](const IQFrame& x) { return classical_estimate(x, m, q, rc.nfft, rc.peak_mode); },
                                        data));
            }
        }
        const bool net_joint = net && net->has_detection;
        if (!net_joint && !selected("aic") && !selected("mdl")) {
            return;
        }
        const auto data = make_test_set(rc, b, snr, 0);
        if (net_joint) {
            push("signalnet", "joint", "detection_loss",
                 evaluate_detection([&](const IQFrame& x) { return net->detection.detect(x); }, data));
            push("signalnet", "joint", "chamfer_norm",
                 evaluate_chamfer([&](const IQFrame& x) { return net->infer(x).second; }, data, thr));
        }
        for (auto [name, c] : {std::pair{"aic", OrderCriterion::aic}, std::pair{"mdl", OrderCriterion::mdl}}) {
            if (!selected(name)) {
                continue;
            }
            auto detect = [&](const IQFrame& x) { return aic_mdl_detect(x, c, q, rc.subvector_len, rc.M); };
            push(name, "joint", "detection_loss", evaluate_detection(detect, data));
            push(name, "joint", "chamfer_norm", evaluate_chamfer(
                                                     [&](const IQFrame& x) {
                                                         return classical_estimate(x, detect(x), q, rc.nfft, rc.peak_mode);
                                                     },
                                                     data, thr));
        }
    });
    append_threshold_rows(rows, rc, thr, grid);
    return rows;
}

/// In-distribution vs OOD frequency sweep of the trained m = 2 estimator.
/// Both rows of a pair share the cell seed.
inline std::vector<MetricRecord> run_ood(const RunConfig& rc, std::size_t m = 2) {
    const auto grid = rc.snr_grid();
    std::map<int, SignalNetModel> nets;
    std::vector<std::pair<int, double>> cells;
    for (int b : rc.bits) {
        nets.emplace(b, load_signalnet(model_dir(rc, b)));
        if (!nets.at(b).estimators.count(m)) {
            throw ConfigurationError("ood: no estimator for m = " + std::to_string(m));
        }
        for (double snr : grid) {
            cells.emplace_back(b, snr);
        }
    }
    auto rows = run_cells(cells.size(), [&](std::size_t cell, std::vector<MetricRecord>& out) {
        const auto [b, snr] = cells[cell];
        const SinusoidEstimator& est = nets.at(b).estimators.at(m);
        for (auto [tag, mode] : {std::pair{"in_dist", FreqMode::in_distribution}, std::pair{"ood", FreqMode::ood_uniform}}) {
            const auto data = make_test_set(rc, b, snr, m, mode);
            const LossVector l = evaluate_estimates([&](const IQFrame& x) { return est.estimate(x); }, data);
            const std::string ms = std::to_string(m);
            out.push_back({"signalnet", b, ms, snr, "freq_mse_db", to_db(l.freq), rc.n_trials, rc.seed, tag});
            out.push_back({"signalnet", b, ms, snr, "amp_mse_db", to_db(l.amp), rc.n_trials, rc.seed, tag});
            out.push_back({"signalnet", b, ms, snr, "phase_mse", l.phase, rc.n_trials, rc.seed, tag});
        }
    });
    return rows;
}

/// Threshold table: quantity,m,value,value_db
inline void write_thresholds(std::ostream& os, std::size_t M, std::size_t N) {
    const ThresholdSet t = compute_thresholds(M, N);
    os << "quantity,m,value,value_db\n";
    os << "detection_mhat," << "joint," << format_number(t.detection.mhat_star) << ",\n";
    os << "detection_loss," << "joint," << format_number(t.detection.loss) << ",\n";
    for (std::size_t m = 1; m <= M; ++m) {
        os << "freq_mse," << m << ',' << format_number(t.freq[m - 1]) << ',' << format_number(to_db(t.freq[m - 1])) << '\n';
    }
    os << "amp_mean,all," << format_number(t.amp.mean) << ",\n";
    os << "amp_mse,all," << format_number(t.amp.loss) << ',' << format_number(to_db(t.amp.loss)) << '\n';
    os << "phase_mean,all," << format_number(t.phase.mean) << ",\n";
    os << "phase_mse,all," << format_number(t.phase.loss) << ",\n";
}

// ---------------------------------------------------------------------------
// Dataset generation and training

inline GenConfig generation_config(const RunConfig& rc, int bits) {
    GenConfig g;
    g.N = rc.N;
    g.M = rc.M;
    g.bits = bits;
    g.freq_mode = rc.freq_mode;
    g.fixed_m = rc.fixed_m;
    if (rc.snr_fixed) {
        g.snr_db = *rc.snr_fixed;
    } else {
        g.snr_db = rc.snr_min;
        if (rc.snr_max > rc.snr_min) {
            g.snr_max_db = rc.snr_max;
        }
    }
    return g;
}

struct GenerateSummary {
    std::map<std::size_t, std::size_t> per_count;
    double mean_snr_db = 0.0;
};

inline GenerateSummary run_generate(const RunConfig& rc) {
    if (rc.out.empty()) {
        throw ParameterError("generate: --out prefix required");
    }
    const int b = rc.bits.at(0);
    GenConfig g = generation_config(rc, b);
    g.seed = derive_seed(rc.seed, Stream::train);
    const auto data = make_dataset(g, rc.count);
    write_dataset(rc.out, DatasetHeader{rc.N, rc.M, b}, data);
    GenerateSummary s;
    for (const auto& ex : data) {
        ++s.per_count[ex.label.count()];
        s.mean_snr_db += ex.snr_db;
    }
    s.mean_snr_db /= static_cast<double>(data.size());
    return s;
}

inline void write_train_log(const std::string& path, const std::string& model, const TrainResult& r, bool append) {
    std::ofstream os(path, append ? std::ios::app | std::ios::binary : std::ios::binary);
    if (!os) {
        throw DataError("cannot write " + path);
    }
    if (!append) {
        os << "model,epoch,train_loss,val_loss,lr,best\n";
    }
    for (const auto& e : r.log) {
        os << model << ',' << e.epoch << ',' << format_number(e.train_loss) << ',' << format_number(e.val_loss) << ','
           << format_number(e.lr) << ',' << (e.best ? 1 : 0) << '\n';
    }
}

/// Trains the selected models for every requested resolution and writes
/// `<models>/b<bits>/{detection.sgnt, estimator_m<m>.sgnt, bundle.txt, train_log.csv}`.
/// Training data come from --data when given, otherwise from the train stream.
inline void run_train(const RunConfig& rc, std::ostream* progress = nullptr) {
    if (rc.task != "all" && rc.task != "detection" && rc.task != "estimator") {
        throw ParameterError("train: task must be detection, estimator or all");
    }
    std::optional<Dataset> external;
    if (!rc.data.empty()) {
        external = read_dataset(rc.data);
        if (external->header.N != rc.N) {
            throw DataError("train: dataset N differs from --n");
        }
    }
    const ThresholdSet thr = compute_thresholds(rc.M, rc.N);
    for (int b : rc.bits) {
        if (external && external->header.bits != b) {
            throw DataError("train: dataset bits differ from --bits");
        }
        const std::filesystem::path dir = model_dir(rc, b);
        std::filesystem::create_directories(dir);
        const std::string log_path = (dir / "train_log.csv").string();
        bool log_started = false;
        BundleManifest manifest;
        if (std::filesystem::exists(dir / "bundle.txt")) {
            manifest = read_bundle((dir / "bundle.txt").string());
        }
        manifest.bits = b;
        manifest.N = rc.N;
        manifest.M = rc.M;
        TrainConfig tc = rc.train;

        auto gen = [&](std::size_t fixed_m, std::size_t count, std::uint64_t salt) {
            if (external) {
                std::vector<LabeledExample> out;
                for (const auto& ex : external->examples) {
                    if (fixed_m == 0 || ex.label.count() == fixed_m) {
                        out.push_back(ex);
                    }
                }
                return out;
            }
            GenConfig g = generation_config(rc, b);
            g.fixed_m = fixed_m;
            g.seed = derive_seed(derive_seed(derive_seed(rc.seed, Stream::train), static_cast<std::uint64_t>(b)), salt);
            return make_dataset(g, count);
        };

        if (rc.task != "estimator") {
            tc.seed = derive_seed(rc.seed, static_cast<std::uint64_t>(b));
            const auto data = gen(0, tc.detection_samples, 0);
            DetectionModel det(rc.N, rc.M, b);
            Rng init = make_rng(derive_seed(tc.seed, Stream::init), 0);
            det.net.init(init);
            const TrainResult r = train_detection(det, data, tc, tc.detection_epochs);
            save_detection(det, (dir / "detection.sgnt").string());
            manifest.detection = "detection.sgnt";
            write_train_log(log_path, "detection", r, log_started);
            log_started = true;
            if (progress) {
                *progress << "b=" << b << " detection: best epoch " << r.best_epoch << ", val loss "
                          << format_number(r.best_val_loss) << std::endl;
            }
        }
        if (rc.task != "detection") {
            for (std::size_t m : rc.counts()) {
                tc.seed = derive_seed(derive_seed(rc.seed, static_cast<std::uint64_t>(b)), m);
                const auto data = gen(m, tc.estimator_samples, m);
                if (data.empty()) {
                    throw DataError("train: no examples with m = " + std::to_string(m));
                }
                SinusoidEstimator est(rc.N, m, b);
                est.init(derive_seed(tc.seed, Stream::init));
                const TrainResult r = train_estimator(est, data, thr, tc, tc.estimator_epochs);
                const std::string name = "estimator_m" + std::to_string(m) + ".sgnt";
                save_estimator(est, (dir / name).string());
                manifest.estimators[m] = name;
                write_train_log(log_path, "estimator_m" + std::to_string(m), r, log_started);
                log_started = true;
                if (progress) {
                    *progress << "b=" << b << " estimator m=" << m << ": best epoch " << r.best_epoch << ", val loss "
                              << format_number(r.best_val_loss) << std::endl;
                }
            }
        }
        write_bundle((dir / "bundle.txt").string(), manifest);
    }
}

} // namespace qsine
