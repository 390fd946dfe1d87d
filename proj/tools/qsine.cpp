#include <qsine/harness.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

void add_shared(CLI::App& cmd, qsine::RunConfig& rc) {
    cmd.add_option("--config", rc.config, "Config file of `key = value` lines; flags override it");
    cmd.add_option("--seed", rc.seed, "Master seed");
    cmd.add_option("--bits", rc.bits, "Quantizer resolutions")->delimiter(',');
    cmd.add_option("--n", rc.N, "Frame length N")->check(CLI::Range(std::size_t{4}, std::size_t{1} << 20));
    cmd.add_option("--m-max", rc.M, "Maximum sinusoid count M")->check(CLI::Range(std::size_t{1}, std::size_t{64}));
    cmd.add_option("--snr-min", rc.snr_min, "Lowest SNR (dB)");
    cmd.add_option("--snr-max", rc.snr_max, "Highest SNR (dB)");
    cmd.add_option("--snr-step", rc.snr_step, "SNR grid step (dB)");
    cmd.add_option("--out", rc.out, "Output path");
}

void add_training(CLI::App& cmd, qsine::RunConfig& rc) {
    auto& t = rc.train;
    cmd.add_option("--epochs", [&t](const std::vector<std::string>& v) {
        std::size_t e = 0;
        if (v.size() != 1 || !CLI::detail::lexical_cast(v[0], e)) {
            return false;
        }
        t.detection_epochs = t.estimator_epochs = e;
        return true;
    }, "Epochs for every model")->type_name("UINT");
    cmd.add_option("--detection-epochs", t.detection_epochs);
    cmd.add_option("--estimator-epochs", t.estimator_epochs);
    cmd.add_option("--detection-samples", t.detection_samples);
    cmd.add_option("--estimator-samples", t.estimator_samples);
    cmd.add_option("--batch", t.batch)->check(CLI::PositiveNumber);
    cmd.add_option("--lr", t.lr)->check(CLI::PositiveNumber);
    cmd.add_option("--val-fraction", t.validation_fraction)->check(CLI::Range(0.0, 0.9));
    cmd.add_option("--patience", t.early_stop_patience)->check(CLI::PositiveNumber);
    cmd.add_option("--lr-factor", t.lr_factor)->check(CLI::Range(0.0, 1.0));
    cmd.add_option("--lr-patience", t.lr_patience)->check(CLI::PositiveNumber);
    cmd.add_flag("--differentiable-residual", t.differentiable_residual,
                 "Backpropagate through reconstruction into earlier blocks");
}

// Fills options not given on the command line from the config file.
void apply_config(CLI::App& cmd, const std::string& path) {
    for (const auto& item : CLI::ConfigINI().from_file(path)) {
        if (item.name == "++" || item.name == "--" || item.name == "config") {
            continue;
        }
        CLI::Option* opt = cmd.get_option_no_throw("--" + item.name);
        if (opt == nullptr) {
            throw CLI::ConfigError("unknown config key '" + item.name + "' for " + cmd.get_name());
        }
        if (opt->count() > 0) {
            continue;
        }
        for (const auto& v : item.inputs) {
            opt->add_result(v);
        }
        opt->run_callback();
    }
}

const std::map<std::string, qsine::FreqMode> kFreqModes{{"in", qsine::FreqMode::in_distribution},
                                                        {"ood", qsine::FreqMode::ood_uniform}};
const std::map<std::string, qsine::PeakMode> kPeakModes{{"guarded", qsine::PeakMode::guarded_maxima},
                                                        {"top", qsine::PeakMode::top_magnitude}};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantized multi-sinusoid detection and estimation"};
    app.require_subcommand(1);
    qsine::RunConfig rc;
    std::optional<double> snr;
    std::string criterion;

    auto* gen = app.add_subcommand("generate", "Write a labelled dataset");
    add_shared(*gen, rc);
    gen->add_option("--count", rc.count)->check(CLI::PositiveNumber);
    gen->add_option("--freq-mode", rc.freq_mode)->transform(CLI::CheckedTransformer(kFreqModes));
    gen->add_option("--fixed-m", rc.fixed_m, "Draw every example with this count (0 = uniform)");
    gen->add_option("--snr", snr, "Single SNR instead of the [snr-min, snr-max] range");

    auto* train = app.add_subcommand("train", "Train detection and estimator models");
    add_shared(*train, rc);
    add_training(*train, rc);
    train->add_option("--task", rc.task)->check(CLI::IsMember({"detection", "estimator", "all"}));
    train->add_option("--m", rc.m_values, "Estimator counts to train")->delimiter(',');
    train->add_option("--data", rc.data, "Dataset prefix (default: generate from the seed)");
    train->add_option("--models", rc.models, "Model directory");

    auto* eval = app.add_subcommand("eval", "SNR sweep against baselines and thresholds");
    add_shared(*eval, rc);
    eval->add_option("--models", rc.models, "Model directory");
    eval->add_option("--algorithms", rc.algorithms)->delimiter(',');
    eval->add_option("--m", rc.m_values, "Counts for per-m metrics")->delimiter(',');
    eval->add_option("--count", rc.n_trials, "Test frames per cell")->check(CLI::PositiveNumber);
    eval->add_option("--nfft", rc.nfft);
    eval->add_option("--criterion", criterion, "Restrict classical detection to one criterion")
        ->check(CLI::IsMember({"aic", "mdl"}));
    eval->add_option("--subvector-len", rc.subvector_len);
    eval->add_option("--peak-mode", rc.peak_mode)->transform(CLI::CheckedTransformer(kPeakModes));

    auto* ood = app.add_subcommand("ood", "In-distribution vs OOD frequency sweep (m = 2)");
    add_shared(*ood, rc);
    ood->add_option("--models", rc.models, "Model directory");
    ood->add_option("--count", rc.n_trials, "Test frames per cell")->check(CLI::PositiveNumber);

    auto* thr = app.add_subcommand("thresholds", "Print the learning thresholds");
    thr->add_option("--n,--N", rc.N, "Frame length N");
    thr->add_option("--m-max,--M", rc.M, "Maximum sinusoid count M")->check(CLI::Range(std::size_t{1}, std::size_t{64}));
    thr->add_option("--out", rc.out, "Write to a file instead of stdout");

    try {
        app.parse(argc, argv);
        if (!rc.config.empty()) {
            apply_config(*app.get_subcommands().front(), rc.config);
        }
    } catch (const CLI::FileError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            rc.snr_fixed = snr;
            const auto s = qsine::run_generate(rc);
            std::cout << "wrote " << qsine::labels_path(rc.out) << " and " << qsine::samples_path(rc.out) << '\n';
            for (const auto& [m, c] : s.per_count) {
                std::cout << "  m=" << m << ": " << c << '\n';
            }
            std::cout << "  mean snr " << qsine::format_number(s.mean_snr_db) << " dB\n";
        } else if (*train) {
            qsine::run_train(rc, &std::cout);
        } else if (*eval) {
            if (!criterion.empty()) {
                const std::string other = criterion == "aic" ? "mdl" : "aic";
                std::erase(rc.algorithms, other);
            }
            const auto rows = qsine::run_eval(rc);
            if (rc.out.empty()) {
                qsine::write_metrics_csv(std::cout, rows);
            } else {
                qsine::write_metrics_file(rc.out, rows);
            }
        } else if (*ood) {
            const auto rows = qsine::run_ood(rc);
            if (rc.out.empty()) {
                qsine::write_metrics_csv(std::cout, rows, true);
            } else {
                qsine::write_metrics_file(rc.out, rows, true);
            }
        } else if (*thr) {
            if (rc.out.empty()) {
                qsine::write_thresholds(std::cout, rc.M, rc.N);
            } else {
                std::ofstream os(rc.out, std::ios::binary);
                if (!os) {
                    throw qsine::DataError("cannot write " + rc.out);
                }
                qsine::write_thresholds(os, rc.M, rc.N);
            }
        }
    } catch (const qsine::ParameterError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
