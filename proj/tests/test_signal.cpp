#include <qsine/dataset.hpp>
#include <qsine/signal.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

using namespace qsine;

namespace {

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

ParameterSet tone(double a, double f, double phi) { return {{a}, {f}, {phi}}; }

} // namespace

TEST_CASE("synthesize examples") {
    const auto empty = synthesize(ParameterSet{}, 4);
    for (const auto& s : empty) {
        CHECK(s == cplx{0.0, 0.0});
    }
    const auto dc = synthesize(tone(1.0, 0.0, 0.0), 4);
    for (const auto& s : dc) {
        CHECK(s == cplx{1.0, 0.0});
    }
    const auto q = synthesize(tone(0.5, 0.25, std::numbers::pi / 2), 2);
    CHECK(q[0].real() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(q[0].imag() == doctest::Approx(0.5));
    CHECK(q[1].real() == doctest::Approx(-0.5));
    CHECK(std::abs(q[1].imag()) < 1e-15);

    CHECK_THROWS_AS(synthesize(ParameterSet{{1.0}, {0.1, 0.2}, {0.0}}, 4), ParameterError);
}

TEST_CASE("synthesize is linear in amplitudes") {
    ParameterSet p{{0.3, 0.7}, {0.11, 0.37}, {1.0, 4.0}};
    ParameterSet p2 = p;
    for (auto& a : p2.amps) {
        a *= 2.0;
    }
    const auto u = synthesize(p, 64);
    const auto v = synthesize(p2, 64);
    for (std::size_t n = 0; n < u.size(); ++n) {
        CHECK(std::abs(v[n] - 2.0 * u[n]) <= 1e-12 * std::max(1.0, std::abs(v[n])));
    }
}

TEST_CASE("add_noise") {
    Rng rng(11);
    const ComplexFrame f = synthesize(tone(1.0, 0.1, 0.0), 8);
    CHECK(add_noise(f, std::numeric_limits<double>::infinity(), 1.0, rng) == f);
    CHECK(noise_variance(2.0, 10.0) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK_THROWS_AS(add_noise(f, std::nan(""), 1.0, rng), ParameterError);
    CHECK_THROWS_AS(add_noise(f, 0.0, 0.0, rng), ParameterError);

    // sample variance of pure noise at 0 dB, unit power
    const ComplexFrame zero(100'000);
    const auto noisy = add_noise(zero, 0.0, 1.0, rng);
    double var = 0.0;
    for (const auto& s : noisy) {
        var += std::norm(s);
    }
    var /= static_cast<double>(noisy.size());
    CHECK(rel_diff(var, 1.0) < 0.02);
}

TEST_CASE("SNR calibration recovers the requested SNR") {
    Rng rng(5);
    const ComplexFrame zero(100'000);
    for (double snr : {-10.0, 0.0, 7.5}) {
        const double power = 1.7;
        const auto v = add_noise(zero, snr, power, rng);
        double var = 0.0;
        for (const auto& s : v) {
            var += std::norm(s);
        }
        var /= static_cast<double>(v.size());
        CHECK(std::abs(10.0 * std::log10(power / var) - snr) < 0.1);
    }
}

TEST_CASE("normalize_power") {
    const ComplexFrame f{{2, 0}, {0, 0}, {0, 0}, {0, 0}};
    const auto s = normalize_power(f);
    CHECK(s[0] == cplx{2.0, 0.0});
    CHECK(s[1] == cplx{0.0, 0.0});

    Rng rng(3);
    ComplexFrame g(64);
    for (auto& v : g) {
        v = {uniform(rng, -3, 3), uniform(rng, -3, 3)};
    }
    const auto n1 = normalize_power(g);
    double energy = 0.0;
    for (const auto& v : n1) {
        energy += std::norm(v);
    }
    CHECK(rel_diff(energy, 64.0) < 1e-12);

    // idempotent and scale invariant
    const auto n2 = normalize_power(n1);
    ComplexFrame scaled(g);
    for (auto& v : scaled) {
        v *= 7.25;
    }
    const auto n3 = normalize_power(scaled);
    for (std::size_t i = 0; i < g.size(); ++i) {
        CHECK(std::abs(n2[i] - n1[i]) <= 1e-12 * std::abs(n1[i]) + 1e-15);
        CHECK(std::abs(n3[i] - n1[i]) <= 1e-12 * std::abs(n1[i]) + 1e-15);
    }
    CHECK_THROWS_AS(normalize_power(ComplexFrame(4)), InputError);
}

TEST_CASE("to_iq and back") {
    const auto x = to_iq(ComplexFrame{{1, 2}});
    CHECK(x.rows == 1);
    CHECK(x(0, 0) == 1.0);
    CHECK(x(0, 1) == 2.0);
    const auto z = to_iq(ComplexFrame(2));
    CHECK(z.data == std::vector<double>(4, 0.0));

    Rng rng(9);
    ComplexFrame f(33);
    for (auto& v : f) {
        v = {uniform(rng, -1, 1), uniform(rng, -1, 1)};
    }
    CHECK(from_iq(to_iq(f)) == f);
}

TEST_CASE("spacing jitter matches folded-normal moments") {
    // mean sqrt(2 * 2.5 / (64 pi)) and variance (2.5/64)(1 - 2/pi)
    Rng rng(2024);
    const std::size_t n = 1'000'000;
    double s = 0.0;
    double s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = spacing_jitter(64, rng);
        s += w;
        s2 += w * w;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(rel_diff(mean, 0.1577) < 0.01);
    CHECK(rel_diff(var, 0.0142) < 0.02);
}

TEST_CASE("draw_parameters postconditions") {
    GenConfig cfg;
    Rng rng(77);
    std::size_t counts[6] = {};
    for (int i = 0; i < 20'000; ++i) {
        const auto p = draw_parameters(cfg, rng);
        REQUIRE(is_valid_label(p));
        REQUIRE(p.count() >= 1);
        REQUIRE(p.count() <= 5);
        ++counts[p.count()];
        for (double a : p.amps) {
            REQUIRE(a >= 0.1);
            REQUIRE(a <= 1.0);
        }
        REQUIRE(p.freqs.back() <= 0.5);
    }
    for (int m = 1; m <= 5; ++m) {
        CHECK(counts[m] > 3600);
    }
}

TEST_CASE("in-distribution frequencies keep the nominal grid offsets") {
    // Every generated frequency lies at w0 + i/N + jitter for a distinct i,
    // so after sorting, f_k - f_1 >= 1/N for every k > 1 and at most one
    // frequency falls in [f_1, f_1 + 1/N).
    GenConfig cfg;
    cfg.fixed_m = 5;
    Rng rng(8);
    for (int i = 0; i < 5000; ++i) {
        const auto p = draw_parameters(cfg, rng);
        for (std::size_t k = 1; k < p.count(); ++k) {
            REQUIRE(p.freqs[k] - p.freqs[0] >= 1.0 / 64.0);
        }
    }
}

TEST_CASE("OOD frequencies respect the minimum spacing") {
    GenConfig cfg;
    cfg.freq_mode = FreqMode::ood_uniform;
    Rng rng(4);
    for (int i = 0; i < 5000; ++i) {
        const auto p = draw_parameters(cfg, rng);
        REQUIRE(is_valid_label(p));
        for (std::size_t k = 1; k < p.count(); ++k) {
            REQUIRE(p.freqs[k] - p.freqs[k - 1] >= 1.0 / 64.0);
        }
    }
}

TEST_CASE("make_dataset") {
    GenConfig cfg;
    cfg.seed = 7;
    const auto a = make_dataset(cfg, 10);
    const auto b = make_dataset(cfg, 10);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].x == b[i].x);
        CHECK(a[i].label.freqs == b[i].label.freqs);
        CHECK(a[i].label.amps == b[i].label.amps);
    }
    // order independence: example i depends only on (seed, i)
    const auto single = make_example(cfg, 6);
    CHECK(single.x == a[6].x);

    cfg.bits = 1;
    for (const auto& ex : make_dataset(cfg, 50)) {
        for (double v : ex.x.data) {
            REQUIRE((v == 1.0 || v == -1.0));
        }
    }
    CHECK_THROWS_AS(make_dataset(cfg, 0), ParameterError);
}

TEST_CASE("label count histogram is uniform") {
    GenConfig cfg;
    Rng rng(31337);
    const std::size_t n = 100'000;
    std::size_t counts[6] = {};
    for (std::size_t i = 0; i < n; ++i) {
        ++counts[draw_parameters(cfg, rng).count()];
    }
    for (int m = 1; m <= 5; ++m) {
        CHECK(std::abs(static_cast<double>(counts[m]) / n - 0.2) < 0.2 * 0.02);
    }
}

TEST_CASE("dataset file round trip") {
    GenConfig cfg;
    cfg.seed = 12;
    cfg.snr_db = -3.0;
    cfg.snr_max_db = 4.0;
    const auto data = make_dataset(cfg, 25);
    const auto dir = std::filesystem::temp_directory_path() / "qsine_ds_test";
    std::filesystem::create_directories(dir);
    const std::string prefix = (dir / "set").string();
    write_dataset(prefix, DatasetHeader{64, 5, 3}, data);
    const Dataset back = read_dataset(prefix);
    CHECK(back.header.N == 64);
    CHECK(back.header.M == 5);
    CHECK(back.header.bits == 3);
    REQUIRE(back.examples.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(back.examples[i].label.freqs == data[i].label.freqs);
        CHECK(back.examples[i].label.phases == data[i].label.phases);
        CHECK(back.examples[i].snr_db == data[i].snr_db);
        // 3-bit levels are exactly representable after the float round trip only up to float precision
        for (std::size_t k = 0; k < data[i].x.data.size(); ++k) {
            REQUIRE(back.examples[i].x.data[k] == static_cast<double>(static_cast<float>(data[i].x.data[k])));
        }
    }
    CHECK_THROWS_AS(parse_dataset_header("qsine-dataset v2, N=1"), DataError);
    CHECK_THROWS_AS(read_dataset((dir / "missing").string()), DataError);
}
