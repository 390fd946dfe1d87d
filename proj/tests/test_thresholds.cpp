#include <qsine/lambert_w.hpp>
#include <qsine/metrics.hpp>
#include <qsine/signal.hpp>
#include <qsine/thresholds.hpp>

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace qsine;

namespace {


// Brute-force minimiser of the mean detection loss over a fine grid.
std::pair<double, double> grid_minimum(std::size_t M, std::size_t points) {
    double best_x = 1.0;
    double best = mean_detection_loss(M, 1.0);
    for (std::size_t i = 0; i <= points; ++i) {
        const double x = 1.0 + (static_cast<double>(M) - 1.0) * static_cast<double>(i) / static_cast<double>(points);
        const double v = mean_detection_loss(M, x);
        if (v < best) {
            best = v;
            best_x = x;
        }
    }
    return {best_x, best};
}

} // namespace

TEST_CASE("lambert W") {
    CHECK(lambert_w(0.0) == 0.0);
    CHECK(lambert_w(std::numbers::e) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(lambert_w(1.0) == doctest::Approx(0.5671432904097838).epsilon(1e-14));
    CHECK(lambert_w(-1.0 / std::numbers::e) == doctest::Approx(-1.0).epsilon(1e-6));
    for (double x : {0.01, 0.1, 1.0, 10.0, 100.0, -0.2, -0.36, 1e6}) {
        const double w = lambert_w(x);
        CHECK(std::abs(w * std::exp(w) - x) <= 1e-12 * std::max(1.0, std::abs(x)));
    }
    CHECK_THROWS_AS(lambert_w(-0.5), DomainError);
}

TEST_CASE("detection threshold") {
    const auto t5 = detection_threshold(5);
    CHECK(std::abs(t5.mhat_star - 3.69) <= 0.01);
    CHECK(std::abs(t5.loss - 1.67) <= 0.01);
    const auto t1 = detection_threshold(1);
    CHECK(t1.mhat_star == 1.0);
    CHECK(t1.loss == 0.0);
    const auto t2 = detection_threshold(2);
    CHECK(t2.mhat_star == doctest::Approx(2.0));
    CHECK(t2.loss == doctest::Approx(0.25));
    CHECK_THROWS_AS(detection_threshold(0), ParameterError);
}

TEST_CASE("detection threshold is a genuine minimiser") {
    for (std::size_t M = 1; M <= 10; ++M) {
        const auto t = detection_threshold(M);
        for (std::size_t i = 0; i <= 50; ++i) {
            const double x = 1.0 + (static_cast<double>(M) - 1.0) * static_cast<double>(i) / 50.0;
            REQUIRE(t.loss <= mean_detection_loss(M, x) + 1e-12);
        }
        const auto [gx, gv] = grid_minimum(M, 200'000);
        CHECK(t.loss <= gv + 1e-12);
        CHECK(std::abs(t.mhat_star - gx) < 1e-3);
    }
}

TEST_CASE("frequency thresholds") {
    CHECK(frequency_threshold(1, 64) == 0.015625);
    CHECK(frequency_threshold(1, 1024) == 0.015625);
    CHECK(frequency_threshold(2, 64) == doctest::Approx(0.0227218).epsilon(1e-5));
    CHECK(frequency_threshold(5, 64) == doctest::Approx(0.0269803).epsilon(1e-5));
    const double db[5] = {-18.062, -16.435, -16.005, -15.805, -15.689};
    const double rounded[5] = {-18.0, -16.4, -16.0, -15.8, -15.7};
    for (std::size_t m = 1; m <= 5; ++m) {
        const double v = to_db(frequency_threshold(m, 64));
        CHECK(std::abs(v - db[m - 1]) < 0.01);
        CHECK(std::abs(v - rounded[m - 1]) < 0.07);
        if (m > 1) {
            CHECK(frequency_threshold(m, 64) >= frequency_threshold(m - 1, 64));
        }
    }
}

TEST_CASE("mean frequency estimator") {
    CHECK(mean_frequency_estimator(1, 64) == std::vector<double>{0.125});
    const auto two = mean_frequency_estimator(2, 64);
    CHECK(two[1] == doctest::Approx(0.29832).epsilon(1e-4));
    for (std::size_t m = 1; m <= 5; ++m) {
        const auto v = mean_frequency_estimator(m, 64);
        REQUIRE(v.size() == m);
        for (std::size_t i = 1; i < m; ++i) {
            CHECK(v[i] > v[i - 1]);
        }
    }
}

TEST_CASE("amplitude and phase thresholds") {
    CHECK(amplitude_threshold().mean == 0.55);
    CHECK(amplitude_threshold().loss == doctest::Approx(0.0675).epsilon(1e-15));
    CHECK(phase_threshold().mean == std::numbers::pi);
    CHECK(phase_threshold().loss == doctest::Approx(3.2899).epsilon(1e-4));

    Rng rng(42);
    const std::size_t n = 1'000'000;
    double sa = 0.0;
    double sp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = uniform(rng, 0.1, 1.0) - 0.55;
        const double p = uniform(rng, 0.0, 2.0 * std::numbers::pi) - std::numbers::pi;
        sa += a * a;
        sp += p * p;
    }
    CHECK(std::abs(sa / n / 0.0675 - 1.0) < 0.01);
    CHECK(std::abs(sp / n / phase_threshold().loss - 1.0) < 0.01);
}

TEST_CASE("threshold set") {
    const auto t = compute_thresholds(5, 64);
    CHECK(t.freq.size() == 5);
    const auto v = t.for_count(3);
    CHECK(v.amp == 0.0675);
    CHECK(v.freq == t.freq[2]);
    CHECK_THROWS_AS((void)t.for_count(6), ParameterError);
    CHECK_THROWS_AS((void)t.for_count(0), ParameterError);
}
