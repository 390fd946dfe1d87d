#include <qsine/nn/adam.hpp>
#include <qsine/nn/checkpoint.hpp>
#include <qsine/nn/gradcheck.hpp>
#include <qsine/nn/layers.hpp>
#include <qsine/nn/network.hpp>
#include <qsine/metrics.hpp>
#include <qsine/signalnet.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace qsine;
using namespace qsine::nn;

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) {
        v = uniform(rng, lo, hi);
    }
    return t;
}

// L = sum_i w_i y_i + 0.5 sum_i y_i^2 with fixed random weights.
LossFn probe_loss(std::uint64_t seed) {
    return [seed](const std::vector<Tensor<double>>& out, std::vector<Tensor<double>>& grads) {
        Rng rng(seed);
        double loss = 0.0;
        grads.clear();
        for (const auto& y : out) {
            Tensor<double> g(y.shape);
            for (std::size_t i = 0; i < y.size(); ++i) {
                const double w = uniform(rng, -1.0, 1.0);
                loss += w * y.data[i] + 0.5 * y.data[i] * y.data[i];
                g.data[i] = w + y.data[i];
            }
            grads.push_back(std::move(g));
        }
        return loss;
    };
}

template <typename L, typename... Args>
Network<double> single(Args&&... args) {
    Network<double> net;
    net.template chain<L>("layer", std::forward<Args>(args)...);
    net.set_outputs({"layer"});
    return net;
}

double check_all(Network<double>& net, const Tensor<double>& x, Mode mode = Mode::train) {
    const auto p = finite_diff_check(net, probe_loss(17), x, mode, 64);
    const auto i = finite_diff_check_input(net, probe_loss(17), x, mode, 64);
    return std::max(p.max_rel_error, i.max_rel_error);
}

} // namespace

TEST_CASE("conv1d forward examples") {
    Tensor<float> x({1, 3, 1});
    x.data = {1, 2, 4};

    Conv1D<float> id(1, 1, 1);
    id.weight().value.data = {1};
    CHECK(id.predict(x).data == x.data);

    // cross-correlation with same padding: y[n] = sum_j w[j] x[n + j - pad]
    Conv1D<float> diff(1, 1, 2);
    diff.weight().value.data = {-1, 1};
    const auto y = diff.predict(x);
    CHECK(y.data[0] == 1.0f);
    CHECK(y.data[1] == 2.0f);
    diff.weight().value.data = {1, -1};
    const auto y2 = diff.predict(x);
    CHECK(y2.data[0] == -1.0f);
    CHECK(y2.data[1] == -2.0f);

    Conv1D<float> zero(1, 2, 3);
    zero.bias().value.data = {0.5f, -2.0f};
    const auto z = zero.predict(x);
    for (std::size_t n = 0; n < 3; ++n) {
        CHECK(z.data[2 * n] == 0.5f);
        CHECK(z.data[2 * n + 1] == -2.0f);
    }
    CHECK_THROWS_AS(zero.predict(Tensor<float>({1, 3, 2})), ShapeError);
}

TEST_CASE("maxpool forward and routing") {
    MaxPool1D<double> pool(2);
    Tensor<double> x({1, 4, 1});
    x.data = {1, 3, 2, 5};
    CHECK(pool.forward(x, Mode::train).data == std::vector<double>{3, 5});
    Tensor<double> g({1, 2, 1});
    g.data = {10, 20};
    CHECK(pool.backward(g).data == std::vector<double>{0, 10, 0, 20});

    Tensor<double> tie({1, 2, 1});
    tie.data = {7, 7};
    pool.forward(tie, Mode::train);
    Tensor<double> g1({1, 1, 1});
    g1.data = {1};
    CHECK(pool.backward(g1).data == std::vector<double>{1, 0});

    Tensor<double> c({1, 6, 1}, 4.0);
    CHECK(pool.predict(c).data == std::vector<double>(3, 4.0));
    MaxPool1D<double> one(1);
    CHECK(one.predict(x).data == x.data);
    // length not divisible: padded with -inf
    MaxPool1D<double> three(3);
    CHECK(three.predict(x).data == std::vector<double>{3, 5});
}

TEST_CASE("batchnorm statistics") {
    Rng rng(5);
    BatchNorm1D<double> bn(4);
    const auto x = random_tensor({16, 8, 4}, rng, -3.0, 7.0);
    const auto y = bn.forward(x, Mode::train);
    for (std::size_t c = 0; c < 4; ++c) {
        double m = 0.0;
        double v = 0.0;
        const std::size_t rows = 16 * 8;
        for (std::size_t r = 0; r < rows; ++r) {
            m += y.data[r * 4 + c];
        }
        m /= rows;
        for (std::size_t r = 0; r < rows; ++r) {
            v += (y.data[r * 4 + c] - m) * (y.data[r * 4 + c] - m);
        }
        v /= rows;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(v - 1.0) < 1e-4);
    }
    BatchNorm1D<double> fresh(4);
    const auto ci = fresh.predict(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        REQUIRE(ci.data[i] == doctest::Approx(x.data[i] / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
    }
    const auto cst = fresh.forward(Tensor<double>({4, 2, 4}, 3.0), Mode::train);
    for (double v : cst.data) {
        CHECK(std::abs(v) < 1e-6);
    }
    CHECK_THROWS_AS(fresh.forward(Tensor<double>({1, 2, 4}), Mode::train), ParameterError);
    // running statistics move toward the batch statistics with momentum 0.99
    auto* rm = fresh.state()[0];
    CHECK(rm->data[0] == doctest::Approx(0.01 * 3.0));
}

TEST_CASE("dense forward") {
    Dense<double> d(1, 1);
    d.weight().value.data = {2};
    d.bias().value.data = {1};
    Tensor<double> x({1, 1});
    x.data = {3};
    CHECK(d.predict(x).data == std::vector<double>{7});

    Dense<double> id(3, 3);
    id.weight().value.data = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    Tensor<double> v({2, 3});
    v.data = {1, 2, 3, 4, 5, 6};
    CHECK(id.predict(v).data == v.data);
    Dense<double> zero(3, 2);
    zero.bias().value.data = {1.5, -1};
    CHECK(zero.predict(v).data == std::vector<double>{1.5, -1, 1.5, -1});
}

TEST_CASE("activations") {
    Tensor<double> x({1, 3});
    x.data = {-1, 0, 1};
    CHECK(Activation<double>(ActivationKind::relu).predict(x).data == std::vector<double>{0, 0, 1});
    const auto s = Activation<double>(ActivationKind::selu).predict(x);
    CHECK(s.data[1] == 0.0);
    CHECK(s.data[2] == doctest::Approx(1.05070).epsilon(1e-5));
    CHECK(s.data[0] == doctest::Approx(kSeluLambda * kSeluAlpha * (std::exp(-1.0) - 1.0)));
    Tensor<double> l({1, 2});
    l.data = {0, std::log(3.0)};
    const auto p = Activation<double>(ActivationKind::softmax).predict(l);
    CHECK(p.data[0] == doctest::Approx(0.25));
    CHECK(p.data[1] == doctest::Approx(0.75));

    Rng rng(8);
    const auto big = random_tensor({50, 7}, rng, -300.0, 300.0);
    const auto q = Activation<double>(ActivationKind::softmax).predict(big);
    for (std::size_t b = 0; b < 50; ++b) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 7; ++k) {
            REQUIRE(q.data[b * 7 + k] >= 0.0);
            sum += q.data[b * 7 + k];
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("softmax argmax is shift invariant") {
    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
        auto l = random_tensor({1, 5}, rng, -4.0, 4.0);
        const auto p = Activation<double>(ActivationKind::softmax).predict(l);
        const double c = uniform(rng, -50.0, 50.0);
        for (auto& v : l.data) {
            v += c;
        }
        const auto q = Activation<double>(ActivationKind::softmax).predict(l);
        REQUIRE(select_count(p.data) == select_count(q.data));
    }
}

TEST_CASE("dropout") {
    Tensor<double> x({1000, 1000}, 1.0);
    Dropout<double> none(0.0, 1);
    CHECK(none.forward(x, Mode::train).data == x.data);
    Dropout<double> d(0.7, 2);
    CHECK(d.forward(x, Mode::infer).data == x.data);
    const auto y = d.forward(x, Mode::train);
    std::size_t kept = 0;
    double sum = 0.0;
    for (double v : y.data) {
        kept += v != 0.0;
        sum += v;
    }
    CHECK(std::abs(static_cast<double>(kept) / y.size() - 0.3) < 0.3 * 0.005);
    CHECK(std::abs(sum / y.size() - 1.0) < 0.01);
    CHECK_THROWS_AS(Dropout<double>(1.0), ParameterError);
}

TEST_CASE("finite-difference gradients of every layer") {
    Rng rng(21);
    SUBCASE("dense") {
        auto net = single<Dense<double>>(std::size_t{6}, std::size_t{4});
        net.init(rng);
        CHECK(check_all(net, random_tensor({5, 6}, rng)) <= 1e-7);
    }
    SUBCASE("conv1d") {
        auto net = single<Conv1D<double>>(std::size_t{3}, std::size_t{4}, std::size_t{3});
        net.init(rng);
        CHECK(check_all(net, random_tensor({2, 9, 3}, rng)) <= 1e-7);
    }
    SUBCASE("maxpool") {
        auto net = single<MaxPool1D<double>>(std::size_t{2});
        CHECK(check_all(net, random_tensor({2, 8, 3}, rng)) <= 1e-5);
    }
    SUBCASE("batchnorm train") {
        auto net = single<BatchNorm1D<double>>(std::size_t{3});
        net.init(rng);
        CHECK(check_all(net, random_tensor({4, 5, 3}, rng)) <= 1e-5);
    }
    SUBCASE("batchnorm infer") {
        auto net = single<BatchNorm1D<double>>(std::size_t{3});
        net.init(rng);
        CHECK(check_all(net, random_tensor({4, 5, 3}, rng), Mode::infer) <= 1e-7);
    }
    SUBCASE("activations") {
        for (auto k : {ActivationKind::relu, ActivationKind::selu, ActivationKind::softmax, ActivationKind::linear}) {
            auto net = single<Activation<double>>(k);
            CHECK(check_all(net, random_tensor({3, 6}, rng)) <= 1e-5);
        }
    }
    SUBCASE("dropout with a frozen mask") {
        auto net = single<Dropout<double>>(0.5, std::uint64_t{3});
        auto& d = dynamic_cast<Dropout<double>&>(net.layer("layer"));
        const auto x = random_tensor({4, 6}, rng);
        net.forward(x, Mode::train);
        d.freeze_mask(true);
        CHECK(check_all(net, x) <= 1e-7);
    }
    SUBCASE("flatten and conv stack") {
        Network<double> net;
        net.chain<Conv1D<double>>("c", std::size_t{2}, std::size_t{3});
        net.chain<Activation<double>>("r", ActivationKind::relu);
        net.chain<MaxPool1D<double>>("p", std::size_t{2});
        net.chain<Flatten<double>>("f");
        net.chain<Dense<double>>("d", std::size_t{12}, std::size_t{2});
        net.set_outputs({"d"});
        net.init(rng);
        CHECK(check_all(net, random_tensor({3, 8, 2}, rng)) <= 1e-5);
    }
}

TEST_CASE("finite-difference gradients of the training losses") {
    Rng rng(33);
    SUBCASE("softmax with the expected detection loss") {
        Network<double> net;
        net.chain<Dense<double>>("d", std::size_t{6}, std::size_t{5});
        net.chain<Activation<double>>("p", ActivationKind::softmax);
        net.set_outputs({"p"});
        net.init(rng);
        const std::vector<std::size_t> counts{1, 3, 5, 2};
        LossFn loss = [&](const std::vector<Tensor<double>>& out, std::vector<Tensor<double>>& g) {
            g.resize(1);
            return expected_detection_loss(out[0], counts, g[0]);
        };
        const auto x = random_tensor({4, 6}, rng);
        CHECK(finite_diff_check(net, loss, x).max_rel_error <= 1e-5);
        CHECK(finite_diff_check_input(net, loss, x).max_rel_error <= 1e-5);
    }
    SUBCASE("block network with the effective estimator loss") {
        auto net = build_block_network<double>(16);
        net.init(rng);
        const ParameterSet l1{{0.4}, {0.2}, {1.0}};
        const ParameterSet l2{{0.9}, {0.1}, {4.0}};
        const ParameterSet l3{{0.2}, {0.4}, {6.0}};
        const std::vector<const ParameterSet*> labels{&l1, &l2, &l3};
        const auto targets = make_targets(labels, 1);
        const LossVector thr{0.0675, 0.015625, 3.29};
        LossFn loss = [&](const std::vector<Tensor<double>>& out, std::vector<Tensor<double>>& g) {
            std::vector<std::array<Tensor<double>, 3>> heads{{out[0], out[1], out[2]}};
            std::vector<std::array<Tensor<double>, 3>> hg;
            const double v = effective_estimator_loss(heads, targets, thr, hg);
            g = {hg[0][0], hg[0][1], hg[0][2]};
            return v;
        };
        const auto x = random_tensor({3, 16, 2}, rng);
        CHECK(finite_diff_check(net, loss, x).max_rel_error <= 1e-5);
        CHECK(finite_diff_check_input(net, loss, x).max_rel_error <= 1e-5);
    }
}

TEST_CASE("adam") {
    Param<double> p("w", {1});
    p.value.data = {0.5};
    AdamState<double> st;
    std::vector<Param<double>*> ps{&p};
    adam_step(ps, st);
    CHECK(p.value.data[0] == 0.5);
    CHECK(st.step_count == 1);

    Param<double> q("w", {1});
    q.grad.data = {1.0};
    AdamState<double> s2;
    std::vector<Param<double>*> qs{&q};
    adam_step(qs, s2);
    CHECK(q.value.data[0] == doctest::Approx(-0.001).epsilon(1e-6));

    // identical runs are bit-identical
    auto run = [] {
        Rng rng(4);
        auto net = single<Dense<double>>(std::size_t{4}, std::size_t{3});
        net.init(rng);
        AdamState<double> st;
        const auto x = random_tensor({5, 4}, rng);
        for (int i = 0; i < 20; ++i) {
            std::vector<Tensor<double>> g;
            net.zero_grad();
            probe_loss(1)(net.forward(x, Mode::train), g);
            net.backward(g);
            adam_step(net.params(), st);
        }
        return net.snapshot();
    };
    const auto a = run();
    const auto b = run();
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].data == b[i].data);
    }
}

TEST_CASE("checkpoint round trip") {
    Rng rng(6);
    auto net = build_block_network<float>(64);
    net.init(rng);
    // give the batchnorm running statistics non-default values
    Tensor<float> x({4, 64, 2});
    for (auto& v : x.data) {
        v = static_cast<float>(uniform(rng, -1, 1));
    }
    net.forward(x, Mode::train);
    const auto dir = std::filesystem::temp_directory_path() / "qsine_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "block.sgnt").string();
    write_checkpoint(path, net.named_tensors());

    auto other = build_block_network<float>(64);
    read_checkpoint(path, other.named_tensors());
    const auto a = net.snapshot();
    const auto b = other.snapshot();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].data == b[i].data);
    }
    CHECK(net.predict(x)[1].data == other.predict(x)[1].data);

    auto wrong = build_block_network<float>(32);
    CHECK_THROWS_AS(read_checkpoint(path, wrong.named_tensors()), DataError);
    CHECK_THROWS_AS(read_checkpoint((dir / "missing.sgnt").string(), wrong.named_tensors()), DataError);
}

TEST_CASE("network wiring errors") {
    Network<float> net;
    net.chain<Dense<float>>("a", std::size_t{2}, std::size_t{2});
    CHECK_THROWS_AS(net.chain<Dense<float>>("a", std::size_t{2}, std::size_t{2}), ConfigurationError);
    CHECK_THROWS_AS(net.chain_from<Dense<float>>("b", "nope", std::size_t{2}, std::size_t{2}), ConfigurationError);
    CHECK_THROWS_AS(net.set_outputs({"zzz"}), ConfigurationError);
}
