#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "qdetect/error.hpp"
#include "qdetect/polymlp.hpp"

using namespace qdetect;
using namespace qdetect::polymlp;

namespace {

PolyMlpConfig tiny_config() {
    PolyMlpConfig cfg;
    cfg.hidden_widths = {4, 3};
    cfg.fan_in = 2;
    cfg.activation_bits = 2;
    cfg.poly_degree = 2;
    cfg.subneurons = 2;
    cfg.seed = 5;
    return cfg;
}

PolyMlpModel tiny_model(const PolyMlpConfig& cfg, int input_width, double coeff_scale = 1.0) {
    auto model = make_model(cfg, input_width, 1, select_connectivity(cfg, input_width, 2), 0.0, 100.0);
    init_coefficients(model);
    for (auto& c : model.coeffs) c *= coeff_scale;
    return model;
}

} // namespace

TEST_CASE("monomial expansion order") {
    MonomialBasis b(2, 2);
    std::vector<double> x{3.0, 5.0};
    CHECK(b.expand(x) == std::vector<double>{1, 3, 5, 9, 15, 25});

    MonomialBasis affine(4, 1);
    std::vector<double> x4{2, 3, 4, 5};
    CHECK(affine.expand(x4) == std::vector<double>{1, 2, 3, 4, 5});

    CHECK(monomial_count(4, 2) == 15);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int vars = 1; vars <= 5; ++vars)
        for (int deg = 1; deg <= 3; ++deg) {
            std::vector<double> v(vars);
            for (auto& e : v) e = u(rng);
            const auto expected = oracle::monomials(v, deg);
            const auto got = MonomialBasis(vars, deg).expand(v);
            CHECK(got.size() == monomial_count(vars, deg));
            REQUIRE(got.size() == expected.size());
            for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-14));
        }
}

TEST_CASE("quantizers") {
    CodeQuantizer q{3, -1.0, 1.0};
    CHECK(q.levels() == 8);
    CHECK(q.value(0) == -1.0);
    CHECK(q.value(7) == 1.0);
    CHECK(q.code(5.0) == 7);
    CHECK(q.code(-5.0) == 0);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-2, 2);
    for (int i = 0; i < 1000; ++i) {
        const double x = u(rng);
        CHECK(q.code(q.value(q.code(x))) == q.code(x));
    }
    CHECK(input_code(0.0, 0.0, 100.0, 2) == 0);
    CHECK(input_code(100.0, 0.0, 100.0, 2) == 3);
    CHECK(input_code(50.0, 0.0, 100.0, 2) == 2); // 1.5 rounds to even
    CHECK(input_code(1e9, 0.0, 100.0, 2) == 3);
}

TEST_CASE("connectivity") {
    auto cfg = tiny_config();
    auto a = select_connectivity(cfg, 6, 2);
    CHECK(a == select_connectivity(cfg, 6, 2));
    for (const auto& layer : a)
        for (const auto& neuron : layer)
            for (const auto& sub : neuron) {
                CHECK(sub.size() == 2);
                CHECK(sub[0] != sub[1]);
            }

    cfg.fan_in = 4;
    cfg.hidden_widths = {4};
    auto full = select_connectivity(cfg, 4, 2);
    for (const auto& neuron : full[0])
        for (auto sub : neuron) {
            std::sort(sub.begin(), sub.end());
            CHECK(sub == std::vector<std::uint32_t>{0, 1, 2, 3});
        }

    cfg.fan_in = 7;
    CHECK_THROWS_AS(select_connectivity(cfg, 6, 2), ConfigError);
}

TEST_CASE("connectivity is uniform over seeds") {
    PolyMlpConfig cfg;
    cfg.hidden_widths = {4};
    cfg.subneurons = 1;
    cfg.fan_in = 4;
    const int N = 20, draws = 1000;
    std::vector<int> hits(N, 0);
    for (int s = 0; s < draws; ++s) {
        cfg.seed = static_cast<std::uint64_t>(s);
        const auto conn = select_connectivity(cfg, N, 2);
        for (auto idx : conn[0][0][0]) hits[idx]++;
    }
    const double p = 4.0 / N, mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
    for (int h : hits) CHECK(std::abs(h - mean) < 5 * sigma);
}

TEST_CASE("forward: zero coefficients and a hand-computed neuron") {
    auto cfg = tiny_config();
    auto model = make_model(cfg, 6, 1, select_connectivity(cfg, 6, 2), 0.0, 100.0);
    std::vector<std::uint16_t> codes(6, 1);
    auto out = forward_codes(model, codes);
    CHECK(out.logits[0] == out.logits[1]);
    // Zero maps to the sub-neuron code nearest 0 (4 of 0..7), so every logit
    // is the same constant.
    CHECK(out.logit_code_sums[0] == 8);

    PolyMlpConfig one;
    one.hidden_widths = {1};
    one.fan_in = 1;
    one.poly_degree = 1;
    one.subneurons = 1;
    auto m = make_model(one, 1, 1, select_connectivity(one, 1, 2), 0.0, 3.0);
    m.coeffs[0] = 0.1; // b
    m.coeffs[1] = 0.5; // w
    // x = 1 -> p = 0.6 -> 3-bit code round(5.6) = 6 -> value 5/7
    // -> 2-bit code round(2.571) = 3.
    std::vector<std::uint16_t> in{3};
    CHECK(forward_codes(m, in).codes[0][0] == 3);
    m.coeffs[1] = -0.5; // p = -0.4 -> code round(2.1) = 2 -> value -3/7 -> code round(0.857) = 1
    CHECK(forward_codes(m, in).codes[0][0] == 1);
    CHECK_THROWS_AS(forward_codes(m, codes), ShapeError);
}

TEST_CASE("forward matches the straight-line oracle") {
    auto cfg = tiny_config();
    auto model = tiny_model(cfg, 6, 3.0);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
        std::vector<std::uint16_t> codes(6);
        for (auto& c : codes) c = static_cast<std::uint16_t>(rng() % 4);
        CHECK(forward_codes(model, codes).logit_code_sums == oracle::mlp_code_sums(model, codes));
    }
}

TEST_CASE("gradient matches central differences in pass-through mode") {
    auto cfg = tiny_config();
    auto model = tiny_model(cfg, 6, 0.8);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<Sample> batch(6);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        batch[i].input_values.resize(6);
        batch[i].input_codes.resize(6);
        for (auto& v : batch[i].input_values) v = u(rng);
        batch[i].label = static_cast<int>(i % 2);
    }
    std::vector<double> grad;
    loss_and_gradient(model, batch, QuantMode::PassThrough, &grad);
    const double h = 1e-6;
    double worst = 0;
    for (std::size_t k = 0; k < model.coeffs.size(); ++k) {
        auto plus = model, minus = model;
        plus.coeffs[k] += h;
        minus.coeffs[k] -= h;
        const double fd = (loss_and_gradient(plus, batch, QuantMode::PassThrough, nullptr) -
                           loss_and_gradient(minus, batch, QuantMode::PassThrough, nullptr)) /
                          (2 * h);
        const double err = std::abs(fd - grad[k]);
        CHECK(err <= 1e-4 * std::max(std::abs(fd), std::abs(grad[k])) + 1e-8);
        worst = std::max(worst, err);
    }
    MESSAGE("worst absolute gradient error " << worst);
}

TEST_CASE("training separates a toy set and is deterministic") {
    std::mt19937_64 rng(6);
    std::vector<IonImage> train_set, test_set;
    for (int i = 0; i < 400; ++i) {
        const bool bright = i % 2 == 1;
        IonImage im{Grid<std::uint16_t>(3, 3, 0), QubitState(1, bright ? 1u : 0u)};
        for (auto& v : im.pixels.data) v = static_cast<std::uint16_t>(bright ? 60 + rng() % 40 : rng() % 40);
        (i < 300 ? train_set : test_set).push_back(im);
    }
    PolyMlpConfig cfg;
    cfg.hidden_widths = {8};
    cfg.fan_in = 2;
    cfg.epochs = 20;
    cfg.batch_size = 16;
    cfg.input_quantile = 0.0;
    TrainLog log;
    auto model = train(cfg, train_set, &log);
    CHECK(log.epoch_loss.size() == 20);
    int correct = 0;
    for (const auto& im : test_set) correct += predict(model, im) == im.label ? 1 : 0;
    CHECK(correct == static_cast<int>(test_set.size()));

    auto again = train(cfg, train_set);
    CHECK(again.coeffs == model.coeffs);
    CHECK(serialize_model(again) == serialize_model(model));
}

TEST_CASE("model round trip") {
    auto model = tiny_model(tiny_config(), 6, 2.0);
    auto bytes = serialize_model(model);
    auto back = deserialize_model(bytes);
    CHECK(serialize_model(back) == bytes);
    CHECK(back.coeffs == model.coeffs);
    auto bad = bytes;
    bad[1] = 'X';
    CHECK_THROWS_AS(deserialize_model(bad), ParseError);
    bytes.pop_back();
    CHECK_THROWS_AS(deserialize_model(bytes), ParseError);
}

TEST_CASE("config validation") {
    PolyMlpConfig cfg;
    CHECK_NOTHROW(cfg.validate(288, 8));
    cfg.fan_in = 0;
    CHECK_THROWS_AS(cfg.validate(288, 8), ConfigError);
    cfg = PolyMlpConfig{};
    cfg.input_quantile = 0.5;
    CHECK_THROWS_AS(cfg.validate(288, 8), ConfigError);
    cfg = PolyMlpConfig{};
    cfg.output_width = 4;
    CHECK_THROWS_AS(cfg.validate(288, 8), ConfigError);
}
