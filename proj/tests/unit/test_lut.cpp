#include <doctest.h>

#include <random>

#include "qdetect/dataset.hpp"
#include "qdetect/error.hpp"
#include "qdetect/lut.hpp"

using namespace qdetect;
using namespace qdetect::lut;
using polymlp::PolyMlpConfig;

namespace {

polymlp::PolyMlpModel random_model(int fan_in, std::vector<int> hidden, int input_width, int n_ions,
                                   std::uint64_t seed = 3) {
    PolyMlpConfig cfg;
    cfg.hidden_widths = std::move(hidden);
    cfg.fan_in = fan_in;
    cfg.seed = seed;
    const int classes = 1 << n_ions;
    auto m = polymlp::make_model(cfg, input_width, n_ions, polymlp::select_connectivity(cfg, input_width, classes), 0.0,
                                 120.0);
    polymlp::init_coefficients(m);
    for (auto& c : m.coeffs) c *= 3.0; // spread the codes
    return m;
}

} // namespace

TEST_CASE("table entry counts per neuron") {
    auto f2 = compile_truth_tables(random_model(2, {6, 4}, 9, 1));
    auto f4 = compile_truth_tables(random_model(4, {6, 4}, 9, 1));
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(f2.entries_per_neuron(l) == 96);
        CHECK(f4.entries_per_neuron(l) == 576);
        for (const auto& n : f4.layers[l].neurons) {
            REQUIRE(n.subs.size() == 2);
            CHECK(n.subs[0].size() == 256);
            CHECK(n.subs[1].size() == 256);
            CHECK(n.adder.size() == 64);
        }
    }
    CHECK(f4.total_entries() == 576 * (6 + 4 + 2));
}

TEST_CASE("identity network") {
    LutNetwork net;
    net.input_width = 1;
    net.n_ions = 1;
    net.n_classes = 2;
    LutLayer layer;
    layer.input_width = 1;
    layer.fan_in = 1;
    layer.input_bits = 2;
    layer.sub_bits = 2;
    layer.output = true;
    LutNeuron n;
    n.sub_inputs = {{0}};
    n.subs = {LutTable{2, 2, {0, 1, 2, 3}}};
    n.adder = LutTable{2, 2, {0, 1, 2, 3}};
    layer.neurons = {n};
    net.layers = {layer};
    for (std::uint16_t c = 0; c < 4; ++c) {
        std::vector<std::uint16_t> in{c};
        CHECK(eval_codes(net, in) == std::vector<std::uint32_t>{c});
    }
}

TEST_CASE("compiled tables are equivalent to the arithmetic") {
    auto model = random_model(4, {12, 8}, 20, 3);
    auto net = compile_truth_tables(model);
    auto report = verify_equivalence(model, net);
    CHECK(report.ok());
    CHECK(report.tables_checked == (12 + 8 + 8) * 3);
    CHECK_NOTHROW(require_equivalent(report));

    std::mt19937_64 rng(2);
    std::vector<IonImage> images;
    for (int i = 0; i < 1000; ++i) {
        IonImage im{Grid<std::uint16_t>(4, 5, 0), QubitState(3, static_cast<std::uint32_t>(i % 8))};
        for (auto& v : im.pixels.data) v = static_cast<std::uint16_t>(rng() % 130);
        images.push_back(im);
    }
    auto agreement = end_to_end_agreement(model, net, images);
    CHECK(agreement.samples == 1000);
    CHECK(agreement.agree == 1000);
    CHECK_FALSE(agreement.first_disagreement);

    for (const auto& im : images) {
        auto codes = polymlp::quantize_input(model, im);
        const auto sums = eval_codes(net, codes);
        const auto fwd = polymlp::forward_codes(model, codes);
        CHECK(sums == fwd.logit_code_sums);
    }
}

TEST_CASE("fault injection is reported at its coordinates") {
    auto model = random_model(2, {5, 4}, 8, 1);
    auto net = compile_truth_tables(model);

    auto faulty = net;
    auto& entry = faulty.layers[1].neurons[2].subs[1].entries[7];
    entry = static_cast<std::uint16_t>((entry + 1) % 8);
    auto report = verify_equivalence(model, faulty);
    REQUIRE(report.mismatches.size() == 1);
    const auto& m = report.mismatches.front();
    CHECK(m.layer == 1);
    CHECK(m.neuron == 2);
    CHECK(m.table == 1);
    CHECK(m.address == 7);
    CHECK(m.actual == entry);
    try {
        require_equivalent(report);
        FAIL("expected an equivalence error");
    } catch (const EquivalenceError& e) {
        CHECK(std::string(e.what()).find("layer 1 neuron 2 sub 1 address 7") != std::string::npos);
    }

    auto adder_fault = net;
    auto& a = adder_fault.layers[0].neurons[0].adder.entries[10];
    a = static_cast<std::uint16_t>((a + 1) % 4);
    auto r2 = verify_equivalence(model, adder_fault);
    REQUIRE(r2.mismatches.size() == 1);
    CHECK(r2.mismatches.front().table == -1);
    CHECK(r2.mismatches.front().address == 10);
}

TEST_CASE("lookup count is independent of the input") {
    auto model = random_model(4, {10, 6}, 16, 1);
    auto net = compile_truth_tables(model);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) {
        std::vector<std::uint16_t> codes(16);
        for (auto& c : codes) c = static_cast<std::uint16_t>(rng() % 4);
        std::size_t lookups = 0;
        eval_lut(net, codes, &lookups);
        CHECK(lookups == net.lookups_per_inference());
        CHECK(lookups == (10 + 6 + 2) * 3);
    }
}

TEST_CASE("state decode of an 8-class network") {
    auto model = random_model(2, {8}, 6, 3);
    auto net = compile_truth_tables(model);
    std::vector<std::uint16_t> codes(6, 2);
    const auto state = eval_lut(net, codes);
    const auto sums = eval_codes(net, codes);
    std::uint32_t best = 0;
    for (std::uint32_t c = 1; c < 8; ++c)
        if (sums[c] > sums[best]) best = c;
    CHECK(state.bits == best);
    CHECK(state.n_ions == 3);
    CHECK(QubitState::parse(state.str()) == state);
}

TEST_CASE("serialization and netlist") {
    auto model = random_model(4, {6}, 9, 1);
    auto net = compile_truth_tables(model);
    auto bytes = serialize_lut(net);
    auto back = deserialize_lut(bytes);
    CHECK(serialize_lut(back) == bytes);
    CHECK(verify_equivalence(model, back).ok());
    auto bad = bytes;
    bad[0] = 'Z';
    CHECK_THROWS_AS(deserialize_lut(bad), ParseError);
    bytes.resize(bytes.size() / 2);
    CHECK_THROWS_AS(deserialize_lut(bytes), ParseError);

    const auto text = netlist(net);
    CHECK(text.find("table l0_n0_s0 8->3 inputs in[") != std::string::npos);
    CHECK(text.find("table l0_n1_add 6->2 inputs l0_n1_s0 l0_n1_s1") != std::string::npos);
    // Output adders keep the full code sum, 0..14.
    CHECK(text.find("table l1_n1_add 6->4 inputs l1_n1_s0 l1_n1_s1") != std::string::npos);
}

TEST_CASE("mismatched topologies are rejected") {
    auto a = random_model(2, {5}, 8, 1);
    auto b = random_model(2, {5, 3}, 8, 1);
    CHECK_THROWS_AS(verify_equivalence(a, compile_truth_tables(b)), ShapeError);
    std::vector<std::uint16_t> wrong(3, 0);
    CHECK_THROWS_AS(eval_codes(compile_truth_tables(a), wrong), ShapeError);
}
