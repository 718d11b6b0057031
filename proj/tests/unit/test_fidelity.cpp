#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "qdetect/error.hpp"
#include "qdetect/fidelity.hpp"

using namespace qdetect;
using namespace qdetect::eval;

namespace {

ConfusionTable diagonal_table(int n, std::uint64_t correct, std::uint64_t total) {
    ConfusionTable t(n);
    for (std::uint32_t s = 0; s < static_cast<std::uint32_t>(t.n_states()); ++s) {
        t.at(s, s) = correct;
        t.at(s, (s + 1) % t.n_states()) = total - correct;
    }
    return t;
}

ModelResult result(const std::string& model, const ConfusionTable& t) {
    ModelResult r;
    r.dataset = "3-qubit";
    r.model = model;
    r.table = t;
    return r;
}

} // namespace

TEST_CASE("tally examples") {
    std::vector<QubitState> labels{QubitState(1, 0), QubitState(1, 1)};
    auto t = tally(labels, labels, 1);
    CHECK(t.at(0, 0) == 1);
    CHECK(t.at(1, 1) == 1);
    CHECK(t.at(0, 1) == 0);

    std::vector<QubitState> p{QubitState(1, 1)}, l{QubitState(1, 0)};
    CHECK(tally(p, l, 1).at(0, 1) == 1);

    CHECK_THROWS_AS(tally(p, labels, 1), EvaluationError);
    std::vector<QubitState> three{QubitState(3, 5)};
    CHECK_THROWS_AS(tally(three, three, 2), EvaluationError);
}

TEST_CASE("tally and MMF agree with an independent recount") {
    std::mt19937_64 rng(12);
    std::vector<QubitState> p, l;
    for (int i = 0; i < 1000; ++i) {
        l.emplace_back(3, static_cast<std::uint32_t>(rng() % 8));
        p.emplace_back(3, rng() % 4 == 0 ? static_cast<std::uint32_t>(rng() % 8) : l.back().bits);
    }
    auto t = tally(p, l, 3);
    ConfusionTable recount(3);
    for (std::size_t i = 0; i < p.size(); ++i) recount.counts[l[i].bits * 8 + p[i].bits]++;
    CHECK(t == recount);
    CHECK(mmf(t).mmf == doctest::Approx(oracle::recount_mmf(p, l, 3)).epsilon(1e-15));

    // Relabeling symmetry.
    std::vector<std::uint32_t> perm{3, 6, 0, 1, 7, 2, 5, 4};
    std::vector<QubitState> pp, ll;
    for (std::size_t i = 0; i < p.size(); ++i) {
        pp.emplace_back(3, perm[p[i].bits]);
        ll.emplace_back(3, perm[l[i].bits]);
    }
    CHECK(mmf(tally(pp, ll, 3)).mmf == doctest::Approx(mmf(t).mmf).epsilon(1e-15));
}

TEST_CASE("MMF examples") {
    auto r = mmf(diagonal_table(1, 98, 100));
    CHECK(r.mmf == doctest::Approx(0.98));
    CHECK(r.error == doctest::Approx(0.02));
    CHECK(r.error == 1.0 - r.mmf);

    ConfusionTable perfect(2);
    for (std::uint32_t s = 0; s < 4; ++s) perfect.at(s, s) = 10;
    CHECK(mmf(perfect).mmf == 1.0);

    CHECK(mmf(diagonal_table(3, 197, 200)).mmf == doctest::Approx(0.985));

    ConfusionTable missing(1);
    missing.at(0, 0) = 3;
    try {
        mmf(missing);
        FAIL("expected an evaluation error");
    } catch (const EvaluationError& e) {
        CHECK(std::string(e.what()).find("1") != std::string::npos);
    }
}

TEST_CASE("reduction factors") {
    auto threshold = result("Threshold", diagonal_table(3, 886, 1000));
    auto vit = result("ViT", diagonal_table(3, 985, 1000));
    std::vector<ModelResult> rs{threshold, vit};
    auto rep = compare_report(rs);
    REQUIRE(rep.rows.size() == 2);
    CHECK_FALSE(rep.rows[0].reduction_factor);
    CHECK(*rep.rows[1].reduction_factor == doctest::Approx(7.6));

    auto t1 = result("Threshold", diagonal_table(1, 980, 1000));
    auto mlp = result("MLP", diagonal_table(1, 989, 1000));
    t1.dataset = mlp.dataset = "1-qubit";
    std::vector<ModelResult> rs1{t1, mlp};
    CHECK(*compare_report(rs1).rows[1].reduction_factor == doctest::Approx(1.8));

    std::vector<ModelResult> single{vit};
    auto one = compare_report(single);
    CHECK(one.rows.size() == 1);
    CHECK_FALSE(one.rows[0].reduction_factor);
}

TEST_CASE("report renders text and csv") {
    auto threshold = result("Threshold", diagonal_table(3, 886, 1000));
    auto mlp = result("MLP", diagonal_table(3, 973, 1000));
    mlp.latency_seconds = 1.41e-3;
    std::vector<ModelResult> rs{threshold, mlp};
    auto rep = compare_report(rs);
    CHECK(rep.csv.rfind("dataset,model,mmf_error_percent,reduction_factor,latency_seconds\n", 0) == 0);
    CHECK(rep.csv.find("3-qubit,MLP,") != std::string::npos);
    CHECK(rep.text.find("Threshold") != std::string::npos);
    CHECK(rep.text.find("4.2x") != std::string::npos);
}

TEST_CASE("result documents round trip") {
    auto r = result("MLP", diagonal_table(3, 90, 100));
    r.latency_seconds = 2.5e-5;
    auto back = result_from_text(to_text(r));
    CHECK(back.table == r.table);
    CHECK(back.model == "MLP");
    CHECK(*back.latency_seconds == 2.5e-5);
    CHECK_THROWS_AS(result_from_text("{\"kind\":\"other\"}"), ParseError);
}
