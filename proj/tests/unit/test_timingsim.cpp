#include <doctest.h>

#include <random>
#include <sstream>

#include "oracles.hpp"
#include "qdetect/error.hpp"
#include "qdetect/timingsim.hpp"

using namespace qdetect;
using namespace qdetect::timing;

namespace {

TimingConfig with_profile(const std::string& profile, int h = 10, int w = 10) {
    TimingConfig cfg;
    cfg.height = h;
    cfg.width = w;
    cfg.dnn_profile = profile;
    cfg.dnn_cycles = dnn_profile(profile).cycles;
    return cfg;
}

std::int64_t ns(const TimingTrace& t, Signal a, Signal b) {
    return t.nanoseconds(t.first(b).tick) - t.nanoseconds(t.first(a).tick);
}

} // namespace

TEST_CASE("profiles") {
    CHECK(dnn_profile("mlp").cycles == 5);
    CHECK(dnn_profile("vit1").cycles == 4054);
    CHECK(dnn_profile("vit3").cycles == 8797);
    CHECK_THROWS_AS(dnn_profile("cnn"), ConfigError);
    CHECK(line_profile_slots("nominal") == 512);
    CHECK(line_profile_slots("calibrated") == 649);
    CHECK_THROWS_AS(line_profile_slots("fast"), ConfigError);
}

TEST_CASE("inference latency per profile") {
    const auto mlp = simulate_frame(with_profile("mlp"));
    CHECK(ns(mlp, Signal::TxDoneRise, Signal::DnnValidRise) == 20);
    const auto v1 = simulate_frame(with_profile("vit1"));
    CHECK(ns(v1, Signal::TxDoneRise, Signal::DnnValidRise) == 16216);
    const auto v3 = simulate_frame(with_profile("vit3", 12, 24));
    CHECK(ns(v3, Signal::TxDoneRise, Signal::DnnValidRise) == 35188);
}

TEST_CASE("frame timing at the default operating point") {
    auto cfg = with_profile("mlp");
    const auto t = simulate_frame(cfg);
    CHECK_NOTHROW(check_trace(t, cfg));
    CHECK(t.nanoseconds(t.first(Signal::FvalRise).tick) == 1'410'000);
    // ((H - 1) * 512 + W) / 17 MHz
    const auto send = t.first(Signal::TxDoneRise).tick - t.first(Signal::FvalRise).tick;
    CHECK(send * 17'000'000 == 4618 * t.tick_hz);
    CHECK(t.seconds(send) == doctest::Approx(271.6e-6).epsilon(1e-4));

    cfg.slots_per_line = line_profile_slots("calibrated");
    const auto c = simulate_frame(cfg);
    const auto send_c = c.first(Signal::TxDoneRise).tick - c.first(Signal::FvalRise).tick;
    CHECK(send_c * 17'000'000 == 5851 * c.tick_hz);
    CHECK(c.seconds(send_c) == doctest::Approx(344.2e-6).epsilon(1e-3));

    const auto rep = latency_report(c, cfg);
    CHECK(rep.fval_latency_s == doctest::Approx(1.41e-3).epsilon(1e-12));
    CHECK(rep.compute_s == doctest::Approx(20e-9).epsilon(1e-9));
    CHECK(rep.dnn_valid_latency_s == doctest::Approx(rep.fval_latency_s + rep.send_s + rep.compute_s));
    REQUIRE(rep.stages.size() == 3);
    CHECK(rep.stages[1].end_s == rep.tx_done_latency_s);
    CHECK(rep.text().find("Stage breakdown") != std::string::npos);
    CHECK(rep.csv().find(',') != std::string::npos);
}

TEST_CASE("line utilization and ideal send time") {
    auto cfg = with_profile("mlp");
    cfg.slots_per_line = 649;
    CHECK(line_utilization(cfg) == doctest::Approx(10.0 / 649));
    CHECK(line_utilization(cfg) * 100 == doctest::Approx(1.54).epsilon(0.01));
    const auto s = ideal_send_time(cfg);
    CHECK(s.ideal_s == doctest::Approx(100.0 / 17e6));
    CHECK(s.actual_s == doctest::Approx(10 * 649 / 17e6));
    CHECK(s.speedup == doctest::Approx(64.9));

    // Doubling the pixel clock halves every send-path interval.
    auto fast = cfg;
    fast.pixel_clock_hz *= 2;
    const auto a = simulate_frame(cfg), b = simulate_frame(fast);
    const double send_a = a.seconds(a.first(Signal::TxDoneRise).tick - a.first(Signal::FvalRise).tick);
    const double send_b = b.seconds(b.first(Signal::TxDoneRise).tick - b.first(Signal::FvalRise).tick);
    CHECK(send_b == doctest::Approx(send_a / 2).epsilon(1e-12));
    CHECK(ideal_send_time(fast).speedup == doctest::Approx(s.speedup));
}

TEST_CASE("random configurations match the closed form and the invariants") {
    std::mt19937_64 rng(17);
    const std::uint64_t pclks[] = {5'000'000, 10'000'000, 17'000'000, 20'000'000, 40'000'000};
    const std::uint64_t fclks[] = {100'000'000, 125'000'000, 200'000'000, 250'000'000, 300'000'000};
    for (int trial = 0; trial < 1000; ++trial) {
        TimingConfig cfg;
        cfg.pixel_clock_hz = pclks[rng() % 5];
        cfg.fpga_clock_hz = fclks[rng() % 5];
        cfg.height = 1 + static_cast<int>(rng() % 16);
        cfg.width = 1 + static_cast<int>(rng() % 32);
        cfg.slots_per_line = cfg.width + static_cast<int>(rng() % 700);
        const auto exp_us = static_cast<std::int64_t>(rng() % 3000);
        const auto ft_us = static_cast<std::int64_t>(rng() % 1000);
        cfg.exposure_s = static_cast<double>(exp_us) * 1e-6;
        cfg.frame_transfer_s = static_cast<double>(ft_us) * 1e-6;
        cfg.dnn_cycles = rng() % 10000;
        cfg.fifo_stall_cycles = rng() % 4;
        const auto t = simulate_frame(cfg, SimOptions{trial % 10 == 0});
        CHECK_NOTHROW(check_trace(t, cfg));
        CHECK(t.count(Signal::LvalRise) == static_cast<std::size_t>(cfg.height));
        CHECK(t.count(Signal::LvalFall) == static_cast<std::size_t>(cfg.height));
        if (trial % 10 == 0) CHECK(t.count(Signal::Pixel) == static_cast<std::size_t>(cfg.height * cfg.width));

        const auto cf = oracle::timing_closed_form(oracle::Rational(exp_us, 1'000'000),
                                                   oracle::Rational(ft_us, 1'000'000), cfg.pixel_clock_hz,
                                                   cfg.slots_per_line, cfg.height, cfg.width, cfg.fpga_clock_hz,
                                                   cfg.dnn_cycles, cfg.fifo_stall_cycles);
        const oracle::Rational hz(t.tick_hz);
        CHECK(oracle::Rational(t.first(Signal::FvalRise).tick) == cf.fval * hz);
        CHECK(oracle::Rational(t.first(Signal::TxDoneRise).tick) == cf.tx_done * hz);
        CHECK(oracle::Rational(t.first(Signal::DnnValidRise).tick) == cf.dnn_valid * hz);
    }
}

TEST_CASE("trace checker rejects corrupted traces") {
    auto cfg = with_profile("mlp");
    auto t = simulate_frame(cfg);
    auto swapped = t;
    std::swap(swapped.events[1], swapped.events[2]);
    CHECK_THROWS_AS(check_trace(swapped, cfg), TraceError);
    auto missing = t;
    std::erase_if(missing.events, [](const Event& e) { return e.signal == Signal::DnnValidRise; });
    CHECK_THROWS_AS(check_trace(missing, cfg), TraceError);
    CHECK_THROWS_AS(latency_report(missing, cfg), TraceError);
    auto short_lines = t;
    for (auto it = short_lines.events.begin(); it != short_lines.events.end(); ++it)
        if (it->signal == Signal::LvalRise) {
            short_lines.events.erase(it);
            break;
        }
    CHECK_THROWS_AS(check_trace(short_lines, cfg), TraceError);
}

TEST_CASE("trace export") {
    auto cfg = with_profile("mlp");
    const auto t = simulate_frame(cfg);
    const auto text = export_trace(t);
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        CHECK(line.find('\t') != std::string::npos);
        ++n;
    }
    CHECK(n == t.events.size());
    CHECK(text.rfind(std::string(signal_name(Signal::Trigger)) + "\t0\n", 0) == 0);
    CHECK(simulate_frame(cfg) == t);
}

TEST_CASE("configuration errors") {
    TimingConfig cfg;
    cfg.slots_per_line = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TimingConfig{};
    cfg.pixel_clock_hz = 0;
    CHECK_THROWS_AS(simulate_frame(cfg), ConfigError);
    cfg = TimingConfig{};
    cfg.exposure_s = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("analytic cycle model") {
    auto cfg = vit::VitConfig::for_images(10, 10, 1);
    const auto base = vit_cycle_model(cfg, ReuseFactors{});
    CHECK(base.total > 0);
    std::uint64_t sum = 0;
    for (const auto& s : base.stages) sum += s.cycles;
    CHECK(sum == base.total);
    ReuseFactors r;
    r.embed = 4;
    CHECK(vit_cycle_model(cfg, r).total > base.total);
    r.embed = 7;
    CHECK_THROWS_AS(vit_cycle_model(cfg, r), ConfigError);
    CHECK(gpu_reference().size() == 3);
    CHECK(kPublishedIdealSendSeconds == 5.45e-6);
}
