#pragma once

// Discrete-event model of the camera-to-decision path. Time is kept in
// integer ticks of a base clock that both the pixel clock and the FPGA clock
// divide (their least common multiple), so every edge lands on an exact tick.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qdetect/vit.hpp"

namespace qdetect::timing {

enum class Signal { Trigger, FvalRise, FvalFall, LvalRise, LvalFall, Pixel, TxDoneRise, DnnValidRise };

std::string_view signal_name(Signal s);

struct DnnLatencyProfile {
    std::string name;
    std::uint64_t cycles = 0;
};

// "mlp" 5 cycles, "vit1" 4054, "vit3" 8797. Throws ConfigError otherwise.
DnnLatencyProfile dnn_profile(std::string_view name);

// "nominal" 512 slots per line, "calibrated" 649.
int line_profile_slots(std::string_view name);

struct TimingConfig {
    std::uint64_t pixel_clock_hz = 17'000'000;
    int slots_per_line = 512;
    std::string line_profile = "nominal"; // label carried into reports
    int height = 10;
    int width = 10;
    double exposure_s = 1e-3;
    double frame_transfer_s = 0.41e-3;
    std::uint64_t fpga_clock_hz = 250'000'000;
    std::uint64_t dnn_cycles = 5;
    std::string dnn_profile = "mlp";
    // What-if hook: FPGA cycles the FIFO handoff stalls before the DNN starts.
    // The double-buffered design has none.
    std::uint64_t fifo_stall_cycles = 0;

    // Throws ConfigError.
    void validate() const;
    std::uint64_t tick_hz() const;
    std::uint64_t ticks_per_slot() const { return tick_hz() / pixel_clock_hz; }
    std::uint64_t ticks_per_fpga_cycle() const { return tick_hz() / fpga_clock_hz; }
};

struct Event {
    Signal signal;
    std::uint64_t tick = 0;
    std::uint64_t seq = 0;   // scheduling order; breaks timestamp ties
    std::uint32_t index = 0; // line or pixel number, 0 otherwise

    friend bool operator==(const Event&, const Event&) = default;
};

struct TimingTrace {
    std::uint64_t tick_hz = 1;
    std::vector<Event> events;

    double seconds(std::uint64_t tick) const { return static_cast<double>(tick) / static_cast<double>(tick_hz); }
    // Exact rounding of a tick count to integer nanoseconds.
    std::int64_t nanoseconds(std::uint64_t tick) const;
    // First event of a signal; throws TraceError when absent.
    const Event& first(Signal s) const;
    std::size_t count(Signal s) const;

    friend bool operator==(const TimingTrace&, const TimingTrace&) = default;
};

struct SimOptions {
    bool record_pixels = false; // emit one Pixel event per received pixel
};

TimingTrace simulate_frame(const TimingConfig& cfg, const SimOptions& opts = {});

// Checks the ordering invariant, the LVAL pulse count and (when recorded)
// pixel conservation. Throws TraceError.
void check_trace(const TimingTrace& trace, const TimingConfig& cfg);

double line_utilization(const TimingConfig& cfg);

struct SendTime {
    double ideal_s = 0.0;  // H*W pixel periods
    double actual_s = 0.0; // H line intervals
    double speedup = 0.0;  // actual / ideal
};
SendTime ideal_send_time(const TimingConfig& cfg);

inline constexpr double kPublishedIdealSendSeconds = 5.45e-6;

// Analytic ViT cycle model: each matrix stage processes 1/R of its
// multiplications per pass, so its cycles are R times its pass depth.
struct ReuseFactors {
    int embed = 1;
    int qkv = 1;
    int scores = 1;
    int context = 1;
    int projection = 1;
    int linear = 1;
    int head = 1;
};

struct StageCycles {
    std::string stage;
    std::uint64_t multiplications = 0;
    int reuse = 1; // 0 for stages that are not multiplexed
    std::uint64_t cycles = 0;
};

struct CycleEstimate {
    std::vector<StageCycles> stages;
    std::uint64_t total = 0;
};

// Throws ConfigError when a reuse factor does not divide its stage's work.
CycleEstimate vit_cycle_model(const vit::VitConfig& cfg, const ReuseFactors& reuse);

struct StageRow {
    std::string stage;
    double start_s = 0.0;
    double end_s = 0.0;
};

struct LatencyReport {
    std::string dnn_profile;
    std::string line_profile;
    double fval_latency_s = 0.0;
    double tx_done_latency_s = 0.0;
    double dnn_valid_latency_s = 0.0;
    double send_s = 0.0;    // tx_done - FVAL
    double compute_s = 0.0; // DNN_valid - tx_done
    double line_utilization = 0.0;
    SendTime send;
    std::vector<StageRow> stages;

    std::string text() const;
    std::string csv() const;
};

// Measures every delta from the trigger. Throws TraceError on missing events.
LatencyReport latency_report(const TimingTrace& trace, const TimingConfig& cfg);

// Published GPU measurements, reference data only.
struct GpuReference {
    std::string row;
    double one_qubit_s;
    double three_qubit_s;
};
const std::vector<GpuReference>& gpu_reference();

// One event per line: signal<TAB>timestamp in integer nanoseconds.
std::string export_trace(const TimingTrace& trace);

} // namespace qdetect::timing
