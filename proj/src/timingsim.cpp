#include "qdetect/timingsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <queue>
#include <sstream>

#include "qdetect/error.hpp"

namespace qdetect::timing {

std::string_view signal_name(Signal s) {
    switch (s) {
    case Signal::Trigger: return "trigger";
    case Signal::FvalRise: return "FVAL_rise";
    case Signal::FvalFall: return "FVAL_fall";
    case Signal::LvalRise: return "LVAL_rise";
    case Signal::LvalFall: return "LVAL_fall";
    case Signal::Pixel: return "pixel";
    case Signal::TxDoneRise: return "tx_done_rise";
    case Signal::DnnValidRise: return "DNN_valid_rise";
    }
    return "?";
}

DnnLatencyProfile dnn_profile(std::string_view name) {
    if (name == "mlp") return {"mlp", 5};
    if (name == "vit1") return {"vit1", 4054};
    if (name == "vit3") return {"vit3", 8797};
    throw ConfigError("unknown DNN profile '" + std::string(name) + "' (expected mlp, vit1 or vit3)");
}

int line_profile_slots(std::string_view name) {
    if (name == "nominal") return 512;
    if (name == "calibrated") return 649;
    throw ConfigError("unknown line profile '" + std::string(name) + "' (expected nominal or calibrated)");
}

void TimingConfig::validate() const {
    if (pixel_clock_hz == 0 || fpga_clock_hz == 0) throw ConfigError("clock frequencies must be > 0");
    if (height < 1 || width < 1) throw ConfigError("image dimensions must be positive");
    if (slots_per_line < 1) throw ConfigError("slots_per_line must be >= 1");
    if (width > slots_per_line) {
        throw ConfigError("image width " + std::to_string(width) + " exceeds " + std::to_string(slots_per_line) +
                          " slots per line");
    }
    if (!(exposure_s >= 0.0) || !(frame_transfer_s >= 0.0)) throw ConfigError("exposure and frame transfer must be >= 0");
    const auto g = std::gcd(pixel_clock_hz, fpga_clock_hz);
    // Ticks of at most 1 fs keep a 64-bit tick counter valid for hours.
    if (pixel_clock_hz / g > 1'000'000'000'000'000ULL / fpga_clock_hz)
        throw ConfigError("clock frequencies have no common multiple at or below 1e15 Hz");
}

std::uint64_t TimingConfig::tick_hz() const { return std::lcm(pixel_clock_hz, fpga_clock_hz); }

std::int64_t TimingTrace::nanoseconds(std::uint64_t tick) const {
    const unsigned __int128 num = static_cast<unsigned __int128>(tick) * 1'000'000'000u + tick_hz / 2;
    return static_cast<std::int64_t>(num / tick_hz);
}

const Event& TimingTrace::first(Signal s) const {
    for (const auto& e : events)
        if (e.signal == s) return e;
    throw TraceError("trace has no " + std::string(signal_name(s)) + " event");
}

std::size_t TimingTrace::count(Signal s) const {
    return static_cast<std::size_t>(std::count_if(events.begin(), events.end(), [&](const Event& e) { return e.signal == s; }));
}

TimingTrace simulate_frame(const TimingConfig& cfg, const SimOptions& opts) {
    cfg.validate();
    const std::uint64_t hz = cfg.tick_hz();
    const std::uint64_t slot = cfg.ticks_per_slot();
    const std::uint64_t line = slot * static_cast<std::uint64_t>(cfg.slots_per_line);
    const auto to_ticks = [&](double s) { return static_cast<std::uint64_t>(std::llround(s * static_cast<double>(hz))); };
    const std::uint64_t total_pixels = static_cast<std::uint64_t>(cfg.height) * static_cast<std::uint64_t>(cfg.width);

    auto later = [](const Event& a, const Event& b) { return a.tick != b.tick ? a.tick > b.tick : a.seq > b.seq; };
    std::priority_queue<Event, std::vector<Event>, decltype(later)> queue(later);
    std::uint64_t seq = 0;
    const auto schedule = [&](Signal s, std::uint64_t tick, std::uint32_t index = 0) {
        queue.push({s, tick, seq++, index});
    };

    TimingTrace trace;
    trace.tick_hz = hz;
    std::uint64_t received = 0;
    schedule(Signal::Trigger, 0);
    while (!queue.empty()) {
        const Event e = queue.top();
        queue.pop();
        if (e.signal != Signal::Pixel || opts.record_pixels) trace.events.push_back(e);
        switch (e.signal) {
        case Signal::Trigger:
            schedule(Signal::FvalRise, e.tick + to_ticks(cfg.exposure_s) + to_ticks(cfg.frame_transfer_s));
            break;
        case Signal::FvalRise:
            schedule(Signal::LvalRise, e.tick, 0);
            break;
        case Signal::LvalRise: {
            // A pixel is received at the end of its slot.
            for (int k = 0; k < cfg.width; ++k)
                schedule(Signal::Pixel, e.tick + slot * static_cast<std::uint64_t>(k + 1),
                         e.index * static_cast<std::uint32_t>(cfg.width) + static_cast<std::uint32_t>(k));
            schedule(Signal::LvalFall, e.tick + slot * static_cast<std::uint64_t>(cfg.width), e.index);
            if (static_cast<int>(e.index) + 1 < cfg.height) schedule(Signal::LvalRise, e.tick + line, e.index + 1);
            break;
        }
        case Signal::LvalFall:
            if (static_cast<int>(e.index) + 1 == cfg.height) schedule(Signal::FvalFall, e.tick);
            break;
        case Signal::Pixel:
            // The double-buffered FIFO has staged every earlier pixel, so the
            // last one completes the frame.
            if (++received == total_pixels) schedule(Signal::TxDoneRise, e.tick);
            break;
        case Signal::TxDoneRise:
            schedule(Signal::DnnValidRise, e.tick + (cfg.dnn_cycles + cfg.fifo_stall_cycles) * cfg.ticks_per_fpga_cycle());
            break;
        case Signal::FvalFall:
        case Signal::DnnValidRise:
            break;
        }
    }
    return trace;
}

void check_trace(const TimingTrace& trace, const TimingConfig& cfg) {
    for (std::size_t i = 1; i < trace.events.size(); ++i) {
        const auto& a = trace.events[i - 1];
        const auto& b = trace.events[i];
        if (b.tick < a.tick || (b.tick == a.tick && b.seq < a.seq))
            throw TraceError("events out of order at position " + std::to_string(i));
    }
    const auto position = [&](Signal s) {
        const auto& e = trace.first(s);
        return std::make_pair(e.tick, e.seq);
    };
    const auto trig = position(Signal::Trigger);
    const auto fval = position(Signal::FvalRise);
    const auto lval = position(Signal::LvalRise);
    const auto tx = position(Signal::TxDoneRise);
    const auto dnn = position(Signal::DnnValidRise);
    if (!(trig <= fval && fval < lval && lval <= tx && tx < dnn))
        throw TraceError("trigger <= FVAL < first LVAL <= tx_done < DNN_valid does not hold");
    if (trace.count(Signal::LvalRise) != static_cast<std::size_t>(cfg.height))
        throw TraceError("expected " + std::to_string(cfg.height) + " LVAL pulses, found " +
                         std::to_string(trace.count(Signal::LvalRise)));
    const auto pixels = trace.count(Signal::Pixel);
    if (pixels != 0) {
        const auto expected = static_cast<std::size_t>(cfg.height) * static_cast<std::size_t>(cfg.width);
        std::size_t between = 0;
        for (const auto& e : trace.events)
            if (e.signal == Signal::Pixel && std::make_pair(e.tick, e.seq) > fval && std::make_pair(e.tick, e.seq) < tx)
                ++between;
        // The last pixel shares tx_done's timestamp and precedes it.
        if (pixels != expected || between != expected)
            throw TraceError("expected " + std::to_string(expected) + " pixels between FVAL and tx_done, found " +
                             std::to_string(between));
    }
}

double line_utilization(const TimingConfig& cfg) {
    cfg.validate();
    return static_cast<double>(cfg.width) / static_cast<double>(cfg.slots_per_line);
}

SendTime ideal_send_time(const TimingConfig& cfg) {
    cfg.validate();
    SendTime s;
    const double pclk = static_cast<double>(cfg.pixel_clock_hz);
    s.ideal_s = static_cast<double>(cfg.height) * cfg.width / pclk;
    s.actual_s = static_cast<double>(cfg.height) * cfg.slots_per_line / pclk;
    s.speedup = static_cast<double>(cfg.slots_per_line) / static_cast<double>(cfg.width);
    return s;
}

namespace {

std::uint64_t tree_depth(std::uint64_t inputs) {
    std::uint64_t d = 0;
    while ((std::uint64_t{1} << d) < inputs) ++d;
    return d;
}

// One pass: a multiply, an adder tree over `reduction` terms, a register.
StageCycles matrix_stage(const std::string& name, std::uint64_t mults, std::uint64_t reduction, int reuse) {
    if (reuse < 1 || mults % static_cast<std::uint64_t>(reuse) != 0) {
        throw ConfigError("reuse factor " + std::to_string(reuse) + " does not divide the " + std::to_string(mults) +
                          " multiplications of stage " + name);
    }
    return {name, mults, reuse, static_cast<std::uint64_t>(reuse) * (2 + tree_depth(reduction))};
}

} // namespace

CycleEstimate vit_cycle_model(const vit::VitConfig& cfg, const ReuseFactors& r) {
    cfg.validate();
    const std::uint64_t N = static_cast<std::uint64_t>(cfg.n_patches());
    const std::uint64_t T = N + 1;
    const std::uint64_t D = static_cast<std::uint64_t>(cfg.latent_dim);
    const std::uint64_t H = static_cast<std::uint64_t>(cfg.n_heads);
    const std::uint64_t d = static_cast<std::uint64_t>(cfg.head_dim());
    const std::uint64_t P2 = static_cast<std::uint64_t>(cfg.patch_area());
    const std::uint64_t C = static_cast<std::uint64_t>(cfg.n_classes);
    const std::uint64_t concat = cfg.literal_heads ? D : H * d;

    CycleEstimate est;
    est.stages.push_back(matrix_stage("embed", N * P2 * D, P2, r.embed));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "block" + std::to_string(l) + ".";
        est.stages.push_back(matrix_stage(pre + "qkv", 3 * T * D * H * d, D, r.qkv));
        est.stages.push_back(matrix_stage(pre + "scores", H * T * T * d, d, r.scores));
        est.stages.push_back({pre + "softmax", 0, 0, 3 + tree_depth(T)});
        est.stages.push_back(matrix_stage(pre + "context", H * T * T * d, T, r.context));
        est.stages.push_back(matrix_stage(pre + "projection", T * concat * D, concat, r.projection));
        est.stages.push_back({pre + "batchnorm", T * D, 0, 2});
        est.stages.push_back(matrix_stage(pre + "linear", T * D * D, D, r.linear));
    }
    est.stages.push_back(matrix_stage("head", D + D * C, D, r.head));
    for (const auto& s : est.stages) est.total += s.cycles;
    return est;
}

LatencyReport latency_report(const TimingTrace& trace, const TimingConfig& cfg) {
    LatencyReport rep;
    rep.dnn_profile = cfg.dnn_profile;
    rep.line_profile = cfg.line_profile;
    const auto t0 = trace.first(Signal::Trigger).tick;
    const auto fval = trace.first(Signal::FvalRise).tick;
    const auto tx = trace.first(Signal::TxDoneRise).tick;
    const auto dnn = trace.first(Signal::DnnValidRise).tick;
    rep.fval_latency_s = trace.seconds(fval - t0);
    rep.tx_done_latency_s = trace.seconds(tx - t0);
    rep.dnn_valid_latency_s = trace.seconds(dnn - t0);
    rep.send_s = trace.seconds(tx - fval);
    rep.compute_s = trace.seconds(dnn - tx);
    rep.line_utilization = line_utilization(cfg);
    rep.send = ideal_send_time(cfg);
    rep.stages = {{"exposure + frame transfer", 0.0, rep.fval_latency_s},
                  {"image send", rep.fval_latency_s, rep.tx_done_latency_s},
                  {"DNN inference", rep.tx_done_latency_s, rep.dnn_valid_latency_s}};
    return rep;
}

const std::vector<GpuReference>& gpu_reference() {
    static const std::vector<GpuReference> rows{
        {"FVAL", 1.41e-3, 1.41e-3},
        {"DNN_valid", 211.95e-3, 214.70e-3},
        {"ViT model", 2.85e-3, 2.95e-3},
    };
    return rows;
}

namespace {

std::string num(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

} // namespace

std::string LatencyReport::text() const {
    std::ostringstream os;
    os << "Latency report (DNN profile " << dnn_profile << ", line profile " << line_profile << ")\n";
    os << "Signal      Latency from trigger (ms)\n";
    os << "FVAL        " << num("%.6f", fval_latency_s * 1e3) << "\n";
    os << "tx_done     " << num("%.6f", tx_done_latency_s * 1e3) << "\n";
    os << "DNN_valid   " << num("%.6f", dnn_valid_latency_s * 1e3) << "\n\n";
    os << "Stage breakdown\n";
    for (const auto& s : stages)
        os << "  " << s.stage << ": " << num("%.3f", s.start_s * 1e6) << " -> " << num("%.3f", s.end_s * 1e6)
           << " us (" << num("%.3f", (s.end_s - s.start_s) * 1e6) << " us)\n";
    os << "\nLine utilization   " << num("%.3f", line_utilization * 100.0) << " %\n";
    os << "Ideal send         " << num("%.3f", send.ideal_s * 1e6) << " us (published: "
       << num("%.2f", kPublishedIdealSendSeconds * 1e6) << " us)\n";
    os << "Line-limited send  " << num("%.3f", send.actual_s * 1e6) << " us\n";
    os << "Send speedup       " << num("%.1f", send.speedup) << "x\n\n";
    os << "GPU reference (published measurements, not simulated)\n";
    os << "Row         1-qubit (ms)  3-qubit (ms)\n";
    for (const auto& g : gpu_reference()) {
        std::string name = g.row;
        name.resize(12, ' ');
        os << name << num("%-14.2f", g.one_qubit_s * 1e3) << num("%.2f", g.three_qubit_s * 1e3) << "\n";
    }
    return os.str();
}

std::string LatencyReport::csv() const {
    std::ostringstream os;
    os << "metric,value\n";
    os << "dnn_profile," << dnn_profile << "\n";
    os << "line_profile," << line_profile << "\n";
    os << "fval_latency_s," << num("%.12g", fval_latency_s) << "\n";
    os << "tx_done_latency_s," << num("%.12g", tx_done_latency_s) << "\n";
    os << "dnn_valid_latency_s," << num("%.12g", dnn_valid_latency_s) << "\n";
    os << "send_s," << num("%.12g", send_s) << "\n";
    os << "compute_s," << num("%.12g", compute_s) << "\n";
    os << "line_utilization," << num("%.12g", line_utilization) << "\n";
    os << "ideal_send_s," << num("%.12g", send.ideal_s) << "\n";
    os << "published_ideal_send_s," << num("%.12g", kPublishedIdealSendSeconds) << "\n";
    os << "send_speedup," << num("%.12g", send.speedup) << "\n";
    for (const auto& g : gpu_reference()) {
        std::string key = g.row;
        std::replace(key.begin(), key.end(), ' ', '_');
        os << "gpu_reference_1qubit_" << key << "," << num("%.12g", g.one_qubit_s) << "\n";
        os << "gpu_reference_3qubit_" << key << "," << num("%.12g", g.three_qubit_s) << "\n";
    }
    return os.str();
}

std::string export_trace(const TimingTrace& trace) {
    std::ostringstream os;
    for (const auto& e : trace.events) os << signal_name(e.signal) << '\t' << trace.nanoseconds(e.tick) << '\n';
    return os.str();
}

} // namespace qdetect::timing
