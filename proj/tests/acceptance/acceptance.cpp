// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "qdetect/binary_io.hpp"
#include "qdetect/config.hpp"
#include "qdetect/lut.hpp"
#include "qdetect/pipeline.hpp"
#include "qdetect/polymlp.hpp"
#include "qdetect/threshold.hpp"
#include "qdetect/timingsim.hpp"
#include "qdetect/vit_fixed.hpp"

using namespace qdetect;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string pct(double x) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << 100.0 * x << "%";
    return o.str();
}

std::string fmt(double x, int prec = 2) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(prec) << x;
    return o.str();
}

void progress(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

double error_of(const eval::ModelResult& r) { return eval::mmf(r.table).error; }

// Everything trained on one preset's data.
struct Experiment {
    config::RunConfig cfg;
    Dataset data;
    std::span<const IonImage> train;
    double gen_s = 0, threshold_s = 0, mlp_s = 0, vit_s = 0;
    std::optional<eval::ModelResult> threshold, mlp, vit_float, vit_fixed;
    std::optional<polymlp::PolyMlpModel> mlp_model;
    std::optional<lut::LutNetwork> lut_net;
    std::optional<vit::VitModel> vit_model;
    std::optional<vit::FixedVitModel> fixed_model;
    double agreement = 0;
};

class Context {
public:
    Experiment& three_qubit_threshold() {
        if (!three_) {
            three_.emplace();
            auto& e = *three_;
            e.cfg = config::preset("paper-3qubit");
            progress("generating " + std::to_string(e.cfg.dataset.count) + " 3-qubit images");
            auto t0 = Clock::now();
            e.data = build_dataset(e.cfg.dataset.image, e.cfg.dataset.count, e.cfg.dataset.split_ratio, e.cfg.seed);
            e.gen_s = seconds_since(t0);
            t0 = Clock::now();
            auto model = threshold::calibrate_model(e.data.train, e.cfg.dataset.image, e.cfg.threshold.roi_width,
                                                    e.cfg.threshold.roi_height);
            e.threshold = pipeline::evaluate_threshold(model, e.data.test, "3-qubit");
            e.threshold_s = seconds_since(t0);
        }
        return *three_;
    }

    // DNNs at the reduced training scale.
    Experiment& three_qubit_dnns() {
        auto& e = three_qubit_threshold();
        if (!e.vit_fixed) {
            e.train = std::span<const IonImage>(e.data.train).first(std::min<std::size_t>(20'000, e.data.train.size()));
            train_dnns(e, "3-qubit");
        }
        return e;
    }

    Experiment& one_qubit() {
        if (!one_) {
            one_.emplace();
            auto& e = *one_;
            e.cfg = config::preset("paper-1qubit");
            progress("generating " + std::to_string(e.cfg.dataset.count) + " 1-qubit images");
            auto t0 = Clock::now();
            e.data = build_dataset(e.cfg.dataset.image, e.cfg.dataset.count, e.cfg.dataset.split_ratio, e.cfg.seed);
            e.gen_s = seconds_since(t0);
            auto model = threshold::calibrate_model(e.data.train, e.cfg.dataset.image, e.cfg.threshold.roi_width,
                                                    e.cfg.threshold.roi_height);
            e.threshold = pipeline::evaluate_threshold(model, e.data.test, "1-qubit");
            e.train = e.data.train;
            train_dnns(e, "1-qubit");
        }
        return *one_;
    }

private:
    static void train_dnns(Experiment& e, const std::string& label) {
        progress(label + ": training the MLP on " + std::to_string(e.train.size()) + " images");
        auto t0 = Clock::now();
        e.mlp_model = polymlp::train(e.cfg.mlp, e.train);
        e.lut_net = lut::compile_truth_tables(*e.mlp_model);
        e.mlp_s = seconds_since(t0);
        e.mlp = pipeline::evaluate_lut(*e.lut_net, e.data.test, label);

        progress(label + ": training the ViT on " + std::to_string(e.train.size()) + " images");
        t0 = Clock::now();
        e.vit_model = vit::train_vit(e.cfg.vit, e.train);
        e.vit_s = seconds_since(t0);
        e.fixed_model = vit::quantize_vit(*e.vit_model, e.cfg.format);
        e.vit_float = pipeline::evaluate_vit(*e.vit_model, e.data.test, label);
        e.vit_fixed = pipeline::evaluate_fixed_vit(*e.fixed_model, e.data.test, label);

        std::size_t agree = 0;
        for (const auto& im : e.data.test)
            agree += vit::predict(*e.vit_model, im) == vit::predict_fixed(*e.fixed_model, im) ? 1 : 0;
        e.agreement = static_cast<double>(agree) / static_cast<double>(e.data.test.size());
    }

    std::optional<Experiment> three_, one_;
};

Outcome criterion1(Context& ctx) {
    auto& e = ctx.three_qubit_threshold();
    const double err = error_of(*e.threshold);
    const double runtime = e.gen_s + e.threshold_s;
    const bool in_band = std::abs(err - 0.114) <= 0.04;
    return {in_band && runtime < 120.0, "threshold MMF error " + pct(err) + " (target 11.40% +- 4 pp), " +
                                            std::to_string(e.data.size()) + " images, " + fmt(runtime, 1) + " s"};
}

Outcome criterion2(Context& ctx) {
    auto& e = ctx.three_qubit_dnns();
    const double thr = error_of(*e.threshold), mlp = error_of(*e.mlp), vitf = error_of(*e.vit_fixed);
    const bool ordered = vitf < mlp && mlp < thr;
    const double f_mlp = thr / mlp, f_vit = thr / vitf;
    const double train_s = e.mlp_s + e.vit_s;
    const bool pass = ordered && f_mlp >= 3.0 && f_vit >= 3.0 && train_s < 1800.0;
    return {pass, "errors ViT " + pct(vitf) + " < MLP " + pct(mlp) + " < threshold " + pct(thr) +
                      (ordered ? " holds" : " violated") + "; factors " + fmt(f_mlp) + "x (MLP), " + fmt(f_vit) +
                      "x (ViT), need >= 3x; training " + fmt(train_s, 1) + " s on " + std::to_string(e.train.size()) +
                      " images"};
}

Outcome criterion3(Context& ctx) {
    auto& e = ctx.one_qubit();
    const double thr = error_of(*e.threshold), mlp = error_of(*e.mlp), vitf = error_of(*e.vit_fixed);
    return {mlp < thr && vitf < thr,
            "1-qubit errors threshold " + pct(thr) + ", MLP " + pct(mlp) + ", ViT " + pct(vitf)};
}

Outcome criterion4(Context& ctx) {
    auto& e = ctx.three_qubit_dnns();
    const auto t0 = Clock::now();
    const auto report = lut::verify_equivalence(*e.mlp_model, *e.lut_net);
    const auto agreement = lut::end_to_end_agreement(*e.mlp_model, *e.lut_net, e.data.test);
    const double runtime = seconds_since(t0);
    const bool pass = report.ok() && agreement.agree == agreement.samples && runtime < 60.0;
    return {pass, std::to_string(report.tables_checked) + " tables, " + std::to_string(report.entries_checked) +
                      " entries, " + std::to_string(report.mismatches.size()) + " mismatches; argmax agreement " +
                      std::to_string(agreement.agree) + "/" + std::to_string(agreement.samples) + "; " +
                      fmt(runtime, 1) + " s"};
}

Outcome criterion5() {
    auto cfg = config::preset("paper-3qubit");
    std::vector<std::string> parts;
    bool pass = true;
    for (auto [fan_in, expected] : {std::pair{2, 96}, std::pair{4, 576}}) {
        auto mcfg = cfg.mlp;
        mcfg.fan_in = fan_in;
        const int width = cfg.dataset.image.height * cfg.dataset.image.width;
        auto model = polymlp::make_model(mcfg, width, 3, polymlp::select_connectivity(mcfg, width, 8), 0.0, 1.0);
        const auto net = lut::compile_truth_tables(model);
        const int beta = mcfg.activation_bits;
        const std::size_t formula = 2 * (std::size_t{1} << (beta * fan_in)) + (std::size_t{1} << (2 * (beta + 1)));
        for (std::size_t l = 0; l < net.layers.size(); ++l) pass = pass && net.entries_per_neuron(l) == formula;
        pass = pass && formula == static_cast<std::size_t>(expected);
        parts.push_back("F=" + std::to_string(fan_in) + ": " + std::to_string(net.entries_per_neuron(0)) +
                        " entries per neuron (formula " + std::to_string(formula) + ", expected " +
                        std::to_string(expected) + ")");
    }
    return {pass, parts[0] + "; " + parts[1]};
}

struct GradStats {
    std::size_t entries = 0;
    std::size_t failures = 0;
    double worst_rel = 0;
};

void record(GradStats& s, double fd, double an) {
    const double scale = std::max(std::abs(fd), std::abs(an));
    ++s.entries;
    // Entries whose gradient is numerically zero cannot carry a relative error.
    if (std::abs(fd - an) > 1e-4 * scale + 1e-8) ++s.failures;
    if (scale > 1e-6) s.worst_rel = std::max(s.worst_rel, std::abs(fd - an) / scale);
}

GradStats mlp_gradients() {
    polymlp::PolyMlpConfig cfg;
    cfg.hidden_widths = {4, 3};
    cfg.fan_in = 2;
    cfg.seed = 5;
    auto model = polymlp::make_model(cfg, 6, 1, polymlp::select_connectivity(cfg, 6, 2), 0.0, 100.0);
    polymlp::init_coefficients(model);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<polymlp::Sample> batch(6);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        batch[i].input_values.resize(6);
        batch[i].input_codes.resize(6);
        for (auto& v : batch[i].input_values) v = u(rng);
        batch[i].label = static_cast<int>(i % 2);
    }
    std::vector<double> grad;
    polymlp::loss_and_gradient(model, batch, polymlp::QuantMode::PassThrough, &grad);
    GradStats s;
    const double h = 1e-6;
    for (std::size_t k = 0; k < model.coeffs.size(); ++k) {
        auto plus = model, minus = model;
        plus.coeffs[k] += h;
        minus.coeffs[k] -= h;
        const double fd = (polymlp::loss_and_gradient(plus, batch, polymlp::QuantMode::PassThrough, nullptr) -
                           polymlp::loss_and_gradient(minus, batch, polymlp::QuantMode::PassThrough, nullptr)) /
                          (2 * h);
        record(s, fd, grad[k]);
    }
    return s;
}

GradStats vit_gradients(vit::Mode mode) {
    vit::VitConfig cfg;
    cfg.height = 2;
    cfg.width = 4;
    cfg.patch = 2;
    cfg.latent_dim = 4;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.n_classes = 2;
    auto model = vit::make_vit(cfg);
    vit::init_vit(model);
    model.input_scale = 0.01;
    std::mt19937_64 rng(7);
    std::vector<IonImage> batch;
    for (int i = 0; i < 4; ++i) {
        IonImage im{Grid<std::uint16_t>(2, 4, 0), QubitState(1, static_cast<std::uint32_t>(i % 2))};
        for (auto& v : im.pixels.data) v = static_cast<std::uint16_t>(rng() % 100);
        batch.push_back(im);
    }
    vit::VitParams grad;
    vit::loss_and_gradient(model, batch, mode, &grad);
    std::vector<vit::Mat*> params, grads;
    model.params.visit([&](const std::string&, vit::Mat& t, bool trainable) {
        if (trainable) params.push_back(&t);
    });
    grad.visit([&](const std::string&, vit::Mat& t, bool trainable) {
        if (trainable) grads.push_back(&t);
    });
    GradStats s;
    const double h = 1e-6;
    for (std::size_t t = 0; t < params.size(); ++t)
        for (Eigen::Index i = 0; i < params[t]->size(); ++i) {
            double& x = params[t]->data()[i];
            const double saved = x;
            x = saved + h;
            const double up = vit::loss_and_gradient(model, batch, mode, nullptr).loss;
            x = saved - h;
            const double down = vit::loss_and_gradient(model, batch, mode, nullptr).loss;
            x = saved;
            record(s, (up - down) / (2 * h), grads[t]->data()[i]);
        }
    return s;
}

Outcome criterion6() {
    const auto m = mlp_gradients();
    const auto vt = vit_gradients(vit::Mode::Train);
    const auto vi = vit_gradients(vit::Mode::Infer);
    const auto line = [](const char* name, const GradStats& s) {
        std::ostringstream o;
        o << name << " " << s.entries - s.failures << "/" << s.entries << " (worst rel " << std::scientific
          << std::setprecision(1) << s.worst_rel << ")";
        return o.str();
    };
    return {m.failures == 0 && vt.failures == 0 && vi.failures == 0,
            line("MLP", m) + "; ViT train " + line("", vt).substr(1) + "; ViT infer " + line("", vi).substr(1)};
}

Outcome criterion7(Context& ctx) {
    bool pass = true;
    std::string detail;
    for (auto* e : {&ctx.three_qubit_dnns(), &ctx.one_qubit()}) {
        const double ef = error_of(*e->vit_float), eq = error_of(*e->vit_fixed);
        const bool ok = std::abs(eq - ef) <= 0.005 && e->agreement >= 0.99;
        pass = pass && ok;
        if (!detail.empty()) detail += "; ";
        detail += e->vit_float->dataset + " float " + pct(ef) + ", fixed " + pct(eq) + ", agreement " +
                  pct(e->agreement);
    }
    return {pass, detail};
}

Outcome criterion8() {
    auto cfg = config::preset("paper-1qubit").timing;
    bool pass = true;
    std::string detail;
    for (auto [profile, want_ns] : {std::pair{"mlp", 20}, std::pair{"vit1", 16216}, std::pair{"vit3", 8797 * 4}}) {
        auto t = cfg;
        t.dnn_profile = profile;
        t.dnn_cycles = timing::dnn_profile(profile).cycles;
        const auto trace = timing::simulate_frame(t);
        timing::check_trace(trace, t);
        const auto dt = trace.first(timing::Signal::DnnValidRise).tick - trace.first(timing::Signal::TxDoneRise).tick;
        // Exact: dt / tick_hz == want_ns * 1e-9.
        const bool exact = static_cast<unsigned __int128>(dt) * 1'000'000'000u ==
                           static_cast<unsigned __int128>(want_ns) * trace.tick_hz;
        pass = pass && exact;
        detail += std::string(profile) + " " + std::to_string(trace.nanoseconds(dt)) + " ns, ";
    }
    const auto trace = timing::simulate_frame(cfg);
    const auto fval = trace.first(timing::Signal::FvalRise).tick - trace.first(timing::Signal::Trigger).tick;
    const bool fval_exact = static_cast<unsigned __int128>(fval) * 100'000u ==
                            static_cast<unsigned __int128>(141) * trace.tick_hz;
    const double util = 100.0 * timing::line_utilization(cfg);
    const double speedup = timing::ideal_send_time(cfg).speedup;
    pass = pass && fval_exact && std::abs(util - 1.54) <= 0.01 && std::abs(speedup - 65.0) <= 2.0;
    detail += "FVAL " + fmt(trace.seconds(fval) * 1e3, 6) + " ms" + (fval_exact ? " (exact)" : " (inexact)") +
              ", utilization " + fmt(util) + "%, speedup " + fmt(speedup, 1) + "x";
    return {pass, detail};
}

Outcome criterion9() {
    std::vector<std::string> failed;
    std::mt19937_64 rng(2024);

    // Softmax rows sum to exactly one code.
    {
        const fixed::FixedFormat f{16, 8};
        const auto lut = vit::make_exp_lut(f);
        std::uniform_int_distribution<std::int64_t> score(-8 * 256, 8 * 256);
        bool ok = true;
        for (int trial = 0; trial < 10000 && ok; ++trial) {
            std::vector<std::int64_t> s(1 + rng() % 16);
            for (auto& v : s) v = score(rng);
            std::int64_t sum = 0;
            for (auto p : vit::softmax_codes(s, lut, f)) sum += p;
            ok = sum == 256;
        }
        if (!ok) failed.push_back("softmax");
    }
    // Event ordering over randomized timing configurations.
    {
        bool ok = true;
        for (int trial = 0; trial < 1000 && ok; ++trial) {
            timing::TimingConfig t;
            t.pixel_clock_hz = 1'000'000 * (1 + rng() % 40);
            t.fpga_clock_hz = 10'000'000 * (5 + rng() % 30);
            t.height = 1 + static_cast<int>(rng() % 16);
            t.width = 1 + static_cast<int>(rng() % 32);
            t.slots_per_line = t.width + static_cast<int>(rng() % 700);
            t.exposure_s = static_cast<double>(rng() % 3000) * 1e-6;
            t.frame_transfer_s = static_cast<double>(rng() % 1000) * 1e-6;
            t.dnn_cycles = rng() % 10000;
            try {
                timing::check_trace(timing::simulate_frame(t, {trial % 10 == 0}), t);
            } catch (const std::exception&) {
                ok = false;
            }
        }
        if (!ok) failed.push_back("event ordering");
    }
    // Dataset round trip.
    {
        const auto ds = build_dataset(ImageConfig::three_qubit(), 500, 0.9, 11);
        const auto bytes = serialize_dataset(ds);
        if (serialize_dataset(deserialize_dataset(bytes)) != bytes) failed.push_back("dataset round trip");
    }
    // MAC permutation invariance.
    {
        const fixed::FixedFormat f{16, 8};
        std::uniform_real_distribution<double> u(-3.0, 3.0);
        bool ok = true;
        for (int trial = 0; trial < 200 && ok; ++trial) {
            std::vector<std::pair<fixed::FixedValue, fixed::FixedValue>> terms;
            for (int i = 0; i < 64; ++i) terms.emplace_back(fixed::quantize(u(rng), f), fixed::quantize(u(rng), f));
            const auto ref = fixed::mac_accumulate(terms).code();
            std::shuffle(terms.begin(), terms.end(), rng);
            ok = fixed::mac_accumulate(terms).code() == ref;
        }
        if (!ok) failed.push_back("mac permutation");
    }
    // Quantizer monotonicity.
    {
        const fixed::FixedFormat f{16, 8};
        std::uniform_real_distribution<double> u(-200.0, 200.0);
        bool ok = true;
        for (int i = 0; i < 100000 && ok; ++i) {
            double x = u(rng), y = u(rng);
            if (x > y) std::swap(x, y);
            ok = fixed::quantize_code(x, f) <= fixed::quantize_code(y, f);
        }
        if (!ok) failed.push_back("quantizer monotonicity");
    }
    std::string detail = failed.empty() ? "softmax, event ordering, dataset round trip, mac permutation, quantizer "
                                          "monotonicity all hold"
                                        : "failed:";
    for (const auto& f : failed) detail += " " + f;
    return {failed.empty(), detail};
}

Outcome criterion10(const fs::path& work) {
    auto doc = config::preset_document("paper-3qubit");
    config::apply_override(doc, "dataset.count=800");
    const auto cfg = config::parse_config(doc);
    std::vector<pipeline::PipelineResult> runs;
    double slowest = 0;
    for (const char* sub : {"run-a", "run-b"}) {
        const auto dir = work / sub;
        fs::remove_all(dir);
        progress("pipeline smoke run in " + dir.string());
        const auto t0 = Clock::now();
        runs.push_back(pipeline::run_pipeline(cfg, {dir, true, nullptr}));
        slowest = std::max(slowest, seconds_since(t0));
    }
    std::size_t files = 0, differing = 0;
    for (std::size_t i = 0; i < runs[0].stages.size(); ++i)
        for (std::size_t j = 0; j < runs[0].stages[i].artifacts.size(); ++j) {
            ++files;
            const auto& a = runs[0].stages[i].artifacts[j];
            const auto& b = runs[1].stages[i].artifacts[j];
            if (a.filename() != b.filename() || io::read_file(a) != io::read_file(b)) ++differing;
        }
    return {differing == 0 && files > 0, std::to_string(files - differing) + "/" + std::to_string(files) +
                                             " artifacts byte-identical across two runs (800 images, slowest run " +
                                             fmt(slowest, 1) + " s)"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    fs::path work = "acceptance-work";
    std::vector<int> only;
    app.add_option("--out", work, "work directory for pipeline runs");
    app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    std::set<int> selected(only.begin(), only.end());
    if (selected.empty())
        for (int i = 1; i <= 10; ++i) selected.insert(i);

    Context ctx;
    std::map<int, std::function<Outcome()>> criteria{
        {1, [&] { return criterion1(ctx); }}, {2, [&] { return criterion2(ctx); }},
        {3, [&] { return criterion3(ctx); }}, {4, [&] { return criterion4(ctx); }},
        {5, [] { return criterion5(); }},     {6, [] { return criterion6(); }},
        {7, [&] { return criterion7(ctx); }}, {8, [] { return criterion8(); }},
        {9, [] { return criterion9(); }},     {10, [&] { return criterion10(work); }},
    };

    fs::create_directories(work);
    int failures = 0;
    for (int id : selected) {
        progress("criterion " + std::to_string(id));
        Outcome o;
        try {
            o = criteria.at(id)();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
