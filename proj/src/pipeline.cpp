#include "qdetect/pipeline.hpp"

#include <functional>
#include <optional>
#include <ostream>
#include <sstream>

#include "qdetect/binary_io.hpp"
#include "qdetect/parallel.hpp"

namespace qdetect::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kPipelineVersion[] = "qdetect-pipeline-1";

std::string key_of(std::initializer_list<std::string> parts) {
    std::string text = kPipelineVersion;
    for (const auto& p : parts) text += "|" + p;
    return config::content_hash(text);
}

template <typename Predict>
eval::ModelResult evaluate(std::span<const IonImage> images, const std::string& dataset, const std::string& model,
                           Predict predict) {
    if (images.empty()) throw EvaluationError("no images to evaluate " + model + " on");
    std::vector<QubitState> preds(images.size());
    parallel_for(images.size(), [&](std::size_t i) { preds[i] = predict(images[i]); });
    std::vector<QubitState> labels;
    labels.reserve(images.size());
    for (const auto& im : images) labels.push_back(im.label);
    eval::ModelResult r;
    r.dataset = dataset;
    r.model = model;
    r.table = eval::tally(preds, labels, images.front().label.n_ions);
    return r;
}

class Runner {
public:
    Runner(const config::RunConfig& cfg, const Options& opts) : cfg_(cfg), opts_(opts), doc_(config::to_json(cfg)) {}

    PipelineResult run();

private:
    fs::path file(const std::string& stage, const std::string& key, const std::string& ext) const {
        return opts_.out_dir / (stage + "-" + key + ext);
    }

    void stage(const std::string& name, const std::vector<fs::path>& outputs, const std::function<void()>& produce) {
        bool cached = !opts_.force;
        for (const auto& p : outputs) cached = cached && fs::exists(p);
        if (!cached) {
            try {
                produce();
            } catch (const StageError&) {
                throw;
            } catch (const std::exception& e) {
                throw StageError(name, e.what());
            }
        }
        if (opts_.log)
            for (const auto& p : outputs) *opts_.log << name << ": " << p.string() << (cached ? " (cached)" : "") << "\n";
        result_.stages.push_back({name, outputs, cached});
    }

    const Dataset& dataset() {
        if (!dataset_) dataset_ = load_dataset(dataset_path_);
        return *dataset_;
    }
    const polymlp::PolyMlpModel& mlp() {
        if (!mlp_) mlp_ = polymlp::load_model(mlp_path_);
        return *mlp_;
    }
    const lut::LutNetwork& lut() {
        if (!lut_) lut_ = lut::load_lut(lut_path_);
        return *lut_;
    }
    const vit::VitModel& vit_model() {
        if (!vit_) vit_ = vit::load_vit(vit_path_);
        return *vit_;
    }
    const vit::FixedVitModel& fixed_model() {
        if (!fixed_) fixed_ = vit::load_fixed_vit(fixed_path_);
        return *fixed_;
    }

    const config::RunConfig& cfg_;
    const Options& opts_;
    json doc_;
    PipelineResult result_;

    fs::path dataset_path_, mlp_path_, lut_path_, vit_path_, fixed_path_;
    std::optional<Dataset> dataset_;
    std::optional<polymlp::PolyMlpModel> mlp_;
    std::optional<lut::LutNetwork> lut_;
    std::optional<vit::VitModel> vit_;
    std::optional<vit::FixedVitModel> fixed_;
};

PipelineResult Runner::run() {
    fs::create_directories(opts_.out_dir);
    const std::string label = cfg_.dataset_label();
    const std::string seed = doc_["seed"].dump();
    const std::string timing_doc = doc_["timing"].dump();

    const std::string k_gen = key_of({"gen", seed, doc_["dataset"].dump()});
    dataset_path_ = file("dataset", k_gen, ".qimg");
    stage("gen", {dataset_path_}, [&] {
        dataset_ = build_dataset(cfg_.dataset.image, cfg_.dataset.count, cfg_.dataset.split_ratio, cfg_.seed);
        save_dataset(*dataset_, dataset_path_);
    });

    const std::string k_cal = key_of({"calibrate", k_gen, doc_["threshold"].dump()});
    const fs::path threshold_path = file("threshold", k_cal, ".json");
    std::optional<threshold::ThresholdModel> thresholds;
    stage("calibrate", {threshold_path}, [&] {
        thresholds = threshold::calibrate_model(dataset().train, cfg_.dataset.image, cfg_.threshold.roi_width,
                                                cfg_.threshold.roi_height);
        threshold::save_model(*thresholds, threshold_path);
    });

    const std::string k_mlp = key_of({"train-mlp", k_gen, seed, doc_["mlp"].dump()});
    mlp_path_ = file("mlp", k_mlp, ".qmlp");
    stage("train-mlp", {mlp_path_}, [&] {
        mlp_ = polymlp::train(cfg_.mlp, dataset().train);
        polymlp::save_model(*mlp_, mlp_path_);
    });

    const std::string k_lut = key_of({"compile-lut", k_mlp});
    lut_path_ = file("lut", k_lut, ".qlut");
    const fs::path netlist_path = file("netlist", k_lut, ".txt");
    stage("compile-lut", {lut_path_, netlist_path}, [&] {
        lut_ = lut::compile_truth_tables(mlp());
        lut::save_lut(*lut_, lut_path_);
        io::write_text(netlist_path, lut::netlist(*lut_));
    });

    const std::string k_verify = key_of({"verify-lut", k_lut, k_gen});
    const fs::path verify_path = file("verify", k_verify, ".txt");
    stage("verify-lut", {verify_path}, [&] {
        auto report = lut::verify_equivalence(mlp(), lut());
        lut::require_equivalent(report);
        auto agreement = lut::end_to_end_agreement(mlp(), lut(), dataset().test);
        if (agreement.agree != agreement.samples)
            throw EquivalenceError("forward and table argmax disagree on test image " +
                                   std::to_string(*agreement.first_disagreement));
        std::ostringstream out;
        out << report.summary() << "\n"
            << "end-to-end agreement: " << agreement.agree << "/" << agreement.samples << "\n";
        io::write_text(verify_path, out.str());
    });

    const std::string k_vit = key_of({"train-vit", k_gen, seed, doc_["vit"].dump()});
    vit_path_ = file("vit", k_vit, ".qvit");
    stage("train-vit", {vit_path_}, [&] {
        vit_ = vit::train_vit(cfg_.vit, dataset().train);
        vit::save_vit(*vit_, vit_path_);
    });

    const std::string k_fixed = key_of({"quantize", k_vit, doc_["fixed"].dump()});
    fixed_path_ = file("vit-fixed", k_fixed, ".qvit");
    stage("quantize", {fixed_path_}, [&] {
        fixed_ = vit::quantize_vit(vit_model(), cfg_.format);
        vit::save_fixed_vit(*fixed_, fixed_path_);
    });

    const std::string vit_profile = vit_profile_for(cfg_.dataset.ions);
    const fs::path r_threshold = file("result-threshold", key_of({"infer", k_cal}), ".json");
    const fs::path r_mlp = file("result-mlp", key_of({"infer", k_lut, timing_doc}), ".json");
    const fs::path r_vit = file("result-vit-float", key_of({"infer", k_vit, timing_doc}), ".json");
    const fs::path r_fixed = file("result-vit", key_of({"infer", k_fixed, timing_doc}), ".json");
    stage("infer", {r_threshold, r_mlp, r_vit, r_fixed}, [&] {
        const auto& test = dataset().test;
        if (!thresholds) thresholds = threshold::load_model(threshold_path);
        eval::save_result(evaluate_threshold(*thresholds, test, label), r_threshold);

        auto mlp_result = evaluate_lut(lut(), test, label);
        mlp_result.latency_seconds = dnn_latency(cfg_.timing, "mlp");
        eval::save_result(mlp_result, r_mlp);

        auto vit_result = evaluate_vit(vit_model(), test, label);
        vit_result.latency_seconds = dnn_latency(cfg_.timing, vit_profile);
        eval::save_result(vit_result, r_vit);

        auto fixed_result = evaluate_fixed_vit(fixed_model(), test, label);
        fixed_result.latency_seconds = dnn_latency(cfg_.timing, vit_profile);
        eval::save_result(fixed_result, r_fixed);
    });

    const std::string k_report = key_of({"report", r_threshold.filename().string(), r_mlp.filename().string(),
                                         r_fixed.filename().string()});
    result_.report_text = file("report", k_report, ".txt");
    result_.report_csv = file("report", k_report, ".csv");
    stage("report", {result_.report_text, result_.report_csv}, [&] {
        std::vector<eval::ModelResult> rows{eval::load_result(r_threshold), eval::load_result(r_mlp),
                                            eval::load_result(r_fixed)};
        auto report = eval::compare_report(rows);
        io::write_text(result_.report_text, report.text);
        io::write_text(result_.report_csv, report.csv);
    });

    const std::string k_sim = key_of({"simulate", timing_doc, std::to_string(cfg_.timing.height),
                                      std::to_string(cfg_.timing.width)});
    std::vector<fs::path> sim_outputs;
    for (const std::string profile : {std::string("mlp"), vit_profile}) {
        sim_outputs.push_back(file("trace-" + profile, k_sim, ".tsv"));
        sim_outputs.push_back(file("latency-" + profile, k_sim, ".txt"));
    }
    stage("simulate", sim_outputs, [&] {
        std::size_t i = 0;
        for (const std::string profile : {std::string("mlp"), vit_profile}) {
            auto t = cfg_.timing;
            t.dnn_profile = profile;
            t.dnn_cycles = timing::dnn_profile(profile).cycles;
            auto trace = timing::simulate_frame(t);
            timing::check_trace(trace, t);
            io::write_text(sim_outputs[i++], timing::export_trace(trace));
            io::write_text(sim_outputs[i++], timing::latency_report(trace, t).text());
        }
    });

    return std::move(result_);
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::string describe_vit_config(const vit::VitConfig& c) {
    std::ostringstream out;
    out << "  image " << c.height << "x" << c.width << ", patch " << c.patch << ", tokens " << c.tokens() << "\n"
        << "  latent " << c.latent_dim << ", heads " << c.n_heads << " (" << (c.literal_heads ? "summed" : "split")
        << ", head dim " << c.head_dim() << "), layers " << c.n_layers << ", classes " << c.n_classes << "\n";
    return out.str();
}

} // namespace

PipelineResult run_pipeline(const config::RunConfig& cfg, const Options& opts) { return Runner(cfg, opts).run(); }

eval::ModelResult evaluate_threshold(const threshold::ThresholdModel& model, std::span<const IonImage> images,
                                     const std::string& dataset) {
    return evaluate(images, dataset, "Threshold",
                    [&](const IonImage& im) { return threshold::classify(im, model); });
}

eval::ModelResult evaluate_lut(const lut::LutNetwork& net, std::span<const IonImage> images,
                               const std::string& dataset) {
    return evaluate(images, dataset, "MLP", [&](const IonImage& im) { return lut::eval_lut(net, im); });
}

eval::ModelResult evaluate_vit(const vit::VitModel& model, std::span<const IonImage> images,
                               const std::string& dataset) {
    return evaluate(images, dataset, "ViT (float)", [&](const IonImage& im) { return vit::predict(model, im); });
}

eval::ModelResult evaluate_fixed_vit(const vit::FixedVitModel& model, std::span<const IonImage> images,
                                     const std::string& dataset) {
    return evaluate(images, dataset, "ViT", [&](const IonImage& im) { return vit::predict_fixed(model, im); });
}

std::string vit_profile_for(int n_ions) { return n_ions == 1 ? "vit1" : "vit3"; }

double dnn_latency(const timing::TimingConfig& base, const std::string& profile) {
    auto t = base;
    t.dnn_profile = profile;
    t.dnn_cycles = timing::dnn_profile(profile).cycles;
    auto trace = timing::simulate_frame(t);
    return trace.seconds(trace.first(timing::Signal::DnnValidRise).tick - trace.first(timing::Signal::Trigger).tick);
}

std::string describe_file(const fs::path& path) {
    auto bytes = io::read_file(path);
    const std::string ctx = path.string();
    std::string magic(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(4, bytes.size())));
    std::ostringstream out;
    if (magic == "QIMG") {
        auto h = read_dataset_header(bytes, ctx);
        out << "QIMG dataset, format version " << h.version << "\n"
            << "  images " << h.n_images << " (train " << h.split << ", test " << h.n_images - h.split << ")\n"
            << "  image " << h.height << "x" << h.width << ", ions " << int(h.n_ions) << ", pixel depth "
            << int(h.pixel_depth) << "\n"
            << "  seed " << h.seed << "\n";
    } else if (magic == "QLUT") {
        auto net = lut::deserialize_lut(bytes, ctx);
        out << "QLUT lookup-table network, format version " << lut::kLutVersion << "\n"
            << "  inputs " << net.input_width << " x " << net.input_bits << " bits over [" << net.input_lo << ", "
            << net.input_hi << "]\n"
            << "  ions " << net.n_ions << ", classes " << net.n_classes << "\n";
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            const auto& layer = net.layers[l];
            out << "  layer " << l << ": " << layer.width() << " neurons, fan-in " << layer.fan_in << ", sub bits "
                << layer.sub_bits << (layer.output ? ", output" : "") << ", " << net.entries_per_neuron(l)
                << " entries per neuron\n";
        }
        out << "  total entries " << net.total_entries() << ", lookups per inference " << net.lookups_per_inference()
            << "\n";
    } else if (magic == "QMLP") {
        auto m = polymlp::deserialize_model(bytes, ctx);
        const auto& c = m.config;
        out << "QMLP polynomial MLP, format version " << polymlp::kModelVersion << "\n"
            << "  inputs " << m.input_width << " over [" << m.input_lo << ", " << m.input_hi << "], ions " << m.n_ions
            << "\n"
            << "  hidden " << join_ints(c.hidden_widths) << ", outputs " << c.resolved_output_width(m.n_classes) << "\n"
            << "  beta " << c.activation_bits << ", fan-in " << c.fan_in << ", degree " << c.poly_degree
            << ", sub-neurons " << c.subneurons << "\n"
            << "  coefficients " << m.coeffs.size() << "\n";
    } else if (magic == "QVIT") {
        if (vit::vit_file_kind(bytes, ctx) == 0) {
            auto m = vit::deserialize_vit(bytes, ctx);
            out << "QVIT float model, format version " << vit::kVitVersion << "\n"
                << describe_vit_config(m.config) << "  input scale " << m.input_scale << "\n";
        } else {
            auto m = vit::deserialize_fixed_vit(bytes, ctx);
            out << "QVIT fixed-point model, format version " << vit::kVitVersion << ", format " << m.format.str()
                << "\n"
                << describe_vit_config(m.config) << "  saturated parameters " << m.saturated_params << "\n";
        }
    } else {
        throw ParseError(ParseErrorKind::BadMagic, ctx + ": unknown file magic \"" + magic + "\"");
    }
    return out.str();
}

std::string version_text() {
    std::ostringstream out;
    out << "qdetect 1.0.0\n"
        << "QIMG dataset format " << kDatasetVersion << "\n"
        << "QMLP model format " << polymlp::kModelVersion << "\n"
        << "QLUT table format " << lut::kLutVersion << "\n"
        << "QVIT model format " << vit::kVitVersion << "\n";
    return out.str();
}

} // namespace qdetect::pipeline
