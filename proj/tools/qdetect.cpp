// qdetect: command-line entry point for every stage of the workflow.

#include <cstdio>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qdetect/binary_io.hpp"
#include "qdetect/config.hpp"
#include "qdetect/pipeline.hpp"

using namespace qdetect;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string schema_description(const std::string& key) {
    for (const auto& e : config::config_schema())
        if (e.key == key) return e.description + " [" + key + "]";
    throw std::logic_error("flag bound to undocumented key " + key);
}

// Flags bound to config keys. Only flags given on the command line are
// applied, as "key=value" overrides of the base document.
class KeyedFlags {
public:
    CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& key) {
        auto& e = *items_.emplace_back(std::make_unique<Item>(Item{key, {}, nullptr}));
        e.opt = app->add_option(flag, e.value, schema_description(key));
        return e.opt;
    }
    const std::string& value(const std::string& key) const {
        for (const auto& e : items_)
            if (e->key == key) return e->value;
        throw std::logic_error("no flag for " + key);
    }
    void apply(json& doc) const {
        for (const auto& e : items_)
            if (*e->opt) config::apply_override(doc, e->key + "=" + e->value);
    }

private:
    struct Item {
        std::string key;
        std::string value;
        CLI::Option* opt;
    };
    std::vector<std::unique_ptr<Item>> items_;
};

json read_config_doc(const std::string& path) {
    try {
        return json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": not valid JSON: " + e.what());
    }
}

json base_document(const std::string& config_path, int ions) {
    if (!config_path.empty()) return read_config_doc(config_path);
    return config::preset_document(ions == 1 ? "paper-1qubit" : "paper-3qubit");
}

// The dataset file fixes geometry and ion count; the document supplies the rest.
config::RunConfig config_for_dataset(json doc, const Dataset& ds, const std::vector<std::string>& sets) {
    for (const auto& s : sets) config::apply_override(doc, s);
    doc["dataset"]["ions"] = ds.config.n_ions();
    doc["dataset"]["height"] = ds.config.height;
    doc["dataset"]["width"] = ds.config.width;
    return config::parse_config(doc);
}

std::span<const IonImage> pick_split(const Dataset& ds, const std::string& split, std::vector<IonImage>& storage) {
    if (split == "test") return ds.test;
    if (split == "train") return ds.train;
    storage = ds.train;
    storage.insert(storage.end(), ds.test.begin(), ds.test.end());
    return storage;
}

void wrote(const fs::path& p) { std::cout << "wrote " << p.string() << "\n"; }

void print_result(const eval::ModelResult& r) {
    auto f = eval::mmf(r.table);
    std::printf("%s on %s: MMF %.4f, error %.2f%%\n", r.model.c_str(), r.dataset.c_str(), f.mmf, 100.0 * f.error);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Qubit state detection: datasets, classifiers, lookup-table compilation and latency simulation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", [] { return pipeline::version_text(); });

    // gen
    auto* gen = app.add_subcommand("gen", "Generate a synthetic labeled image dataset (QIMG)");
    KeyedFlags gen_flags;
    std::string gen_out, gen_config;
    gen_flags.add(gen, "--ions", "dataset.ions")->check(CLI::IsMember({"1", "3"}))->required();
    gen_flags.add(gen, "--count", "dataset.count")->required();
    gen_flags.add(gen, "--seed", "seed")->required();
    gen_flags.add(gen, "--split", "dataset.split_ratio");
    gen_flags.add(gen, "--sigma", "dataset.psf_sigma");
    gen_flags.add(gen, "--amp", "dataset.psf_amplitude");
    gen_flags.add(gen, "--lambda", "dataset.poisson_lambda");
    gen_flags.add(gen, "--bg-mean", "dataset.bg_mean");
    gen_flags.add(gen, "--bg-sigma", "dataset.bg_sigma");
    gen->add_option("--config", gen_config, "run configuration document (JSON)");
    gen->add_option("--out", gen_out, "output dataset file")->required();

    // calibrate / classify
    auto* cal = app.add_subcommand("calibrate", "Calibrate per-ion ROI thresholds on the training split");
    KeyedFlags cal_flags;
    std::string cal_data, cal_out;
    cal->add_option("--data", cal_data, "dataset file")->required()->check(CLI::ExistingFile);
    cal->add_option("--out", cal_out, "output threshold model")->required();
    cal_flags.add(cal, "--roi-width", "threshold.roi_width");
    cal_flags.add(cal, "--roi-height", "threshold.roi_height");

    auto* cls = app.add_subcommand("classify", "Classify a dataset split with a threshold model");
    std::string cls_model, cls_data, cls_report, cls_split = "test";
    cls->add_option("--model", cls_model, "threshold model")->required()->check(CLI::ExistingFile);
    cls->add_option("--data", cls_data, "dataset file")->required()->check(CLI::ExistingFile);
    cls->add_option("--report", cls_report, "output result document")->required();
    cls->add_option("--split", cls_split, "images to classify")->check(CLI::IsMember({"test", "train", "all"}));

    // MLP and tables
    auto* tmlp = app.add_subcommand("train-mlp", "Train the polynomial MLP (QMLP)");
    std::string tmlp_data, tmlp_config, tmlp_out;
    std::vector<std::string> tmlp_sets;
    tmlp->add_option("--data", tmlp_data, "dataset file")->required()->check(CLI::ExistingFile);
    tmlp->add_option("--config", tmlp_config, "run configuration document (JSON)");
    tmlp->add_option("--set", tmlp_sets, "override a config key: KEY=VALUE");
    tmlp->add_option("--out", tmlp_out, "output model file")->required();

    auto* clut = app.add_subcommand("compile-lut", "Compile a trained MLP into truth tables (QLUT)");
    std::string clut_model, clut_out, clut_netlist;
    clut->add_option("--model", clut_model, "QMLP model")->required()->check(CLI::ExistingFile);
    clut->add_option("--out", clut_out, "output table file")->required();
    clut->add_option("--netlist", clut_netlist, "also write the netlist text dump");

    auto* vlut = app.add_subcommand("verify-lut", "Check every table entry against the model arithmetic");
    std::string vlut_model, vlut_lut, vlut_data;
    vlut->add_option("--model", vlut_model, "QMLP model")->required()->check(CLI::ExistingFile);
    vlut->add_option("--lut", vlut_lut, "QLUT table file")->required()->check(CLI::ExistingFile);
    vlut->add_option("--data", vlut_data, "dataset whose test split is used for end-to-end agreement")
        ->check(CLI::ExistingFile);

    // ViT
    auto* tvit = app.add_subcommand("train-vit", "Train the vision transformer (QVIT)");
    std::string tvit_data, tvit_config, tvit_out;
    std::vector<std::string> tvit_sets;
    tvit->add_option("--data", tvit_data, "dataset file")->required()->check(CLI::ExistingFile);
    tvit->add_option("--config", tvit_config, "run configuration document (JSON)");
    tvit->add_option("--set", tvit_sets, "override a config key: KEY=VALUE");
    tvit->add_option("--out", tvit_out, "output model file")->required();

    auto* quant = app.add_subcommand("quantize", "Convert a float ViT to fixed point");
    KeyedFlags quant_flags;
    std::string quant_model, quant_out;
    quant->add_option("--model", quant_model, "float QVIT model")->required()->check(CLI::ExistingFile);
    quant_flags.add(quant, "--format", "fixed.format")->required();
    quant->add_option("--out", quant_out, "output fixed-point model")->required();

    auto* infer = app.add_subcommand("infer", "Evaluate a QVIT, QLUT or QMLP model on a dataset split");
    std::string infer_model, infer_data, infer_report, infer_split = "test";
    infer->add_option("--model", infer_model, "model file")->required()->check(CLI::ExistingFile);
    infer->add_option("--data", infer_data, "dataset file")->required()->check(CLI::ExistingFile);
    infer->add_option("--report", infer_report, "output result document")->required();
    infer->add_option("--split", infer_split, "images to evaluate")->check(CLI::IsMember({"test", "train", "all"}));

    auto* rep = app.add_subcommand("report", "Render the fidelity comparison table");
    std::vector<std::string> rep_in;
    std::string rep_out;
    rep->add_option("--in", rep_in, "result documents")->required()->check(CLI::ExistingFile);
    rep->add_option("--out", rep_out, "output prefix (.txt and .csv are appended)")->required();

    // timing
    auto* sim = app.add_subcommand("simulate", "Simulate one frame of camera-to-decision timing");
    KeyedFlags sim_flags;
    std::string sim_profile = "mlp", sim_image = "10x10", sim_trace, sim_report, sim_csv;
    sim->add_option("--profile", sim_profile, "DNN latency profile")->check(CLI::IsMember({"mlp", "vit1", "vit3"}));
    sim->add_option("--image", sim_image, "image geometry HxW [dataset.height, dataset.width]");
    sim_flags.add(sim, "--slots", "timing.slots_per_line");
    sim_flags.add(sim, "--line-profile", "timing.line_profile");
    sim_flags.add(sim, "--pixel-clock", "timing.pixel_clock_hz");
    sim_flags.add(sim, "--fpga-clock", "timing.fpga_clock_hz");
    sim_flags.add(sim, "--exposure", "timing.exposure_s");
    sim_flags.add(sim, "--frame-transfer", "timing.frame_transfer_s");
    sim_flags.add(sim, "--fifo-stall", "timing.fifo_stall_cycles");
    sim->add_option("--trace", sim_trace, "output trace file")->required();
    sim->add_option("--report", sim_report, "output latency report")->required();
    sim->add_option("--csv", sim_csv, "also write the report as CSV");

    // end to end
    auto* run = app.add_subcommand("run", "Run every stage from dataset generation to the timing simulation");
    KeyedFlags run_flags;
    std::string run_preset, run_config, run_out = "qdetect-out";
    std::vector<std::string> run_sets;
    bool run_force = false;
    run->add_option("--preset", run_preset, "named preset")->check(CLI::IsMember(config::preset_names()));
    run->add_option("--config", run_config, "run configuration document (JSON)")->check(CLI::ExistingFile);
    run->add_option("--set", run_sets, "override a config key: KEY=VALUE");
    run_flags.add(run, "--count", "dataset.count");
    run->add_flag("--force", run_force, "recompute stages whose outputs already exist");
    run->add_option("--out", run_out, "output directory");
    run->footer("Config keys:\n" + config::schema_help());

    auto* cfg_cmd = app.add_subcommand("config", "Print the resolved run configuration");
    std::string cfg_preset = "paper-3qubit", cfg_file;
    std::vector<std::string> cfg_sets;
    cfg_cmd->add_option("--preset", cfg_preset, "named preset")->check(CLI::IsMember(config::preset_names()));
    cfg_cmd->add_option("--config", cfg_file, "run configuration document (JSON)")->check(CLI::ExistingFile);
    cfg_cmd->add_option("--set", cfg_sets, "override a config key: KEY=VALUE");
    cfg_cmd->footer("Config keys:\n" + config::schema_help());

    auto* info = app.add_subcommand("info", "Describe a QIMG, QLUT, QMLP or QVIT file");
    std::string info_file;
    info->add_option("file", info_file, "binary file")->required()->check(CLI::ExistingFile);

    auto* version = app.add_subcommand("version", "Print tool and file format versions");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            json doc = base_document(gen_config, std::stoi(gen_flags.value("dataset.ions")));
            gen_flags.apply(doc);
            auto cfg = config::parse_config(doc);
            auto ds = build_dataset(cfg.dataset.image, cfg.dataset.count, cfg.dataset.split_ratio, cfg.seed);
            save_dataset(ds, gen_out);
            wrote(gen_out);
        } else if (*cal) {
            auto ds = load_dataset(cal_data);
            json doc = base_document("", ds.config.n_ions());
            cal_flags.apply(doc);
            auto cfg = config_for_dataset(doc, ds, {});
            auto model = threshold::calibrate_model(ds.train, ds.config, cfg.threshold.roi_width,
                                                    cfg.threshold.roi_height);
            threshold::save_model(model, cal_out);
            for (std::size_t i = 0; i < model.ions.size(); ++i)
                std::printf("ion %zu: threshold %llu, calibration fidelity %.4f\n", i,
                            static_cast<unsigned long long>(model.ions[i].threshold),
                            model.ions[i].calibration_fidelity);
            wrote(cal_out);
        } else if (*cls) {
            auto ds = load_dataset(cls_data);
            auto model = threshold::load_model(cls_model);
            std::vector<IonImage> storage;
            auto r = pipeline::evaluate_threshold(model, pick_split(ds, cls_split, storage),
                                                  std::to_string(ds.config.n_ions()) + "-qubit");
            eval::save_result(r, cls_report);
            print_result(r);
            wrote(cls_report);
        } else if (*tmlp) {
            auto ds = load_dataset(tmlp_data);
            auto cfg = config_for_dataset(base_document(tmlp_config, ds.config.n_ions()), ds, tmlp_sets);
            polymlp::TrainLog log;
            auto model = polymlp::train(cfg.mlp, ds.train, &log);
            for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
                std::printf("epoch %zu: loss %.4f, train accuracy %.4f\n", e + 1, log.epoch_loss[e],
                            log.epoch_train_accuracy[e]);
            polymlp::save_model(model, tmlp_out);
            wrote(tmlp_out);
        } else if (*clut) {
            auto net = lut::compile_truth_tables(polymlp::load_model(clut_model));
            lut::save_lut(net, clut_out);
            wrote(clut_out);
            if (!clut_netlist.empty()) {
                io::write_text(clut_netlist, lut::netlist(net));
                wrote(clut_netlist);
            }
        } else if (*vlut) {
            auto model = polymlp::load_model(vlut_model);
            auto net = lut::load_lut(vlut_lut);
            auto report = lut::verify_equivalence(model, net);
            std::cout << report.summary() << "\n";
            lut::require_equivalent(report);
            if (!vlut_data.empty()) {
                auto ds = load_dataset(vlut_data);
                auto agreement = lut::end_to_end_agreement(model, net, ds.test);
                std::cout << "end-to-end agreement: " << agreement.agree << "/" << agreement.samples << "\n";
                if (agreement.agree != agreement.samples)
                    throw EquivalenceError("forward and table argmax disagree on test image " +
                                           std::to_string(*agreement.first_disagreement));
            }
        } else if (*tvit) {
            auto ds = load_dataset(tvit_data);
            auto cfg = config_for_dataset(base_document(tvit_config, ds.config.n_ions()), ds, tvit_sets);
            vit::TrainLog log;
            auto model = vit::train_vit(cfg.vit, ds.train, &log);
            for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
                std::printf("epoch %zu: loss %.4f, train accuracy %.4f\n", e + 1, log.epoch_loss[e],
                            log.epoch_train_accuracy[e]);
            vit::save_vit(model, tvit_out);
            wrote(tvit_out);
        } else if (*quant) {
            json doc = config::preset_document("paper-3qubit");
            quant_flags.apply(doc);
            auto fmt = fixed::FixedFormat::parse(doc["fixed"]["format"].get<std::string>());
            auto fixed_model = vit::quantize_vit(vit::load_vit(quant_model), fmt);
            vit::save_fixed_vit(fixed_model, quant_out);
            std::printf("format %s, saturated parameters %llu\n", fmt.str().c_str(),
                        static_cast<unsigned long long>(fixed_model.saturated_params));
            wrote(quant_out);
        } else if (*infer) {
            auto ds = load_dataset(infer_data);
            std::vector<IonImage> storage;
            auto images = pick_split(ds, infer_split, storage);
            const std::string label = std::to_string(ds.config.n_ions()) + "-qubit";
            const std::string magic = io::peek_magic(infer_model);
            eval::ModelResult r;
            if (magic == "QVIT") {
                auto bytes = io::read_file(infer_model);
                if (vit::vit_file_kind(bytes, infer_model) == 0)
                    r = pipeline::evaluate_vit(vit::deserialize_vit(bytes, infer_model), images, label);
                else
                    r = pipeline::evaluate_fixed_vit(vit::deserialize_fixed_vit(bytes, infer_model), images, label);
            } else if (magic == "QLUT") {
                r = pipeline::evaluate_lut(lut::load_lut(infer_model), images, label);
            } else if (magic == "QMLP") {
                auto model = polymlp::load_model(infer_model);
                r = pipeline::evaluate_lut(lut::compile_truth_tables(model), images, label);
            } else {
                throw ParseError(ParseErrorKind::BadMagic, infer_model + ": not a model file");
            }
            eval::save_result(r, infer_report);
            print_result(r);
            wrote(infer_report);
        } else if (*rep) {
            std::vector<eval::ModelResult> results;
            for (const auto& p : rep_in) results.push_back(eval::load_result(p));
            auto report = eval::compare_report(results);
            io::write_text(rep_out + ".txt", report.text);
            io::write_text(rep_out + ".csv", report.csv);
            std::cout << report.text;
            wrote(rep_out + ".txt");
            wrote(rep_out + ".csv");
        } else if (*sim) {
            int h = 0, w = 0;
            char sep = 0;
            std::istringstream geom(sim_image);
            if (!(geom >> h >> sep >> w) || sep != 'x' || !geom.eof())
                throw UsageError("--image expects HxW, got '" + sim_image + "'");
            json doc = config::preset_document("paper-1qubit");
            sim_flags.apply(doc);
            auto cfg = config::parse_config(doc);
            auto t = cfg.timing;
            t.height = h;
            t.width = w;
            t.dnn_profile = sim_profile;
            t.dnn_cycles = timing::dnn_profile(sim_profile).cycles;
            t.validate();
            auto trace = timing::simulate_frame(t);
            timing::check_trace(trace, t);
            auto report = timing::latency_report(trace, t);
            io::write_text(sim_trace, timing::export_trace(trace));
            io::write_text(sim_report, report.text());
            std::cout << report.text();
            wrote(sim_trace);
            wrote(sim_report);
            if (!sim_csv.empty()) {
                io::write_text(sim_csv, report.csv());
                wrote(sim_csv);
            }
        } else if (*run) {
            if (run_preset.empty() == run_config.empty()) throw UsageError("run needs exactly one of --preset, --config");
            json doc = run_config.empty() ? json{{"preset", run_preset}} : read_config_doc(run_config);
            for (const auto& s : run_sets) config::apply_override(doc, s);
            run_flags.apply(doc);
            auto cfg = config::parse_config(doc);
            pipeline::Options opts;
            opts.out_dir = run_out;
            opts.force = run_force;
            opts.log = &std::cout;
            auto result = pipeline::run_pipeline(cfg, opts);
            std::cout << io::read_text(result.report_text);
        } else if (*cfg_cmd) {
            json doc = cfg_file.empty() ? json{{"preset", cfg_preset}} : read_config_doc(cfg_file);
            for (const auto& s : cfg_sets) config::apply_override(doc, s);
            std::cout << config::to_json(config::parse_config(doc)).dump(2) << "\n";
        } else if (*info) {
            std::cout << pipeline::describe_file(info_file);
        } else if (*version) {
            std::cout << pipeline::version_text();
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
