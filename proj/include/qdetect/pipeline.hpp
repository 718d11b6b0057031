#pragma once

// End-to-end workflow: gen, calibrate, train-mlp, compile-lut, verify-lut,
// train-vit, quantize, infer, report, simulate. Each stage writes files named
// <stage>-<key>.<ext>, where key hashes the stage's configuration and the keys
// of its inputs, so an unchanged stage is skipped on re-runs.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qdetect/config.hpp"
#include "qdetect/error.hpp"
#include "qdetect/fidelity.hpp"
#include "qdetect/lut.hpp"
#include "qdetect/threshold.hpp"
#include "qdetect/vit_fixed.hpp"

namespace qdetect::pipeline {

// A stage failure; what() is prefixed with the stage name.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct Options {
    std::filesystem::path out_dir = "qdetect-out";
    bool force = false;          // recompute stages whose outputs exist
    std::ostream* log = nullptr; // receives one line per artifact
};

struct StageRecord {
    std::string stage;
    std::vector<std::filesystem::path> artifacts;
    bool cached = false;
};

struct PipelineResult {
    std::vector<StageRecord> stages;
    std::filesystem::path report_text;
    std::filesystem::path report_csv;
};

PipelineResult run_pipeline(const config::RunConfig& cfg, const Options& opts);

// Model evaluations on a set of labeled images.
eval::ModelResult evaluate_threshold(const threshold::ThresholdModel& model, std::span<const IonImage> images,
                                     const std::string& dataset);
eval::ModelResult evaluate_lut(const lut::LutNetwork& net, std::span<const IonImage> images,
                               const std::string& dataset);
eval::ModelResult evaluate_vit(const vit::VitModel& model, std::span<const IonImage> images,
                               const std::string& dataset);
eval::ModelResult evaluate_fixed_vit(const vit::FixedVitModel& model, std::span<const IonImage> images,
                                     const std::string& dataset);

// DNN profile of the ViT for a chain of n ions: vit1 for one, vit3 otherwise.
std::string vit_profile_for(int n_ions);

// Trigger-to-DNN_valid latency of a profile on the configured camera timing.
double dnn_latency(const timing::TimingConfig& base, const std::string& profile);

// Human-readable summary of a QIMG, QLUT, QMLP or QVIT file. Throws
// ParseError{BadMagic} for anything else.
std::string describe_file(const std::filesystem::path& path);

// Tool and binary format versions.
std::string version_text();

} // namespace qdetect::pipeline
