#pragma once

// Run configuration: one JSON document covering every module, with named
// presets. Every key of the document is listed in config_schema(); keys that
// are not in the schema are rejected.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qdetect/dataset.hpp"
#include "qdetect/fixedpoint.hpp"
#include "qdetect/polymlp.hpp"
#include "qdetect/timingsim.hpp"
#include "qdetect/vit.hpp"

namespace qdetect::config {

struct DatasetSection {
    int ions = 3;
    std::size_t count = 100'000;
    double split_ratio = 0.9;
    int ion_spacing = 5;
    ImageConfig image = ImageConfig::three_qubit();
};

struct ThresholdSection {
    int roi_width = 4;
    int roi_height = 8;
};

struct RunConfig {
    std::string name; // preset name or "custom"
    std::uint64_t seed = 0;
    DatasetSection dataset;
    ThresholdSection threshold;
    polymlp::PolyMlpConfig mlp;
    vit::VitConfig vit;
    fixed::FixedFormat format;
    timing::TimingConfig timing; // DNN profile filled per model at simulation time
    int slots_per_line = 0;      // 0 takes the line profile's slot count

    std::string dataset_label() const { return std::to_string(dataset.ions) + "-qubit"; }
};

struct SchemaEntry {
    std::string key; // dotted path
    std::string type; // integer | number | boolean | string | integer-list
    std::string description;
};

const std::vector<SchemaEntry>& config_schema();
// One line per key: "key (type): description".
std::string schema_help();

std::vector<std::string> preset_names();
// Throws ConfigError for unknown names.
nlohmann::json preset_document(std::string_view name);
RunConfig preset(std::string_view name);

// The document may name a "preset" whose values its own keys override;
// without one, "seed" is mandatory and missing keys take the paper-3qubit
// values. Throws ConfigError naming the first unknown or mistyped key.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig parse_config_text(const std::string& text);

// Applies "dotted.key=value" to a document, checking the key and its type.
void apply_override(nlohmann::json& doc, std::string_view assignment);

// Canonical full document (every schema key present).
nlohmann::json to_json(const RunConfig& cfg);

// FNV-1a of a canonical JSON dump, as 16 hex digits.
std::string content_hash(std::string_view text);

} // namespace qdetect::config
