#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdetect/dataset.hpp"

namespace qdetect::eval {

// counts[prepared][measured] over all 2^n states.
struct ConfusionTable {
    int n_ions = 1;
    std::vector<std::uint64_t> counts;

    explicit ConfusionTable(int n = 1);
    int n_states() const { return 1 << n_ions; }
    std::uint64_t& at(std::uint32_t prepared, std::uint32_t measured) {
        return counts[static_cast<std::size_t>(prepared) * n_states() + measured];
    }
    std::uint64_t at(std::uint32_t prepared, std::uint32_t measured) const {
        return counts[static_cast<std::size_t>(prepared) * n_states() + measured];
    }
    std::uint64_t row_total(std::uint32_t prepared) const;

    friend bool operator==(const ConfusionTable&, const ConfusionTable&) = default;
};

struct FidelityResult {
    double mmf = 0.0;
    double error = 1.0; // 1 - mmf
    std::vector<double> diagonal; // p(measured i | prepared i)
};

// Throws EvaluationError on length mismatch or states outside 2^n.
ConfusionTable tally(std::span<const QubitState> predictions, std::span<const QubitState> labels, int n_ions);

// Mean over prepared states of p(measured i | prepared i). Throws
// EvaluationError naming the first prepared state with no samples.
FidelityResult mmf(const ConfusionTable& table);

// One evaluated model on one dataset, the unit persisted by classify/infer
// and consumed by the report command.
struct ModelResult {
    std::string dataset;
    std::string model;
    ConfusionTable table{1};
    std::optional<double> latency_seconds;
};

std::string to_text(const ModelResult& r);
ModelResult result_from_text(const std::string& text);
void save_result(const ModelResult& r, const std::filesystem::path& path);
ModelResult load_result(const std::filesystem::path& path);

struct ReportRow {
    std::string dataset;
    std::string model;
    double mmf_error = 0.0;
    std::optional<double> reduction_factor; // threshold error / model error, 1 decimal
    std::optional<double> latency_seconds;
};

struct Report {
    std::vector<ReportRow> rows;
    std::string text;
    std::string csv;
};

// Rows keep input order. Within each dataset that has a row whose model name
// is "Threshold" (case-insensitive), every other row gets a reduction factor.
Report compare_report(std::span<const ModelResult> results);

double round_to(double x, int decimals);

} // namespace qdetect::eval
