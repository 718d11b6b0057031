#include "qdetect/fidelity.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "qdetect/binary_io.hpp"
#include "qdetect/error.hpp"

namespace qdetect::eval {

namespace {

using nlohmann::json;

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

} // namespace

ConfusionTable::ConfusionTable(int n) : n_ions(n) {
    if (n < 1 || n > 8) throw EvaluationError("ion count must be in [1, 8]");
    counts.assign(static_cast<std::size_t>(n_states()) * n_states(), 0);
}

std::uint64_t ConfusionTable::row_total(std::uint32_t prepared) const {
    std::uint64_t t = 0;
    for (int m = 0; m < n_states(); ++m) t += at(prepared, static_cast<std::uint32_t>(m));
    return t;
}

ConfusionTable tally(std::span<const QubitState> predictions, std::span<const QubitState> labels, int n_ions) {
    if (predictions.size() != labels.size()) {
        throw EvaluationError("tally: " + std::to_string(predictions.size()) + " predictions vs " +
                              std::to_string(labels.size()) + " labels");
    }
    ConfusionTable t(n_ions);
    const auto states = static_cast<std::uint32_t>(t.n_states());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i].bits >= states || predictions[i].bits >= states) {
            throw EvaluationError("tally: sample " + std::to_string(i) + " has a state outside 2^" +
                                  std::to_string(n_ions));
        }
        t.at(labels[i].bits, predictions[i].bits)++;
    }
    return t;
}

FidelityResult mmf(const ConfusionTable& table) {
    FidelityResult r;
    double sum = 0.0;
    for (int s = 0; s < table.n_states(); ++s) {
        const auto prepared = static_cast<std::uint32_t>(s);
        const auto total = table.row_total(prepared);
        if (total == 0) {
            throw EvaluationError("no samples prepared in state " + QubitState(table.n_ions, prepared).str());
        }
        const double p = static_cast<double>(table.at(prepared, prepared)) / static_cast<double>(total);
        r.diagonal.push_back(p);
        sum += p;
    }
    r.mmf = sum / table.n_states();
    r.error = 1.0 - r.mmf;
    return r;
}

std::string to_text(const ModelResult& r) {
    json doc;
    doc["kind"] = "model-result";
    doc["version"] = 1;
    doc["dataset"] = r.dataset;
    doc["model"] = r.model;
    doc["n_ions"] = r.table.n_ions;
    json rows = json::array();
    for (int p = 0; p < r.table.n_states(); ++p) {
        json row = json::array();
        for (int m = 0; m < r.table.n_states(); ++m)
            row.push_back(r.table.at(static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(m)));
        rows.push_back(row);
    }
    doc["confusion"] = rows;
    const auto f = mmf(r.table);
    doc["mmf"] = f.mmf;
    doc["mmf_error"] = f.error;
    if (r.latency_seconds) doc["latency_seconds"] = *r.latency_seconds;
    return doc.dump(2) + "\n";
}

ModelResult result_from_text(const std::string& text) {
    try {
        const auto doc = json::parse(text);
        if (doc.at("kind") != "model-result") throw ParseError(ParseErrorKind::BadMagic, "not a model result document");
        if (doc.at("version") != 1) throw ParseError(ParseErrorKind::VersionMismatch, "model result version");
        ModelResult r;
        r.dataset = doc.at("dataset").get<std::string>();
        r.model = doc.at("model").get<std::string>();
        r.table = ConfusionTable(doc.at("n_ions").get<int>());
        const auto& rows = doc.at("confusion");
        if (static_cast<int>(rows.size()) != r.table.n_states()) {
            throw ParseError(ParseErrorKind::Malformed, "confusion table has the wrong number of rows");
        }
        for (int p = 0; p < r.table.n_states(); ++p) {
            if (static_cast<int>(rows[p].size()) != r.table.n_states())
                throw ParseError(ParseErrorKind::Malformed, "confusion row has the wrong width");
            for (int m = 0; m < r.table.n_states(); ++m)
                r.table.at(static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(m)) = rows[p][m].get<std::uint64_t>();
        }
        if (doc.contains("latency_seconds")) r.latency_seconds = doc["latency_seconds"].get<double>();
        return r;
    } catch (const json::exception& e) {
        throw ParseError(ParseErrorKind::Malformed, std::string("model result: ") + e.what());
    }
}

void save_result(const ModelResult& r, const std::filesystem::path& path) { io::write_text(path, to_text(r)); }

ModelResult load_result(const std::filesystem::path& path) { return result_from_text(io::read_text(path)); }

double round_to(double x, int decimals) {
    const double s = std::pow(10.0, decimals);
    return std::round(x * s) / s;
}

Report compare_report(std::span<const ModelResult> results) {
    if (results.empty()) throw EvaluationError("report needs at least one result");
    Report rep;
    std::map<std::string, double> threshold_error;
    for (const auto& r : results) {
        ReportRow row{r.dataset, r.model, mmf(r.table).error, std::nullopt, r.latency_seconds};
        if (lower(r.model) == "threshold") threshold_error.emplace(r.dataset, row.mmf_error);
        rep.rows.push_back(row);
    }
    for (auto& row : rep.rows) {
        auto it = threshold_error.find(row.dataset);
        if (it == threshold_error.end() || lower(row.model) == "threshold") continue;
        if (row.mmf_error > 0.0) row.reduction_factor = round_to(it->second / row.mmf_error, 1);
    }

    std::size_t wd = 7, wm = 5;
    for (const auto& row : rep.rows) {
        wd = std::max(wd, row.dataset.size());
        wm = std::max(wm, row.model.size());
    }
    std::ostringstream txt;
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - std::min(w, s.size()), ' '); };
    txt << pad("Dataset", wd) << "  " << pad("Model", wm) << "  MMF Error (%)  Reduction  Latency (s)\n";
    txt << std::string(wd + wm + 42, '-') << "\n";
    std::string last_dataset;
    for (const auto& row : rep.rows) {
        const std::string ds = row.dataset == last_dataset ? "" : row.dataset;
        last_dataset = row.dataset;
        txt << pad(ds, wd) << "  " << pad(row.model, wm) << "  " << pad(fmt("%.1f", 100.0 * row.mmf_error), 13)
            << "  " << pad(row.reduction_factor ? fmt("%.1fx", *row.reduction_factor) : "-", 9) << "  "
            << (row.latency_seconds ? fmt("%.6g", *row.latency_seconds) : "-") << "\n";
    }
    rep.text = txt.str();

    std::ostringstream csv;
    csv << "dataset,model,mmf_error_percent,reduction_factor,latency_seconds\n";
    for (const auto& row : rep.rows) {
        csv << row.dataset << "," << row.model << "," << fmt("%.4f", 100.0 * row.mmf_error) << ","
            << (row.reduction_factor ? fmt("%.1f", *row.reduction_factor) : "") << ","
            << (row.latency_seconds ? fmt("%.9g", *row.latency_seconds) : "") << "\n";
    }
    rep.csv = csv.str();
    return rep;
}

} // namespace qdetect::eval
