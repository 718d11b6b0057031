#include "qdetect/threshold.hpp"

#include <algorithm>

#include <json.hpp>

#include "qdetect/binary_io.hpp"
#include "qdetect/error.hpp"

namespace qdetect::threshold {

namespace {

using nlohmann::json;

// Number of elements of a sorted range that are >= t.
std::size_t count_at_least(const std::vector<std::uint64_t>& sorted, std::uint64_t t) {
    return static_cast<std::size_t>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
}

void require_nonempty(std::span<const std::uint64_t> bright, std::span<const std::uint64_t> dark) {
    if (bright.empty()) throw CalibrationError("calibration needs at least one bright sample");
    if (dark.empty()) throw CalibrationError("calibration needs at least one dark sample");
}

} // namespace

double fidelity_at(std::span<const std::uint64_t> bright, std::span<const std::uint64_t> dark,
                   std::uint64_t threshold) {
    require_nonempty(bright, dark);
    const auto hits = std::count_if(bright.begin(), bright.end(), [&](auto c) { return c >= threshold; });
    const auto rejects = std::count_if(dark.begin(), dark.end(), [&](auto c) { return c < threshold; });
    return 0.5 * (static_cast<double>(hits) / bright.size() + static_cast<double>(rejects) / dark.size());
}

Calibration calibrate(std::span<const std::uint64_t> bright, std::span<const std::uint64_t> dark) {
    require_nonempty(bright, dark);
    std::vector<std::uint64_t> b(bright.begin(), bright.end());
    std::vector<std::uint64_t> d(dark.begin(), dark.end());
    std::sort(b.begin(), b.end());
    std::sort(d.begin(), d.end());

    std::vector<std::uint64_t> candidates;
    candidates.reserve(b.size() + d.size() + 1);
    candidates.push_back(std::min(b.front(), d.front()));
    for (auto v : b) candidates.push_back(v + 1);
    for (auto v : d) candidates.push_back(v + 1);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    // Compare the scaled score hits*nd + rejects*nb exactly in integers.
    const auto nb = static_cast<unsigned __int128>(b.size());
    const auto nd = static_cast<unsigned __int128>(d.size());
    unsigned __int128 best_score = 0;
    std::uint64_t best_t = candidates.front();
    bool first = true;
    for (auto t : candidates) {
        const auto hits = count_at_least(b, t);
        const auto rejects = d.size() - count_at_least(d, t);
        const auto score = hits * nd + rejects * nb;
        if (first || score > best_score) {
            best_score = score;
            best_t = t;
            first = false;
        }
    }
    return {best_t, fidelity_at(b, d, best_t)};
}

ThresholdModel calibrate_model(std::span<const IonImage> images, const ImageConfig& cfg, int roi_width,
                               int roi_height) {
    cfg.validate();
    ThresholdModel model;
    model.image_height = cfg.height;
    model.image_width = cfg.width;
    for (int ion = 0; ion < cfg.n_ions(); ++ion) {
        IonThreshold it;
        it.roi = roi_around(cfg.ion_centers[ion], roi_width, roi_height, cfg.height, cfg.width);
        std::vector<std::uint64_t> bright, dark;
        for (const auto& img : images) {
            if (img.label.n_ions != cfg.n_ions()) throw CalibrationError("image ion count differs from config");
            (img.label.bright(ion) ? bright : dark).push_back(roi_sum(img, it.roi));
        }
        if (bright.empty() || dark.empty()) {
            throw CalibrationError("ion " + std::to_string(ion) + " has an empty " +
                                   (bright.empty() ? "bright" : "dark") + " population");
        }
        const auto cal = calibrate(bright, dark);
        it.threshold = cal.threshold;
        it.calibration_fidelity = cal.fidelity;
        model.ions.push_back(it);
    }
    return model;
}

QubitState classify(const IonImage& image, const ThresholdModel& model) {
    const int n = static_cast<int>(model.ions.size());
    if (n != image.label.n_ions) {
        throw ClassificationError("model has " + std::to_string(n) + " ions, image has " +
                                  std::to_string(image.label.n_ions));
    }
    if (image.pixels.height != model.image_height || image.pixels.width != model.image_width) {
        throw ClassificationError("image is " + std::to_string(image.pixels.height) + "x" +
                                  std::to_string(image.pixels.width) + ", model expects " +
                                  std::to_string(model.image_height) + "x" + std::to_string(model.image_width));
    }
    std::uint32_t bits = 0;
    for (int i = 0; i < n; ++i) {
        if (roi_sum(image, model.ions[i].roi) >= model.ions[i].threshold) bits |= 1u << i;
    }
    return QubitState(n, bits);
}

std::vector<QubitState> classify_all(std::span<const IonImage> images, const ThresholdModel& model) {
    std::vector<QubitState> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(classify(img, model));
    return out;
}

std::string to_text(const ThresholdModel& model) {
    json doc;
    doc["kind"] = "threshold-model";
    doc["version"] = 1;
    doc["image_height"] = model.image_height;
    doc["image_width"] = model.image_width;
    doc["ions"] = json::array();
    for (std::size_t i = 0; i < model.ions.size(); ++i) {
        const auto& it = model.ions[i];
        doc["ions"].push_back({{"ion", i},
                               {"roi",
                                {{"row0", it.roi.row0},
                                 {"col0", it.roi.col0},
                                 {"width", it.roi.width},
                                 {"height", it.roi.height}}},
                               {"threshold", it.threshold},
                               {"calibration_fidelity", it.calibration_fidelity}});
    }
    return doc.dump(2) + "\n";
}

ThresholdModel from_text(const std::string& text) {
    try {
        const auto doc = json::parse(text);
        if (doc.at("kind") != "threshold-model") {
            throw ParseError(ParseErrorKind::BadMagic, "not a threshold model document");
        }
        if (doc.at("version") != 1) throw ParseError(ParseErrorKind::VersionMismatch, "threshold model version");
        ThresholdModel m;
        m.image_height = doc.at("image_height").get<int>();
        m.image_width = doc.at("image_width").get<int>();
        for (const auto& e : doc.at("ions")) {
            IonThreshold it;
            const auto& roi = e.at("roi");
            it.roi = Roi{roi.at("row0").get<int>(), roi.at("col0").get<int>(), roi.at("width").get<int>(),
                         roi.at("height").get<int>()};
            it.threshold = e.at("threshold").get<std::uint64_t>();
            it.calibration_fidelity = e.at("calibration_fidelity").get<double>();
            m.ions.push_back(it);
        }
        return m;
    } catch (const json::exception& e) {
        throw ParseError(ParseErrorKind::Malformed, std::string("threshold model: ") + e.what());
    }
}

void save_model(const ThresholdModel& model, const std::filesystem::path& path) {
    io::write_text(path, to_text(model));
}

ThresholdModel load_model(const std::filesystem::path& path) { return from_text(io::read_text(path)); }

} // namespace qdetect::threshold
