#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qdetect/dataset.hpp"

namespace qdetect::threshold {

inline constexpr int kDefaultRoiWidth = 4;
inline constexpr int kDefaultRoiHeight = 8;

struct IonThreshold {
    Roi roi;
    std::uint64_t threshold = 0; // bright iff ROI sum >= threshold
    double calibration_fidelity = 0.0;
};

struct ThresholdModel {
    int image_height = 0;
    int image_width = 0;
    std::vector<IonThreshold> ions;
};

struct Calibration {
    std::uint64_t threshold = 0;
    double fidelity = 0.0;
};

// Balanced two-class fidelity of threshold t:
// (P(count >= t | bright) + P(count < t | dark)) / 2.
double fidelity_at(std::span<const std::uint64_t> bright, std::span<const std::uint64_t> dark,
                   std::uint64_t threshold);

// Maximizes fidelity_at over integer thresholds. Fidelity only changes just
// above an observed count, so the candidates are the smallest observed count
// and every observed count + 1. Ties go to the smallest threshold. Throws
// CalibrationError when either population is empty.
Calibration calibrate(std::span<const std::uint64_t> bright, std::span<const std::uint64_t> dark);

// Per-ion calibration over labeled images with ROIs of the given size
// centered on each ion.
ThresholdModel calibrate_model(std::span<const IonImage> images, const ImageConfig& cfg,
                               int roi_width = kDefaultRoiWidth, int roi_height = kDefaultRoiHeight);

// Throws ClassificationError on ion-count or geometry mismatch.
QubitState classify(const IonImage& image, const ThresholdModel& model);
std::vector<QubitState> classify_all(std::span<const IonImage> images, const ThresholdModel& model);

std::string to_text(const ThresholdModel& model);
ThresholdModel from_text(const std::string& text);
void save_model(const ThresholdModel& model, const std::filesystem::path& path);
ThresholdModel load_model(const std::filesystem::path& path);

} // namespace qdetect::threshold
