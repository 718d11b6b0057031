#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace qdetect {

// Row-major 2D grid.
template <typename T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }
    const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }
    std::size_t size() const { return data.size(); }

    friend bool operator==(const Grid&, const Grid&) = default;
};

struct IonCenter {
    double row = 0.0;
    double col = 0.0;
    friend bool operator==(const IonCenter&, const IonCenter&) = default;
};

struct ImageConfig {
    int height = 12;
    int width = 24;
    std::vector<IonCenter> ion_centers;
    double psf_sigma = 0.4;
    double psf_amplitude = 35.0;
    double poisson_lambda = 0.5;
    double bg_mean = 50.0;
    double bg_sigma = 20.0;
    int pixel_depth = 16;

    // Throws ConfigError on any violated invariant.
    void validate() const;
    int n_ions() const { return static_cast<int>(ion_centers.size()); }
    std::uint16_t max_pixel() const;

    // Defaults used by the presets: a 12x24 three-ion chain and a 10x10
    // single-ion stand-in, both with ions on a horizontal row.
    static ImageConfig three_qubit();
    static ImageConfig one_qubit();

    friend bool operator==(const ImageConfig&, const ImageConfig&) = default;
};

// Ion centers on row height/2, spaced `spacing` columns apart and centered on
// column width/2. For 12x24 with three ions this gives columns 7, 12, 17.
std::vector<IonCenter> default_ion_centers(int height, int width, int n_ions, int spacing = 5);

// Bit i set means ion i is bright. The class index of a state is its bitmask.
struct QubitState {
    int n_ions = 1;
    std::uint32_t bits = 0;

    QubitState() = default;
    // Throws LabelingError when bits >= 2^n_ions.
    QubitState(int n, std::uint32_t b);

    bool bright(int ion) const { return (bits >> ion) & 1u; }
    int n_classes() const { return 1 << n_ions; }
    // Ion 0 first, '1' for bright: state bits 0b101 with three ions is "101".
    std::string str() const;
    static QubitState parse(std::string_view s);

    friend bool operator==(const QubitState&, const QubitState&) = default;
};

struct IonImage {
    Grid<std::uint16_t> pixels;
    QubitState label;

    friend bool operator==(const IonImage&, const IonImage&) = default;
};

struct Dataset {
    ImageConfig config;
    std::vector<IonImage> train;
    std::vector<IonImage> test;
    std::uint64_t seed = 0;

    std::size_t size() const { return train.size() + test.size(); }
    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Roi {
    int row0 = 0;
    int col0 = 0;
    int width = 1;
    int height = 1;
};

// ROI of the given size centered on an ion: columns [col - w/2, col + w - w/2),
// rows [row - h/2, row + h - h/2). Clipped to the image.
Roi roi_around(const IonCenter& center, int width, int height, int image_height, int image_width);

enum class Population { Dark, Bright, Mixed };

struct Histogram {
    std::vector<double> bin_edges;  // n_bins + 1, strictly increasing
    std::vector<std::uint64_t> bin_counts;
    Population population = Population::Mixed;

    std::uint64_t total() const;
};

Grid<double> render_psf(const IonCenter& center, double sigma, double amplitude, int height, int width);

// Noiseless signal: the sum of the PSFs of the bright ions.
Grid<double> render_signal(const ImageConfig& cfg, const QubitState& state);

IonImage synthesize_image(const ImageConfig& cfg, const QubitState& state, std::uint64_t seed);

// Per-image seed of image `index` (train images first, then test).
std::uint64_t image_seed(std::uint64_t dataset_seed, std::size_t index);

// Class labels for one split. Every block of 2^n consecutive images is a
// fresh random permutation of all states, so class counts differ by at most one.
std::vector<QubitState> balanced_labels(int n_ions, std::size_t count, std::uint64_t seed,
                                        std::uint64_t split_tag);

Dataset build_dataset(const ImageConfig& cfg, std::size_t n_images, double split_ratio, std::uint64_t seed);

inline constexpr std::uint16_t kDatasetVersion = 1;

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds);
// The stored header carries geometry, ion count, pixel depth and seed; the
// remaining ImageConfig fields (ion placement, noise parameters) come back as
// the defaults for that geometry.
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes, const std::string& context = "dataset");
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct DatasetHeader {
    std::uint16_t version = 0;
    std::uint32_t n_images = 0;
    std::uint16_t height = 0;
    std::uint16_t width = 0;
    std::uint8_t n_ions = 0;
    std::uint8_t pixel_depth = 0;
    std::uint64_t seed = 0;
    std::uint32_t split = 0;
};
DatasetHeader read_dataset_header(std::span<const std::uint8_t> bytes, const std::string& context);

std::uint64_t roi_sum(const IonImage& image, const Roi& roi);
std::vector<std::uint64_t> roi_sums(std::span<const IonImage> images, const Roi& roi);

Histogram roi_histogram(std::span<const IonImage> images, const Roi& roi, std::span<const double> edges,
                        Population population = Population::Mixed);
// Equal-width bins spanning [min sum, max sum + 1).
Histogram roi_histogram(std::span<const IonImage> images, const Roi& roi, int n_bins,
                        Population population = Population::Mixed);

// Fraction of probability mass shared by two histograms over the same edges:
// sum_i min(p_i, q_i) with p, q the normalized bin counts.
double histogram_overlap(const Histogram& a, const Histogram& b);

} // namespace qdetect
