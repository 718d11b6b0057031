#include "qdetect/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "qdetect/binary_io.hpp"
#include "qdetect/error.hpp"
#include "qdetect/parallel.hpp"
#include "qdetect/rng.hpp"

namespace qdetect {

namespace {

constexpr char kMagic[] = "QIMG";
constexpr int kMaxIons = 8; // labels are stored as u8 bitmasks

} // namespace

void ImageConfig::validate() const {
    if (height < 1 || width < 1) throw ConfigError("image must be at least 1x1");
    if (height > 65535 || width > 65535) throw ConfigError("image dimensions exceed 65535");
    if (ion_centers.empty()) throw ConfigError("at least one ion is required");
    if (n_ions() > kMaxIons) throw ConfigError("at most 8 ions are supported");
    for (std::size_t i = 0; i < ion_centers.size(); ++i) {
        const auto& c = ion_centers[i];
        if (!(c.row >= 0.0 && c.row <= height - 1 && c.col >= 0.0 && c.col <= width - 1)) {
            throw ConfigError("ion " + std::to_string(i) + " center (" + std::to_string(c.row) + ", " +
                              std::to_string(c.col) + ") lies outside the image");
        }
    }
    if (!(psf_sigma > 0.0)) throw ConfigError("psf_sigma must be > 0");
    if (!std::isfinite(psf_amplitude)) throw ConfigError("psf_amplitude must be finite");
    if (!(poisson_lambda > 0.0)) throw ConfigError("poisson_lambda must be > 0");
    if (!(bg_sigma >= 0.0)) throw ConfigError("bg_sigma must be >= 0");
    if (!std::isfinite(bg_mean)) throw ConfigError("bg_mean must be finite");
    if (pixel_depth < 1 || pixel_depth > 16) throw ConfigError("pixel_depth must be in [1, 16]");
}

std::uint16_t ImageConfig::max_pixel() const {
    return static_cast<std::uint16_t>((1u << pixel_depth) - 1u);
}

std::vector<IonCenter> default_ion_centers(int height, int width, int n_ions, int spacing) {
    std::vector<IonCenter> centers;
    const double row = height / 2;
    const double mid = width / 2;
    for (int i = 0; i < n_ions; ++i) {
        centers.push_back({row, mid + spacing * (i - (n_ions - 1) / 2.0)});
    }
    return centers;
}

ImageConfig ImageConfig::three_qubit() {
    ImageConfig cfg;
    cfg.height = 12;
    cfg.width = 24;
    cfg.ion_centers = default_ion_centers(12, 24, 3);
    return cfg;
}

ImageConfig ImageConfig::one_qubit() {
    ImageConfig cfg;
    cfg.height = 10;
    cfg.width = 10;
    cfg.ion_centers = default_ion_centers(10, 10, 1);
    return cfg;
}

QubitState::QubitState(int n, std::uint32_t b) : n_ions(n), bits(b) {
    if (n < 1 || n > kMaxIons) throw LabelingError("ion count " + std::to_string(n) + " out of range");
    if (b >= (1u << n)) {
        throw LabelingError("state bits " + std::to_string(b) + " do not fit " + std::to_string(n) + " ions");
    }
}

std::string QubitState::str() const {
    std::string s;
    for (int i = 0; i < n_ions; ++i) s.push_back(bright(i) ? '1' : '0');
    return s;
}

QubitState QubitState::parse(std::string_view s) {
    std::uint32_t bits = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '1') bits |= 1u << i;
        else if (s[i] != '0') throw LabelingError("state string must contain only 0/1: " + std::string(s));
    }
    return QubitState(static_cast<int>(s.size()), bits);
}

Roi roi_around(const IonCenter& center, int width, int height, int image_height, int image_width) {
    const int row = static_cast<int>(std::lround(center.row));
    const int col = static_cast<int>(std::lround(center.col));
    int r0 = std::max(0, row - height / 2);
    int c0 = std::max(0, col - width / 2);
    int r1 = std::min(image_height, row - height / 2 + height);
    int c1 = std::min(image_width, col - width / 2 + width);
    return Roi{r0, c0, c1 - c0, r1 - r0};
}

std::uint64_t Histogram::total() const {
    return std::accumulate(bin_counts.begin(), bin_counts.end(), std::uint64_t{0});
}

Grid<double> render_psf(const IonCenter& center, double sigma, double amplitude, int height, int width) {
    if (!(sigma > 0.0)) throw ConfigError("psf sigma must be > 0");
    if (height < 1 || width < 1) throw ConfigError("psf grid must be at least 1x1");
    if (!(center.row >= 0.0 && center.row <= height - 1 && center.col >= 0.0 && center.col <= width - 1)) {
        throw ConfigError("psf center outside the grid");
    }
    Grid<double> g(height, width, 0.0);
    const double denom = 2.0 * sigma * sigma;
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const double dr = r - center.row;
            const double dc = c - center.col;
            g.at(r, c) = amplitude * std::exp(-(dr * dr + dc * dc) / denom);
        }
    }
    return g;
}

Grid<double> render_signal(const ImageConfig& cfg, const QubitState& state) {
    Grid<double> signal(cfg.height, cfg.width, 0.0);
    for (int i = 0; i < cfg.n_ions(); ++i) {
        if (!state.bright(i)) continue;
        const auto psf = render_psf(cfg.ion_centers[i], cfg.psf_sigma, cfg.psf_amplitude, cfg.height, cfg.width);
        for (std::size_t k = 0; k < signal.size(); ++k) signal.data[k] += psf.data[k];
    }
    return signal;
}

IonImage synthesize_image(const ImageConfig& cfg, const QubitState& state, std::uint64_t seed) {
    cfg.validate();
    if (state.n_ions != cfg.n_ions()) {
        throw LabelingError("state has " + std::to_string(state.n_ions) + " ions but the image config has " +
                            std::to_string(cfg.n_ions()));
    }
    const auto signal = render_signal(cfg, state);
    std::mt19937_64 rng(seed);
    std::poisson_distribution<int> shots(cfg.poisson_lambda);
    std::normal_distribution<double> unit_normal(0.0, 1.0);
    const double max_value = cfg.max_pixel();

    IonImage img{Grid<std::uint16_t>(cfg.height, cfg.width), state};
    for (std::size_t k = 0; k < signal.size(); ++k) {
        // Both draws happen for every pixel so the stream layout does not
        // depend on the state or the noise parameters.
        const double shot = shots(rng) / cfg.poisson_lambda;
        const double bg = cfg.bg_mean + cfg.bg_sigma * unit_normal(rng);
        const double v = std::round(signal.data[k] * shot + bg); // half away from zero
        img.pixels.data[k] = static_cast<std::uint16_t>(std::clamp(v, 0.0, max_value));
    }
    return img;
}

std::uint64_t image_seed(std::uint64_t dataset_seed, std::size_t index) {
    return derive_seed(dataset_seed, {stream::kImages, index});
}

std::vector<QubitState> balanced_labels(int n_ions, std::size_t count, std::uint64_t seed,
                                        std::uint64_t split_tag) {
    const std::uint32_t classes = 1u << n_ions;
    std::mt19937_64 rng(derive_seed(seed, {stream::kLabels, split_tag}));
    std::vector<std::uint32_t> perm(classes);
    std::vector<QubitState> labels;
    labels.reserve(count);
    while (labels.size() < count) {
        std::iota(perm.begin(), perm.end(), 0u);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::uint32_t b : perm) {
            if (labels.size() == count) break;
            labels.emplace_back(n_ions, b);
        }
    }
    return labels;
}

Dataset build_dataset(const ImageConfig& cfg, std::size_t n_images, double split_ratio, std::uint64_t seed) {
    cfg.validate();
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n_images) * split_ratio));
    if (n_train < 1 || n_train >= n_images) {
        throw ConfigError("split of " + std::to_string(n_images) + " images at ratio " +
                          std::to_string(split_ratio) + " leaves an empty split");
    }
    if (n_images > 0xFFFFFFFFu) throw ConfigError("too many images for the dataset format");

    Dataset ds;
    ds.config = cfg;
    ds.seed = seed;
    auto train_labels = balanced_labels(cfg.n_ions(), n_train, seed, 0);
    auto test_labels = balanced_labels(cfg.n_ions(), n_images - n_train, seed, 1);
    ds.train.resize(n_train);
    ds.test.resize(n_images - n_train);
    parallel_for(n_images, [&](std::size_t i) {
        if (i < n_train) ds.train[i] = synthesize_image(cfg, train_labels[i], image_seed(seed, i));
        else ds.test[i - n_train] = synthesize_image(cfg, test_labels[i - n_train], image_seed(seed, i));
    });
    return ds;
}

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
    io::ByteWriter w;
    w.magic(kMagic);
    w.u16(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u16(static_cast<std::uint16_t>(ds.config.height));
    w.u16(static_cast<std::uint16_t>(ds.config.width));
    w.u8(static_cast<std::uint8_t>(ds.config.n_ions()));
    w.u8(static_cast<std::uint8_t>(ds.config.pixel_depth));
    w.u64(ds.seed);
    w.u32(static_cast<std::uint32_t>(ds.train.size()));
    auto put = [&](const IonImage& img) {
        w.u8(static_cast<std::uint8_t>(img.label.bits));
        for (auto p : img.pixels.data) w.u16(p);
    };
    for (const auto& img : ds.train) put(img);
    for (const auto& img : ds.test) put(img);
    return w.take();
}

DatasetHeader read_dataset_header(std::span<const std::uint8_t> bytes, const std::string& context) {
    io::ByteReader r(bytes, context);
    r.expect_magic(kMagic);
    DatasetHeader h;
    h.version = kDatasetVersion;
    r.expect_version(kDatasetVersion);
    h.n_images = r.u32();
    h.height = r.u16();
    h.width = r.u16();
    h.n_ions = r.u8();
    h.pixel_depth = r.u8();
    h.seed = r.u64();
    h.split = r.u32();
    return h;
}

Dataset deserialize_dataset(std::span<const std::uint8_t> bytes, const std::string& context) {
    const auto h = read_dataset_header(bytes, context);
    constexpr std::size_t kHeaderSize = 4 + 2 + 4 + 2 + 2 + 1 + 1 + 8 + 4;
    io::ByteReader r(bytes.subspan(kHeaderSize), context);
    if (h.height == 0 || h.width == 0 || h.n_ions == 0 || h.n_ions > kMaxIons || h.split > h.n_images) {
        throw ParseError(ParseErrorKind::Malformed, context + ": inconsistent header");
    }
    const std::size_t per_image = 1 + std::size_t{2} * h.height * h.width;
    if (r.remaining() < per_image * h.n_images) {
        throw ParseError(ParseErrorKind::Truncated,
                         context + ": truncated, header declares " + std::to_string(h.n_images) +
                             " images, body holds " + std::to_string(r.remaining() / per_image));
    }

    Dataset ds;
    ds.seed = h.seed;
    ds.config.height = h.height;
    ds.config.width = h.width;
    ds.config.pixel_depth = h.pixel_depth;
    ds.config.ion_centers = default_ion_centers(h.height, h.width, h.n_ions);
    ds.train.reserve(h.split);
    ds.test.reserve(h.n_images - h.split);
    for (std::uint32_t i = 0; i < h.n_images; ++i) {
        const auto label = r.u8();
        if (label >= (1u << h.n_ions)) {
            throw ParseError(ParseErrorKind::Malformed,
                             context + ": image " + std::to_string(i) + " label out of range");
        }
        IonImage img{Grid<std::uint16_t>(h.height, h.width), QubitState(h.n_ions, label)};
        for (auto& p : img.pixels.data) p = r.u16();
        (i < h.split ? ds.train : ds.test).push_back(std::move(img));
    }
    r.expect_end();
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    io::write_file(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) {
    return deserialize_dataset(io::read_file(path), path.string());
}

std::uint64_t roi_sum(const IonImage& image, const Roi& roi) {
    const auto& px = image.pixels;
    if (roi.width < 1 || roi.height < 1 || roi.row0 < 0 || roi.col0 < 0 || roi.row0 + roi.height > px.height ||
        roi.col0 + roi.width > px.width) {
        throw ConfigError("ROI (" + std::to_string(roi.row0) + ", " + std::to_string(roi.col0) + ", " +
                          std::to_string(roi.width) + ", " + std::to_string(roi.height) +
                          ") exceeds the image bounds");
    }
    std::uint64_t s = 0;
    for (int r = roi.row0; r < roi.row0 + roi.height; ++r)
        for (int c = roi.col0; c < roi.col0 + roi.width; ++c) s += px.at(r, c);
    return s;
}

std::vector<std::uint64_t> roi_sums(std::span<const IonImage> images, const Roi& roi) {
    std::vector<std::uint64_t> sums;
    sums.reserve(images.size());
    for (const auto& img : images) sums.push_back(roi_sum(img, roi));
    return sums;
}

Histogram roi_histogram(std::span<const IonImage> images, const Roi& roi, std::span<const double> edges,
                        Population population) {
    if (edges.size() < 2) throw ConfigError("histogram needs at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (!(edges[i] > edges[i - 1])) throw ConfigError("histogram edges must be strictly increasing");
    Histogram h;
    h.bin_edges.assign(edges.begin(), edges.end());
    h.bin_counts.assign(edges.size() - 1, 0);
    h.population = population;
    const auto last = static_cast<std::ptrdiff_t>(h.bin_counts.size()) - 1;
    for (auto s : roi_sums(images, roi)) {
        // Bins are [e_i, e_{i+1}); values outside the edges land in the end bins.
        auto idx = std::upper_bound(edges.begin(), edges.end(), static_cast<double>(s)) - edges.begin() - 1;
        h.bin_counts[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, last))]++;
    }
    return h;
}

Histogram roi_histogram(std::span<const IonImage> images, const Roi& roi, int n_bins, Population population) {
    if (n_bins < 1) throw ConfigError("n_bins must be >= 1");
    if (images.empty()) throw ConfigError("histogram of an empty image set");
    const auto sums = roi_sums(images, roi);
    const auto [lo, hi] = std::minmax_element(sums.begin(), sums.end());
    const double a = static_cast<double>(*lo);
    const double b = static_cast<double>(*hi) + 1.0;
    std::vector<double> edges(static_cast<std::size_t>(n_bins) + 1);
    for (int i = 0; i <= n_bins; ++i) edges[i] = a + (b - a) * i / n_bins;
    return roi_histogram(images, roi, edges, population);
}

double histogram_overlap(const Histogram& a, const Histogram& b) {
    if (a.bin_edges != b.bin_edges) throw UsageError("histogram overlap needs identical edges");
    const double ta = static_cast<double>(a.total());
    const double tb = static_cast<double>(b.total());
    if (ta == 0 || tb == 0) throw UsageError("histogram overlap of an empty histogram");
    double overlap = 0.0;
    for (std::size_t i = 0; i < a.bin_counts.size(); ++i)
        overlap += std::min(a.bin_counts[i] / ta, b.bin_counts[i] / tb);
    return overlap;
}

} // namespace qdetect
