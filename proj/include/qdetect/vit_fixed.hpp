#pragma once

// Fixed-point ViT inference. Parameters are stored as integer codes of one
// global format; batch-norm layers are folded into a per-feature scale and
// offset at quantization time, and the 1/sqrt(d) attention scale is folded
// into W_Q. Every matrix product accumulates exact double-width products and
// rounds once per output element.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qdetect/fixedpoint.hpp"
#include "qdetect/vit.hpp"

namespace qdetect::vit {

struct CodeMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<std::int64_t> codes;

    CodeMatrix() = default;
    CodeMatrix(int r, int c) : rows(r), cols(c), codes(static_cast<std::size_t>(r) * c, 0) {}
    std::int64_t& at(int r, int c) { return codes[static_cast<std::size_t>(r) * cols + c]; }
    std::int64_t at(int r, int c) const { return codes[static_cast<std::size_t>(r) * cols + c]; }

    friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;
};

struct FixedHead {
    CodeMatrix wq, wk, wv; // wq carries the 1/sqrt(d) factor
    friend bool operator==(const FixedHead&, const FixedHead&) = default;
};

struct FixedBlock {
    std::vector<FixedHead> heads;
    CodeMatrix wo;
    CodeMatrix bn_scale, bn_offset; // 1 x D
    CodeMatrix w1, b1;
    friend bool operator==(const FixedBlock&, const FixedBlock&) = default;
};

struct FixedVitModel {
    VitConfig config;
    fixed::FixedFormat format;
    double input_scale = 1.0;
    CodeMatrix embed, pos, cls;
    std::vector<FixedBlock> blocks;
    CodeMatrix head_scale, head_offset, wh, bh;
    std::vector<std::int64_t> exp_lut;
    std::uint64_t saturated_params = 0; // parameters clipped during quantization

    friend bool operator==(const FixedVitModel&, const FixedVitModel&) = default;
};

inline constexpr int kExpLutSize = 256;
inline constexpr int kExpLutStepLog2 = 5; // entries every 1/32 over (-8, 0]

// Entry i holds exp(-i/32) in the format. Needs fraction_bits >= 5.
std::vector<std::int64_t> make_exp_lut(const fixed::FixedFormat& fmt);

FixedVitModel quantize_vit(const VitModel& model, const fixed::FixedFormat& fmt);

// Integer softmax of one row of score codes: max subtraction, table
// exponentials, a widened reciprocal of the row sum, and the rounding
// residual folded into the largest entry so the row sums to exactly 1.
std::vector<std::int64_t> softmax_codes(std::span<const std::int64_t> scores, std::span<const std::int64_t> exp_lut,
                                        const fixed::FixedFormat& fmt);

// Input quantization: pixel * input_scale rounded into the format.
CodeMatrix quantize_patches(const FixedVitModel& model, const IonImage& image);

struct FixedRunStats {
    std::uint64_t saturations = 0; // activations clipped during inference
};

// Logit codes. Runs under a FixedOnlyScope: no floating-point arithmetic.
std::vector<std::int64_t> fixed_logits(const FixedVitModel& model, const CodeMatrix& patches,
                                       FixedRunStats* stats = nullptr);
std::vector<std::int64_t> fixed_forward(const FixedVitModel& model, const IonImage& image,
                                        FixedRunStats* stats = nullptr);
QubitState predict_fixed(const FixedVitModel& model, const IonImage& image);
std::vector<double> logits_to_real(std::span<const std::int64_t> codes, const fixed::FixedFormat& fmt);

std::vector<std::uint8_t> serialize_fixed_vit(const FixedVitModel& model);
FixedVitModel deserialize_fixed_vit(std::span<const std::uint8_t> bytes, const std::string& context = "fixed vit model");
void save_fixed_vit(const FixedVitModel& model, const std::filesystem::path& path);
FixedVitModel load_fixed_vit(const std::filesystem::path& path);

// Kind byte following the QVIT version: 0 float, 1 fixed.
std::uint8_t vit_file_kind(std::span<const std::uint8_t> bytes, const std::string& context);

} // namespace qdetect::vit
