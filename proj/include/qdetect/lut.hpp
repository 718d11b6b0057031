#pragma once

// Truth-table form of a PolyMlpModel. Evaluation is table lookups and wiring
// only; no polynomial arithmetic survives compilation.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdetect/dataset.hpp"
#include "qdetect/polymlp.hpp"

namespace qdetect::lut {

struct LutTable {
    int in_bits = 0;
    int out_bits = 0;
    std::vector<std::uint16_t> entries; // 2^in_bits

    std::size_t size() const { return entries.size(); }
    std::uint16_t lookup(std::uint32_t address) const { return entries[address]; }
};

struct LutNeuron {
    std::vector<std::vector<std::uint32_t>> sub_inputs; // A wiring lists of F indices
    std::vector<LutTable> subs;                          // A tables of 2^(beta*F)
    LutTable adder;                                      // 2^(A*sub_bits)
};

struct LutLayer {
    int input_width = 0;
    int fan_in = 0;
    int input_bits = 0; // beta
    int sub_bits = 0;
    bool output = false;
    std::vector<LutNeuron> neurons;

    int width() const { return static_cast<int>(neurons.size()); }
};

struct LutNetwork {
    int input_width = 0;
    int n_ions = 1;
    int n_classes = 2;
    int input_bits = 2;
    double input_lo = 0.0;
    double input_hi = 1.0;
    std::vector<LutLayer> layers;

    // Table entries of one neuron of a layer: A*2^(beta*F) + 2^(A*sub_bits).
    std::size_t entries_per_neuron(std::size_t layer) const;
    std::size_t total_entries() const;
    // Lookups performed by one evaluation; independent of the input.
    std::size_t lookups_per_inference() const;
};

// Enumerates every sub-neuron and adder address through the model's
// quantized arithmetic.
LutNetwork compile_truth_tables(const polymlp::PolyMlpModel& model);

std::vector<std::uint16_t> quantize_image(const LutNetwork& net, const IonImage& image);

// Output-layer code sums for pre-quantized input codes. `lookups`, when
// given, receives the number of table reads.
std::vector<std::uint32_t> eval_codes(const LutNetwork& net, std::span<const std::uint16_t> input_codes,
                                      std::size_t* lookups = nullptr);
// Argmax over the first n_classes code sums, lowest index on ties.
QubitState eval_lut(const LutNetwork& net, std::span<const std::uint16_t> input_codes,
                    std::size_t* lookups = nullptr);
QubitState eval_lut(const LutNetwork& net, const IonImage& image, std::size_t* lookups = nullptr);

struct Mismatch {
    std::size_t layer = 0;
    std::size_t neuron = 0;
    int table = 0; // sub-neuron index, or -1 for the adder
    std::uint32_t address = 0;
    std::uint32_t expected = 0;
    std::uint32_t actual = 0;

    std::string str() const;
};

struct EquivalenceReport {
    std::size_t tables_checked = 0;
    std::size_t entries_checked = 0;
    std::vector<Mismatch> mismatches;

    bool ok() const { return mismatches.empty(); }
    std::string summary() const;
};

// Exhaustive table-vs-arithmetic comparison over every address of every
// table. Throws ShapeError when the topologies differ.
EquivalenceReport verify_equivalence(const polymlp::PolyMlpModel& model, const LutNetwork& net);
// Throws EquivalenceError carrying the first mismatch's coordinates.
void require_equivalent(const EquivalenceReport& report);

struct AgreementReport {
    std::size_t samples = 0;
    std::size_t agree = 0;
    std::optional<std::size_t> first_disagreement;

    double rate() const { return samples ? static_cast<double>(agree) / samples : 1.0; }
};

// End-to-end argmax agreement between the model's forward pass and the tables.
AgreementReport end_to_end_agreement(const polymlp::PolyMlpModel& model, const LutNetwork& net,
                                     std::span<const IonImage> images);

inline constexpr std::uint16_t kLutVersion = 1;
std::vector<std::uint8_t> serialize_lut(const LutNetwork& net);
LutNetwork deserialize_lut(std::span<const std::uint8_t> bytes, const std::string& context = "lut network");
void save_lut(const LutNetwork& net, const std::filesystem::path& path);
LutNetwork load_lut(const std::filesystem::path& path);

// One block per table with its input wiring, in evaluation order.
std::string netlist(const LutNetwork& net);

} // namespace qdetect::lut
