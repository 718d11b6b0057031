#pragma once

// Sparse polynomial MLP whose neurons can be compiled to truth tables.
//
// Every wire between layers carries a beta-bit code. A neuron has A
// sub-neurons; sub-neuron a reads F codes from the previous layer, evaluates a
// full-precision polynomial of degree <= D over their dequantized values, and
// quantizes the result to beta+1 bits. The neuron sums its sub-neuron values,
// applies a hard-tanh and quantizes to beta bits. The output layer skips the
// hard-tanh and the beta-bit quantizer: its logits are the exact sums.
//
// Because each stage is a function of a small set of codes, a sub-neuron is a
// table of 2^(beta*F) entries and the adder is a table of 2^(A*(beta+1)).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qdetect/dataset.hpp"

namespace qdetect::polymlp {

// Monomials of total degree <= D in F variables, graded by degree and
// lexicographic within a degree: [1, x1, .., xF, x1^2, x1 x2, .., xF^2, ..].
class MonomialBasis {
public:
    MonomialBasis(int vars, int degree);

    int vars() const { return vars_; }
    int degree() const { return degree_; }
    std::size_t size() const { return exponents_.size(); }
    const std::vector<int>& exponents(std::size_t m) const { return exponents_[m]; }

    // Writes all monomial values of x into out (size() entries).
    void expand(std::span<const double> x, std::span<double> out) const;
    std::vector<double> expand(std::span<const double> x) const;

    // Accumulates d(sum_m c_m phi_m)/dx_k * upstream into grad_x.
    void backprop_inputs(std::span<const double> coeffs, std::span<const double> phi, double upstream,
                         std::span<double> grad_x) const;

private:
    struct Partial {
        int var;
        int power;          // exponent of var in the monomial
        std::size_t reduced; // index of the monomial with that power lowered by one
    };
    int vars_;
    int degree_;
    std::vector<std::vector<int>> exponents_;
    std::vector<std::size_t> parent_;
    std::vector<int> last_var_;
    std::vector<std::vector<Partial>> partials_;
};

// C(vars + degree, degree).
std::size_t monomial_count(int vars, int degree);

// Uniform code <-> value map over [lo, hi] with 2^bits levels. Codes round to
// nearest (ties to even) after clamping to the range.
struct CodeQuantizer {
    int bits = 2;
    double lo = -1.0;
    double hi = 1.0;

    int levels() const { return 1 << bits; }
    double value(std::uint32_t code) const;
    std::uint32_t code(double v) const;
    double step() const { return (hi - lo) / (levels() - 1); }
};

struct PolyMlpConfig {
    std::vector<int> hidden_widths{256, 100, 100, 100};
    // 0 means "one output per class". A wider head (e.g. the literal 10) is
    // allowed; prediction then takes the argmax over the first n_classes.
    int output_width = 0;
    int fan_in = 4;          // F
    int activation_bits = 2; // beta
    int poly_degree = 2;     // D
    int subneurons = 2;      // A
    // Width of the output layer's sub-neuron codes; 0 means beta + 1.
    int head_sub_bits = 0;
    std::uint64_t seed = 1;
    double learning_rate = 0.008;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 10;
    int batch_size = 128;
    // Multiplies the logits inside the cross-entropy only; argmax is unaffected.
    double logit_scale = 4.0;
    // Input range calibration: the [q, 1-q] quantiles of the training pixels.
    // 0 takes the exact minimum and maximum.
    double input_quantile = 0.01;

    // Throws ConfigError. input_width is the width of the first layer's inputs.
    void validate(int input_width, int n_classes) const;
    int sub_bits() const { return activation_bits + 1; }
    int resolved_head_sub_bits() const { return head_sub_bits > 0 ? head_sub_bits : sub_bits(); }
    int resolved_output_width(int n_classes) const { return output_width > 0 ? output_width : n_classes; }
};

struct SubNeuron {
    std::vector<std::uint32_t> inputs; // F distinct indices into the previous layer
    std::size_t coeff_offset = 0;      // into PolyMlpModel::coeffs
};

struct Layer {
    int input_width = 0;
    int width = 0;
    bool output = false;
    CodeQuantizer input_q;  // codes arriving on this layer's inputs
    CodeQuantizer sub_q;    // sub-neuron output codes
    CodeQuantizer neuron_q; // neuron output codes (hidden layers only)
    std::vector<SubNeuron> subs; // width * A, neuron-major

    const SubNeuron& sub(int neuron, int a, int A) const { return subs[static_cast<std::size_t>(neuron) * A + a]; }
};

// Connectivity: layer -> neuron -> sub-neuron -> F input indices.
using Connectivity = std::vector<std::vector<std::vector<std::vector<std::uint32_t>>>>;

// Seeded uniform selection of F distinct inputs per sub-neuron. Each
// sub-neuron draws from its own stream keyed by (seed, layer, neuron, sub).
// Throws ConfigError when fan_in exceeds a layer's input width.
Connectivity select_connectivity(const PolyMlpConfig& cfg, int input_width, int n_classes);

struct PolyMlpModel {
    PolyMlpConfig config;
    int input_width = 0;
    int n_ions = 1;
    int n_classes = 2;
    double input_lo = 0.0; // pixel range mapped onto the input codes
    double input_hi = 1.0;
    std::vector<Layer> layers;
    std::vector<double> coeffs;

    std::size_t basis_size() const { return monomial_count(config.fan_in, config.poly_degree); }
    std::span<const double> sub_coeffs(const SubNeuron& s) const { return {coeffs.data() + s.coeff_offset, basis_size()}; }
};

// Builds the topology with the given connectivity and zero coefficients.
PolyMlpModel make_model(const PolyMlpConfig& cfg, int input_width, int n_ions, const Connectivity& conn,
                        double input_lo, double input_hi);

// Random coefficients uniform in +-1/sqrt(basis size), seeded by cfg.seed.
void init_coefficients(PolyMlpModel& model);

// Input quantizer: pixel -> beta-bit code over [input_lo, input_hi].
std::vector<std::uint16_t> quantize_input(const PolyMlpModel& model, const IonImage& image);
std::uint32_t input_code(double pixel, double lo, double hi, int bits);

// Reference arithmetic of one sub-neuron on one packed input code (input k
// occupies bits [k*beta, (k+1)*beta)). Returns the sub-neuron output code.
std::uint32_t reference_sub_code(const PolyMlpModel& model, std::size_t layer, int neuron, int a,
                                 std::uint32_t packed_inputs);
// Reference arithmetic of an adder on packed sub-neuron codes. Hidden layers
// return the beta-bit neuron code; the output layer returns the code sum.
std::uint32_t reference_adder_code(const PolyMlpModel& model, std::size_t layer, std::uint32_t packed_subs);

// Output-layer logit value of a sum of sub-neuron codes.
double logit_from_code_sum(const Layer& layer, int subneurons, std::uint32_t code_sum);

struct ForwardResult {
    std::vector<std::vector<std::uint16_t>> codes; // per hidden layer output codes
    std::vector<std::uint32_t> logit_code_sums;    // output layer
    std::vector<double> logits;
};

// Throws ShapeError when the input width does not match.
ForwardResult forward_codes(const PolyMlpModel& model, std::span<const std::uint16_t> input_codes);
std::vector<double> forward(const PolyMlpModel& model, const IonImage& image);

// Argmax over the first n_classes entries; lowest index wins ties.
int argmax(std::span<const double> logits, int n_classes);
QubitState predict(const PolyMlpModel& model, const IonImage& image);

enum class QuantMode { Quantized, PassThrough };

struct Sample {
    std::vector<std::uint16_t> input_codes;
    std::vector<double> input_values; // used in PassThrough mode
    int label = 0;
};

// Mean cross-entropy over the samples and its gradient w.r.t. every
// coefficient, with straight-through gradients across the quantizers.
// PassThrough mode removes the rounding (clamps remain) so the loss is
// differentiable almost everywhere.
double loss_and_gradient(const PolyMlpModel& model, std::span<const Sample> batch, QuantMode mode,
                         std::vector<double>* grad);

struct TrainLog {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_train_accuracy;
};

std::vector<Sample> make_samples(const PolyMlpModel& model, std::span<const IonImage> images);

// AdamW over minibatches in a seeded per-epoch order. The input range is
// calibrated from the training images. Throws TrainingError on a NaN loss.
PolyMlpModel train(const PolyMlpConfig& cfg, std::span<const IonImage> train_images, TrainLog* log = nullptr);

inline constexpr std::uint16_t kModelVersion = 1;
std::vector<std::uint8_t> serialize_model(const PolyMlpModel& model);
PolyMlpModel deserialize_model(std::span<const std::uint8_t> bytes, const std::string& context = "mlp model");
void save_model(const PolyMlpModel& model, const std::filesystem::path& path);
PolyMlpModel load_model(const std::filesystem::path& path);

} // namespace qdetect::polymlp
