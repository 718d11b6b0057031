#include "qdetect/polymlp.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "qdetect/binary_io.hpp"
#include "qdetect/error.hpp"
#include "qdetect/rng.hpp"

namespace qdetect::polymlp {

// ---------------------------------------------------------------------------
// Monomial expansion

MonomialBasis::MonomialBasis(int vars, int degree) : vars_(vars), degree_(degree) {
    if (vars < 1 || degree < 0) throw ConfigError("monomial basis needs vars >= 1 and degree >= 0");
    std::map<std::vector<int>, std::size_t> index;
    std::vector<std::vector<int>> sequences{{}}; // nondecreasing variable sequences of the current degree
    exponents_.push_back(std::vector<int>(vars, 0));
    parent_.push_back(0);
    last_var_.push_back(-1);
    index[exponents_[0]] = 0;
    for (int d = 1; d <= degree; ++d) {
        std::vector<std::vector<int>> next;
        for (const auto& seq : sequences) {
            const int start = seq.empty() ? 0 : seq.back();
            for (int v = start; v < vars; ++v) {
                auto s = seq;
                s.push_back(v);
                next.push_back(std::move(s));
            }
        }
        // Lexicographic order over the sequences within one degree.
        std::sort(next.begin(), next.end());
        for (const auto& s : next) {
            std::vector<int> e(vars, 0);
            for (int v : s) e[v]++;
            std::vector<int> pe = e;
            pe[s.back()]--;
            parent_.push_back(index.at(pe));
            last_var_.push_back(s.back());
            index[e] = exponents_.size();
            exponents_.push_back(std::move(e));
        }
        sequences = std::move(next);
    }
    partials_.resize(exponents_.size());
    for (std::size_t m = 0; m < exponents_.size(); ++m) {
        for (int v = 0; v < vars; ++v) {
            if (exponents_[m][v] == 0) continue;
            auto reduced = exponents_[m];
            reduced[v]--;
            partials_[m].push_back({v, exponents_[m][v], index.at(reduced)});
        }
    }
}

void MonomialBasis::expand(std::span<const double> x, std::span<double> out) const {
    out[0] = 1.0;
    for (std::size_t m = 1; m < exponents_.size(); ++m) out[m] = out[parent_[m]] * x[last_var_[m]];
}

std::vector<double> MonomialBasis::expand(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != vars_) throw ShapeError("monomial expansion: wrong input length");
    std::vector<double> out(size());
    expand(x, out);
    return out;
}

void MonomialBasis::backprop_inputs(std::span<const double> coeffs, std::span<const double> phi, double upstream,
                                    std::span<double> grad_x) const {
    for (std::size_t m = 1; m < exponents_.size(); ++m) {
        const double cm = coeffs[m] * upstream;
        for (const auto& p : partials_[m]) grad_x[p.var] += cm * p.power * phi[p.reduced];
    }
}

std::size_t monomial_count(int vars, int degree) {
    // C(vars + degree, degree), exact for the small arguments used here.
    std::size_t r = 1;
    for (int i = 1; i <= degree; ++i) r = r * static_cast<std::size_t>(vars + i) / static_cast<std::size_t>(i);
    return r;
}

// ---------------------------------------------------------------------------
// Quantizers

double CodeQuantizer::value(std::uint32_t code) const { return lo + code * step(); }

std::uint32_t CodeQuantizer::code(double v) const {
    const double t = (std::clamp(v, lo, hi) - lo) / (hi - lo) * (levels() - 1);
    return static_cast<std::uint32_t>(std::clamp(std::nearbyint(t), 0.0, static_cast<double>(levels() - 1)));
}

std::uint32_t input_code(double pixel, double lo, double hi, int bits) {
    const int levels = 1 << bits;
    const double t = std::clamp((pixel - lo) / (hi - lo), 0.0, 1.0) * (levels - 1);
    return static_cast<std::uint32_t>(std::nearbyint(t));
}

// ---------------------------------------------------------------------------
// Configuration and topology

void PolyMlpConfig::validate(int input_width, int n_classes) const {
    if (fan_in < 1) throw ConfigError("fan_in must be >= 1");
    if (activation_bits < 1 || activation_bits > 8) throw ConfigError("activation_bits must be in [1, 8]");
    if (poly_degree < 1) throw ConfigError("poly_degree must be >= 1");
    if (subneurons < 1) throw ConfigError("subneurons must be >= 1");
    if (head_sub_bits < 0 || head_sub_bits > 12) throw ConfigError("head_sub_bits must be in [0, 12]");
    if (activation_bits * fan_in > 20) throw ConfigError("beta*F above 20 gives impractically large tables");
    if (subneurons * std::max(sub_bits(), resolved_head_sub_bits()) > 20)
        throw ConfigError("A*(beta+1) above 20 gives impractically large adder tables");
    if (input_width < 1) throw ConfigError("input width must be >= 1");
    if (n_classes < 2) throw ConfigError("at least two classes are required");
    if (output_width != 0 && output_width < n_classes)
        throw ConfigError("output_width " + std::to_string(output_width) + " is below the class count " +
                          std::to_string(n_classes));
    int prev = input_width;
    for (std::size_t l = 0; l <= hidden_widths.size(); ++l) {
        const int w = l < hidden_widths.size() ? hidden_widths[l] : resolved_output_width(n_classes);
        if (w < 1) throw ConfigError("layer " + std::to_string(l) + " has no neurons");
        if (fan_in > prev) {
            throw ConfigError("fan_in " + std::to_string(fan_in) + " exceeds the width " + std::to_string(prev) +
                              " feeding layer " + std::to_string(l));
        }
        prev = w;
    }
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be > 0");
    if (!(input_quantile >= 0.0 && input_quantile < 0.5)) throw ConfigError("input_quantile must be in [0, 0.5)");
}

Connectivity select_connectivity(const PolyMlpConfig& cfg, int input_width, int n_classes) {
    cfg.validate(input_width, n_classes);
    Connectivity conn;
    int prev = input_width;
    const std::size_t n_layers = cfg.hidden_widths.size() + 1;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const int width = l + 1 < n_layers ? cfg.hidden_widths[l] : cfg.resolved_output_width(n_classes);
        auto& layer = conn.emplace_back(static_cast<std::size_t>(width));
        std::vector<std::uint32_t> pool(static_cast<std::size_t>(prev));
        for (int j = 0; j < width; ++j) {
            for (int a = 0; a < cfg.subneurons; ++a) {
                std::mt19937_64 rng(derive_seed(cfg.seed, {stream::kConnectivity, l, static_cast<std::uint64_t>(j),
                                                           static_cast<std::uint64_t>(a)}));
                std::iota(pool.begin(), pool.end(), 0u);
                // Partial Fisher-Yates: the first F slots are a uniform draw without replacement.
                for (int k = 0; k < cfg.fan_in; ++k) {
                    std::uniform_int_distribution<int> pick(k, prev - 1);
                    std::swap(pool[k], pool[pick(rng)]);
                }
                layer[j].emplace_back(pool.begin(), pool.begin() + cfg.fan_in);
            }
        }
        prev = width;
    }
    return conn;
}

PolyMlpModel make_model(const PolyMlpConfig& cfg, int input_width, int n_ions, const Connectivity& conn,
                        double input_lo, double input_hi) {
    const int n_classes = 1 << n_ions;
    cfg.validate(input_width, n_classes);
    if (conn.size() != cfg.hidden_widths.size() + 1) throw ShapeError("connectivity has the wrong layer count");
    if (!(input_hi > input_lo)) throw ConfigError("input range must be non-empty");
    PolyMlpModel m;
    m.config = cfg;
    m.input_width = input_width;
    m.n_ions = n_ions;
    m.n_classes = n_classes;
    m.input_lo = input_lo;
    m.input_hi = input_hi;
    const std::size_t basis = m.basis_size();
    int prev = input_width;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < conn.size(); ++l) {
        Layer layer;
        layer.input_width = prev;
        layer.width = static_cast<int>(conn[l].size());
        layer.output = l + 1 == conn.size();
        const int beta = cfg.activation_bits;
        layer.input_q = {beta, -1.0, 1.0};
        layer.sub_q = {layer.output ? cfg.resolved_head_sub_bits() : cfg.sub_bits(), -1.0, 1.0};
        layer.neuron_q = {beta, -1.0, 1.0};
        const int expected_width = layer.output ? cfg.resolved_output_width(n_classes) : cfg.hidden_widths[l];
        if (layer.width != expected_width) throw ShapeError("connectivity layer " + std::to_string(l) + " width mismatch");
        for (const auto& neuron : conn[l]) {
            if (static_cast<int>(neuron.size()) != cfg.subneurons) throw ShapeError("connectivity sub-neuron count mismatch");
            for (const auto& idx : neuron) {
                if (static_cast<int>(idx.size()) != cfg.fan_in) throw ShapeError("connectivity fan-in mismatch");
                auto sorted = idx;
                std::sort(sorted.begin(), sorted.end());
                if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
                    throw ShapeError("connectivity indices must be distinct within a sub-neuron");
                if (sorted.back() >= static_cast<std::uint32_t>(prev)) throw ShapeError("connectivity index out of range");
                layer.subs.push_back({idx, offset});
                offset += basis;
            }
        }
        prev = layer.width;
        m.layers.push_back(std::move(layer));
    }
    m.coeffs.assign(offset, 0.0);
    return m;
}

void init_coefficients(PolyMlpModel& model) {
    std::mt19937_64 rng(derive_seed(model.config.seed, {stream::kMlpInit}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(model.basis_size()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& c : model.coeffs) c = u(rng);
}

std::vector<std::uint16_t> quantize_input(const PolyMlpModel& model, const IonImage& image) {
    if (static_cast<int>(image.pixels.size()) != model.input_width) {
        throw ShapeError("image has " + std::to_string(image.pixels.size()) + " pixels, model expects " +
                         std::to_string(model.input_width));
    }
    std::vector<std::uint16_t> codes(image.pixels.size());
    for (std::size_t i = 0; i < codes.size(); ++i)
        codes[i] = static_cast<std::uint16_t>(
            input_code(image.pixels.data[i], model.input_lo, model.input_hi, model.config.activation_bits));
    return codes;
}

// ---------------------------------------------------------------------------
// Reference arithmetic

namespace {

double sub_polynomial(const MonomialBasis& basis, std::span<const double> coeffs, std::span<const double> x,
                      std::span<double> phi) {
    basis.expand(x, phi);
    double p = 0.0;
    for (std::size_t m = 0; m < phi.size(); ++m) p += coeffs[m] * phi[m];
    return p;
}

double sum_value(const Layer& layer, int subneurons, std::uint32_t code_sum) {
    return subneurons * layer.sub_q.lo + code_sum * layer.sub_q.step();
}

} // namespace

double logit_from_code_sum(const Layer& layer, int subneurons, std::uint32_t code_sum) {
    return sum_value(layer, subneurons, code_sum);
}

std::uint32_t reference_sub_code(const PolyMlpModel& model, std::size_t layer_index, int neuron, int a,
                                 std::uint32_t packed_inputs) {
    const auto& layer = model.layers.at(layer_index);
    const auto& cfg = model.config;
    const MonomialBasis basis(cfg.fan_in, cfg.poly_degree);
    const std::uint32_t mask = (1u << cfg.activation_bits) - 1u;
    std::vector<double> x(static_cast<std::size_t>(cfg.fan_in));
    for (int k = 0; k < cfg.fan_in; ++k)
        x[k] = layer.input_q.value((packed_inputs >> (k * cfg.activation_bits)) & mask);
    std::vector<double> phi(basis.size());
    const auto& s = layer.sub(neuron, a, cfg.subneurons);
    return layer.sub_q.code(sub_polynomial(basis, model.sub_coeffs(s), x, phi));
}

std::uint32_t reference_adder_code(const PolyMlpModel& model, std::size_t layer_index, std::uint32_t packed_subs) {
    const auto& layer = model.layers.at(layer_index);
    const int A = model.config.subneurons;
    const std::uint32_t mask = (1u << layer.sub_q.bits) - 1u;
    std::uint32_t sum = 0;
    for (int a = 0; a < A; ++a) sum += (packed_subs >> (a * layer.sub_q.bits)) & mask;
    if (layer.output) return sum;
    return layer.neuron_q.code(sum_value(layer, A, sum));
}

ForwardResult forward_codes(const PolyMlpModel& model, std::span<const std::uint16_t> input_codes) {
    if (static_cast<int>(input_codes.size()) != model.input_width) {
        throw ShapeError("forward: " + std::to_string(input_codes.size()) + " inputs, model expects " +
                         std::to_string(model.input_width));
    }
    const auto& cfg = model.config;
    const int A = cfg.subneurons;
    const MonomialBasis basis(cfg.fan_in, cfg.poly_degree);
    std::vector<double> x(static_cast<std::size_t>(cfg.fan_in)), phi(basis.size());

    ForwardResult out;
    std::vector<std::uint16_t> current(input_codes.begin(), input_codes.end());
    for (const auto& layer : model.layers) {
        std::vector<std::uint16_t> next;
        for (int j = 0; j < layer.width; ++j) {
            std::uint32_t sum = 0;
            for (int a = 0; a < A; ++a) {
                const auto& s = layer.sub(j, a, A);
                for (int k = 0; k < cfg.fan_in; ++k) x[k] = layer.input_q.value(current[s.inputs[k]]);
                sum += layer.sub_q.code(sub_polynomial(basis, model.sub_coeffs(s), x, phi));
            }
            if (layer.output) {
                out.logit_code_sums.push_back(sum);
                out.logits.push_back(sum_value(layer, A, sum));
            } else {
                next.push_back(static_cast<std::uint16_t>(layer.neuron_q.code(sum_value(layer, A, sum))));
            }
        }
        if (!layer.output) {
            out.codes.push_back(next);
            current = std::move(next);
        }
    }
    return out;
}

std::vector<double> forward(const PolyMlpModel& model, const IonImage& image) {
    return forward_codes(model, quantize_input(model, image)).logits;
}

int argmax(std::span<const double> logits, int n_classes) {
    if (n_classes < 1 || static_cast<std::size_t>(n_classes) > logits.size()) throw ShapeError("argmax: bad class count");
    int best = 0;
    for (int i = 1; i < n_classes; ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

QubitState predict(const PolyMlpModel& model, const IonImage& image) {
    const auto logits = forward(model, image);
    return QubitState(model.n_ions, static_cast<std::uint32_t>(argmax(logits, model.n_classes)));
}

// ---------------------------------------------------------------------------
// Training

std::vector<Sample> make_samples(const PolyMlpModel& model, std::span<const IonImage> images) {
    std::vector<Sample> samples;
    samples.reserve(images.size());
    for (const auto& img : images) {
        Sample s;
        s.input_codes = quantize_input(model, img);
        s.input_values.resize(img.pixels.size());
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            s.input_values[i] =
                -1.0 + 2.0 * std::clamp((img.pixels.data[i] - model.input_lo) / (model.input_hi - model.input_lo), 0.0, 1.0);
        s.label = static_cast<int>(img.label.bits);
        samples.push_back(std::move(s));
    }
    return samples;
}

namespace {

// Per-sample activations kept for the backward pass.
struct Workspace {
    std::vector<std::vector<double>> values; // input values of each layer
    std::vector<std::vector<double>> phi;    // per layer: subs * basis
    std::vector<std::vector<double>> pre;    // per layer: sub-neuron polynomial values
    std::vector<std::vector<double>> sums;   // per layer: neuron pre-activation sums
    std::vector<std::vector<double>> grad_values;

    explicit Workspace(const PolyMlpModel& m) {
        const auto basis = m.basis_size();
        for (const auto& l : m.layers) {
            values.emplace_back(static_cast<std::size_t>(l.input_width));
            grad_values.emplace_back(static_cast<std::size_t>(l.input_width));
            phi.emplace_back(l.subs.size() * basis);
            pre.emplace_back(l.subs.size());
            sums.emplace_back(static_cast<std::size_t>(l.width));
        }
    }
};

// Returns the sample's loss; accumulates scaled gradients into grad.
double sample_pass(const PolyMlpModel& model, const MonomialBasis& basis, const Sample& sample, QuantMode mode,
                   double grad_scale, Workspace& ws, std::vector<double>* grad, int* predicted) {
    const auto& cfg = model.config;
    const int A = cfg.subneurons;
    const int F = cfg.fan_in;
    const std::size_t M = basis.size();
    const bool quantized = mode == QuantMode::Quantized;
    std::vector<double> x(static_cast<std::size_t>(F));

    auto& in0 = ws.values[0];
    for (std::size_t i = 0; i < in0.size(); ++i)
        in0[i] = quantized ? model.layers[0].input_q.value(sample.input_codes[i]) : sample.input_values[i];

    std::vector<double> logits;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        const auto& in = ws.values[l];
        for (int j = 0; j < layer.width; ++j) {
            double u = 0.0;
            std::uint32_t code_sum = 0;
            for (int a = 0; a < A; ++a) {
                const std::size_t si = static_cast<std::size_t>(j) * A + a;
                const auto& s = layer.subs[si];
                for (int k = 0; k < F; ++k) x[k] = in[s.inputs[k]];
                std::span<double> phi(ws.phi[l].data() + si * M, M);
                const double p = sub_polynomial(basis, model.sub_coeffs(s), x, phi);
                ws.pre[l][si] = p;
                if (quantized) code_sum += layer.sub_q.code(p);
                else u += std::clamp(p, -1.0, 1.0);
            }
            if (quantized) u = sum_value(layer, A, code_sum);
            ws.sums[l][j] = u;
            if (layer.output) {
                logits.push_back(u);
            } else {
                ws.values[l + 1][j] = quantized ? layer.neuron_q.value(layer.neuron_q.code(u)) : std::clamp(u, -1.0, 1.0);
            }
        }
    }

    const int C = model.n_classes;
    const double scale = cfg.logit_scale;
    double zmax = logits[0] * scale;
    for (int c = 1; c < C; ++c) zmax = std::max(zmax, logits[c] * scale);
    double denom = 0.0;
    for (int c = 0; c < C; ++c) denom += std::exp(logits[c] * scale - zmax);
    const double loss = -(logits[sample.label] * scale - zmax - std::log(denom));
    if (predicted) *predicted = argmax(logits, C);
    if (!grad) return loss;

    // Backward. g holds dL/d(neuron output) for the layer being processed.
    std::vector<double> g(logits.size(), 0.0);
    for (int c = 0; c < C; ++c)
        g[c] = grad_scale * scale * (std::exp(logits[c] * scale - zmax) / denom - (c == sample.label ? 1.0 : 0.0));
    std::vector<double> gx(static_cast<std::size_t>(F));
    for (std::size_t li = model.layers.size(); li-- > 0;) {
        const auto& layer = model.layers[li];
        auto& gin = ws.grad_values[li];
        std::fill(gin.begin(), gin.end(), 0.0);
        for (int j = 0; j < layer.width; ++j) {
            double gu = g[j];
            if (!layer.output) {
                const double u = ws.sums[li][j];
                if (!(u > -1.0 && u < 1.0)) gu = 0.0; // hard-tanh / quantizer range
            }
            if (gu == 0.0) continue;
            for (int a = 0; a < A; ++a) {
                const std::size_t si = static_cast<std::size_t>(j) * A + a;
                const double p = ws.pre[li][si];
                if (!(p > -1.0 && p < 1.0)) continue;
                const auto& s = layer.subs[si];
                std::span<const double> phi(ws.phi[li].data() + si * M, M);
                double* gc = grad->data() + s.coeff_offset;
                for (std::size_t m = 0; m < M; ++m) gc[m] += gu * phi[m];
                if (li == 0) continue;
                std::fill(gx.begin(), gx.end(), 0.0);
                basis.backprop_inputs(model.sub_coeffs(s), phi, gu, gx);
                for (int k = 0; k < F; ++k) gin[s.inputs[k]] += gx[k];
            }
        }
        g = gin;
    }
    return loss;
}

} // namespace

double loss_and_gradient(const PolyMlpModel& model, std::span<const Sample> batch, QuantMode mode,
                         std::vector<double>* grad) {
    if (batch.empty()) throw UsageError("loss over an empty batch");
    if (grad) grad->assign(model.coeffs.size(), 0.0);
    const MonomialBasis basis(model.config.fan_in, model.config.poly_degree);
    Workspace ws(model);
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& s : batch) total += sample_pass(model, basis, s, mode, inv, ws, grad, nullptr);
    return total * inv;
}

PolyMlpModel train(const PolyMlpConfig& cfg, std::span<const IonImage> train_images, TrainLog* log) {
    if (train_images.empty()) throw UsageError("training set is empty");
    const int n_ions = train_images.front().label.n_ions;
    const int input_width = static_cast<int>(train_images.front().pixels.size());
    std::vector<std::uint64_t> counts(65536, 0);
    std::uint64_t total = 0;
    for (const auto& img : train_images) {
        if (img.label.n_ions != n_ions || static_cast<int>(img.pixels.size()) != input_width)
            throw ShapeError("training images disagree on shape or ion count");
        for (auto v : img.pixels.data) counts[v]++;
        total += img.pixels.size();
    }
    const auto quantile = [&](double q) {
        const auto target = static_cast<std::uint64_t>(std::floor(q * static_cast<double>(total - 1)));
        std::uint64_t seen = 0;
        for (std::size_t v = 0; v < counts.size(); ++v) {
            seen += counts[v];
            if (seen > target) return static_cast<double>(v);
        }
        return 65535.0;
    };
    double lo = quantile(cfg.input_quantile);
    double hi = quantile(1.0 - cfg.input_quantile);
    if (hi <= lo) hi = lo + 1.0;

    const auto conn = select_connectivity(cfg, input_width, 1 << n_ions);
    PolyMlpModel model = make_model(cfg, input_width, n_ions, conn, lo, hi);
    init_coefficients(model);
    const auto samples = make_samples(model, train_images);

    const MonomialBasis basis(cfg.fan_in, cfg.poly_degree);
    Workspace ws(model);
    const std::size_t P = model.coeffs.size();
    std::vector<double> grad(P), m1(P, 0.0), m2(P, 0.0);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(cfg.seed, {stream::kMlpShuffle, static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grad.begin(), grad.end(), 0.0);
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            for (std::size_t i = b0; i < b1; ++i) {
                int pred = 0;
                epoch_loss += sample_pass(model, basis, samples[order[i]], QuantMode::Quantized, inv, ws, &grad, &pred);
                correct += pred == samples[order[i]].label;
            }
            if (!std::isfinite(epoch_loss)) throw TrainingError("MLP training loss is not finite", epoch);
            ++step;
            const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
            for (std::size_t k = 0; k < P; ++k) {
                model.coeffs[k] *= 1.0 - cfg.learning_rate * cfg.weight_decay;
                m1[k] = cfg.adam_beta1 * m1[k] + (1.0 - cfg.adam_beta1) * grad[k];
                m2[k] = cfg.adam_beta2 * m2[k] + (1.0 - cfg.adam_beta2) * grad[k] * grad[k];
                model.coeffs[k] -= cfg.learning_rate * (m1[k] / bc1) / (std::sqrt(m2[k] / bc2) + cfg.adam_eps);
            }
        }
        if (log) {
            log->epoch_loss.push_back(epoch_loss / samples.size());
            log->epoch_train_accuracy.push_back(static_cast<double>(correct) / samples.size());
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Persistence

std::vector<std::uint8_t> serialize_model(const PolyMlpModel& m) {
    const auto& c = m.config;
    io::ByteWriter w;
    w.magic("QMLP");
    w.u16(kModelVersion);
    w.u16(static_cast<std::uint16_t>(c.hidden_widths.size()));
    for (int hw : c.hidden_widths) w.u32(static_cast<std::uint32_t>(hw));
    w.u32(static_cast<std::uint32_t>(c.output_width));
    w.u8(static_cast<std::uint8_t>(c.fan_in));
    w.u8(static_cast<std::uint8_t>(c.activation_bits));
    w.u8(static_cast<std::uint8_t>(c.poly_degree));
    w.u8(static_cast<std::uint8_t>(c.subneurons));
    w.u8(static_cast<std::uint8_t>(c.head_sub_bits));
    w.u64(c.seed);
    w.f64(c.learning_rate);
    w.f64(c.weight_decay);
    w.f64(c.adam_beta1);
    w.f64(c.adam_beta2);
    w.f64(c.adam_eps);
    w.u32(static_cast<std::uint32_t>(c.epochs));
    w.u32(static_cast<std::uint32_t>(c.batch_size));
    w.f64(c.logit_scale);
    w.f64(c.input_quantile);
    w.u32(static_cast<std::uint32_t>(m.input_width));
    w.u8(static_cast<std::uint8_t>(m.n_ions));
    w.f64(m.input_lo);
    w.f64(m.input_hi);
    for (const auto& layer : m.layers)
        for (const auto& s : layer.subs)
            for (auto idx : s.inputs) w.u32(idx);
    w.u64(m.coeffs.size());
    for (double v : m.coeffs) w.f64(v);
    return w.take();
}

PolyMlpModel deserialize_model(std::span<const std::uint8_t> bytes, const std::string& context) {
    io::ByteReader r(bytes, context);
    r.expect_magic("QMLP");
    r.expect_version(kModelVersion);
    PolyMlpConfig c;
    c.hidden_widths.resize(r.u16());
    for (auto& hw : c.hidden_widths) hw = static_cast<int>(r.u32());
    c.output_width = static_cast<int>(r.u32());
    c.fan_in = r.u8();
    c.activation_bits = r.u8();
    c.poly_degree = r.u8();
    c.subneurons = r.u8();
    c.head_sub_bits = r.u8();
    c.seed = r.u64();
    c.learning_rate = r.f64();
    c.weight_decay = r.f64();
    c.adam_beta1 = r.f64();
    c.adam_beta2 = r.f64();
    c.adam_eps = r.f64();
    c.epochs = static_cast<int>(r.u32());
    c.batch_size = static_cast<int>(r.u32());
    c.logit_scale = r.f64();
    c.input_quantile = r.f64();
    const int input_width = static_cast<int>(r.u32());
    const int n_ions = r.u8();
    const double lo = r.f64();
    const double hi = r.f64();
    if (n_ions < 1 || n_ions > 8) throw ParseError(ParseErrorKind::Malformed, context + ": bad ion count");
    try {
        c.validate(input_width, 1 << n_ions);
    } catch (const ConfigError& e) {
        throw ParseError(ParseErrorKind::Malformed, context + ": " + e.what());
    }
    Connectivity conn;
    int prev = input_width;
    for (std::size_t l = 0; l <= c.hidden_widths.size(); ++l) {
        const int width = l < c.hidden_widths.size() ? c.hidden_widths[l] : c.resolved_output_width(1 << n_ions);
        auto& layer = conn.emplace_back(static_cast<std::size_t>(width));
        for (auto& neuron : layer) {
            neuron.resize(static_cast<std::size_t>(c.subneurons));
            for (auto& idx : neuron) {
                idx.resize(static_cast<std::size_t>(c.fan_in));
                for (auto& v : idx) v = r.u32();
            }
        }
        prev = width;
    }
    (void)prev;
    PolyMlpModel m;
    try {
        m = make_model(c, input_width, n_ions, conn, lo, hi);
    } catch (const Error& e) {
        throw ParseError(ParseErrorKind::Malformed, context + ": " + e.what());
    }
    const auto n = r.u64();
    if (n != m.coeffs.size()) throw ParseError(ParseErrorKind::Malformed, context + ": coefficient count mismatch");
    r.require(n * 8, "coefficients");
    for (auto& v : m.coeffs) v = r.f64();
    r.expect_end();
    return m;
}

void save_model(const PolyMlpModel& model, const std::filesystem::path& path) {
    io::write_file(path, serialize_model(model));
}

PolyMlpModel load_model(const std::filesystem::path& path) {
    return deserialize_model(io::read_file(path), path.string());
}

} // namespace qdetect::polymlp
