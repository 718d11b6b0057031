#include "qdetect/lut.hpp"

#include <sstream>

#include "qdetect/binary_io.hpp"
#include "qdetect/error.hpp"

namespace qdetect::lut {

using polymlp::MonomialBasis;
using polymlp::PolyMlpModel;

std::size_t LutNetwork::entries_per_neuron(std::size_t layer) const {
    const auto& l = layers.at(layer);
    if (l.neurons.empty()) return 0;
    std::size_t n = l.neurons.front().adder.size();
    for (const auto& t : l.neurons.front().subs) n += t.size();
    return n;
}

std::size_t LutNetwork::total_entries() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) n += entries_per_neuron(l) * layers[l].neurons.size();
    return n;
}

std::size_t LutNetwork::lookups_per_inference() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        for (const auto& neuron : l.neurons) n += neuron.subs.size() + 1;
    return n;
}

namespace {

int bits_for(std::uint32_t max_value) {
    int b = 1;
    while ((max_value >> b) != 0) ++b;
    return b;
}

std::uint32_t pack(std::span<const std::uint16_t> codes, std::span<const std::uint32_t> wiring, int bits) {
    std::uint32_t address = 0;
    for (std::size_t k = 0; k < wiring.size(); ++k) address |= static_cast<std::uint32_t>(codes[wiring[k]]) << (k * bits);
    return address;
}

} // namespace

LutNetwork compile_truth_tables(const PolyMlpModel& model) {
    const auto& cfg = model.config;
    const int A = cfg.subneurons;
    const int F = cfg.fan_in;
    const int beta = cfg.activation_bits;
    const MonomialBasis basis(F, cfg.poly_degree);
    std::vector<double> x(static_cast<std::size_t>(F)), phi(basis.size());

    LutNetwork net;
    net.input_width = model.input_width;
    net.n_ions = model.n_ions;
    net.n_classes = model.n_classes;
    net.input_bits = beta;
    net.input_lo = model.input_lo;
    net.input_hi = model.input_hi;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const auto& layer = model.layers[li];
        LutLayer out;
        out.input_width = layer.input_width;
        out.fan_in = F;
        out.input_bits = beta;
        out.sub_bits = layer.sub_q.bits;
        out.output = layer.output;
        const std::uint32_t sub_addresses = 1u << (beta * F);
        const std::uint32_t adder_addresses = 1u << (A * layer.sub_q.bits);
        const std::uint32_t mask = (1u << beta) - 1u;
        for (int j = 0; j < layer.width; ++j) {
            LutNeuron neuron;
            for (int a = 0; a < A; ++a) {
                const auto& s = layer.sub(j, a, A);
                const auto coeffs = model.sub_coeffs(s);
                LutTable t{beta * F, layer.sub_q.bits, std::vector<std::uint16_t>(sub_addresses)};
                for (std::uint32_t addr = 0; addr < sub_addresses; ++addr) {
                    for (int k = 0; k < F; ++k) x[k] = layer.input_q.value((addr >> (k * beta)) & mask);
                    basis.expand(x, phi);
                    double p = 0.0;
                    for (std::size_t m = 0; m < phi.size(); ++m) p += coeffs[m] * phi[m];
                    t.entries[addr] = static_cast<std::uint16_t>(layer.sub_q.code(p));
                }
                neuron.sub_inputs.push_back(s.inputs);
                neuron.subs.push_back(std::move(t));
            }
            const int adder_out = layer.output ? bits_for(static_cast<std::uint32_t>(A * (layer.sub_q.levels() - 1)))
                                               : beta;
            neuron.adder = LutTable{A * layer.sub_q.bits, adder_out, std::vector<std::uint16_t>(adder_addresses)};
            for (std::uint32_t addr = 0; addr < adder_addresses; ++addr)
                neuron.adder.entries[addr] = static_cast<std::uint16_t>(polymlp::reference_adder_code(model, li, addr));
            out.neurons.push_back(std::move(neuron));
        }
        net.layers.push_back(std::move(out));
    }
    return net;
}

std::vector<std::uint16_t> quantize_image(const LutNetwork& net, const IonImage& image) {
    if (static_cast<int>(image.pixels.size()) != net.input_width) {
        throw ShapeError("image has " + std::to_string(image.pixels.size()) + " pixels, network expects " +
                         std::to_string(net.input_width));
    }
    std::vector<std::uint16_t> codes(image.pixels.size());
    for (std::size_t i = 0; i < codes.size(); ++i)
        codes[i] = static_cast<std::uint16_t>(
            polymlp::input_code(image.pixels.data[i], net.input_lo, net.input_hi, net.input_bits));
    return codes;
}

std::vector<std::uint32_t> eval_codes(const LutNetwork& net, std::span<const std::uint16_t> input_codes,
                                      std::size_t* lookups) {
    if (static_cast<int>(input_codes.size()) != net.input_width) {
        throw ShapeError("lut evaluation: " + std::to_string(input_codes.size()) + " inputs, network expects " +
                         std::to_string(net.input_width));
    }
    std::size_t reads = 0;
    std::vector<std::uint16_t> current(input_codes.begin(), input_codes.end());
    std::vector<std::uint32_t> result;
    for (const auto& layer : net.layers) {
        std::vector<std::uint16_t> next(layer.neurons.size());
        for (std::size_t j = 0; j < layer.neurons.size(); ++j) {
            const auto& neuron = layer.neurons[j];
            std::uint32_t adder_address = 0;
            for (std::size_t a = 0; a < neuron.subs.size(); ++a) {
                const auto code = neuron.subs[a].lookup(pack(current, neuron.sub_inputs[a], layer.input_bits));
                adder_address |= static_cast<std::uint32_t>(code) << (a * layer.sub_bits);
                ++reads;
            }
            next[j] = neuron.adder.lookup(adder_address);
            ++reads;
        }
        if (layer.output) result.assign(next.begin(), next.end());
        current = std::move(next);
    }
    if (lookups) *lookups = reads;
    return result;
}

QubitState eval_lut(const LutNetwork& net, std::span<const std::uint16_t> input_codes, std::size_t* lookups) {
    const auto sums = eval_codes(net, input_codes, lookups);
    int best = 0;
    for (int c = 1; c < net.n_classes; ++c)
        if (sums[c] > sums[best]) best = c;
    return QubitState(net.n_ions, static_cast<std::uint32_t>(best));
}

QubitState eval_lut(const LutNetwork& net, const IonImage& image, std::size_t* lookups) {
    return eval_lut(net, quantize_image(net, image), lookups);
}

std::string Mismatch::str() const {
    std::ostringstream os;
    os << "layer " << layer << " neuron " << neuron << " " << (table < 0 ? std::string("adder") : "sub " + std::to_string(table))
       << " address " << address << ": table " << actual << ", arithmetic " << expected;
    return os.str();
}

std::string EquivalenceReport::summary() const {
    std::ostringstream os;
    os << tables_checked << " tables, " << entries_checked << " entries, " << mismatches.size() << " mismatches";
    if (!mismatches.empty()) os << "; first: " << mismatches.front().str();
    return os.str();
}

EquivalenceReport verify_equivalence(const PolyMlpModel& model, const LutNetwork& net) {
    const auto& cfg = model.config;
    const int A = cfg.subneurons;
    if (net.layers.size() != model.layers.size() || net.input_width != model.input_width)
        throw ShapeError("lut network and model have different topologies");
    EquivalenceReport rep;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const auto& ml = model.layers[li];
        const auto& nl = net.layers[li];
        if (nl.width() != ml.width) throw ShapeError("layer " + std::to_string(li) + " width differs");
        for (int j = 0; j < ml.width; ++j) {
            const auto& neuron = nl.neurons[j];
            if (static_cast<int>(neuron.subs.size()) != A) throw ShapeError("sub-neuron count differs");
            for (int a = 0; a < A; ++a) {
                if (neuron.sub_inputs[a] != ml.sub(j, a, A).inputs)
                    throw ShapeError("wiring of layer " + std::to_string(li) + " neuron " + std::to_string(j) + " differs");
                const auto& t = neuron.subs[a];
                if (t.size() != (std::size_t{1} << (cfg.activation_bits * cfg.fan_in)))
                    throw ShapeError("sub-neuron table size differs");
                for (std::uint32_t addr = 0; addr < t.size(); ++addr) {
                    const auto expected = polymlp::reference_sub_code(model, li, j, a, addr);
                    if (expected != t.entries[addr])
                        rep.mismatches.push_back({li, static_cast<std::size_t>(j), a, addr, expected, t.entries[addr]});
                }
                rep.entries_checked += t.size();
                ++rep.tables_checked;
            }
            const auto& adder = neuron.adder;
            if (adder.size() != (std::size_t{1} << (A * ml.sub_q.bits))) throw ShapeError("adder table size differs");
            for (std::uint32_t addr = 0; addr < adder.size(); ++addr) {
                const auto expected = polymlp::reference_adder_code(model, li, addr);
                if (expected != adder.entries[addr])
                    rep.mismatches.push_back({li, static_cast<std::size_t>(j), -1, addr, expected, adder.entries[addr]});
            }
            rep.entries_checked += adder.size();
            ++rep.tables_checked;
        }
    }
    return rep;
}

void require_equivalent(const EquivalenceReport& report) {
    if (!report.ok()) throw EquivalenceError("truth tables disagree with the model: " + report.mismatches.front().str());
}

AgreementReport end_to_end_agreement(const PolyMlpModel& model, const LutNetwork& net,
                                     std::span<const IonImage> images) {
    AgreementReport rep;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto a = polymlp::predict(model, images[i]);
        const auto b = eval_lut(net, images[i]);
        ++rep.samples;
        if (a == b) ++rep.agree;
        else if (!rep.first_disagreement) rep.first_disagreement = i;
    }
    return rep;
}

std::vector<std::uint8_t> serialize_lut(const LutNetwork& net) {
    io::ByteWriter w;
    w.magic("QLUT");
    w.u16(kLutVersion);
    w.u32(static_cast<std::uint32_t>(net.input_width));
    w.u8(static_cast<std::uint8_t>(net.n_ions));
    w.u8(static_cast<std::uint8_t>(net.input_bits));
    w.f64(net.input_lo);
    w.f64(net.input_hi);
    w.u16(static_cast<std::uint16_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        w.u32(static_cast<std::uint32_t>(l.input_width));
        w.u32(static_cast<std::uint32_t>(l.width()));
        w.u8(l.output ? 1 : 0);
        w.u8(static_cast<std::uint8_t>(l.fan_in));
        w.u8(static_cast<std::uint8_t>(l.input_bits));
        w.u8(static_cast<std::uint8_t>(l.sub_bits));
        w.u8(static_cast<std::uint8_t>(l.neurons.empty() ? 0 : l.neurons.front().subs.size()));
        w.u8(static_cast<std::uint8_t>(l.neurons.empty() ? 0 : l.neurons.front().adder.out_bits));
    }
    for (const auto& l : net.layers) {
        for (const auto& n : l.neurons) {
            for (std::size_t a = 0; a < n.subs.size(); ++a) {
                for (auto idx : n.sub_inputs[a]) w.u32(idx);
                for (auto e : n.subs[a].entries) w.u16(e);
            }
            for (auto e : n.adder.entries) w.u16(e);
        }
    }
    return w.take();
}

LutNetwork deserialize_lut(std::span<const std::uint8_t> bytes, const std::string& context) {
    io::ByteReader r(bytes, context);
    r.expect_magic("QLUT");
    r.expect_version(kLutVersion);
    LutNetwork net;
    net.input_width = static_cast<int>(r.u32());
    net.n_ions = r.u8();
    net.input_bits = r.u8();
    net.input_lo = r.f64();
    net.input_hi = r.f64();
    if (net.n_ions < 1 || net.n_ions > 8) throw ParseError(ParseErrorKind::Malformed, context + ": bad ion count");
    net.n_classes = 1 << net.n_ions;
    struct Shape {
        int width, subs, adder_out;
    };
    std::vector<Shape> shapes(r.u16());
    int prev = net.input_width;
    for (auto& sh : shapes) {
        LutLayer l;
        l.input_width = static_cast<int>(r.u32());
        sh.width = static_cast<int>(r.u32());
        l.output = r.u8() != 0;
        l.fan_in = r.u8();
        l.input_bits = r.u8();
        l.sub_bits = r.u8();
        sh.subs = r.u8();
        sh.adder_out = r.u8();
        if (l.input_width != prev || l.fan_in < 1 || l.input_bits < 1 || l.sub_bits < 1 || sh.subs < 1 ||
            l.input_bits * l.fan_in > 20 || sh.subs * l.sub_bits > 20)
            throw ParseError(ParseErrorKind::Malformed, context + ": inconsistent layer header");
        prev = sh.width;
        net.layers.push_back(l);
    }
    if (net.layers.empty() || !net.layers.back().output || prev < net.n_classes)
        throw ParseError(ParseErrorKind::Malformed, context + ": missing or narrow output layer");
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        auto& l = net.layers[li];
        const auto& sh = shapes[li];
        const std::size_t sub_size = std::size_t{1} << (l.input_bits * l.fan_in);
        const std::size_t adder_size = std::size_t{1} << (sh.subs * l.sub_bits);
        for (int j = 0; j < sh.width; ++j) {
            LutNeuron n;
            for (int a = 0; a < sh.subs; ++a) {
                std::vector<std::uint32_t> wiring(static_cast<std::size_t>(l.fan_in));
                for (auto& idx : wiring) {
                    idx = r.u32();
                    if (idx >= static_cast<std::uint32_t>(l.input_width))
                        throw ParseError(ParseErrorKind::Malformed, context + ": wiring index out of range");
                }
                r.require(sub_size * 2, "sub-neuron table");
                LutTable t{l.input_bits * l.fan_in, l.sub_bits, std::vector<std::uint16_t>(sub_size)};
                for (auto& e : t.entries) e = r.u16();
                n.sub_inputs.push_back(std::move(wiring));
                n.subs.push_back(std::move(t));
            }
            r.require(adder_size * 2, "adder table");
            n.adder = LutTable{sh.subs * l.sub_bits, sh.adder_out, std::vector<std::uint16_t>(adder_size)};
            for (auto& e : n.adder.entries) e = r.u16();
            l.neurons.push_back(std::move(n));
        }
    }
    r.expect_end();
    return net;
}

void save_lut(const LutNetwork& net, const std::filesystem::path& path) { io::write_file(path, serialize_lut(net)); }

LutNetwork load_lut(const std::filesystem::path& path) { return deserialize_lut(io::read_file(path), path.string()); }

std::string netlist(const LutNetwork& net) {
    std::ostringstream os;
    os << "# lut network: " << net.input_width << " inputs x " << net.input_bits << " bits, " << net.layers.size()
       << " layers, " << net.total_entries() << " table entries\n";
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const auto& l = net.layers[li];
        const std::string src = li == 0 ? "in" : "l" + std::to_string(li - 1);
        for (std::size_t j = 0; j < l.neurons.size(); ++j) {
            const auto& n = l.neurons[j];
            const std::string name = "l" + std::to_string(li) + "_n" + std::to_string(j);
            for (std::size_t a = 0; a < n.subs.size(); ++a) {
                os << "table " << name << "_s" << a << " " << n.subs[a].in_bits << "->" << n.subs[a].out_bits
                   << " inputs";
                for (auto idx : n.sub_inputs[a]) os << " " << src << "[" << idx << "]";
                os << "\n ";
                for (auto e : n.subs[a].entries) os << " " << e;
                os << "\n";
            }
            os << "table " << name << "_add " << n.adder.in_bits << "->" << n.adder.out_bits << " inputs";
            for (std::size_t a = 0; a < n.subs.size(); ++a) os << " " << name << "_s" << a;
            os << "\n ";
            for (auto e : n.adder.entries) os << " " << e;
            os << "\n";
        }
    }
    return os.str();
}

} // namespace qdetect::lut
