#include "qdetect/vit_fixed.hpp"

#include <cmath>

#include "qdetect/binary_io.hpp"
#include "qdetect/error.hpp"

namespace qdetect::vit {

using fixed::Accumulator;
using fixed::FixedFormat;

namespace {

constexpr std::uint8_t kFixedKind = 1;
constexpr int kReciprocalGuardBits = 16;

struct Quantizer {
    FixedFormat fmt;
    std::uint64_t saturated = 0;

    CodeMatrix operator()(const Mat& m) {
        CodeMatrix out(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
        for (int r = 0; r < out.rows; ++r)
            for (int c = 0; c < out.cols; ++c) {
                bool sat = false;
                out.at(r, c) = fixed::quantize_code(m(r, c), fmt, fixed::Rounding::NearestEven, &sat);
                saturated += sat;
            }
        return out;
    }
};

void fold_bn(const BatchNorm& bn, double eps, Quantizer& q, CodeMatrix& scale, CodeMatrix& offset) {
    const Mat s = (bn.gamma.array() / (bn.var.array() + eps).sqrt()).matrix();
    const Mat o = (bn.beta.array() - bn.mean.array() * s.array()).matrix();
    scale = q(s);
    offset = q(o);
}

template <typename M, typename F>
void visit_codes(M& m, F&& f) {
    f(m.embed);
    f(m.pos);
    f(m.cls);
    for (auto& b : m.blocks) {
        for (auto& h : b.heads) {
            f(h.wq);
            f(h.wk);
            f(h.wv);
        }
        f(b.wo);
        f(b.bn_scale);
        f(b.bn_offset);
        f(b.w1);
        f(b.b1);
    }
    f(m.head_scale);
    f(m.head_offset);
    f(m.wh);
    f(m.bh);
}

struct Kernel {
    const FixedFormat& fmt;
    FixedRunStats* stats;

    std::int64_t finish(const Accumulator& acc) const {
        bool sat = false;
        const auto r = acc.result(&sat);
        if (sat && stats) ++stats->saturations;
        return r;
    }

    // out = a * b (+ bias row) (+ residual), one rounding per element.
    CodeMatrix matmul(const CodeMatrix& a, const CodeMatrix& b, const CodeMatrix* bias = nullptr,
                      const CodeMatrix* residual = nullptr) const {
        if (a.cols != b.rows) throw ShapeError("fixed matmul: inner dimensions differ");
        CodeMatrix out(a.rows, b.cols);
        for (int i = 0; i < a.rows; ++i)
            for (int j = 0; j < b.cols; ++j) {
                Accumulator acc(fmt);
                for (int k = 0; k < a.cols; ++k) acc.mac(a.at(i, k), b.at(k, j));
                if (bias) acc.add(bias->at(0, j));
                if (residual) acc.add(residual->at(i, j));
                out.at(i, j) = finish(acc);
            }
        return out;
    }

    // a * b^T
    CodeMatrix matmul_t(const CodeMatrix& a, const CodeMatrix& b) const {
        CodeMatrix out(a.rows, b.rows);
        for (int i = 0; i < a.rows; ++i)
            for (int j = 0; j < b.rows; ++j) {
                Accumulator acc(fmt);
                for (int k = 0; k < a.cols; ++k) acc.mac(a.at(i, k), b.at(j, k));
                out.at(i, j) = finish(acc);
            }
        return out;
    }

    CodeMatrix affine(const CodeMatrix& x, const CodeMatrix& scale, const CodeMatrix& offset) const {
        CodeMatrix out(x.rows, x.cols);
        for (int i = 0; i < x.rows; ++i)
            for (int j = 0; j < x.cols; ++j) {
                Accumulator acc(fmt);
                acc.mac(x.at(i, j), scale.at(0, j));
                acc.add(offset.at(0, j));
                out.at(i, j) = finish(acc);
            }
        return out;
    }
};

CodeMatrix head_attention(const Kernel& k, const CodeMatrix& z, const FixedHead& h, const FixedVitModel& m) {
    const CodeMatrix q = k.matmul(z, h.wq);
    const CodeMatrix kk = k.matmul(z, h.wk);
    const CodeMatrix v = k.matmul(z, h.wv);
    CodeMatrix a = k.matmul_t(q, kk);
    for (int r = 0; r < a.rows; ++r) {
        const auto row = softmax_codes(std::span<const std::int64_t>(&a.at(r, 0), static_cast<std::size_t>(a.cols)),
                                       m.exp_lut, m.format);
        std::copy(row.begin(), row.end(), &a.at(r, 0));
    }
    return k.matmul(a, v);
}

} // namespace

std::vector<std::int64_t> make_exp_lut(const FixedFormat& fmt) {
    fmt.validate();
    if (fmt.fraction_bits < kExpLutStepLog2)
        throw ConfigError("fixed softmax needs at least " + std::to_string(kExpLutStepLog2) + " fraction bits");
    std::vector<std::int64_t> lut(kExpLutSize);
    for (int i = 0; i < kExpLutSize; ++i)
        lut[i] = fixed::quantize_code(std::exp(-static_cast<double>(i) / (1 << kExpLutStepLog2)), fmt);
    return lut;
}

FixedVitModel quantize_vit(const VitModel& model, const FixedFormat& fmt) {
    fmt.validate();
    const auto& cfg = model.config;
    const auto& p = model.params;
    Quantizer q{fmt};
    FixedVitModel f;
    f.config = cfg;
    f.format = fmt;
    f.input_scale = model.input_scale;
    f.exp_lut = make_exp_lut(fmt);
    f.embed = q(p.embed);
    f.pos = q(p.pos);
    f.cls = q(p.cls);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
    for (const auto& b : p.blocks) {
        FixedBlock fb;
        for (const auto& h : b.heads) fb.heads.push_back({q(h.wq * inv_sqrt_d), q(h.wk), q(h.wv)});
        fb.wo = q(b.wo);
        fold_bn(b.bn, cfg.bn_eps, q, fb.bn_scale, fb.bn_offset);
        fb.w1 = q(b.w1);
        fb.b1 = q(b.b1);
        f.blocks.push_back(std::move(fb));
    }
    fold_bn(p.head_bn, cfg.bn_eps, q, f.head_scale, f.head_offset);
    f.wh = q(p.wh);
    f.bh = q(p.bh);
    f.saturated_params = q.saturated;
    return f;
}

std::vector<std::int64_t> softmax_codes(std::span<const std::int64_t> scores, std::span<const std::int64_t> exp_lut,
                                        const FixedFormat& fmt) {
    if (scores.empty()) return {};
    const int shift = fmt.fraction_bits - kExpLutStepLog2;
    const std::int64_t half = shift > 0 ? std::int64_t{1} << (shift - 1) : 0;
    std::size_t arg = 0;
    for (std::size_t j = 1; j < scores.size(); ++j)
        if (scores[j] > scores[arg]) arg = j;
    std::vector<std::int64_t> e(scores.size());
    __int128 sum = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        const std::int64_t index = (scores[arg] - scores[j] + half) >> shift;
        e[j] = index < static_cast<std::int64_t>(exp_lut.size()) ? exp_lut[index] : 0;
        sum += e[j];
    }
    const std::int64_t one = std::int64_t{1} << fmt.fraction_bits;
    // p_j = e_j / sum, through a reciprocal carrying extra guard bits.
    const __int128 recip = ((static_cast<__int128>(one) << kReciprocalGuardBits) + sum / 2) / sum;
    std::int64_t total = 0;
    for (auto& v : e) {
        v = static_cast<std::int64_t>(fixed::round_shift(static_cast<__int128>(v) * recip, kReciprocalGuardBits));
        total += v;
    }
    e[arg] += one - total;
    return e;
}

CodeMatrix quantize_patches(const FixedVitModel& model, const IonImage& image) {
    const Mat x = patchify(image, model.config, model.input_scale);
    Quantizer q{model.format};
    return q(x);
}

std::vector<std::int64_t> fixed_logits(const FixedVitModel& model, const CodeMatrix& patches, FixedRunStats* stats) {
    const auto& cfg = model.config;
    const auto& fmt = model.format;
    if (patches.rows != cfg.n_patches() || patches.cols != cfg.patch_area())
        throw ShapeError("patch codes do not match the model geometry");
    fixed::FixedOnlyScope guard;
    const Kernel k{fmt, stats};
    const int D = cfg.latent_dim;
    const int T = cfg.tokens();

    CodeMatrix z(T, D);
    for (int j = 0; j < D; ++j) z.at(0, j) = fixed::add_codes(model.cls.at(0, j), model.pos.at(0, j), fmt);
    for (int n = 0; n < patches.rows; ++n)
        for (int j = 0; j < D; ++j) {
            Accumulator acc(fmt);
            for (int c = 0; c < patches.cols; ++c) acc.mac(patches.at(n, c), model.embed.at(c, j));
            acc.add(model.pos.at(n + 1, j));
            z.at(n + 1, j) = k.finish(acc);
        }

    for (const auto& b : model.blocks) {
        const int d = cfg.head_dim();
        CodeMatrix o(T, b.wo.rows);
        for (std::size_t h = 0; h < b.heads.size(); ++h) {
            const CodeMatrix sa = head_attention(k, z, b.heads[h], model);
            for (int i = 0; i < T; ++i)
                for (int c = 0; c < sa.cols; ++c) {
                    if (cfg.literal_heads) o.at(i, c) = fixed::add_codes(o.at(i, c), sa.at(i, c), fmt);
                    else o.at(i, static_cast<int>(h) * d + c) = sa.at(i, c);
                }
        }
        const CodeMatrix u = k.matmul(o, b.wo, nullptr, &z); // MSA + s1
        const CodeMatrix y = k.affine(u, b.bn_scale, b.bn_offset);
        CodeMatrix l = k.matmul(y, b.w1, &b.b1);
        for (int i = 0; i < T; ++i)
            for (int j = 0; j < D; ++j) z.at(i, j) = fixed::add_codes(std::max<std::int64_t>(l.at(i, j), 0), u.at(i, j), fmt);
    }

    CodeMatrix cls(1, D);
    for (int j = 0; j < D; ++j) cls.at(0, j) = z.at(0, j);
    const CodeMatrix hn = k.affine(cls, model.head_scale, model.head_offset);
    const CodeMatrix y = k.matmul(hn, model.wh, &model.bh);
    return y.codes;
}

std::vector<std::int64_t> fixed_forward(const FixedVitModel& model, const IonImage& image, FixedRunStats* stats) {
    return fixed_logits(model, quantize_patches(model, image), stats);
}

QubitState predict_fixed(const FixedVitModel& model, const IonImage& image) {
    const auto y = fixed_forward(model, image);
    std::size_t best = 0;
    for (std::size_t c = 1; c < y.size(); ++c)
        if (y[c] > y[best]) best = c;
    int n_ions = 0;
    while ((1 << n_ions) < model.config.n_classes) ++n_ions;
    return QubitState(n_ions, static_cast<std::uint32_t>(best));
}

std::vector<double> logits_to_real(std::span<const std::int64_t> codes, const FixedFormat& fmt) {
    std::vector<double> out;
    for (auto c : codes) out.push_back(fixed::FixedValue(c, fmt).to_real());
    return out;
}

std::vector<std::uint8_t> serialize_fixed_vit(const FixedVitModel& m) {
    io::ByteWriter w;
    w.magic("QVIT");
    w.u16(kVitVersion);
    w.u8(kFixedKind);
    detail::write_config(w, m.config);
    w.f64(m.input_scale);
    w.u8(static_cast<std::uint8_t>(m.format.total_bits));
    w.u8(static_cast<std::uint8_t>(m.format.fraction_bits));
    w.u64(m.saturated_params);
    const bool narrow = m.format.total_bits <= 16;
    visit_codes(m, [&](const CodeMatrix& t) {
        w.u32(static_cast<std::uint32_t>(t.rows));
        w.u32(static_cast<std::uint32_t>(t.cols));
        for (auto c : t.codes) {
            if (narrow) w.i16(static_cast<std::int16_t>(c));
            else w.i64(c);
        }
    });
    return w.take();
}

FixedVitModel deserialize_fixed_vit(std::span<const std::uint8_t> bytes, const std::string& context) {
    io::ByteReader r(bytes, context);
    r.expect_magic("QVIT");
    r.expect_version(kVitVersion);
    if (r.u8() != kFixedKind) throw ParseError(ParseErrorKind::Malformed, context + ": not a fixed-point ViT model");
    const VitConfig cfg = detail::read_config(r);
    FixedVitModel m = quantize_vit(make_vit(cfg), FixedFormat{});
    m.input_scale = r.f64();
    m.format.total_bits = r.u8();
    m.format.fraction_bits = r.u8();
    try {
        m.exp_lut = make_exp_lut(m.format);
    } catch (const ConfigError& e) {
        throw ParseError(ParseErrorKind::Malformed, context + ": " + e.what());
    }
    m.saturated_params = r.u64();
    const bool narrow = m.format.total_bits <= 16;
    visit_codes(m, [&](CodeMatrix& t) {
        const auto rows = static_cast<int>(r.u32());
        const auto cols = static_cast<int>(r.u32());
        if (rows != t.rows || cols != t.cols)
            throw ParseError(ParseErrorKind::Malformed, context + ": tensor shape differs from the config");
        r.require(t.codes.size() * (narrow ? 2 : 8), "tensor codes");
        for (auto& c : t.codes) {
            c = narrow ? r.i16() : r.i64();
            if (c < m.format.min_code() || c > m.format.max_code())
                throw ParseError(ParseErrorKind::Malformed, context + ": code outside the declared format");
        }
    });
    r.expect_end();
    return m;
}

void save_fixed_vit(const FixedVitModel& model, const std::filesystem::path& path) {
    io::write_file(path, serialize_fixed_vit(model));
}

FixedVitModel load_fixed_vit(const std::filesystem::path& path) {
    return deserialize_fixed_vit(io::read_file(path), path.string());
}

std::uint8_t vit_file_kind(std::span<const std::uint8_t> bytes, const std::string& context) {
    io::ByteReader r(bytes, context);
    r.expect_magic("QVIT");
    r.expect_version(kVitVersion);
    return r.u8();
}

} // namespace qdetect::vit
