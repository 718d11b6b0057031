#include "qdetect/fixedpoint.hpp"

#include <charconv>
#include <cmath>
#include <limits>

#include "qdetect/error.hpp"

namespace qdetect::fixed {

namespace {

thread_local bool g_fixed_only = false;

void check_same(const FixedFormat& a, const FixedFormat& b, const char* op) {
    if (!(a == b)) {
        throw UsageError(std::string("fixed ") + op + ": format mismatch " + a.str() + " vs " + b.str());
    }
}

} // namespace

void FixedFormat::validate() const {
    if (!(1 <= fraction_bits && fraction_bits < total_bits && total_bits <= 64)) {
        throw ConfigError("invalid fixed format " + str() +
                          ": need 1 <= fraction_bits < total_bits <= 64");
    }
}

std::int64_t FixedFormat::max_code() const {
    return total_bits == 64 ? std::numeric_limits<std::int64_t>::max()
                            : (std::int64_t{1} << (total_bits - 1)) - 1;
}

std::int64_t FixedFormat::min_code() const {
    return total_bits == 64 ? std::numeric_limits<std::int64_t>::min()
                            : -(std::int64_t{1} << (total_bits - 1));
}

double FixedFormat::resolution() const { return std::ldexp(1.0, -fraction_bits); }

FixedFormat FixedFormat::parse(std::string_view descriptor) {
    const auto dot = descriptor.find('.');
    FixedFormat fmt{};
    auto parse_int = [&](std::string_view s, int& out) {
        const auto* end = s.data() + s.size();
        auto [p, ec] = std::from_chars(s.data(), end, out);
        return ec == std::errc() && p == end && !s.empty();
    };
    if (dot == std::string_view::npos || !parse_int(descriptor.substr(0, dot), fmt.total_bits) ||
        !parse_int(descriptor.substr(dot + 1), fmt.fraction_bits)) {
        throw ConfigError("malformed fixed format descriptor \"" + std::string(descriptor) +
                          "\" (expected T.F, e.g. 16.8)");
    }
    fmt.validate();
    return fmt;
}

std::string FixedFormat::str() const {
    return std::to_string(total_bits) + "." + std::to_string(fraction_bits);
}

FixedValue::FixedValue(std::int64_t code, FixedFormat fmt) : code_(code), fmt_(fmt) {
    fmt_.validate();
    if (code < fmt_.min_code() || code > fmt_.max_code()) {
        throw DomainError("code " + std::to_string(code) + " not representable in " + fmt_.str());
    }
}

double FixedValue::to_real() const {
    require_float_allowed("FixedValue::to_real");
    return std::ldexp(static_cast<double>(code_), -fmt_.fraction_bits);
}

std::int64_t saturate(__int128 code, const FixedFormat& fmt, bool* saturated) {
    const __int128 hi = fmt.max_code();
    const __int128 lo = fmt.min_code();
    if (code > hi || code < lo) {
        if (saturated) *saturated = true;
        return static_cast<std::int64_t>(code > hi ? hi : lo);
    }
    return static_cast<std::int64_t>(code);
}

__int128 round_shift(__int128 v, int shift, Rounding mode) {
    if (shift <= 0) return v << (-shift);
    // >> on negative __int128 is arithmetic with GCC/Clang, i.e. floor division.
    const __int128 floor = v >> shift;
    if (mode == Rounding::Truncate) return floor;
    const __int128 rem = v - (floor << shift); // in [0, 2^shift)
    const __int128 half = __int128{1} << (shift - 1);
    if (rem > half) return floor + 1;
    if (rem < half) return floor;
    return (floor & 1) ? floor + 1 : floor;
}

std::int64_t quantize_code(double x, const FixedFormat& fmt, Rounding mode, bool* saturated) {
    require_float_allowed("fixed::quantize");
    if (std::isnan(x)) throw DomainError("cannot quantize NaN");
    fmt.validate();
    // Scaling by a power of two is exact unless it overflows to infinity.
    const double scaled = std::ldexp(x, fmt.fraction_bits);
    const double rounded = mode == Rounding::NearestEven ? std::nearbyint(scaled) : std::floor(scaled);
    // Compare in double before converting so huge values never hit UB.
    const double hi = std::ldexp(1.0, fmt.total_bits - 1);
    if (rounded >= hi) {
        if (saturated) *saturated = true;
        return fmt.max_code();
    }
    if (rounded < -hi) {
        if (saturated) *saturated = true;
        return fmt.min_code();
    }
    return static_cast<std::int64_t>(rounded);
}

FixedValue quantize(double x, const FixedFormat& fmt, Rounding mode, bool* saturated) {
    return FixedValue(quantize_code(x, fmt, mode, saturated), fmt);
}

std::int64_t add_codes(std::int64_t a, std::int64_t b, const FixedFormat& fmt) {
    return saturate(static_cast<__int128>(a) + b, fmt);
}

std::int64_t mul_codes(std::int64_t a, std::int64_t b, const FixedFormat& fmt, Rounding mode) {
    const __int128 wide = static_cast<__int128>(a) * b;
    return saturate(round_shift(wide, fmt.fraction_bits, mode), fmt);
}

FixedValue add(const FixedValue& a, const FixedValue& b) {
    check_same(a.format(), b.format(), "add");
    return FixedValue(add_codes(a.code(), b.code(), a.format()), a.format());
}

FixedValue sub(const FixedValue& a, const FixedValue& b) {
    check_same(a.format(), b.format(), "sub");
    return FixedValue(saturate(static_cast<__int128>(a.code()) - b.code(), a.format()), a.format());
}

FixedValue mul(const FixedValue& a, const FixedValue& b, Rounding mode) {
    check_same(a.format(), b.format(), "mul");
    return FixedValue(mul_codes(a.code(), b.code(), a.format(), mode), a.format());
}

FixedValue mac_accumulate(std::span<const std::pair<FixedValue, FixedValue>> terms, Rounding mode) {
    if (terms.empty()) return FixedValue(0, FixedFormat{});
    const FixedFormat fmt = terms.front().first.format();
    Accumulator acc(fmt, mode);
    for (const auto& [a, b] : terms) {
        check_same(a.format(), fmt, "mac");
        check_same(b.format(), fmt, "mac");
        acc.mac(a.code(), b.code());
    }
    return FixedValue(acc.result(), fmt);
}

void Accumulator::mac(std::int64_t a, std::int64_t b) {
    const __int128 p = static_cast<__int128>(a) * b;
    if (__builtin_add_overflow(acc_, p, &acc_)) {
        throw UsageError("fixed accumulator overflowed 128 bits");
    }
}

void Accumulator::add(std::int64_t code) {
    const __int128 shifted = static_cast<__int128>(code) << fmt_.fraction_bits;
    if (__builtin_add_overflow(acc_, shifted, &acc_)) {
        throw UsageError("fixed accumulator overflowed 128 bits");
    }
}

std::int64_t Accumulator::result(bool* saturated) const {
    return saturate(round_shift(acc_, fmt_.fraction_bits, mode_), fmt_, saturated);
}

FixedOnlyScope::FixedOnlyScope() : previous_(g_fixed_only) { g_fixed_only = true; }
FixedOnlyScope::~FixedOnlyScope() { g_fixed_only = previous_; }
bool FixedOnlyScope::active() { return g_fixed_only; }

void require_float_allowed(const char* where) {
    if (g_fixed_only) {
        throw UsageError(std::string(where) + " called inside a fixed-point-only region");
    }
}

} // namespace qdetect::fixed
