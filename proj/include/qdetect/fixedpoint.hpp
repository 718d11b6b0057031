#pragma once

// Bit-exact emulation of signed two's-complement fixed-point arithmetic in the
// style of ap_fixed<T, I>: a value is an integer code scaled by 2^-fraction_bits.
//
// Rounding happens only where a result is narrowed back into the format:
// quantize(), mul(), and the single terminal rounding of an Accumulator.
// Every narrowing saturates instead of wrapping.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>

namespace qdetect::fixed {

enum class Rounding {
    NearestEven, // default; ties go to the even code
    Truncate,    // floor toward -inf, the hardware default, for sensitivity studies
};

struct FixedFormat {
    int total_bits = 16;
    int fraction_bits = 8;

    // Throws ConfigError unless 1 <= fraction_bits < total_bits <= 64.
    void validate() const;

    std::int64_t max_code() const;
    std::int64_t min_code() const;
    double resolution() const;

    // Parses "T.F", e.g. "16.8".
    static FixedFormat parse(std::string_view descriptor);
    std::string str() const;

    friend bool operator==(const FixedFormat&, const FixedFormat&) = default;
};

class FixedValue {
public:
    FixedValue() = default;
    // Throws DomainError if the code does not fit the format.
    FixedValue(std::int64_t code, FixedFormat fmt);

    std::int64_t code() const { return code_; }
    const FixedFormat& format() const { return fmt_; }
    double to_real() const;

    friend bool operator==(const FixedValue&, const FixedValue&) = default;

private:
    std::int64_t code_ = 0;
    FixedFormat fmt_{};
};

// Clamp a wide integer into the format's code range.
std::int64_t saturate(__int128 code, const FixedFormat& fmt, bool* saturated = nullptr);

// Arithmetic right shift of `v` by `shift` bits with the given rounding.
__int128 round_shift(__int128 v, int shift, Rounding mode = Rounding::NearestEven);

// Round-to-nearest-even on the code, then saturate. NaN throws DomainError.
FixedValue quantize(double x, const FixedFormat& fmt, Rounding mode = Rounding::NearestEven,
                    bool* saturated = nullptr);
std::int64_t quantize_code(double x, const FixedFormat& fmt, Rounding mode = Rounding::NearestEven,
                           bool* saturated = nullptr);

// Format mismatch throws UsageError.
FixedValue add(const FixedValue& a, const FixedValue& b);
FixedValue sub(const FixedValue& a, const FixedValue& b);
FixedValue mul(const FixedValue& a, const FixedValue& b, Rounding mode = Rounding::NearestEven);
FixedValue mac_accumulate(std::span<const std::pair<FixedValue, FixedValue>> terms,
                          Rounding mode = Rounding::NearestEven);

// Code-level helpers used by the fixed-point inference kernels.
std::int64_t add_codes(std::int64_t a, std::int64_t b, const FixedFormat& fmt);
std::int64_t mul_codes(std::int64_t a, std::int64_t b, const FixedFormat& fmt,
                       Rounding mode = Rounding::NearestEven);

// Double-width dot-product accumulator: products are summed exactly (each
// carries 2*fraction_bits fraction bits) and narrowed once by result().
class Accumulator {
public:
    explicit Accumulator(FixedFormat fmt, Rounding mode = Rounding::NearestEven)
        : fmt_(fmt), mode_(mode) {}

    void mac(std::int64_t a, std::int64_t b);
    // Adds a code already in the target format (e.g. a bias).
    void add(std::int64_t code);
    std::int64_t result(bool* saturated = nullptr) const;
    __int128 raw() const { return acc_; }

private:
    FixedFormat fmt_;
    Rounding mode_;
    __int128 acc_ = 0;
};

// Thread-local arithmetic-mode guard. While a FixedOnlyScope is alive on a
// thread, the float-producing entry points of this module (to_real,
// quantize) throw UsageError. The fixed-point evaluators run under it to
// prove the path between input quantization and logits is integer-only.
class FixedOnlyScope {
public:
    FixedOnlyScope();
    ~FixedOnlyScope();
    FixedOnlyScope(const FixedOnlyScope&) = delete;
    FixedOnlyScope& operator=(const FixedOnlyScope&) = delete;

    static bool active();

private:
    bool previous_;
};

void require_float_allowed(const char* where);

} // namespace qdetect::fixed
