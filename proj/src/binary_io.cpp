#include "qdetect/binary_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

#include "qdetect/error.hpp"

namespace qdetect::io {

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::require(std::size_t n, std::string_view what) {
    if (remaining() < n) {
        throw ParseError(ParseErrorKind::Truncated,
                         context_ + ": truncated while reading " + std::string(what) + " (need " +
                             std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                             ", have " + std::to_string(remaining()) + ")");
    }
}

std::uint64_t ByteReader::get(int n) {
    require(static_cast<std::size_t>(n), "field");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
}

void ByteReader::expect_magic(std::string_view magic) {
    std::string found;
    for (std::size_t i = 0; i < magic.size() && pos_ + i < data_.size(); ++i)
        found.push_back(static_cast<char>(data_[pos_ + i]));
    if (found != magic) {
        std::string printable;
        for (char c : found) printable.push_back((c >= 32 && c < 127) ? c : '?');
        throw ParseError(ParseErrorKind::BadMagic, context_ + ": bad magic, expected \"" +
                                                       std::string(magic) + "\", found \"" +
                                                       printable + "\"");
    }
    pos_ += magic.size();
}

void ByteReader::expect_version(std::uint16_t supported) {
    const auto v = u16();
    if (v != supported) {
        throw ParseError(ParseErrorKind::VersionMismatch,
                         context_ + ": format version " + std::to_string(v) +
                             " is not supported (expected " + std::to_string(supported) + ")");
    }
}

void ByteReader::expect_end() {
    if (remaining() != 0) {
        throw ParseError(ParseErrorKind::Malformed,
                         context_ + ": " + std::to_string(remaining()) + " trailing bytes");
    }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string() + " for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string() + " for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw Error("write failed: " + path.string());
}

std::string peek_magic(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string() + " for reading");
    char buf[4] = {};
    in.read(buf, 4);
    return std::string(buf, static_cast<std::size_t>(in.gcount()));
}

} // namespace qdetect::io
