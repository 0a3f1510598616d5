#include "dmt/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace dmt {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'T', '1'};

void put_u32_le(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void tensor_write(const std::filesystem::path& path, const Tensor& t) {
    if (t.empty()) throw ShapeMismatch("cannot write an empty tensor");
    std::vector<unsigned char> buf;
    buf.reserve(8 + 4 * t.shape().size() + 4 * t.size());
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put_u32_le(buf, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32_le(buf, static_cast<std::uint32_t>(d));
    for (float v : t.data()) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
        put_u32_le(buf, bits);
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

Tensor tensor_read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    if (buf.size() < 8) throw MalformedHeader("file too short for a DMT1 header: " + path.string());
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw MalformedHeader("bad magic in " + path.string());
    }
    std::uint32_t rank = get_u32_le(buf.data() + 4);
    if (rank < 1 || rank > 4) {
        throw MalformedHeader("unsupported rank " + std::to_string(rank) + " in " + path.string());
    }
    std::size_t header = 8 + 4 * static_cast<std::size_t>(rank);
    if (buf.size() < header) throw MalformedHeader("header truncated in " + path.string());

    std::vector<int> shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d = get_u32_le(buf.data() + 8 + 4 * i);
        if (d == 0 || d > 0x7fffffffu) throw MalformedHeader("bad dim in " + path.string());
        shape.push_back(static_cast<int>(d));
        count *= d;
    }

    std::size_t payload = buf.size() - header;
    if (payload < 4 * count) {
        throw TruncatedPayload("payload short by " + std::to_string(4 * count - payload) +
                               " bytes in " + path.string());
    }
    if (payload > 4 * count) {
        throw MalformedHeader("trailing bytes after payload in " + path.string());
    }

    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = get_u32_le(buf.data() + header + 4 * i);
        data[i] = std::bit_cast<float>(bits);
        if (!std::isfinite(data[i])) {
            throw MalformedHeader("non-finite payload value in " + path.string());
        }
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace dmt
