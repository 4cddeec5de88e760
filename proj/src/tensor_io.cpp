#include "donet/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace donet {

namespace {

constexpr char kMagic[4] = {'D', 'O', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("tensor dump: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor_dump(std::ostream& os, const Tensorf& t) {
    os.write(kMagic, 4);
    for (std::size_t d : t.shape().dims()) {
        if (d > std::numeric_limits<std::uint32_t>::max()) throw SizeError("tensor dump: extent exceeds 32 bits");
        put_u32(os, static_cast<std::uint32_t>(d));
    }
    for (float v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
    if (!os) throw DataError("tensor dump: write failed");
}

Tensorf read_tensor_dump(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("tensor dump: bad magic");
    Shape s;
    s.n = get_u32(is);
    s.c = get_u32(is);
    s.h = get_u32(is);
    s.w = get_u32(is);
    std::vector<float> data(s.numel());
    for (auto& v : data) v = std::bit_cast<float>(get_u32(is));
    return Tensorf::from_data(s, std::move(data));
}

std::vector<std::uint8_t> encode_tensor_dump(const Tensorf& t) {
    std::ostringstream os(std::ios::binary);
    write_tensor_dump(os, t);
    const std::string s = os.str();
    return {s.begin(), s.end()};
}

Tensorf decode_tensor_dump(const std::vector<std::uint8_t>& bytes) {
    std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
    return read_tensor_dump(is);
}

}  // namespace donet
