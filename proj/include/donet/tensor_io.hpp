#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "donet/tensor.hpp"

namespace donet {

// Tensor dump: "DOT1", four little-endian u32 extents (N, C, H, W), then the
// row-major values as little-endian IEEE-754 binary32.
void write_tensor_dump(std::ostream& os, const Tensorf& t);
Tensorf read_tensor_dump(std::istream& is);

std::vector<std::uint8_t> encode_tensor_dump(const Tensorf& t);
Tensorf decode_tensor_dump(const std::vector<std::uint8_t>& bytes);

}  // namespace donet
