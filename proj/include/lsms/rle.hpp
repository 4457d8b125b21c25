#pragma once

#include <cstdint>
#include <vector>

namespace lsms {

// Row-major binary mask as alternating run lengths, starting with a run of
// zeros (possibly of length 0). Runs after the first are positive.
std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t> &mask);

// Throws MalformedRecord if the runs do not sum to `length` or a run after
// the first is zero.
std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t> &runs, std::size_t length);

}  // namespace lsms
