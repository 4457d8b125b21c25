#include "lsms/rle.hpp"

#include <string>

#include "lsms/errors.hpp"

namespace lsms {

std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t> &mask) {
    std::vector<std::uint32_t> runs;
    std::uint8_t current = 0;
    std::uint32_t length = 0;
    for (auto v : mask) {
        const std::uint8_t bit = v ? 1 : 0;
        if (bit != current) {
            runs.push_back(length);
            current = bit;
            length = 0;
        }
        ++length;
    }
    if (length > 0 || runs.empty()) runs.push_back(length);
    return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t> &runs, std::size_t length) {
    if (runs.empty()) throw Error(ErrorCode::MalformedRecord, "empty run list");
    std::vector<std::uint8_t> mask;
    mask.reserve(length);
    std::uint8_t value = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (i > 0 && runs[i] == 0) {
            throw Error(ErrorCode::MalformedRecord, "zero-length run at position " + std::to_string(i));
        }
        if (mask.size() + runs[i] > length) {
            throw Error(ErrorCode::MalformedRecord, "runs exceed " + std::to_string(length) + " pixels");
        }
        mask.insert(mask.end(), runs[i], value);
        value ^= 1;
    }
    if (mask.size() != length) {
        throw Error(ErrorCode::MalformedRecord, "runs do not cover " + std::to_string(length) + " pixels");
    }
    return mask;
}

}  // namespace lsms
