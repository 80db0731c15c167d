#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "adrmx/error.hpp"
#include "adrmx/io.hpp"

namespace adrmx {

/// Decoded IDX payload: unsigned-byte tensor plus its dimension sizes.
struct IdxData {
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> values;

    std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
};

namespace detail {

inline std::string hex_u32(std::uint32_t v) {
    std::ostringstream out;
    out << "0x";
    for (int shift = 28; shift >= 0; shift -= 4) out << "0123456789abcdef"[(v >> shift) & 0xF];
    return out.str();
}

}  // namespace detail

/// Parse an IDX byte stream. Accepts the two unsigned-byte layouts used by
/// the MNIST distribution: magic 0x00000801 (1-D labels) and 0x00000803
/// (3-D images). All header integers are big-endian.
inline IdxData parse_idx(const std::vector<std::uint8_t>& bytes) {
    io::ByteReader reader(bytes, "idx stream");
    const std::uint32_t magic = reader.u32_be();
    std::size_t ndims;
    if (magic == 0x00000801u) {
        ndims = 1;
    } else if (magic == 0x00000803u) {
        ndims = 3;
    } else {
        throw FormatError("idx stream: unsupported magic " + detail::hex_u32(magic) +
                          " (expected 0x00000801 or 0x00000803)");
    }
    IdxData out;
    std::size_t total = 1;
    for (std::size_t i = 0; i < ndims; ++i) {
        const std::uint32_t dim = reader.u32_be();
        out.dims.push_back(dim);
        total *= dim;
    }
    if (reader.remaining() != total) {
        throw LengthError("idx stream: payload holds " + std::to_string(reader.remaining()) +
                          " bytes, header promises " + std::to_string(total));
    }
    const std::uint8_t* payload = reader.take(total);
    out.values.assign(payload, payload + total);
    return out;
}

/// Inverse of parse_idx: serialize(parse(bytes)) == bytes for valid input.
inline std::vector<std::uint8_t> serialize_idx(const IdxData& data) {
    std::uint32_t magic;
    if (data.dims.size() == 1) {
        magic = 0x00000801u;
    } else if (data.dims.size() == 3) {
        magic = 0x00000803u;
    } else {
        throw FormatError("idx serialize: only 1-D and 3-D unsigned-byte layouts are supported");
    }
    std::size_t total = 1;
    for (const std::size_t d : data.dims) total *= d;
    if (total != data.values.size()) {
        throw LengthError("idx serialize: dims promise " + std::to_string(total) + " values, got " +
                          std::to_string(data.values.size()));
    }
    std::vector<std::uint8_t> out;
    io::put_u32_be(out, magic);
    for (const std::size_t d : data.dims) io::put_u32_be(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), data.values.begin(), data.values.end());
    return out;
}

/// Load an MNIST-style image/label file pair into [0,1] floats.
struct MnistPair {
    std::size_t count = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> images;  // count * rows * cols, scaled to [0,1]
    std::vector<int> labels;     // count
};

inline MnistPair load_mnist_pair(const std::vector<std::uint8_t>& image_bytes,
                                 const std::vector<std::uint8_t>& label_bytes) {
    const IdxData images = parse_idx(image_bytes);
    const IdxData labels = parse_idx(label_bytes);
    if (images.dims.size() != 3) throw FormatError("mnist: image file must be 3-D");
    if (labels.dims.size() != 1) throw FormatError("mnist: label file must be 1-D");
    if (images.dims[0] != labels.dims[0]) {
        throw LengthError("mnist: " + std::to_string(images.dims[0]) + " images but " +
                          std::to_string(labels.dims[0]) + " labels");
    }
    MnistPair out;
    out.count = images.dims[0];
    out.rows = images.dims[1];
    out.cols = images.dims[2];
    out.images.reserve(images.values.size());
    for (const std::uint8_t v : images.values) out.images.push_back(static_cast<double>(v) / 255.0);
    out.labels.reserve(labels.values.size());
    for (const std::uint8_t v : labels.values) out.labels.push_back(static_cast<int>(v));
    return out;
}

}  // namespace adrmx
