#pragma once

// Binary tensor files.
//
// One record ("TensorFile"), all integers little-endian:
//   "MTOK" | u16 version=1 | u8 dtype | u8 rank | rank x u32 dims | payload | u32 crc32(payload)
// dtype 0 = f32, 1 = u32, 2 = u8. Payload is row-major.
//
// A group file is "MTGP" | u16 version=1 | u32 count, followed by `count`
// entries of u16 name length, name bytes, and one TensorFile record.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "meteor/fgf.hpp"
#include "meteor/token_model.hpp"

namespace meteor {

inline constexpr char kTensorMagic[4] = {'M', 'T', 'O', 'K'};
inline constexpr char kGroupMagic[4] = {'M', 'T', 'G', 'P'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kU32 = 1, kU8 = 2 };

struct Tensor {
    std::vector<std::uint32_t> dims;
    std::variant<std::vector<float>, std::vector<std::uint32_t>, std::vector<std::uint8_t>> values;

    DType dtype() const { return static_cast<DType>(values.index()); }
    std::size_t element_count() const;

    static Tensor f32(std::vector<std::uint32_t> dims, std::vector<float> v) { return {std::move(dims), std::move(v)}; }
    static Tensor u32(std::vector<std::uint32_t> dims, std::vector<std::uint32_t> v) { return {std::move(dims), std::move(v)}; }
    static Tensor u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> v) { return {std::move(dims), std::move(v)}; }

    /// Typed access; throws IoError on dtype mismatch.
    const std::vector<float>& as_f32() const;
    const std::vector<std::uint32_t>& as_u32() const;
    const std::vector<std::uint8_t>& as_u8() const;

    bool operator==(const Tensor&) const = default;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Decodes one record starting at `offset` and advances it. Throws IoError
/// on bad magic, version, dtype, truncation, or checksum mismatch.
Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);

void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

using TensorGroup = std::vector<std::pair<std::string, Tensor>>;

std::vector<std::uint8_t> encode_group(const TensorGroup& group);
TensorGroup decode_group(std::span<const std::uint8_t> bytes);
void write_group_file(const std::string& path, const TensorGroup& group);
TensorGroup read_group_file(const std::string& path);
/// Throws IoError naming the missing entry.
const Tensor& find_tensor(const TensorGroup& group, const std::string& name);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

TensorGroup params_to_group(const FgfParams<float>& params);
FgfParams<float> params_from_group(const TensorGroup& group);
void save_params(const std::string& path, const FgfParams<float>& params);
FgfParams<float> load_params(const std::string& path);

/// Pre-exported encoder output for every view of one image.
struct BundleView {
    std::size_t view = 0;
    bool global = false;
    PixelRect rect;
    std::size_t encoder_side = kDefaultEncoderSide;
    TokenGrid<float> grid;
};

struct GridBundle {
    ImageMeta image;
    std::vector<BundleView> views;
};

TensorGroup bundle_to_group(const GridBundle& bundle);
GridBundle bundle_from_group(const TensorGroup& group);
void save_bundle(const std::string& path, const GridBundle& bundle);
GridBundle load_bundle(const std::string& path);

}  // namespace meteor
