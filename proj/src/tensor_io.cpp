#include "meteor/tensor_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string_view>

#include "json.hpp"
#include "meteor/error.hpp"

namespace meteor {

namespace {

using json = nlohmann::json;

std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::kF32: return 4;
        case DType::kU32: return 4;
        case DType::kU8: return 1;
    }
    return 0;
}

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
}

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::size_t& offset) : bytes_(bytes), off_(offset) {}

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() < off_ || bytes_.size() - off_ < n)
            throw IoError(std::string("truncated tensor data while reading ") + what);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return bytes_[off_++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(bytes_[off_] | (bytes_[off_ + 1] << 8));
        off_ += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[off_ + i]) << (8 * i);
        off_ += 4;
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(off_, n);
        off_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t& off_;
};

std::uint32_t load_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::size_t Tensor::element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

const std::vector<float>& Tensor::as_f32() const {
    if (auto* v = std::get_if<std::vector<float>>(&values)) return *v;
    throw IoError("tensor is not f32");
}
const std::vector<std::uint32_t>& Tensor::as_u32() const {
    if (auto* v = std::get_if<std::vector<std::uint32_t>>(&values)) return *v;
    throw IoError("tensor is not u32");
}
const std::vector<std::uint8_t>& Tensor::as_u8() const {
    if (auto* v = std::get_if<std::vector<std::uint8_t>>(&values)) return *v;
    throw IoError("tensor is not u8");
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t chunk = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        crc = crc32(crc, bytes.data() + off, static_cast<uInt>(chunk));
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.dims.size() > std::numeric_limits<std::uint8_t>::max()) throw IoError("tensor rank exceeds 255");
    const std::size_t count = t.element_count();
    std::vector<std::uint8_t> out(std::begin(kTensorMagic), std::end(kTensorMagic));
    put_u16(out, kFormatVersion);
    put_u8(out, static_cast<std::uint8_t>(t.dtype()));
    put_u8(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    const std::size_t payload_start = out.size();
    std::visit(
        [&](const auto& v) {
            using V = typename std::decay_t<decltype(v)>::value_type;
            if (v.size() != count)
                throw IoError("tensor has " + std::to_string(v.size()) + " values for dims of " +
                              std::to_string(count));
            for (V x : v) {
                if constexpr (std::is_same_v<V, float>) put_u32(out, std::bit_cast<std::uint32_t>(x));
                else if constexpr (std::is_same_v<V, std::uint32_t>) put_u32(out, x);
                else put_u8(out, x);
            }
        },
        t.values);
    const std::uint32_t crc =
        crc32_of(std::span(out).subspan(payload_start, out.size() - payload_start));
    put_u32(out, crc);
    return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
    Reader r(bytes, offset);
    auto magic = r.take(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), std::begin(kTensorMagic)))
        throw IoError("bad tensor magic (expected MTOK)");
    const auto version = r.u16("version");
    if (version != kFormatVersion) throw IoError("unsupported tensor format version " + std::to_string(version));
    const auto code = r.u8("dtype");
    if (code > static_cast<std::uint8_t>(DType::kU8)) throw IoError("unknown dtype code " + std::to_string(code));
    const auto dtype = static_cast<DType>(code);
    const auto rank = r.u8("rank");
    Tensor t;
    std::size_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
        t.dims.push_back(r.u32("dims"));
        count *= t.dims.back();
    }
    const std::size_t size = dtype_size(dtype);
    if (count > (std::numeric_limits<std::size_t>::max() / size)) throw IoError("tensor dims overflow");
    auto payload = r.take(count * size, "payload");
    const std::uint32_t stored = r.u32("checksum");
    if (crc32_of(payload) != stored) throw IoError("tensor checksum mismatch");

    switch (dtype) {
        case DType::kF32: {
            std::vector<float> v(count);
            for (std::size_t i = 0; i < count; ++i) v[i] = std::bit_cast<float>(load_u32(payload.data() + 4 * i));
            t.values = std::move(v);
            break;
        }
        case DType::kU32: {
            std::vector<std::uint32_t> v(count);
            for (std::size_t i = 0; i < count; ++i) v[i] = load_u32(payload.data() + 4 * i);
            t.values = std::move(v);
            break;
        }
        case DType::kU8:
            t.values = std::vector<std::uint8_t>(payload.begin(), payload.end());
            break;
    }
    return t;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
}

void write_tensor_file(const std::string& path, const Tensor& t) { write_file_bytes(path, encode_tensor(t)); }

Tensor read_tensor_file(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    std::size_t off = 0;
    Tensor t = decode_tensor(bytes, off);
    if (off != bytes.size()) throw IoError("trailing bytes after tensor in '" + path + "'");
    return t;
}

std::vector<std::uint8_t> encode_group(const TensorGroup& group) {
    std::vector<std::uint8_t> out(std::begin(kGroupMagic), std::end(kGroupMagic));
    put_u16(out, kFormatVersion);
    put_u32(out, static_cast<std::uint32_t>(group.size()));
    for (const auto& [name, tensor] : group) {
        if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw IoError("tensor name too long");
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        const auto rec = encode_tensor(tensor);
        out.insert(out.end(), rec.begin(), rec.end());
    }
    return out;
}

TensorGroup decode_group(std::span<const std::uint8_t> bytes) {
    std::size_t off = 0;
    Reader r(bytes, off);
    auto magic = r.take(4, "group magic");
    if (!std::equal(magic.begin(), magic.end(), std::begin(kGroupMagic)))
        throw IoError("bad group magic (expected MTGP)");
    const auto version = r.u16("group version");
    if (version != kFormatVersion) throw IoError("unsupported group format version " + std::to_string(version));
    const auto count = r.u32("group count");
    TensorGroup group;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.u16("name length");
        auto name = r.take(len, "name");
        std::string key(name.begin(), name.end());
        try {
            group.emplace_back(key, decode_tensor(bytes, off));
        } catch (const IoError& e) {
            throw IoError("entry '" + key + "': " + e.what());
        }
    }
    if (off != bytes.size()) throw IoError("trailing bytes after tensor group");
    return group;
}

void write_group_file(const std::string& path, const TensorGroup& group) {
    write_file_bytes(path, encode_group(group));
}

TensorGroup read_group_file(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return decode_group(bytes);
    } catch (const IoError& e) {
        throw IoError("'" + path + "': " + e.what());
    }
}

const Tensor& find_tensor(const TensorGroup& group, const std::string& name) {
    for (const auto& [key, t] : group)
        if (key == name) return t;
    throw IoError("missing tensor '" + name + "'");
}

namespace {

std::vector<std::uint32_t> dims_for(const std::string& name, std::span<const float> s,
                                    const FgfParams<float>& p) {
    auto ends_with = [&](std::string_view suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    const auto C = static_cast<std::uint32_t>(p.channels());
    if (ends_with("a_log")) return {C, static_cast<std::uint32_t>(s.size() / C)};
    if (ends_with(".weight")) {
        const auto in = C;
        return {static_cast<std::uint32_t>(s.size() / in), in};
    }
    return {static_cast<std::uint32_t>(s.size())};
}

}  // namespace

TensorGroup params_to_group(const FgfParams<float>& params) {
    params.validate();
    TensorGroup group;
    FgfParams<float>::visit(params, [&](const std::string& name, std::span<const float> s) {
        group.emplace_back(name, Tensor::f32(dims_for(name, s, params), std::vector<float>(s.begin(), s.end())));
    });
    return group;
}

FgfParams<float> params_from_group(const TensorGroup& group) {
    const auto& ins = find_tensor(group, "ins_token");
    const auto& a_log = find_tensor(group, "ssm_fwd.a_log");
    const auto& out_w = find_tensor(group, "out_proj.weight");
    if (ins.dims.size() != 1 || a_log.dims.size() != 2 || out_w.dims.size() != 2)
        throw IoError("parameter file has malformed shapes");
    const std::size_t C = ins.dims[0];
    const std::size_t N = a_log.dims[1];
    const std::size_t D = out_w.dims[0];
    if (C == 0 || N == 0 || D == 0) throw IoError("parameter file has empty tensors");

    FgfParams<float> p;
    p.ins_token.resize(C);
    p.ssm_fwd = SsmParams<float>::zeros(C, N);
    p.ssm_bwd = SsmParams<float>::zeros(C, N);
    p.in_norm = ChannelNorm<float>(C);
    p.out_proj = Affine<float>(D, C);
    FgfParams<float>::visit(p, [&](const std::string& name, std::span<float> dst) {
        const auto& src = find_tensor(group, name).as_f32();
        if (src.size() != dst.size())
            throw IoError("parameter '" + name + "' has " + std::to_string(src.size()) + " values, expected " +
                          std::to_string(dst.size()));
        std::copy(src.begin(), src.end(), dst.begin());
    });
    return p;
}

void save_params(const std::string& path, const FgfParams<float>& params) {
    write_group_file(path, params_to_group(params));
}

FgfParams<float> load_params(const std::string& path) { return params_from_group(read_group_file(path)); }

TensorGroup bundle_to_group(const GridBundle& bundle) {
    json manifest;
    manifest["format"] = "meteor-grid-bundle";
    manifest["version"] = kFormatVersion;
    manifest["image"] = {{"width", bundle.image.width}, {"height", bundle.image.height}};
    manifest["views"] = json::array();
    TensorGroup group;
    for (const auto& v : bundle.views) {
        manifest["views"].push_back({{"view", v.view},
                                     {"global", v.global},
                                     {"rect", {v.rect.x, v.rect.y, v.rect.w, v.rect.h}},
                                     {"encoder_side", v.encoder_side},
                                     {"h_u", v.grid.h_u},
                                     {"w_u", v.grid.w_u},
                                     {"channels", v.grid.channels()}});
    }
    const std::string text = manifest.dump();
    group.emplace_back("manifest", Tensor::u8({static_cast<std::uint32_t>(text.size())},
                                              std::vector<std::uint8_t>(text.begin(), text.end())));
    for (const auto& v : bundle.views) {
        const std::string prefix = "view" + std::to_string(v.view) + "/";
        const auto n = static_cast<std::uint32_t>(v.grid.n());
        const auto C = static_cast<std::uint32_t>(v.grid.channels());
        group.emplace_back(prefix + "tokens", Tensor::f32({n, C}, v.grid.tokens.data));
        group.emplace_back(prefix + "cls_token", Tensor::f32({C}, v.grid.cls_token));
        group.emplace_back(prefix + "cls_attention", Tensor::f32({n + 1}, v.grid.cls_attention));
    }
    return group;
}

GridBundle bundle_from_group(const TensorGroup& group) {
    const auto& raw = find_tensor(group, "manifest").as_u8();
    json manifest;
    try {
        manifest = json::parse(raw.begin(), raw.end());
    } catch (const json::exception& e) {
        throw IoError(std::string("bundle manifest is not valid JSON: ") + e.what());
    }
    GridBundle bundle;
    try {
        if (manifest.at("format").get<std::string>() != "meteor-grid-bundle")
            throw IoError("not a grid bundle manifest");
        bundle.image.width = manifest.at("image").at("width").get<std::size_t>();
        bundle.image.height = manifest.at("image").at("height").get<std::size_t>();
        for (const auto& jv : manifest.at("views")) {
            BundleView v;
            v.view = jv.at("view").get<std::size_t>();
            v.global = jv.at("global").get<bool>();
            const auto rect = jv.at("rect").get<std::vector<std::size_t>>();
            if (rect.size() != 4) throw IoError("view rect must have 4 entries");
            v.rect = {rect[0], rect[1], rect[2], rect[3]};
            v.encoder_side = jv.at("encoder_side").get<std::size_t>();
            v.grid.h_u = jv.at("h_u").get<std::size_t>();
            v.grid.w_u = jv.at("w_u").get<std::size_t>();
            const auto C = jv.at("channels").get<std::size_t>();
            const std::string prefix = "view" + std::to_string(v.view) + "/";
            const auto& tokens = find_tensor(group, prefix + "tokens");
            if (tokens.dims.size() != 2 || tokens.dims[0] != v.grid.n() || tokens.dims[1] != C)
                throw IoError(prefix + "tokens shape does not match manifest");
            v.grid.tokens = Matrix<float>(v.grid.n(), C);
            v.grid.tokens.data = tokens.as_f32();
            v.grid.cls_token = find_tensor(group, prefix + "cls_token").as_f32();
            v.grid.cls_attention = find_tensor(group, prefix + "cls_attention").as_f32();
            try {
                v.grid.validate();
            } catch (const std::exception& e) {
                throw IoError("view " + std::to_string(v.view) + ": " + e.what());
            }
            bundle.views.push_back(std::move(v));
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("bundle manifest is missing fields: ") + e.what());
    }
    const std::size_t tensor_groups = (group.size() - 1) / 3;
    if (tensor_groups != bundle.views.size() || (group.size() - 1) % 3 != 0)
        throw IoError("bundle manifest lists " + std::to_string(bundle.views.size()) + " views but file holds " +
                      std::to_string(group.size() - 1) + " view tensors");
    return bundle;
}

void save_bundle(const std::string& path, const GridBundle& bundle) {
    write_group_file(path, bundle_to_group(bundle));
}

GridBundle load_bundle(const std::string& path) { return bundle_from_group(read_group_file(path)); }

}  // namespace meteor
