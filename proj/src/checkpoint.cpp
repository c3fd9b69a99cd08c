#include "plm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "plm/error.hpp"

namespace plm {

namespace {

constexpr char kMagic[4] = {'P', 'L', 'M', '1'};

template <class U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

template <class U>
U get_le(const std::string& in, std::size_t at) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    }
    return v;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor<float>& t) {
    add(name, t.shape(), std::vector<float>(t.values().begin(), t.values().end()));
}

void Checkpoint::add(const std::string& name, Shape shape, std::vector<float> values) {
    if (has(name)) {
        throw UsageError("checkpoint: duplicate tensor '" + name + "'");
    }
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("checkpoint: tensor '" + name + "' shape " + shape_str(shape) + " vs " +
                         std::to_string(values.size()) + " values");
    }
    tensors.push_back(TensorBlob{name, std::move(shape), std::move(values)});
}

void Checkpoint::add_all(const NamedParams<float>& params) {
    for (const auto& [name, t] : params) {
        add(name, t);
    }
}

bool Checkpoint::has(const std::string& name) const {
    for (const TensorBlob& b : tensors) {
        if (b.name == name) {
            return true;
        }
    }
    return false;
}

const TensorBlob& Checkpoint::get(const std::string& name) const {
    for (const TensorBlob& b : tensors) {
        if (b.name == name) {
            return b;
        }
    }
    throw DataError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::load_into(const NamedParams<float>& params) const {
    for (const auto& [name, t] : params) {
        const TensorBlob& b = get(name);
        if (b.shape != t.shape()) {
            throw ShapeError("checkpoint: tensor '" + name + "' stored as " + shape_str(b.shape) +
                             " but the model expects " + shape_str(t.shape()));
        }
        Tensor<float> dst = t;
        std::copy(b.values.begin(), b.values.end(), dst.values().begin());
    }
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    static_assert(std::numeric_limits<float>::is_iec559, "f32 blobs need IEEE floats");
    nlohmann::json meta = ckpt.meta;
    nlohmann::json table = nlohmann::json::array();
    for (const TensorBlob& b : ckpt.tensors) {
        table.push_back({{"name", b.name}, {"shape", b.shape}, {"dtype", "f32"}});
    }
    meta["tensors"] = table;
    const std::string text = meta.dump();

    std::string out(kMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    for (const TensorBlob& b : ckpt.tensors) {
        for (float f : b.values) {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
        }
    }
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw DataError("not a checkpoint (bad magic)");
    }
    const auto version = get_le<std::uint32_t>(bytes, 4);
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto meta_len = get_le<std::uint64_t>(bytes, 8);
    if (meta_len > bytes.size() - 16) {
        throw DataError("checkpoint truncated inside metadata");
    }
    Checkpoint ckpt;
    try {
        ckpt.meta = nlohmann::json::parse(bytes.substr(16, meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    std::size_t at = 16 + meta_len;
    if (!ckpt.meta.contains("tensors") || !ckpt.meta["tensors"].is_array()) {
        throw DataError("checkpoint metadata lacks a tensor table");
    }
    for (const auto& entry : ckpt.meta["tensors"]) {
        TensorBlob b;
        b.name = entry.at("name").get<std::string>();
        b.shape = entry.at("shape").get<Shape>();
        if (entry.at("dtype").get<std::string>() != "f32") {
            throw DataError("checkpoint tensor '" + b.name + "' has unsupported dtype");
        }
        const std::size_t n = shape_numel(b.shape);
        if (n > (bytes.size() - at) / 4) {
            throw DataError("checkpoint truncated in tensor '" + b.name + "'");
        }
        b.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            b.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, at));
            at += 4;
        }
        ckpt.tensors.push_back(std::move(b));
    }
    if (at != bytes.size()) {
        throw DataError("checkpoint has " + std::to_string(bytes.size() - at) + " trailing bytes");
    }
    ckpt.meta.erase("tensors");
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot write " + tmp);
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw DataError("write failed for " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read checkpoint " + path);
    }
    std::ostringstream os;
    os << in.rdbuf();
    try {
        return parse_checkpoint(os.str());
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

}  // namespace plm
