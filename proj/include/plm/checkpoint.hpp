#pragma once

// Binary container: "PLM1", u32 version, u64 metadata length, UTF-8 JSON
// metadata, then little-endian f32 blobs in the order listed under
// metadata["tensors"].

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "plm/nn.hpp"
#include "plm/tensor.hpp"

namespace plm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorBlob {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();  // everything except the tensor table
    std::vector<TensorBlob> tensors;

    void add(const std::string& name, const Tensor<float>& t);
    void add(const std::string& name, Shape shape, std::vector<float> values);
    void add_all(const NamedParams<float>& params);
    bool has(const std::string& name) const;
    const TensorBlob& get(const std::string& name) const;
    // Copies the named blobs into the parameters; shapes must match exactly.
    void load_into(const NamedParams<float>& params) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

// Writes atomically via a temporary file.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace plm
