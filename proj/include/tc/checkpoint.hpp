#pragma once

// TCW1 tensor container:
//   "TCW1" | u32 LE header length | UTF-8 JSON manifest (space padded) | payload
// The manifest is {format_version, kind, config, tensors: {name: {dtype, shape,
// offset}}}. Offsets are relative to the first payload byte, which sits at a
// 64-byte aligned file position; every tensor offset is a multiple of 64.
// Payloads are little-endian f32.

#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "tc/coder.hpp"
#include "tc/model.hpp"

namespace tc {

inline constexpr int kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointAlign = 64;

struct TensorRecord {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;
};

struct Checkpoint {
    std::string kind; // "model" | "coder"
    nlohmann::json config = nlohmann::json::object();
    std::vector<TensorRecord> tensors;

    const TensorRecord& tensor(std::string_view name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError (naming the offending tensor where there is one).
Checkpoint decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const ModelParams& params);
Checkpoint to_checkpoint(const Coder& coder);
ModelParams model_from_checkpoint(const Checkpoint& ckpt);
Coder coder_from_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
void save_checkpoint(const Coder& coder, const std::filesystem::path& path);
std::variant<ModelParams, Coder> load_checkpoint(const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);
Coder load_coder(const std::filesystem::path& path);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

} // namespace tc
