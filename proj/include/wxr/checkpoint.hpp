#pragma once

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

namespace wxr {

/// Single-file archive of named tensors plus a JSON metadata header.
///
/// Layout (little endian):
///   magic "WXRC" | u32 version (1)
///   u64 meta_len | meta_len bytes of UTF-8 JSON
///   u32 tensor_count
///   per tensor (sorted by name):
///     u32 name_len | name | u8 dtype (0 f32, 1 f64, 2 i64, 3 u8) |
///     u32 ndim | i64 dims[ndim] | raw contiguous data
///   u64 checksum: FNV-1a 64 of every preceding byte
struct Archive {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, torch::Tensor> tensors;
};

// Writes to a temporary sibling, then renames into place.
void save_archive(const std::filesystem::path& file, const Archive& archive);
// Throws IoError on a missing, truncated or corrupt file.
Archive load_archive(const std::filesystem::path& file);

// Copies every parameter and buffer of `module` under prefix + name.
void put_module(Archive& archive, const std::string& prefix, const torch::nn::Module& module);
// Restores every parameter and buffer; throws IoError on missing names or shape mismatch.
void get_module(const Archive& archive, const std::string& prefix, torch::nn::Module& module);

} // namespace wxr
