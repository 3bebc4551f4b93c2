#pragma once

#include <filesystem>
#include <string>

#include "evcseg/evnet.hpp"

namespace evcseg {

inline constexpr char kCheckpointMagic[] = "EVCNET01";

/// Canonical JSON text of a network configuration.
std::string config_to_json(const EvNetConfig& cfg);
EvNetConfig config_from_json(const std::string& text);
/// 16-hex-digit FNV-1a hash of config_to_json(cfg).
std::string config_hash(const EvNetConfig& cfg);

/// Layout: 8-byte magic "EVCNET01", u64 little-endian manifest length, the
/// JSON manifest (config, config_hash, tensors[{name, shape, dtype, offset,
/// nbytes}]), then float32 little-endian payloads at the listed offsets
/// (relative to the end of the manifest).
void save_checkpoint(const EvNet& net, const std::filesystem::path& path);
EvNet load_checkpoint(const std::filesystem::path& path);
/// Loads and verifies the stored config hash against `expected`.
EvNet load_checkpoint(const std::filesystem::path& path, const EvNetConfig& expected);

}  // namespace evcseg
