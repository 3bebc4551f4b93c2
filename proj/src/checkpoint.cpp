#include "evcseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "evcseg/error.hpp"
#include "json.hpp"

namespace evcseg {

using nlohmann::json;

namespace {

json config_json(const EvNetConfig& cfg) {
  return json{{"levels", cfg.levels},
              {"base_channels", cfg.base_channels},
              {"convs_per_block", cfg.convs_per_block},
              {"multiscale_inputs", cfg.multiscale_inputs},
              {"multiscale_mode", cfg.multiscale_mode == MultiscaleMode::kConcat ? "concat" : "add"},
              {"prelu_init", cfg.prelu_init},
              {"seed", cfg.seed},
              {"kernel_size", cfg.kernel_size}};
}

EvNetConfig config_from(const json& j) {
  EvNetConfig cfg;
  try {
    cfg.levels = j.at("levels").get<int>();
    cfg.base_channels = j.at("base_channels").get<int>();
    cfg.convs_per_block = j.at("convs_per_block").get<std::vector<int>>();
    cfg.multiscale_inputs = j.at("multiscale_inputs").get<bool>();
    const std::string mode = j.value("multiscale_mode", "concat");
    if (mode != "concat" && mode != "add") throw ConfigError("multiscale_mode must be concat or add");
    cfg.multiscale_mode = mode == "concat" ? MultiscaleMode::kConcat : MultiscaleMode::kAdd;
    cfg.prelu_init = j.value("prelu_init", 0.25);
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.kernel_size = j.value("kernel_size", 5);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void put_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t float_bits_le(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}

}  // namespace

std::string config_to_json(const EvNetConfig& cfg) { return config_json(cfg).dump(); }

EvNetConfig config_from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("cannot parse network config: ") + e.what());
  }
}

std::string config_hash(const EvNetConfig& cfg) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(config_to_json(cfg));
  return os.str();
}

void save_checkpoint(const EvNet& net, const std::filesystem::path& path) {
  json manifest;
  manifest["format"] = kCheckpointMagic;
  manifest["version"] = 1;
  manifest["config"] = config_json(net.config());
  manifest["config_hash"] = config_hash(net.config());
  json tensors = json::array();
  const auto params = net.parameters();
  const auto names = net.parameter_names();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape5& s = params[i]->shape;
    const std::uint64_t nbytes = params[i]->numel() * 4;
    tensors.push_back({{"name", names[i]},
                       {"shape", {s.n, s.c, s.d, s.h, s.w}},
                       {"dtype", "float32"},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kCheckpointMagic, 8);
  put_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Tensor5* t : params) {
    for (double v : t->values) {
      const std::uint32_t u = float_bits_le(static_cast<float>(v));
      unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                            static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

namespace {

EvNet read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not an EVCNET01 checkpoint: " + path.string());
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
  if (16 + len > bytes.size()) throw FormatError("checkpoint manifest truncated");
  json manifest;
  try {
    manifest = json::parse(std::string(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(len)));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not JSON: ") + e.what());
  }
  const EvNetConfig cfg = config_from(manifest.at("config"));
  if (manifest.value("config_hash", std::string()) != config_hash(cfg)) {
    throw ConfigError("checkpoint config hash does not match its config");
  }
  EvNet net(cfg);
  const std::size_t payload = 16 + len;
  auto params = net.parameters();
  const json& tensors = manifest.at("tensors");
  if (tensors.size() != params.size()) throw ConfigError("checkpoint tensor count does not match network");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const json& t = tensors[i];
    Tensor5& dst = *params[i].tensor;
    if (t.at("name").get<std::string>() != params[i].name) {
      throw ConfigError("checkpoint tensor " + t.at("name").get<std::string>() + " where " +
                        params[i].name + " expected");
    }
    const auto shape = t.at("shape").get<std::vector<int>>();
    const Shape5& s = dst.shape;
    if (shape != std::vector<int>{s.n, s.c, s.d, s.h, s.w}) {
      throw ConfigError("checkpoint tensor " + params[i].name + " has the wrong shape");
    }
    if (t.at("dtype").get<std::string>() != "float32") throw FormatError("unsupported checkpoint dtype");
    const std::uint64_t off = t.at("offset").get<std::uint64_t>();
    if (payload + off + 4 * dst.numel() > bytes.size()) throw FormatError("checkpoint payload truncated");
    const unsigned char* src = bytes.data() + payload + off;
    for (std::size_t k = 0; k < dst.numel(); ++k) {
      const std::uint32_t u = static_cast<std::uint32_t>(src[4 * k]) |
                              (static_cast<std::uint32_t>(src[4 * k + 1]) << 8) |
                              (static_cast<std::uint32_t>(src[4 * k + 2]) << 16) |
                              (static_cast<std::uint32_t>(src[4 * k + 3]) << 24);
      float f;
      std::memcpy(&f, &u, 4);
      dst.values[k] = f;
    }
  }
  return net;
}

}  // namespace

EvNet load_checkpoint(const std::filesystem::path& path) {
  try {
    return read_checkpoint(path);
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
  }
}

EvNet load_checkpoint(const std::filesystem::path& path, const EvNetConfig& expected) {
  EvNet net = load_checkpoint(path);
  if (config_hash(net.config()) != config_hash(expected)) {
    throw ConfigError("checkpoint " + path.string() + " was trained with a different network config");
  }
  return net;
}

}  // namespace evcseg
