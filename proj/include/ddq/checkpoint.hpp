#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddq/network.hpp"

namespace ddq {

/// Versioned training snapshot: the full network state (float weights,
/// levels, gates, activation ranges, budget) plus an opaque config echo.
struct Checkpoint {
  QuantNetwork net;
  std::string config_json;
};

/// Little-endian "DDQ1" container. Serialization is field-ordered and
/// bit-exact, so save(load(bytes)) == bytes.
std::vector<std::uint8_t> checkpoint_bytes(const QuantNetwork& net,
                                           const std::string& config_json);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const QuantNetwork& net, const std::string& config_json,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ddq
