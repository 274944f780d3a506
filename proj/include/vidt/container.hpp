#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vidt/tensor.hpp"

namespace vidt {

// Named-tensor container.
//
//   "VIDT" | version u32 | entry count u32
//   per entry: name length u32 | UTF-8 name | rank u32 | dims u64 x rank |
//              [version 2 only: dtype u8, 0 = f32, 1 = f64] | payload
//
// All integers and payload values are little-endian. Version 1 payloads are
// always f32; version 2 records the payload width per entry so that 64-bit
// training state round-trips exactly.
enum class Precision : std::uint8_t { f32 = 0, f64 = 1 };

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kContainerVersionF32 = 1;
inline constexpr std::uint32_t kContainerVersionTyped = 2;

std::vector<std::uint8_t> encode_tensors(const NamedTensors& entries, Precision precision);
NamedTensors decode_tensors(const std::vector<std::uint8_t>& bytes);

void save_tensors(const std::string& path, const NamedTensors& entries, Precision precision);
NamedTensors load_tensors(const std::string& path);

// Throws ContractError naming the missing entry.
const Tensor& find_tensor(const NamedTensors& entries, const std::string& name);

}  // namespace vidt
