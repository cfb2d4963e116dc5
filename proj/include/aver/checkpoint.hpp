#pragma once

// Tensor checkpoint container and its binary file format:
//
//   "AVER" | u32 version | u32 count | count x entry
//   entry: u32 name_len | name bytes | u32 rank | rank x u32 dims
//          | u32 dtype (0 = f32) | numel x f32
//
// All integers and floats are little endian. A reader consumes the whole
// file; trailing bytes mean corruption and are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "aver/tensor.hpp"

namespace aver {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Ordered name -> tensor map; iteration order is insertion order so that
// writes are deterministic.
class Checkpoint {
 public:
  void add(const std::string& name, Tensor t);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace aver
