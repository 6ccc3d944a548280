#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ognet/tensor.hpp"

namespace ognet {

/// Payload encoding of a checkpoint entry.
enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1, kUtf8 = 2 };

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> shape;
  DType dtype = DType::kFloat32;
  std::vector<std::uint8_t> payload;  // little-endian
};

/// In-memory form of an "OGCK" file: an ordered list of named tensors.
///
/// Layout: magic "OGCK", u16 version, u32 entry count, then per entry
/// u32 name length, utf8 name, u32 rank, u32 dims, u8 dtype tag, payload.
/// A scalar has rank 0. Text entries (dtype utf8) carry one byte per element.
class Checkpoint {
 public:
  static constexpr std::uint16_t kVersion = 1;

  template <typename Scalar>
  void add(const std::string& name, const Tensor<Scalar>& tensor, DType storage);
  void add_text(const std::string& name, const std::string& text);

  const CheckpointEntry* find(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;

  /// Decodes an entry into a tensor of the requested scalar type.
  template <typename Scalar>
  Tensor<Scalar> tensor(const std::string& name) const;
  std::string text(const std::string& name) const;

  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  std::vector<std::uint8_t> encode() const;
  static Checkpoint decode(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<CheckpointEntry> entries_;
};

}  // namespace ognet
