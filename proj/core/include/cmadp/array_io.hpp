#pragma once

// Directory-of-raw-arrays storage: a `manifest.json` listing
// {name, shape, dtype, file} records plus one little-endian, row-major raw
// file per array. Shared by datasets and checkpoints.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace cmadp {

enum class DType { kF32, kU8 };

std::string to_string(DType d);
DType parse_dtype(const std::string& s);  // throws DataError on unknown dtype

struct RawArray {
  std::vector<std::int64_t> shape;
  DType dtype = DType::kF32;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::int64_t numel() const;
};

/// Ordered collection of named arrays. Iteration order is insertion order so
/// that manifests are written deterministically.
class ArrayBundle {
 public:
  void put_f32(const std::string& name, std::vector<std::int64_t> shape,
               std::span<const float> data);
  void put_u8(const std::string& name, std::vector<std::int64_t> shape,
              std::span<const std::uint8_t> data);

  bool contains(const std::string& name) const;
  const RawArray& at(const std::string& name) const;
  /// Fetches an f32 array and checks its shape.
  const std::vector<float>& f32(const std::string& name,
                                const std::vector<std::int64_t>& shape) const;
  const std::vector<std::string>& names() const { return order_; }

 private:
  std::vector<std::string> order_;
  std::map<std::string, RawArray> arrays_;
};

void write_bundle(const ArrayBundle& bundle, const std::filesystem::path& dir);
/// Throws DataError on a malformed manifest, unknown dtype, missing file or a
/// raw file whose byte length disagrees with the manifest shape.
ArrayBundle read_bundle(const std::filesystem::path& dir);

/// Writes `text` to `path`, replacing any existing file.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace cmadp
