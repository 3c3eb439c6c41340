#include "cmadp/array_io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cmadp/common.hpp"

namespace cmadp {

static_assert(std::endian::native == std::endian::little,
              "raw array files are little-endian; big-endian hosts unsupported");

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(DType d) { return d == DType::kF32 ? "f32" : "u8"; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "u8") return DType::kU8;
  throw DataError("unknown dtype '" + s + "' (supported: f32, u8)");
}

std::int64_t RawArray::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

std::int64_t product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

std::size_t element_size(DType d) { return d == DType::kF32 ? 4 : 1; }

}  // namespace

void ArrayBundle::put_f32(const std::string& name, std::vector<std::int64_t> shape,
                          std::span<const float> data) {
  if (product(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("array '" + name + "': data size does not match shape");
  if (!arrays_.contains(name)) order_.push_back(name);
  RawArray& a = arrays_[name];
  a.shape = std::move(shape);
  a.dtype = DType::kF32;
  a.f32.assign(data.begin(), data.end());
  a.u8.clear();
}

void ArrayBundle::put_u8(const std::string& name, std::vector<std::int64_t> shape,
                         std::span<const std::uint8_t> data) {
  if (product(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("array '" + name + "': data size does not match shape");
  if (!arrays_.contains(name)) order_.push_back(name);
  RawArray& a = arrays_[name];
  a.shape = std::move(shape);
  a.dtype = DType::kU8;
  a.u8.assign(data.begin(), data.end());
  a.f32.clear();
}

bool ArrayBundle::contains(const std::string& name) const { return arrays_.contains(name); }

const RawArray& ArrayBundle::at(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw DataError("missing array '" + name + "'");
  return it->second;
}

const std::vector<float>& ArrayBundle::f32(const std::string& name,
                                           const std::vector<std::int64_t>& shape) const {
  const RawArray& a = at(name);
  if (a.dtype != DType::kF32) throw DataError("array '" + name + "' is not f32");
  if (a.shape != shape) throw ShapeError("array '" + name + "' has unexpected shape");
  return a.f32;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bundle(const ArrayBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest = json::array();
  for (const auto& name : bundle.names()) {
    const RawArray& a = bundle.at(name);
    const std::string file = name + "." + to_string(a.dtype);
    manifest.push_back({{"name", name}, {"shape", a.shape}, {"dtype", to_string(a.dtype)},
                        {"file", file}});
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + (dir / file).string() + "' for writing");
    if (a.dtype == DType::kF32) {
      out.write(reinterpret_cast<const char*>(a.f32.data()),
                static_cast<std::streamsize>(a.f32.size() * sizeof(float)));
    } else {
      out.write(reinterpret_cast<const char*>(a.u8.data()),
                static_cast<std::streamsize>(a.u8.size()));
    }
    if (!out) throw DataError("write failed for '" + (dir / file).string() + "'");
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

ArrayBundle read_bundle(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest in '" + dir.string() + "': " + e.what());
  }
  if (!manifest.is_array()) throw DataError("manifest must be a JSON list");

  ArrayBundle bundle;
  for (const auto& entry : manifest) {
    std::string name, file, dtype_s;
    std::vector<std::int64_t> shape;
    try {
      name = entry.at("name").get<std::string>();
      file = entry.at("file").get<std::string>();
      dtype_s = entry.at("dtype").get<std::string>();
      shape = entry.at("shape").get<std::vector<std::int64_t>>();
    } catch (const json::exception& e) {
      throw DataError("malformed manifest entry in '" + dir.string() + "': " + e.what());
    }
    const DType dtype = parse_dtype(dtype_s);
    const std::int64_t n = product(shape);
    const fs::path path = dir / file;
    std::error_code ec;
    const auto bytes = fs::file_size(path, ec);
    if (ec) throw DataError("missing raw file '" + path.string() + "'");
    if (bytes != static_cast<std::uintmax_t>(n) * element_size(dtype))
      throw ShapeError("shape mismatch: '" + path.string() + "' holds " + std::to_string(bytes) +
                       " bytes, manifest implies " +
                       std::to_string(static_cast<std::uintmax_t>(n) * element_size(dtype)));
    std::ifstream in(path, std::ios::binary);
    if (dtype == DType::kF32) {
      std::vector<float> data(static_cast<std::size_t>(n));
      in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 4));
      bundle.put_f32(name, shape, data);
    } else {
      std::vector<std::uint8_t> data(static_cast<std::size_t>(n));
      in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n));
      bundle.put_u8(name, shape, data);
    }
    if (!in) throw DataError("read failed for '" + path.string() + "'");
  }
  return bundle;
}

}  // namespace cmadp
