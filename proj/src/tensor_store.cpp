#include "mlmjepa/tensor_store.hpp"

#include <unistd.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mlmjepa/error.hpp"

namespace mlmjepa::store {

namespace fs = std::filesystem;

namespace {

std::size_t width(Dtype d) { return d == Dtype::kF32 ? 4 : 8; }

void put_le(std::string& out, std::uint64_t bits, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const char* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return v;
}

fs::path temp_sibling(const fs::path& target) {
  return target.parent_path() /
         (target.filename().string() + ".tmp." + std::to_string(::getpid()));
}

}  // namespace

std::string to_string(Dtype d) { return d == Dtype::kF32 ? "f32" : "f64"; }

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::kF32;
  if (s == "f64") return Dtype::kF64;
  throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

void atomic_write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp.string());
    os << text;
    if (!os.flush()) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write(const fs::path& dir, nlohmann::json manifest, std::span<const Array> arrays,
           Dtype dtype, const std::string& blob_name) {
  std::string blob;
  nlohmann::json index = nlohmann::json::array();
  const std::size_t w = width(dtype);
  for (const auto& a : arrays) {
    if (grad::element_count(a.shape) != a.values.size()) {
      throw ShapeError("store: array '" + a.name + "' has inconsistent shape");
    }
    index.push_back({{"name", a.name}, {"offset", blob.size()}, {"shape", a.shape}});
    for (double v : a.values) {
      if (dtype == Dtype::kF32) {
        put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      } else {
        put_le(blob, std::bit_cast<std::uint64_t>(v), 8);
      }
    }
  }
  (void)w;
  manifest["dtype"] = to_string(dtype);
  manifest["blob"] = blob_name;
  manifest["tensors"] = std::move(index);

  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  const fs::path tmp = temp_sibling(dir);
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream os(tmp / blob_name, std::ios::binary | std::ios::trunc);
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!os.flush()) throw DataError("short write to " + (tmp / blob_name).string());
  }
  {
    std::ofstream os(tmp / "manifest.json", std::ios::trunc);
    os << manifest.dump(2) << '\n';
    if (!os.flush()) throw DataError("short write to " + (tmp / "manifest.json").string());
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

const Array& Contents::at(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw DataError("store: no tensor named '" + name + "'");
}

bool Contents::contains(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

Contents read(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream ms(manifest_path);
  if (!ms) throw DataError("cannot open " + manifest_path.string());
  Contents c;
  try {
    c.manifest = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  try {
    const Dtype dtype = parse_dtype(c.manifest.at("dtype").get<std::string>());
    const std::size_t w = width(dtype);
    const fs::path blob_path = dir / c.manifest.at("blob").get<std::string>();
    std::ifstream bs(blob_path, std::ios::binary);
    if (!bs) throw DataError("cannot open " + blob_path.string());
    std::ostringstream buf;
    buf << bs.rdbuf();
    const std::string blob = buf.str();
    for (const auto& t : c.manifest.at("tensors")) {
      Array a;
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<grad::Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const std::size_t n = grad::element_count(a.shape);
      if (offset + n * w > blob.size()) {
        throw DataError(blob_path.string() + ": tensor '" + a.name + "' runs past end of blob");
      }
      a.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const char* p = blob.data() + offset + i * w;
        a.values[i] = dtype == Dtype::kF32
                          ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p, 4))))
                          : std::bit_cast<double>(get_le(p, 8));
      }
      c.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  return c;
}

}  // namespace mlmjepa::store
