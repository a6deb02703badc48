#pragma once

// Manifest + flat little-endian blob layout shared by checkpoints and
// embedding stores:
//
//   <dir>/manifest.json   caller metadata plus
//                         {"dtype": "f32"|"f64", "blob": "<file>",
//                          "tensors": [{"name", "offset" (bytes), "shape"}]}
//   <dir>/<blob>          tensors back to back in manifest order

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlmjepa/gradcore.hpp"

namespace mlmjepa::store {

enum class Dtype { kF32, kF64 };

std::string to_string(Dtype d);
Dtype parse_dtype(const std::string& s);

struct Array {
  std::string name;
  grad::Shape shape;
  std::vector<double> values;
};

/// Writes into a sibling temporary directory and renames it over `dir`.
void write(const std::filesystem::path& dir, nlohmann::json manifest, std::span<const Array> arrays,
           Dtype dtype, const std::string& blob_name = "params.bin");

struct Contents {
  nlohmann::json manifest;
  std::vector<Array> arrays;

  const Array& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

/// Throws DataError on a missing directory, bad manifest or short blob.
Contents read(const std::filesystem::path& dir);

/// Write-temp-then-rename for a single text file.
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace mlmjepa::store
