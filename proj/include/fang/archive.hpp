#pragma once

// Tensor archive layout:
//   bytes [0, 8)        header length N, unsigned 64-bit little-endian
//   bytes [8, 8 + N)    UTF-8 JSON object
//   bytes [8 + N, ...)  payload, raw little-endian values
//
// Each JSON key other than "__metadata__" names a tensor:
//   "layers.0.w_up": {"dtype": "F64", "shape": [192, 64], "data_offsets": [b, e]}
// Offsets are relative to the payload start, half-open, and may not overlap.
// "F32" tensors are widened to double on load.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fang/numcore.hpp"

namespace fang {

enum class DType { kF64, kF32 };

struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<double> values;
  DType dtype = DType::kF64;

  std::uint64_t numel() const;
  bool operator==(const Tensor& other) const = default;
};

using TensorMap = std::map<std::string, Tensor>;
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Archive {
  TensorMap tensors;
  nlohmann::json metadata = nlohmann::json::object();
};

// Tensors are written in the given order. Throws FormatError on duplicate
// names or a shape/data length mismatch.
void archive_write(const std::filesystem::path& path, const NamedTensors& tensors,
                   const nlohmann::json& metadata = nlohmann::json::object());
Archive archive_read(const std::filesystem::path& path);

// In-memory variants used by the file functions.
std::vector<std::uint8_t> archive_encode(const NamedTensors& tensors,
                                         const nlohmann::json& metadata = nlohmann::json::object());
Archive archive_decode(const std::vector<std::uint8_t>& bytes);

Tensor tensor_from_matrix(const Matrix& m, DType dtype = DType::kF64);
Tensor tensor_from_vector(const Vector& v, DType dtype = DType::kF64);
Matrix tensor_to_matrix(const Tensor& t);
Vector tensor_to_vector(const Tensor& t);

}  // namespace fang
