#include "fang/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "fang/errors.hpp"

namespace fang {

namespace {

using nlohmann::json;

constexpr std::uint64_t kHeaderPrefix = 8;
constexpr const char* kMetadataKey = "__metadata__";

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

std::size_t dtype_size(DType d) { return d == DType::kF64 ? 8 : 4; }

const char* dtype_tag(DType d) { return d == DType::kF64 ? "F64" : "F32"; }

[[noreturn]] void format_error(const std::string& what, std::uint64_t offset) {
  throw FormatError("archive: " + what + " (byte offset " + std::to_string(offset) + ")");
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

// Parses the header while rejecting duplicate keys in any object, which the
// default parser would silently collapse.
json parse_header(const std::uint8_t* begin, const std::uint8_t* end) {
  std::vector<std::set<std::string>> seen;
  std::string duplicate;
  auto cb = [&](int /*depth*/, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        seen.emplace_back();
        break;
      case json::parse_event_t::object_end:
        if (!seen.empty()) seen.pop_back();
        break;
      case json::parse_event_t::key: {
        const auto key = parsed.get<std::string>();
        if (!seen.empty() && !seen.back().insert(key).second && duplicate.empty()) {
          duplicate = key;
        }
        break;
      }
      default:
        break;
    }
    return true;
  };
  json header;
  try {
    header = json::parse(begin, end, cb);
  } catch (const json::parse_error& e) {
    format_error(std::string("malformed header JSON: ") + e.what(), kHeaderPrefix + e.byte);
  }
  if (!duplicate.empty()) format_error("duplicate tensor name '" + duplicate + "'", kHeaderPrefix);
  if (!header.is_object()) format_error("header is not a JSON object", kHeaderPrefix);
  return header;
}

}  // namespace

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::vector<std::uint8_t> archive_encode(const NamedTensors& tensors, const json& metadata) {
  json header = json::object();
  std::set<std::string> names;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name == kMetadataKey) throw FormatError("archive: reserved tensor name '" + name + "'");
    if (!names.insert(name).second) throw FormatError("archive: duplicate tensor name '" + name + "'");
    if (t.numel() != t.values.size()) {
      throw FormatError("archive: tensor '" + name + "' has " + std::to_string(t.values.size()) +
                        " values for shape of " + std::to_string(t.numel()));
    }
    const std::uint64_t bytes = t.values.size() * dtype_size(t.dtype);
    header[name] = {{"dtype", dtype_tag(t.dtype)},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!metadata.is_null() && !metadata.empty()) header[kMetadataKey] = metadata;

  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderPrefix + text.size() + offset);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& entry : tensors) {
    const Tensor& t = entry.second;
    if (t.dtype == DType::kF64) {
      const auto* raw = reinterpret_cast<const std::uint8_t*>(t.values.data());
      out.insert(out.end(), raw, raw + t.values.size() * 8);
    } else {
      for (double v : t.values) {
        const float f = static_cast<float>(v);
        std::uint8_t buf[4];
        std::memcpy(buf, &f, 4);
        out.insert(out.end(), buf, buf + 4);
      }
    }
  }
  return out;
}

Archive archive_decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderPrefix) format_error("file shorter than the 8-byte length prefix", 0);
  const std::uint64_t header_len = get_u64(bytes.data());
  if (header_len > bytes.size() - kHeaderPrefix) {
    format_error("header length " + std::to_string(header_len) + " exceeds file size",
                 kHeaderPrefix);
  }
  const std::uint8_t* header_begin = bytes.data() + kHeaderPrefix;
  json header = parse_header(header_begin, header_begin + header_len);

  const std::uint64_t payload_start = kHeaderPrefix + header_len;
  const std::uint64_t payload_size = bytes.size() - payload_start;

  Archive archive;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& [name, info] : header.items()) {
    if (name == kMetadataKey) {
      archive.metadata = info;
      continue;
    }
    if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
        !info.contains("data_offsets")) {
      format_error("tensor '" + name + "' lacks dtype/shape/data_offsets", kHeaderPrefix);
    }
    Tensor t;
    try {
      const auto tag = info.at("dtype").get<std::string>();
      if (tag == "F64") {
        t.dtype = DType::kF64;
      } else if (tag == "F32") {
        t.dtype = DType::kF32;
      } else {
        format_error("tensor '" + name + "' has unsupported dtype '" + tag + "'", kHeaderPrefix);
      }
      t.shape = info.at("shape").get<std::vector<std::uint64_t>>();
      const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1]) {
        format_error("tensor '" + name + "' has invalid data_offsets", kHeaderPrefix);
      }
      const std::uint64_t begin = offsets[0];
      const std::uint64_t end = offsets[1];
      if (end - begin != t.numel() * dtype_size(t.dtype)) {
        format_error("tensor '" + name + "' byte span does not match its shape",
                     payload_start + begin);
      }
      if (end > payload_size) {
        format_error("tensor '" + name + "' extends past end of payload (truncated file)",
                     payload_start + begin);
      }
      spans.emplace_back(begin, end);
      t.values.resize(t.numel());
      const std::uint8_t* src = bytes.data() + payload_start + begin;
      if (t.dtype == DType::kF64) {
        std::memcpy(t.values.data(), src, t.values.size() * 8);
      } else {
        for (std::size_t i = 0; i < t.values.size(); ++i) {
          float f;
          std::memcpy(&f, src + 4 * i, 4);
          t.values[i] = static_cast<double>(f);
        }
      }
    } catch (const json::exception& e) {
      format_error("tensor '" + name + "' has malformed fields: " + e.what(), kHeaderPrefix);
    }
    archive.tensors.emplace(name, std::move(t));
  }

  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) {
      format_error("overlapping tensor data", payload_start + spans[i].first);
    }
  }
  return archive;
}

void archive_write(const std::filesystem::path& path, const NamedTensors& tensors,
                   const json& metadata) {
  const auto bytes = archive_encode(tensors, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("archive: cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("archive: write to '" + path.string() + "' failed");
}

Archive archive_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("archive: cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return archive_decode(bytes);
}

Tensor tensor_from_matrix(const Matrix& m, DType dtype) {
  return Tensor{{m.rows(), m.cols()}, m.storage(), dtype};
}

Tensor tensor_from_vector(const Vector& v, DType dtype) {
  return Tensor{{v.size()}, v, dtype};
}

Matrix tensor_to_matrix(const Tensor& t) {
  if (t.shape.size() != 2) {
    throw FormatError("archive: expected a 2-D tensor, got rank " + std::to_string(t.shape.size()));
  }
  return Matrix(t.shape[0], t.shape[1], t.values);
}

Vector tensor_to_vector(const Tensor& t) {
  if (t.shape.size() != 1) {
    throw FormatError("archive: expected a 1-D tensor, got rank " + std::to_string(t.shape.size()));
  }
  return t.values;
}

}  // namespace fang
