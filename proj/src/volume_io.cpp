#include "ctrecon/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace ctrecon {

namespace {

static_assert(std::endian::native == std::endian::little,
              "blob files are little-endian; a byte-swapping reader is not implemented");

int64_t shape_count(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

void write_header(const std::string& prefix, const BlobHeader& header) {
  nlohmann::json j;
  j["shape"] = header.shape;
  j["voxel_pitch_mm"] = header.voxel_pitch_mm;
  j["dtype"] = header.dtype;
  j["byte_order"] = "LE";
  j["role"] = header.role;
  std::ofstream out(prefix + ".json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + prefix + ".json");
  out << j.dump(2) << "\n";
}

BlobHeader read_header(const std::string& prefix, const std::string& expected_role,
                       const std::string& expected_dtype) {
  std::ifstream in(prefix + ".json");
  if (!in) throw CorruptHeaderError("missing header " + prefix + ".json");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("unparseable header " + prefix + ".json: " + e.what());
  }
  BlobHeader h;
  try {
    h.shape = j.at("shape").get<std::vector<int64_t>>();
    h.voxel_pitch_mm = j.at("voxel_pitch_mm").get<double>();
    h.dtype = j.at("dtype").get<std::string>();
    h.role = j.at("role").get<std::string>();
    if (j.at("byte_order").get<std::string>() != "LE")
      throw FormatMismatchError("byte order of " + prefix + " is not LE");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("incomplete header " + prefix + ".json: " + e.what());
  }
  if (h.dtype != expected_dtype)
    throw FormatMismatchError("dtype of " + prefix + " is " + h.dtype + ", expected " +
                              expected_dtype);
  if (!expected_role.empty() && h.role != expected_role)
    throw FormatMismatchError("role of " + prefix + " is " + h.role + ", expected " +
                              expected_role);
  for (int64_t d : h.shape)
    if (d <= 0) throw CorruptHeaderError("non-positive dimension in " + prefix + ".json");
  return h;
}

template <typename T>
std::vector<T> read_bin(const std::string& prefix, int64_t count) {
  std::ifstream in(prefix + ".bin", std::ios::binary);
  if (!in) throw TruncatedBlobError("missing blob " + prefix + ".bin");
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<int64_t>(in.tellg());
  const int64_t want = count * static_cast<int64_t>(sizeof(T));
  if (bytes != want)
    throw TruncatedBlobError("blob " + prefix + ".bin holds " + std::to_string(bytes) +
                             " bytes, header implies " + std::to_string(want));
  in.seekg(0);
  std::vector<T> data(static_cast<size_t>(count));
  in.read(reinterpret_cast<char*>(data.data()), want);
  if (!in) throw TruncatedBlobError("short read from " + prefix + ".bin");
  return data;
}

template <typename T>
void write_bin(const std::string& prefix, const std::vector<T>& data) {
  std::ofstream out(prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + prefix + ".bin");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!out) throw std::runtime_error("short write to " + prefix + ".bin");
}

}  // namespace

void write_blob_f64(const std::string& prefix, const BlobHeader& header,
                    const std::vector<double>& data) {
  if (shape_count(header.shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("data size does not match header shape for " + prefix);
  write_header(prefix, header);
  write_bin(prefix, data);
}

void write_blob_u8(const std::string& prefix, const BlobHeader& header,
                   const std::vector<uint8_t>& data) {
  if (shape_count(header.shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("data size does not match header shape for " + prefix);
  write_header(prefix, header);
  write_bin(prefix, data);
}

std::pair<BlobHeader, std::vector<double>> read_blob_f64(const std::string& prefix,
                                                         const std::string& expected_role) {
  BlobHeader h = read_header(prefix, expected_role, "f64");
  return {h, read_bin<double>(prefix, shape_count(h.shape))};
}

std::pair<BlobHeader, std::vector<uint8_t>> read_blob_u8(const std::string& prefix,
                                                         const std::string& expected_role) {
  BlobHeader h = read_header(prefix, expected_role, "u8");
  return {h, read_bin<uint8_t>(prefix, shape_count(h.shape))};
}

void write_pgm(const std::string& path, const std::vector<double>& values, int64_t width,
               int64_t height, double window, double level) {
  if (width <= 0 || height <= 0 || static_cast<int64_t>(values.size()) != width * height)
    throw std::invalid_argument("pgm dimensions do not match value count");
  if (window <= 0.0) throw std::invalid_argument("pgm window must be positive");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n# window=" << window << " level=" << level << "\n" << width << " " << height
      << "\n255\n";
  const double lo = level - window / 2.0;
  for (double v : values) {
    double g = std::round((v - lo) / window * 255.0);
    g = std::clamp(g, 0.0, 255.0);
    out.put(static_cast<char>(static_cast<unsigned char>(g)));
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

}  // namespace ctrecon
