#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrecon {

// File format: <prefix>.json sidecar (shape, pitch, dtype, byte order "LE",
// role) next to <prefix>.bin raw little-endian blob.

struct CorruptHeaderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TruncatedBlobError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BlobHeader {
  std::vector<int64_t> shape;
  double voxel_pitch_mm = 0.0;
  std::string dtype;  // "f64" or "u8"
  std::string role;   // "volume_hu", "mask", "projection", ...
};

void write_blob_f64(const std::string& prefix, const BlobHeader& header,
                    const std::vector<double>& data);
void write_blob_u8(const std::string& prefix, const BlobHeader& header,
                   const std::vector<uint8_t>& data);
std::pair<BlobHeader, std::vector<double>> read_blob_f64(const std::string& prefix,
                                                         const std::string& expected_role);
std::pair<BlobHeader, std::vector<uint8_t>> read_blob_u8(const std::string& prefix,
                                                         const std::string& expected_role);

// 8-bit binary PGM (P5) with the window/level recorded in a header comment.
void write_pgm(const std::string& path, const std::vector<double>& values, int64_t width,
               int64_t height, double window, double level);

}  // namespace ctrecon
