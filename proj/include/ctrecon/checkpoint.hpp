#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctrecon/tensor.hpp"

namespace ctrecon {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Manifest+blob tensor store: <prefix>.json lists name/shape/offset per tensor
// plus a free-form string meta map; <prefix>.bin is one flat little-endian f64
// blob. Writes go to temporaries first and are renamed into place.
void save_tensors(const std::string& path_prefix, const std::vector<NamedParam>& params,
                  const std::map<std::string, std::string>& meta);

std::pair<std::vector<NamedParam>, std::map<std::string, std::string>> load_tensors(
    const std::string& path_prefix);

// Copies values from src into the same-named tensors of dst (shape-checked);
// throws if a dst name is missing from src.
void load_into(std::vector<NamedParam>& dst, const std::vector<NamedParam>& src);

// FNV-1a over the raw bytes of every tensor, in name order. Detects any
// parameter drift, e.g. of frozen networks.
uint64_t params_checksum(const std::vector<NamedParam>& params);

}  // namespace ctrecon
