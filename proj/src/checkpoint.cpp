#include "ctrecon/checkpoint.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "ctrecon/volume_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace ctrecon {

void save_tensors(const std::string& path_prefix, const std::vector<NamedParam>& params,
                  const std::map<std::string, std::string>& meta) {
  nlohmann::json manifest;
  manifest["format"] = "ctrecon-checkpoint";
  manifest["meta"] = meta;
  nlohmann::json tensors = nlohmann::json::array();
  int64_t offset = 0;

  const std::string tmp_bin = path_prefix + ".bin.tmp";
  const std::string tmp_json = path_prefix + ".json.tmp";
  {
    std::ofstream bin(tmp_bin, std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write " + tmp_bin);
    for (const auto& p : params) {
      tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
      const auto& d = p.tensor.data();
      bin.write(reinterpret_cast<const char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(double)));
      offset += static_cast<int64_t>(d.size());
    }
    if (!bin) throw std::runtime_error("short write to " + tmp_bin);
  }
  manifest["tensors"] = std::move(tensors);
  manifest["total_values"] = offset;
  {
    std::ofstream out(tmp_json, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp_json);
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("short write to " + tmp_json);
  }
  fs::rename(tmp_bin, path_prefix + ".bin");
  fs::rename(tmp_json, path_prefix + ".json");
}

std::pair<std::vector<NamedParam>, std::map<std::string, std::string>> load_tensors(
    const std::string& path_prefix) {
  std::ifstream in(path_prefix + ".json");
  if (!in) throw CorruptHeaderError("missing checkpoint manifest " + path_prefix + ".json");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("unparseable checkpoint " + path_prefix + ": " + e.what());
  }
  std::vector<NamedParam> params;
  std::map<std::string, std::string> meta;
  int64_t total = 0;
  struct Entry {
    std::string name;
    Shape shape;
    int64_t offset;
  };
  std::vector<Entry> entries;
  try {
    if (manifest.at("format").get<std::string>() != "ctrecon-checkpoint")
      throw FormatMismatchError(path_prefix + " is not a checkpoint file");
    meta = manifest.at("meta").get<std::map<std::string, std::string>>();
    total = manifest.at("total_values").get<int64_t>();
    for (const auto& t : manifest.at("tensors"))
      entries.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>(),
                         t.at("offset").get<int64_t>()});
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("incomplete checkpoint " + path_prefix + ": " + e.what());
  }

  std::ifstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw TruncatedBlobError("missing checkpoint blob " + path_prefix + ".bin");
  bin.seekg(0, std::ios::end);
  const auto bytes = static_cast<int64_t>(bin.tellg());
  if (bytes != total * static_cast<int64_t>(sizeof(double)))
    throw TruncatedBlobError("checkpoint blob " + path_prefix + ".bin holds " +
                             std::to_string(bytes) + " bytes, manifest implies " +
                             std::to_string(total * 8));
  for (const auto& e : entries) {
    const int64_t n = shape_numel(e.shape);
    if (e.offset < 0 || e.offset + n > total)
      throw CorruptHeaderError("tensor " + e.name + " overruns blob in " + path_prefix);
    std::vector<double> data(static_cast<size_t>(n));
    bin.seekg(e.offset * static_cast<int64_t>(sizeof(double)));
    bin.read(reinterpret_cast<char*>(data.data()), n * static_cast<std::streamsize>(sizeof(double)));
    if (!bin) throw TruncatedBlobError("short read of tensor " + e.name + " from " + path_prefix);
    params.push_back({e.name, Tensor::from_data(e.shape, std::move(data))});
  }
  return {std::move(params), std::move(meta)};
}

void load_into(std::vector<NamedParam>& dst, const std::vector<NamedParam>& src) {
  for (auto& d : dst) {
    const auto it = std::find_if(src.begin(), src.end(),
                                 [&](const NamedParam& s) { return s.name == d.name; });
    if (it == src.end()) throw FormatMismatchError("checkpoint lacks tensor " + d.name);
    if (it->tensor.shape() != d.tensor.shape())
      throw FormatMismatchError("checkpoint tensor " + d.name + " has shape " +
                                shape_str(it->tensor.shape()) + ", expected " +
                                shape_str(d.tensor.shape()));
    d.tensor.mutable_data() = it->tensor.data();
  }
}

uint64_t params_checksum(const std::vector<NamedParam>& params) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor.data().data(), p.tensor.data().size() * sizeof(double));
  }
  return h;
}

}  // namespace ctrecon
