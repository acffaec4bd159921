#include "evosam/numkit/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace evosam::nk {

int ParamStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  const int i = size();
  index_.emplace(name, i);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return i;
}

bool ParamStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

int ParamStore::index(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

bool ParamStore::all_finite() const {
  for (const auto& v : values_)
    if (!v.all_finite()) return false;
  return true;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore z;
  for (int i = 0; i < size(); ++i) z.add(names_[static_cast<std::size_t>(i)], Tensor(values_[static_cast<std::size_t>(i)].shape()));
  return z;
}

std::vector<std::uint8_t> to_bytes(const ParamStore& store) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::vector<std::uint8_t> out;
  out.reserve(store.total_elements() * 4);
  for (int i = 0; i < store.size(); ++i) {
    for (real v : store[i].data()) {
      const float f = static_cast<float>(v);
      std::uint8_t b[4];
      std::memcpy(b, &f, 4);
      out.insert(out.end(), b, b + 4);
    }
  }
  return out;
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = to_bytes(store);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  nlohmann::json meta;
  meta["format"] = "float32-le";
  meta["params"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (int i = 0; i < store.size(); ++i) {
    meta["params"].push_back({{"name", store.name(i)}, {"shape", store[i].shape()}, {"offset", offset}});
    offset += store[i].size() * 4;
  }
  meta["bytes"] = offset;
  std::ofstream j(path.string() + ".json", std::ios::trunc);
  if (!j) throw CheckpointError("cannot write sidecar for " + path.string());
  j << meta.dump(2) << "\n";
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream j(path.string() + ".json");
  if (!j) throw CheckpointError("missing sidecar " + path.string() + ".json");
  nlohmann::json meta;
  try {
    j >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("bad sidecar for " + path.string() + ": " + e.what());
  }
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  ParamStore store;
  for (const auto& p : meta.at("params")) {
    Shape shape = p.at("shape").get<Shape>();
    const std::size_t offset = p.at("offset").get<std::size_t>();
    const std::size_t n = numel(shape);
    if (offset + n * 4 > bytes.size()) throw CheckpointError("checkpoint truncated at " + p.at("name").get<std::string>());
    std::vector<real> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, bytes.data() + offset + i * 4, 4);
      data[i] = static_cast<real>(v);
    }
    store.add(p.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
  }
  return store;
}

}  // namespace evosam::nk
