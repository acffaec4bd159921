#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "evosam/numkit/tensor.hpp"

namespace evosam::nk {

/// Ordered collection of named tensors. Declaration order is the checkpoint order.
class ParamStore {
 public:
  int add(std::string name, Tensor value);

  int size() const { return static_cast<int>(values_.size()); }
  bool contains(std::string_view name) const;
  int index(std::string_view name) const;

  const std::string& name(int i) const { return names_.at(static_cast<std::size_t>(i)); }
  Tensor& operator[](int i) { return values_.at(static_cast<std::size_t>(i)); }
  const Tensor& operator[](int i) const { return values_.at(static_cast<std::size_t>(i)); }
  Tensor& get(std::string_view name) { return (*this)[index(name)]; }
  const Tensor& get(std::string_view name) const { return (*this)[index(name)]; }

  std::size_t total_elements() const;
  bool all_finite() const;
  /// Same names and shapes, zero-filled.
  ParamStore zeros_like() const;

  bool operator==(const ParamStore& o) const { return names_ == o.names_ && values_ == o.values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, int> index_;
};

/// Little-endian float32 bytes of every tensor, concatenated in declaration order.
std::vector<std::uint8_t> to_bytes(const ParamStore& store);

/// Writes `<path>` (raw float32 LE) and `<path>.json` (name/shape/offset per tensor).
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evosam::nk
