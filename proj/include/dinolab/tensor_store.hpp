#pragma once

#include "dinolab/common.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dinolab {

// Flat container of named float32 tensors plus string metadata, serialized to
// a little-endian binary file. Used for backbone weights and checkpoints.
class TensorStore {
 public:
  struct Entry {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;  // row-major (C order)
  };

  std::map<std::string, std::string> meta;

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  const Entry& at(const std::string& name) const;

  void put(const std::string& name, std::vector<std::uint32_t> dims, std::vector<float> data);
  void put_matrix(const std::string& name, const MatF& m);
  void put_vector(const std::string& name, const VecF& v);
  void put_scalar(const std::string& name, float v);

  MatF matrix(const std::string& name) const;  // requires 2-d entry
  VecF vector(const std::string& name) const;  // requires 1-d entry
  float scalar(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return tensors_.size(); }
  void erase_prefix(const std::string& prefix);

  // FNV-1a over names, dims and payload bytes in name order.
  std::uint64_t checksum() const;

  void save(const std::string& path) const;
  static TensorStore load(const std::string& path);

 private:
  std::map<std::string, Entry> tensors_;
};

}  // namespace dinolab
