#pragma once

#include <map>
#include <string>
#include <vector>

#include "vloc/tensor.hpp"

namespace vloc {

// Named parameter container and its on-disk format.
//
// Binary layout (little endian):
//   magic   "VLCK" (4 bytes)
//   version u32 (currently 1)
//   count   u64
//   entries, each:
//     name_len u32, name bytes
//     ndim     u32, dims as u64[ndim]
//     values   f64[prod(dims)], row-major
class Checkpoint {
public:
  struct Entry {
    std::vector<std::int64_t> shape;
    std::vector<double> values;
  };

  void put(const std::string& name, const Tensor& t);
  void put(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> values);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& get(const std::string& name) const; // throws IoError if missing
  // Copies stored values into an existing leaf tensor (shapes must agree).
  void load_into(const std::string& name, Tensor& t) const;
  bool has_prefix(const std::string& prefix) const;

  const std::map<std::string, Entry>& entries() const { return entries_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

private:
  std::map<std::string, Entry> entries_;
};

} // namespace vloc
