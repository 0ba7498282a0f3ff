#include "vloc/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "vloc/errors.hpp"

namespace vloc {

namespace {

constexpr char kMagic[4] = {'V', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file: " + path);
  return v;
}

} // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
  entries_[name] = Entry{t.shape(), t.values()};
}

void Checkpoint::put(const std::string& name, std::vector<std::int64_t> shape,
                     std::vector<double> values) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("checkpoint: shape does not match value count for " + name);
  entries_[name] = Entry{std::move(shape), std::move(values)};
}

const Checkpoint::Entry& Checkpoint::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("checkpoint: missing parameter " + name);
  return it->second;
}

void Checkpoint::load_into(const std::string& name, Tensor& t) const {
  const Entry& e = get(name);
  if (e.shape != t.shape()) throw ShapeError("checkpoint: shape mismatch for " + name);
  t.mutable_values() = e.values;
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  auto it = entries_.lower_bound(prefix);
  return it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod<std::uint64_t>(os, entries_.size());
  for (const auto& [name, e] : entries_) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(e.values.data()),
             static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kVersion) throw IoError("checkpoint: unsupported version in " + path);
  const auto count = read_pod<std::uint64_t>(is, path);
  Checkpoint ck;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = read_pod<std::uint32_t>(is, path);
    std::vector<std::int64_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::int64_t>(read_pod<std::uint64_t>(is, path));
    std::vector<double> values(static_cast<std::size_t>(numel(shape)));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint: truncated file: " + path);
    ck.entries_[name] = Entry{std::move(shape), std::move(values)};
  }
  return ck;
}

} // namespace vloc
