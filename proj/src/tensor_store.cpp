#include "dinolab/tensor_store.hpp"

#include <cstring>
#include <fstream>

namespace dinolab {
namespace {

constexpr char kMagic[4] = {'D', 'L', 'T', 'S'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::string read_str(std::istream& is) {
  std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

std::size_t numel(const std::vector<std::uint32_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

const TensorStore::Entry& TensorStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IoError("tensor not found: " + name);
  return it->second;
}

void TensorStore::put(const std::string& name, std::vector<std::uint32_t> dims,
                      std::vector<float> data) {
  if (numel(dims) != data.size())
    throw ShapeError("tensor " + name + ": dims do not match payload size");
  tensors_[name] = Entry{std::move(dims), std::move(data)};
}

void TensorStore::put_matrix(const std::string& name, const MatF& m) {
  std::vector<float> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  put(name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
      std::move(data));
}

void TensorStore::put_vector(const std::string& name, const VecF& v) {
  put(name, {static_cast<std::uint32_t>(v.size())},
      std::vector<float>(v.data(), v.data() + v.size()));
}

void TensorStore::put_scalar(const std::string& name, float v) { put(name, {1}, {v}); }

MatF TensorStore::matrix(const std::string& name) const {
  const Entry& e = at(name);
  if (e.dims.size() != 2) throw ShapeError("tensor " + name + " is not 2-d");
  MatF m(e.dims[0], e.dims[1]);
  for (std::uint32_t r = 0; r < e.dims[0]; ++r)
    for (std::uint32_t c = 0; c < e.dims[1]; ++c) m(r, c) = e.data[std::size_t(r) * e.dims[1] + c];
  return m;
}

VecF TensorStore::vector(const std::string& name) const {
  const Entry& e = at(name);
  if (e.dims.size() != 1) throw ShapeError("tensor " + name + " is not 1-d");
  return Eigen::Map<const VecF>(e.data.data(), static_cast<Eigen::Index>(e.data.size()));
}

float TensorStore::scalar(const std::string& name) const {
  const Entry& e = at(name);
  if (e.data.size() != 1) throw ShapeError("tensor " + name + " is not scalar");
  return e.data[0];
}

std::vector<std::string> TensorStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, v] : tensors_) out.push_back(k);
  return out;
}

void TensorStore::erase_prefix(const std::string& prefix) {
  for (auto it = tensors_.begin(); it != tensors_.end();) {
    if (it->first.rfind(prefix, 0) == 0)
      it = tensors_.erase(it);
    else
      ++it;
  }
}

std::uint64_t TensorStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, e] : tensors_) {
    h = fnv1a64(name, h);
    h = fnv1a64(e.dims.data(), e.dims.size() * sizeof(std::uint32_t), h);
    h = fnv1a64(e.data.data(), e.data.size() * sizeof(float), h);
  }
  return h;
}

void TensorStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    write_str(os, k);
    write_str(os, v);
  }
  write_u32(os, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, e] : tensors_) {
    write_str(os, name);
    os.put(static_cast<char>(kDtypeF32));
    os.put(static_cast<char>(e.dims.size()));
    for (auto d : e.dims) write_u32(os, d);
    os.write(reinterpret_cast<const char*>(e.data.data()),
             static_cast<std::streamsize>(e.data.size() * sizeof(float)));
  }
  if (!os) throw IoError("write failed: " + path);
}

TensorStore TensorStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a tensor store file: " + path);
  std::uint32_t version = read_u32(is);
  if (version != kVersion) throw IoError("unsupported tensor store version in " + path);
  TensorStore ts;
  std::uint32_t n_meta = read_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = read_str(is);
    ts.meta[k] = read_str(is);
  }
  std::uint32_t n_tensors = read_u32(is);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = read_str(is);
    int dtype = is.get();
    if (dtype != kDtypeF32) throw IoError("unsupported dtype in " + path);
    int ndim = is.get();
    std::vector<std::uint32_t> dims(static_cast<std::size_t>(ndim));
    for (auto& d : dims) d = read_u32(is);
    Entry e;
    e.dims = dims;
    e.data.resize(numel(dims));
    is.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    if (!is) throw IoError("truncated tensor store: " + path);
    ts.tensors_[name] = std::move(e);
  }
  return ts;
}

}  // namespace dinolab
