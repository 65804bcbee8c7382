#include "vqd/parameters.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vqd {

Tensor& ParameterStore::add(const std::string& name, Tensor value) {
  if (index_.count(name))
    throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor param = Tensor::from(value.shape(),
                              std::vector<double>(value.values().begin(),
                                                  value.values().end()),
                              true);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(param));
  return entries_.back().second;
}

Tensor& ParameterStore::add_normal(const std::string& name, Shape shape,
                                   double stddev) {
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = rng_.normal(0.0, stddev);
  return add(name, Tensor::from(std::move(shape), std::move(values)));
}

Tensor& ParameterStore::add_constant(const std::string& name, Shape shape,
                                     double value) {
  return add(name, Tensor::full(std::move(shape), value));
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw CheckpointError("truncated checkpoint: " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const ParameterStore& params,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
  out.write("VQD1", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& [name, t] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("write failed: " + path.string());
}

void load_checkpoint(ParameterStore& params,
                     const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "VQD1", 4) != 0)
    throw CheckpointError("bad checkpoint magic: " + path.string());
  const auto version = take<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));
  std::size_t loaded = 0;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = take<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len))
      throw CheckpointError("truncated checkpoint: " + path.string());
    const auto rank = take<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& e : shape) e = take<std::uint64_t>(in, path);
    if (!params.contains(name))
      throw CheckpointError("checkpoint names unknown parameter " + name);
    Tensor& t = params.get(name);
    if (t.shape() != shape)
      throw CheckpointError("shape mismatch for " + name + ": stored " +
                            shape_string(shape) + ", model " +
                            shape_string(t.shape()));
    auto dst = t.mutable_values();
    if (!in.read(reinterpret_cast<char*>(dst.data()),
                 static_cast<std::streamsize>(dst.size() * sizeof(double))))
      throw CheckpointError("truncated checkpoint: " + path.string());
    ++loaded;
  }
  if (loaded != params.size())
    throw CheckpointError("checkpoint holds " + std::to_string(loaded) +
                          " of " + std::to_string(params.size()) +
                          " parameters");
}

}  // namespace vqd
