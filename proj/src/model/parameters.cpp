#include "lndetr/model/parameters.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace lndetr::model {

template <typename T>
Tensor<T> ParameterSet<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  entries_.emplace_back(name, value);
  return value;
}

template <typename T>
Tensor<T> ParameterSet<T>::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("unknown parameter: " + name);
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

template <typename T>
std::int64_t ParameterSet<T>::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template class ParameterSet<float>;
template class ParameterSet<double>;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename V>
void put(std::ofstream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V take(std::ifstream& in, const std::string& path) {
  V value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(V))) throw CheckpointError(path + ": truncated checkpoint");
  return value;
}

std::string take_string(std::ifstream& in, std::uint64_t length, const std::string& path) {
  if (length > (1u << 26)) throw CheckpointError(path + ": implausible string length");
  std::string s(length, '\0');
  if (length && !in.read(s.data(), std::streamsize(length))) throw CheckpointError(path + ": truncated checkpoint");
  return s;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::string& config, const ParameterSet<float>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, config.size());
  out.write(config.data(), std::streamsize(config.size()));
  put<std::uint32_t>(out, std::uint32_t(params.size()));
  for (const auto& [name, t] : params.entries()) {
    put<std::uint32_t>(out, std::uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    put<std::uint32_t>(out, std::uint32_t(t.rank()));
    for (auto d : t.shape()) put<std::int64_t>(out, d);
    put<std::uint64_t>(out, std::uint64_t(t.numel()));
    out.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.numel() * sizeof(float)));
  }
  if (!out) throw CheckpointError("failed writing " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError(path + ": not a checkpoint file");
  Checkpoint ck;
  ck.version = take<std::uint32_t>(in, path);
  if (ck.version != kCheckpointVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(ck.version));
  ck.config = take_string(in, take<std::uint64_t>(in, path), path);
  const auto count = take<std::uint32_t>(in, path);
  for (std::uint32_t r = 0; r < count; ++r) {
    NamedArray a;
    a.name = take_string(in, take<std::uint32_t>(in, path), path);
    const auto rank = take<std::uint32_t>(in, path);
    if (rank > 8) throw CheckpointError(path + ": implausible rank for " + a.name);
    for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(take<std::int64_t>(in, path));
    const auto n = take<std::uint64_t>(in, path);
    if (std::int64_t(n) != numcore::numel(a.shape))
      throw CheckpointError(path + ": value count does not match shape for " + a.name);
    a.values.resize(n);
    if (n && !in.read(reinterpret_cast<char*>(a.values.data()), std::streamsize(n * sizeof(float))))
      throw CheckpointError(path + ": truncated checkpoint");
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

void load_parameters(ParameterSet<float>& params, const Checkpoint& checkpoint) {
  if (checkpoint.arrays.size() != params.size())
    throw CheckpointError("checkpoint holds " + std::to_string(checkpoint.arrays.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
  for (const auto& a : checkpoint.arrays) {
    if (!params.contains(a.name)) throw CheckpointError("unexpected parameter in checkpoint: " + a.name);
    auto t = params.get(a.name);
    if (t.shape() != a.shape)
      throw CheckpointError("shape mismatch for " + a.name + ": " + numcore::to_string(a.shape) + " vs " +
                            numcore::to_string(t.shape()));
    std::copy(a.values.begin(), a.values.end(), t.mutable_data().begin());
  }
}

}  // namespace lndetr::model
