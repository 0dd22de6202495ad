#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lndetr/numcore/tensor.hpp"

namespace lndetr::model {

using numcore::Shape;
using numcore::Tensor;

// Trainable tensors in registration order. Names are unique; the order is
// the checkpoint order and the optimizer's iteration order.
template <typename T>
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  // Registers `value` as a trainable leaf and returns it (sharing storage).
  Tensor<T> add(const std::string& name, Tensor<T> value);
  Tensor<T> get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::int64_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::string config;  // echo of the producing configuration
  std::vector<NamedArray> arrays;
};

inline constexpr char kCheckpointMagic[8] = {'L', 'N', 'D', 'E', 'T', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic, u32 version, u64 config length + bytes, u32 record count,
// then per record: u32 name length + bytes, u32 rank, rank x i64 dims,
// u64 value count, float32 values. All integers and floats little-endian.
void write_checkpoint(const std::string& path, const std::string& config,
                      const ParameterSet<float>& params);
Checkpoint read_checkpoint(const std::string& path);

// Copies checkpoint values into `params`. Every parameter must be present
// with a matching shape; extra records are rejected too.
void load_parameters(ParameterSet<float>& params, const Checkpoint& checkpoint);

}  // namespace lndetr::model
