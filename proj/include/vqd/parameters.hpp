#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "vqd/rng.hpp"
#include "vqd/tensor.hpp"

namespace vqd {

// Named trainable tensors, iterated in insertion order.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t rng_seed = 0)
      : rng_seed_(rng_seed), rng_(rng_seed) {}

  // Registers a parameter; throws std::invalid_argument on duplicate names.
  Tensor& add(const std::string& name, Tensor value);
  Tensor& add_normal(const std::string& name, Shape shape, double stddev);
  Tensor& add_constant(const std::string& name, Shape shape, double value);

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const {
    return index_.count(name) != 0;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  std::uint64_t rng_seed() const { return rng_seed_; }

 private:
  std::uint64_t rng_seed_;
  Rng rng_;
  std::deque<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binary checkpoint: "VQD1", u32 version, then per parameter
// u32 name length, name bytes, u32 rank, u64 extents, f64 payload (all
// little-endian).
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParameterStore& params,
                     const std::filesystem::path& path);
// Overwrites values of matching parameters in `params`. Every stored record
// must name an existing parameter of identical shape and every parameter
// must be present.
void load_checkpoint(ParameterStore& params,
                     const std::filesystem::path& path);

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace vqd
