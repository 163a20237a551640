#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "latentctl/tensor.hpp"

namespace latentctl {

inline constexpr int kCheckpointFormatVersion = 1;

/// Binary container: magic, little-endian u64 header length, compact JSON
/// header (format_version, kind, config, array table), then the arrays as
/// little-endian float64 in table order.
struct Checkpoint {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(std::string name, Tensor t) { arrays.emplace_back(std::move(name), std::move(t)); }
  /// Array by name; throws CheckpointError when absent.
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(const std::vector<std::uint8_t>& bytes);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  /// Copies every array of `inner` under "prefix/name" and stores its header
  /// under config[prefix].
  void nest(const std::string& prefix, const Checkpoint& inner);
  Checkpoint extract(const std::string& prefix) const;
};

}  // namespace latentctl
