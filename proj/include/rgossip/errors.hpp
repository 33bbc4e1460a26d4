#pragma once

#include <stdexcept>
#include <string>

namespace rgossip {

/// Operands have incompatible (m, r) shapes.
class DimensionMismatch : public std::invalid_argument {
 public:
  explicit DimensionMismatch(const std::string& what)
      : std::invalid_argument("dimension mismatch: " + what) {}
};

/// U^T V is numerically singular: some principal angle equals pi/2 and the
/// logarithm map is undefined.
class SubspacesTooFar : public std::runtime_error {
 public:
  explicit SubspacesTooFar(const std::string& what)
      : std::runtime_error("subspaces too far apart: " + what) {}
};

class RankDeficient : public std::runtime_error {
 public:
  explicit RankDeficient(const std::string& what)
      : std::runtime_error("rank deficient: " + what) {}
};

/// Invalid shard, task group or instance data.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace rgossip
