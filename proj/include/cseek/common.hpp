#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cseek {

// Error taxonomy used across the library. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes or dimension bounds.
struct ShapeError : Error {
  using Error::Error;
};

// Token id / index outside its valid range.
struct IndexError : Error {
  using Error::Error;
};

// API contract violated (empty input, double backward, missing cache entry, ...).
struct ContractError : Error {
  using Error::Error;
};

// Malformed file on disk; message carries the byte offset where parsing failed.
struct FormatError : Error {
  using Error::Error;
};

// Original/alternate sequence misalignment for positional patching.
struct AlignmentError : Error {
  using Error::Error;
};

// Bad or inconsistent run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Dataset generation constraints cannot be satisfied.
struct GenerationError : Error {
  using Error::Error;
};

// Training budget exhausted below the minimum accuracy bar.
struct TrainingError : Error {
  using Error::Error;
};

// Loss diverged (NaN/Inf); message carries the last finite step diagnostic.
struct NumericalError : Error {
  using Error::Error;
};

// FNV-1a over a byte string; stable fingerprint for configs embedded in artifacts.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v);

}  // namespace cseek
