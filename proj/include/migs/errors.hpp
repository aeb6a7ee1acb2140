#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace migs {

// Error taxonomy mirrors the CLI exit codes: config/input errors map to
// exit 1, I/O to 2, training divergence to 3, checkpoint version to 4.
// Contract errors indicate caller bugs and are never caught by the CLI.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " (at byte " + std::to_string(position) + ")"),
        position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_ = 0;
};

}  // namespace migs
