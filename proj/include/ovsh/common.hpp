#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ovsh {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Error taxonomy. The CLI maps ConfigError to exit code 2.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CalibrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class VersionError : public std::runtime_error {
 public:
  VersionError(const std::string& what, std::uint32_t found, std::uint32_t expected)
      : std::runtime_error(what + " (found version " + std::to_string(found) + ", expected " +
                           std::to_string(expected) + ")"),
        found_(found),
        expected_(expected) {}
  std::uint32_t found() const noexcept { return found_; }
  std::uint32_t expected() const noexcept { return expected_; }

 private:
  std::uint32_t found_;
  std::uint32_t expected_;
};

}  // namespace ovsh
