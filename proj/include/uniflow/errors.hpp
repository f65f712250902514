// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace uniflow {

/// Config/schema violation. `pointer` is the JSON pointer of the first
/// offending field; maps to exit code 2 at the CLI.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string pointer, const std::string& what)
      : std::runtime_error(pointer + ": " + what), pointer_(std::move(pointer)) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

/// Non-finite iterate or runaway loss. Maps to exit code 3 at the CLI.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what, long step = -1)
      : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Async-chunking contract violation (under-committed prefix, duplicate
/// cycle push, backpressure overrun).
class ProtocolError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace uniflow
