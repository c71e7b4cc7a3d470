#pragma once

#include <stdexcept>
#include <string>

namespace dico {

/// Tensor extents do not satisfy an operation's shape contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value or combination of values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while reading or validating an image/label file or manifest.
class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss became non-finite during training. The message names the term.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dico
