#pragma once

#include <stdexcept>
#include <string>

namespace qmri {

/// Root of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image shapes that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on a value (ranges, probabilities, sizes) does not hold.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Bad or unknown configuration content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system failures. The message always names the path.
class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed binary or JSON content.
class FormatError : public Error {
 public:
  enum class Kind { BadMagic, UnsupportedVersion, UnsupportedDtype, Truncated, TrailingBytes, BadEncoding, Corrupt, Schema };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// NaN/Inf or a numerical procedure that cannot proceed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Artifacts produced under incompatible configurations (hash mismatch).
class CompatError : public Error {
 public:
  using Error::Error;
};

}  // namespace qmri
