#pragma once

#include <stdexcept>
#include <string>

namespace xprompt {

// Base of every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidImage : Error {
  using Error::Error;
};

struct DecodeError : Error {
  using Error::Error;
};

struct UnknownToken : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct UnsupportedReversal : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace xprompt
