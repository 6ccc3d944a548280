#pragma once

#include <stdexcept>
#include <string>

namespace ognet {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define OGNET_DEFINE_ERROR(Name, tag)                        \
  class Name : public Error {                                \
   public:                                                   \
    using Error::Error;                                      \
    const char* kind() const noexcept override { return tag; } \
  };

OGNET_DEFINE_ERROR(DimensionError, "dimension")
OGNET_DEFINE_ERROR(ParameterError, "parameter")
OGNET_DEFINE_ERROR(BatchSizeError, "batch_size")
OGNET_DEFINE_ERROR(LabelError, "label")
OGNET_DEFINE_ERROR(NumericError, "numeric")
OGNET_DEFINE_ERROR(ConfigError, "config")
OGNET_DEFINE_ERROR(FormatError, "format")
OGNET_DEFINE_ERROR(LoadError, "load")

#undef OGNET_DEFINE_ERROR

}  // namespace ognet
