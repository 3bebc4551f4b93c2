#pragma once

#include <stdexcept>
#include <string>

namespace evcseg {

/// Base class for every error raised by the library. `kind()` names the
/// failure family and is what the CLI maps onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define EVCSEG_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(tag, what) {}         \
  };

EVCSEG_DEFINE_ERROR(GeometryError, "geometry")
EVCSEG_DEFINE_ERROR(SizeError, "size")
EVCSEG_DEFINE_ERROR(ShapeError, "shape")
EVCSEG_DEFINE_ERROR(FormatError, "format")
EVCSEG_DEFINE_ERROR(IoError, "io")
EVCSEG_DEFINE_ERROR(CapacityError, "capacity")
EVCSEG_DEFINE_ERROR(DomainError, "domain")
EVCSEG_DEFINE_ERROR(TrainingError, "training")
EVCSEG_DEFINE_ERROR(ConfigError, "config")
EVCSEG_DEFINE_ERROR(DataError, "data")

#undef EVCSEG_DEFINE_ERROR

}  // namespace evcseg
