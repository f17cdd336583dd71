#pragma once

#include <stdexcept>
#include <string>

namespace cascade {

// Base class for all errors raised by this library. The CLI maps each
// subclass to a distinct exit code (see tools/).
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define CASCADE_DEFINE_ERROR(NAME)                                     \
  class NAME : public Error {                                          \
  public:                                                              \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

CASCADE_DEFINE_ERROR(UsageError);
CASCADE_DEFINE_ERROR(ConfigError);
CASCADE_DEFINE_ERROR(IoError);
CASCADE_DEFINE_ERROR(FormatError);
CASCADE_DEFINE_ERROR(RangeError);
CASCADE_DEFINE_ERROR(ShapeError);
CASCADE_DEFINE_ERROR(IndexError);
CASCADE_DEFINE_ERROR(BoundsError);
CASCADE_DEFINE_ERROR(SizeError);
CASCADE_DEFINE_ERROR(ParamError);
CASCADE_DEFINE_ERROR(PlacementError);
CASCADE_DEFINE_ERROR(DegenerateVolume);
CASCADE_DEFINE_ERROR(DegenerateMask);
CASCADE_DEFINE_ERROR(EmptyForeground);
CASCADE_DEFINE_ERROR(EmptyMask);
CASCADE_DEFINE_ERROR(ClassMissing);
CASCADE_DEFINE_ERROR(MissingPrediction);

#undef CASCADE_DEFINE_ERROR

}  // namespace cascade
