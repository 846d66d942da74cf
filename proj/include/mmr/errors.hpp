#pragma once

#include <stdexcept>
#include <string>

namespace mmr {

// Every library failure derives from Error; `kind()` is the stable,
// machine-readable tag the CLI reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

#define MMR_DEFINE_ERROR(Name)                                     \
  class Name : public Error {                                      \
   public:                                                         \
    using Error::Error;                                            \
    const char* kind() const noexcept override { return #Name; }  \
  }

MMR_DEFINE_ERROR(ShapeError);
MMR_DEFINE_ERROR(ConfigError);
MMR_DEFINE_ERROR(NotFound);
MMR_DEFINE_ERROR(ManifestError);
MMR_DEFINE_ERROR(UndefinedMetric);
MMR_DEFINE_ERROR(WeightsUnavailable);
MMR_DEFINE_ERROR(NumericError);
MMR_DEFINE_ERROR(IoError);

#undef MMR_DEFINE_ERROR

}  // namespace mmr
