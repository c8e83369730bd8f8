#pragma once

#include <stdexcept>
#include <string>

namespace itrans {

// Every failure mode surfaced to callers derives from Error so the CLI can
// map it to an exit code.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define ITRANS_ERROR(Name)                                                     \
  class Name : public Error {                                                  \
  public:                                                                      \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {}       \
  }

ITRANS_ERROR(OutsideDomain);
ITRANS_ERROR(DegenerateSegment);
ITRANS_ERROR(NotSubcritical);
ITRANS_ERROR(BudgetExceeded);
ITRANS_ERROR(SideMismatch);
ITRANS_ERROR(SideViolation);
ITRANS_ERROR(NonPositiveEstimate);
ITRANS_ERROR(InvalidDimension);
ITRANS_ERROR(IncompleteSinogram);
ITRANS_ERROR(AttenuationUnderflow);
ITRANS_ERROR(NoIntersection);
ITRANS_ERROR(NonPositiveData);
ITRANS_ERROR(ConfigError);

#undef ITRANS_ERROR

} // namespace itrans
