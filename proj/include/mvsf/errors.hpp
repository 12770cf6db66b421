#pragma once

#include <stdexcept>
#include <string>

namespace mvsf {

/// Base class for all library errors. Everything thrown on purpose derives
/// from this, so callers can catch one type at the CLI boundary.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define MVSF_DEFINE_ERROR(Name)                                      \
    struct Name : Error {                                            \
        explicit Name(const std::string& msg) : Error(#Name ": " + msg) {} \
    }

MVSF_DEFINE_ERROR(NonFiniteCoefficient);
MVSF_DEFINE_ERROR(DegenerateModel);
MVSF_DEFINE_ERROR(DimensionMismatch);
MVSF_DEFINE_ERROR(SizeCapExceeded);
MVSF_DEFINE_ERROR(IndexOutOfRange);
MVSF_DEFINE_ERROR(StepSizeTooLarge);
MVSF_DEFINE_ERROR(NonFiniteState);
MVSF_DEFINE_ERROR(GridMismatch);
MVSF_DEFINE_ERROR(NotCLTCompatible);
MVSF_DEFINE_ERROR(NonPSDSigma);
MVSF_DEFINE_ERROR(Unconverged);
MVSF_DEFINE_ERROR(DegenerateFit);
MVSF_DEFINE_ERROR(TailNotConverged);
MVSF_DEFINE_ERROR(StepTooSmall);
MVSF_DEFINE_ERROR(NotSymmetric);
MVSF_DEFINE_ERROR(NegativeBeyondTolerance);
MVSF_DEFINE_ERROR(NonPositiveValue);
MVSF_DEFINE_ERROR(InsufficientReplicas);
MVSF_DEFINE_ERROR(ConfigInvalid);

#undef MVSF_DEFINE_ERROR

} // namespace mvsf
