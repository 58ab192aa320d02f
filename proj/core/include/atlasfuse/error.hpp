#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace atlasfuse {

enum class ErrorCode {
    // imgio
    MissingFile,
    BadMagic,
    UnsupportedDatatype,
    DimMismatch,
    IoFailure,
    LabelOverflow,
    // grid
    InterpMismatch,
    NonInvertibleTransform,
    EmptyBox,
    AllBackground,
    GeometryMismatch,
    InvalidArgument,
    // synth
    NonPositiveTI,
    // register
    DegenerateInput,
    NoOverlap,
    FoldingDetected,
    InversionDiverged,
    // fusion
    EmptyAtlasList,
    SingularDependency,
    // metrics
    EmptyStructure,
    LengthMismatch,
    // phantom
    OverlappingNuclei,
    JacobianViolation,
    // cli
    RowMismatch,
    InsufficientSubjects,
    BadAtlasLibrary,
    Usage,
};

/// Coarse failure class; the CLI maps these onto exit codes 1/2/3.
enum class ErrorCategory { Usage, Data, Numerical };

std::string_view error_name(ErrorCode code) noexcept;
ErrorCategory error_category(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }
    ErrorCategory category() const noexcept { return error_category(code_); }

private:
    ErrorCode code_;
};

} // namespace atlasfuse
