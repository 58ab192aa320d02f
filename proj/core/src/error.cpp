#include "atlasfuse/error.hpp"

namespace atlasfuse {

std::string_view error_name(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::LabelOverflow: return "LabelOverflow";
    case ErrorCode::InterpMismatch: return "InterpMismatch";
    case ErrorCode::NonInvertibleTransform: return "NonInvertibleTransform";
    case ErrorCode::EmptyBox: return "EmptyBox";
    case ErrorCode::AllBackground: return "AllBackground";
    case ErrorCode::GeometryMismatch: return "GeometryMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonPositiveTI: return "NonPositiveTI";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::NoOverlap: return "NoOverlap";
    case ErrorCode::FoldingDetected: return "FoldingDetected";
    case ErrorCode::InversionDiverged: return "InversionDiverged";
    case ErrorCode::EmptyAtlasList: return "EmptyAtlasList";
    case ErrorCode::SingularDependency: return "SingularDependency";
    case ErrorCode::EmptyStructure: return "EmptyStructure";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::OverlappingNuclei: return "OverlappingNuclei";
    case ErrorCode::JacobianViolation: return "JacobianViolation";
    case ErrorCode::RowMismatch: return "RowMismatch";
    case ErrorCode::InsufficientSubjects: return "InsufficientSubjects";
    case ErrorCode::BadAtlasLibrary: return "BadAtlasLibrary";
    case ErrorCode::Usage: return "Usage";
    }
    return "Unknown";
}

ErrorCategory error_category(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::Usage:
    case ErrorCode::InvalidArgument:
    case ErrorCode::InterpMismatch:
    case ErrorCode::NonPositiveTI:
        return ErrorCategory::Usage;
    case ErrorCode::FoldingDetected:
    case ErrorCode::InversionDiverged:
    case ErrorCode::SingularDependency:
    case ErrorCode::JacobianViolation:
    case ErrorCode::NonInvertibleTransform:
        return ErrorCategory::Numerical;
    default:
        return ErrorCategory::Data;
    }
}

} // namespace atlasfuse
